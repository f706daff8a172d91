use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::lsa::{BranchMask, LsaMode};
use crate::lsf::FusionMethod;
use crate::{Error, Result};

/// Order of self-attention and LSA inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arrangement {
    SaThenLsa,
    LsaThenSa,
    Parallel,
}

impl Arrangement {
    pub const ALL: [Arrangement; 3] = [
        Arrangement::SaThenLsa,
        Arrangement::LsaThenSa,
        Arrangement::Parallel,
    ];
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arrangement::SaThenLsa => "sa_then_lsa",
            Arrangement::LsaThenSa => "lsa_then_sa",
            Arrangement::Parallel => "parallel",
        })
    }
}

impl FromStr for Arrangement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arrangement::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown arrangement '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_expansion: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Raw feature channels before the input projection.
    pub feature_dim: usize,
    pub lambda: f64,
    pub shift_distance: usize,
    pub arrangement: Arrangement,
    pub lsa_enabled: bool,
    pub lsf_enabled: bool,
    pub branches: BranchMask,
    pub fusion: FusionMethod,
    pub relative_bias: bool,
    pub vocab_size: usize,
    pub max_decode_len: usize,
    pub beam_size: usize,
    pub dropout: f64,
    pub lsa_mode: LsaMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for the toy dataset.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            ffn_expansion: 4,
            grid_h: 7,
            grid_w: 7,
            feature_dim: 64,
            lambda: 0.2,
            shift_distance: 1,
            arrangement: Arrangement::SaThenLsa,
            lsa_enabled: true,
            lsf_enabled: true,
            branches: BranchMask::ALL,
            fusion: FusionMethod::Lsf,
            relative_bias: true,
            vocab_size: 64,
            max_decode_len: 20,
            beam_size: 5,
            dropout: 0.1,
            lsa_mode: LsaMode::MultiBranch,
        }
    }

    /// Full-size hyperparameters.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            feature_dim: 2048,
            vocab_size: 10_000,
            ..ModelConfig::desk()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn n_grid(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Fusion actually applied after the encoder.
    pub fn effective_fusion(&self) -> FusionMethod {
        if self.lsf_enabled {
            self.fusion
        } else {
            FusionMethod::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be divisible by 4", self.d_model));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid extents must be positive".into());
        }
        if self.shift_distance > 0 && self.shift_distance >= self.grid_h.min(self.grid_w) {
            return bad(format!(
                "shift_distance {} must be below min(grid_h, grid_w) = {}",
                self.shift_distance,
                self.grid_h.min(self.grid_w)
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.effective_fusion() != FusionMethod::None && self.n_enc_layers < 3 {
            return bad("cross-layer fusion needs at least three encoder layers".into());
        }
        if self.lsa_enabled && !self.branches.any() {
            return bad("LSA is enabled but no branch is".into());
        }
        if self.ffn_expansion == 0 || self.feature_dim == 0 {
            return bad("ffn_expansion and feature_dim must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the four reserved tokens".into());
        }
        if self.max_decode_len < 2 || self.beam_size == 0 {
            return bad("max_decode_len must be >= 2 and beam_size >= 1".into());
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 21] = [
        "d_model",
        "n_heads",
        "n_enc_layers",
        "n_dec_layers",
        "ffn_expansion",
        "grid_h",
        "grid_w",
        "feature_dim",
        "lambda",
        "shift_distance",
        "arrangement",
        "lsa_enabled",
        "lsf_enabled",
        "branches",
        "fusion",
        "relative_bias",
        "vocab_size",
        "max_decode_len",
        "beam_size",
        "dropout",
        "lsa_mode",
    ];

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.n_enc_layers.to_string(),
            self.n_dec_layers.to_string(),
            self.ffn_expansion.to_string(),
            self.grid_h.to_string(),
            self.grid_w.to_string(),
            self.feature_dim.to_string(),
            self.lambda.to_string(),
            self.shift_distance.to_string(),
            self.arrangement.to_string(),
            self.lsa_enabled.to_string(),
            self.lsf_enabled.to_string(),
            self.branches.to_string(),
            self.fusion.to_string(),
            self.relative_bias.to_string(),
            self.vocab_size.to_string(),
            self.max_decode_len.to_string(),
            self.beam_size.to_string(),
            self.dropout.to_string(),
            self.lsa_mode.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<X: FromStr>(key: &str, v: &str) -> Result<X> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        let v = value.trim();
        match key {
            "d_model" => self.d_model = num(key, v)?,
            "n_heads" => self.n_heads = num(key, v)?,
            "n_enc_layers" => self.n_enc_layers = num(key, v)?,
            "n_dec_layers" => self.n_dec_layers = num(key, v)?,
            "ffn_expansion" => self.ffn_expansion = num(key, v)?,
            "grid_h" => self.grid_h = num(key, v)?,
            "grid_w" => self.grid_w = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "shift_distance" => self.shift_distance = num(key, v)?,
            "arrangement" => self.arrangement = v.parse()?,
            "lsa_enabled" => self.lsa_enabled = num(key, v)?,
            "lsf_enabled" => self.lsf_enabled = num(key, v)?,
            "branches" => self.branches = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "relative_bias" => self.relative_bias = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "max_decode_len" => self.max_decode_len = num(key, v)?,
            "beam_size" => self.beam_size = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "lsa_mode" => self.lsa_mode = v.parse()?,
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    /// Reads every model key present in `pairs`; other keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for key in Self::KEYS {
            if let Some(v) = pairs.get(key) {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fields that differ between two configurations, as `key: a != b`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} != {}", a.0, a.1, b.1))
            .collect()
    }
}
