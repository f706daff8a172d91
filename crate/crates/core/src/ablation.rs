//! Ablation sweeps: one short CE run plus validation per table row.

use std::fmt;
use std::str::FromStr;

use crate::data::{Dataset, GridFeatures, Split};
use crate::lsa::BranchMask;
use crate::lsf::FusionMethod;
use crate::metrics::{corpus_bleu, tokenize, CiderD};
use crate::model::{avg_pool_grid, Arrangement, ModelConfig};
use crate::training::{generate_captions, train_loop, Stage, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Branches,
    Arrangement,
    ShiftDistance,
    Lambda,
    Modules,
    Fusion,
    GridSize,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::Branches,
        Axis::Arrangement,
        Axis::ShiftDistance,
        Axis::Lambda,
        Axis::Modules,
        Axis::Fusion,
        Axis::GridSize,
    ];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Branches => "branches",
            Axis::Arrangement => "arrangement",
            Axis::ShiftDistance => "shift-distance",
            Axis::Lambda => "lambda",
            Axis::Modules => "modules",
            Axis::Fusion => "fusion",
            Axis::GridSize => "grid-size",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation axis '{s}'")))
    }
}

pub const LAMBDAS: [f64; 5] = [0.1, 0.2, 0.3, 0.5, 0.7];

/// One row of a sweep: its label cells, the model to train and the grid the
/// features are pooled to.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub labels: Vec<String>,
    pub model: ModelConfig,
    pub grid: usize,
}

/// Label column names for an axis.
pub fn label_header(axis: Axis) -> Vec<String> {
    let v: &[&str] = match axis {
        Axis::Branches => &["Identity", "1x1", "1x1+3x3"],
        Axis::Arrangement => &["Arrangement"],
        Axis::ShiftDistance => &["Shift Distance"],
        Axis::Lambda => &["lambda"],
        Axis::Modules => &["Module"],
        Axis::Fusion => &["Fusion methods"],
        Axis::GridSize => &["Grid Size"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

/// The rows of a sweep derived from `base`, which must use the full 7x7 grid.
pub fn cells(axis: Axis, base: &ModelConfig) -> Vec<Cell> {
    let cell = |labels: Vec<String>, model: ModelConfig| Cell {
        labels,
        grid: model.grid_h,
        model,
    };
    let yes = |b: bool| if b { "yes" } else { "no" }.to_string();
    match axis {
        Axis::Branches => BranchMask::ablation_rows()
            .into_iter()
            .map(|m| {
                let model = ModelConfig {
                    lsa_enabled: m.any(),
                    lsf_enabled: false,
                    branches: if m.any() { m } else { BranchMask::ALL },
                    ..base.clone()
                };
                cell(vec![yes(m.identity), yes(m.conv1x1), yes(m.seq)], model)
            })
            .collect(),
        Axis::Arrangement => [
            (Arrangement::LsaThenSa, "LSA + SA"),
            (Arrangement::SaThenLsa, "SA + LSA"),
            (Arrangement::Parallel, "SA & LSA"),
        ]
        .into_iter()
        .map(|(a, label)| {
            cell(
                vec![label.into()],
                ModelConfig {
                    arrangement: a,
                    lsa_enabled: true,
                    ..base.clone()
                },
            )
        })
        .collect(),
        Axis::ShiftDistance => (0..=4)
            .map(|d| {
                cell(
                    vec![format!("d_s = {d}")],
                    ModelConfig {
                        shift_distance: d,
                        lsa_enabled: true,
                        lsf_enabled: true,
                        fusion: FusionMethod::Lsf,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Lambda => LAMBDAS
            .into_iter()
            .map(|l| {
                cell(
                    vec![format!("lambda = {l}")],
                    ModelConfig {
                        lambda: l,
                        lsa_enabled: true,
                        lsf_enabled: true,
                        fusion: FusionMethod::Lsf,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::Modules => [
            (false, false, "w/o LSA+LSF"),
            (true, false, "only LSA"),
            (false, true, "only LSF"),
            (true, true, "LSA + LSF"),
        ]
        .into_iter()
        .map(|(a, f, label)| {
            cell(
                vec![label.into()],
                ModelConfig {
                    lsa_enabled: a,
                    lsf_enabled: f,
                    fusion: FusionMethod::Lsf,
                    ..base.clone()
                },
            )
        })
        .collect(),
        Axis::Fusion => [
            (FusionMethod::None, "w/o Fuse"),
            (FusionMethod::MlpNoShift, "MLP"),
            (FusionMethod::SumPool, "SumPool"),
            (FusionMethod::Conv3x3, "3 x 3 Conv"),
            (FusionMethod::Lsf, "LSF"),
        ]
        .into_iter()
        .map(|(m, label)| {
            cell(
                vec![label.into()],
                ModelConfig {
                    lsa_enabled: false,
                    lsf_enabled: m != FusionMethod::None,
                    fusion: if m == FusionMethod::None { FusionMethod::Lsf } else { m },
                    ..base.clone()
                },
            )
        })
        .collect(),
        Axis::GridSize => (1..=base.grid_h.min(base.grid_w))
            .map(|s| {
                let model = ModelConfig {
                    grid_h: s,
                    grid_w: s,
                    shift_distance: if s > base.shift_distance { base.shift_distance } else { 0 },
                    ..base.clone()
                };
                Cell {
                    labels: vec![format!("{s} x {s}")],
                    model,
                    grid: s,
                }
            })
            .collect(),
    }
}

/// Copy of `split` with its feature grid average-pooled to `s x s`.
pub fn pool_split(split: &Split, s: usize) -> Result<Split> {
    let f = &split.features;
    if f.h == s && f.w == s {
        return Ok(split.clone());
    }
    let data = avg_pool_grid(&f.data, f.n, f.h, f.w, f.c, s)?;
    Ok(Split {
        features: GridFeatures {
            n: f.n,
            h: s,
            w: s,
            c: f.c,
            data,
        },
        ..split.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub labels: Vec<String>,
    /// BLEU-1, BLEU-4 and CIDEr-D on the validation split, as percentages.
    pub scores: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = label_header(self.axis);
        h.extend(["B-1", "B-4", "C"].map(String::from));
        h
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header().join("\t");
        out.push('\n');
        for r in &self.rows {
            let mut cols = r.labels.clone();
            cols.extend(r.scores.iter().map(|v| format!("{v:.2}")));
            out.push_str(&cols.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Trains and scores every row of `axis`. `progress` sees each finished row.
pub fn run_ablation(
    axis: Axis,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    ds: &Dataset,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationTable> {
    if (ds.train.features.h, ds.train.features.w) != base.grid() {
        return Err(Error::Config("ablation base config must match the dataset grid".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = ds.val.captions.iter().map(|cs| cs.iter().map(|c| tokenize(c)).collect()).collect();
    let cider = CiderD::new(refs.clone())?;
    let mut rows = Vec::new();
    for c in cells(axis, base) {
        let train = pool_split(&ds.train, c.grid)?;
        let val = pool_split(&ds.val, c.grid)?;
        let out = train_loop::<f32>(Stage::Ce, &train, &val, &ds.vocab, &c.model, tcfg, None, None, &mut |_| {})?;
        let ids = generate_captions(&out.last.params, &c.model, &val, tcfg.eval_beam, 50)?;
        let cands: Vec<Vec<String>> = ids.iter().map(|w| tokenize(&ds.vocab.decode(w))).collect();
        let row = AblationRow {
            labels: c.labels,
            scores: [
                100.0 * corpus_bleu(&cands, &refs, 1)?,
                100.0 * corpus_bleu(&cands, &refs, 4)?,
                100.0 * cider.corpus_score(&cands)?.0,
            ],
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationTable { axis, rows })
}
