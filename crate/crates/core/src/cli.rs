//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::{run_ablation, Axis};
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, load_features, write_dataset, DatasetConfig, GridFeatures, SplitName, Vocab};
use crate::metrics::{evaluate_split, format_caption_tsv, group_references, parse_caption_tsv, parse_metrics};
use crate::model::{attention_maps, attn_dump, beam_config, caption_batch, fuse_model, ModelConfig, EOS};
use crate::training::{generate_captions, gradcheck, gradcheck_config, train_loop, Checkpoint, GradcheckTarget, Stage};
use crate::{Error, Precision, Real};

/// Largest gradient-check error the `gradcheck` command accepts.
pub const GRADCHECK_LIMIT: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "lstnet", version, about = "Locality-sensitive transformer captioning on grid features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shapes dataset.
    MakeDataset {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
    },
    /// Train with cross-entropy or self-critical sequence training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ce")]
        stage: Stage,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key, e.g. `--set ce_epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score captions of a split against its references.
    Eval {
        #[arg(long, required_unless_present = "captions", conflicts_with = "captions")]
        ckpt: Option<PathBuf>,
        /// Caption TSV (`id<TAB>caption`) to score instead of a checkpoint.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value = "bleu,cider")]
        metrics: String,
        #[arg(long)]
        beam: Option<usize>,
        /// Also write per-image sentence scores here.
        #[arg(long)]
        per_image: Option<PathBuf>,
        /// Also write the generated captions here.
        #[arg(long)]
        dump_captions: Option<PathBuf>,
    },
    /// Caption every image of a feature file.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Defaults to `vocab.txt` beside the feature file.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Merge the LSA branches of a checkpoint into single kernels.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients (64-bit).
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Check a single linear map instead of the full model.
        #[arg(long)]
        linear: bool,
    },
    /// Write attention maps of one captioned image as PGM files.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run one ablation sweep and write a table-shaped TSV.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
    #[error("gradient check failed: max relative error {0:e} exceeds {GRADCHECK_LIMIT:e}")]
    Gradcheck(f64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

fn io_err(e: std::io::Error) -> CliError {
    CliError::Run(Error::InvalidArgument(format!("write failed: {e}")))
}

fn write_file(path: &Path, text: &str) -> crate::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn effective_config(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> crate::Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn vocab_for(features: &Path, vocab: Option<&PathBuf>) -> crate::Result<Vocab> {
    match vocab {
        Some(p) => Vocab::load(p),
        None => Vocab::load(&features.parent().unwrap_or(Path::new(".")).join("vocab.txt")),
    }
}

fn check_grid(f: &GridFeatures, cfg: &ModelConfig) -> crate::Result<()> {
    if (f.h, f.w) != cfg.grid() || f.c != cfg.feature_dim {
        return Err(Error::Config(format!(
            "features are {}x{}x{} but the model expects {}x{}x{}",
            f.h, f.w, f.c, cfg.grid_h, cfg.grid_w, cfg.feature_dim
        )));
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let precision = Precision::from_env().map_err(|e| CliError::Usage(e.to_string()))?;
    match precision {
        Precision::F32 => run_with::<f32>(cli, out),
        Precision::F64 => run_with::<f64>(cli, out),
    }
}

fn run_with<T: Real>(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::MakeDataset {
            seed,
            out: dir,
            n_train,
            n_val,
            n_test,
        } => {
            if n_train == 0 || n_val == 0 || n_test == 0 {
                return Err(CliError::Usage("split sizes must be positive".into()));
            }
            let ds = generate_dataset(seed, n_train, n_val, n_test, &DatasetConfig::default())?;
            write_dataset(&dir, &ds)?;
            writeln!(
                out,
                "wrote {} train / {} val / {} test scenes, vocab {} tokens, to {}",
                n_train,
                n_val,
                n_test,
                ds.vocab.len(),
                dir.display()
            )
            .map_err(io_err)?;
        }
        Command::Train {
            config,
            data,
            stage,
            init,
            out: dir,
            seed,
            overrides,
        } => {
            if stage == Stage::Scst && init.is_none() {
                return Err(CliError::Usage("--stage scst requires --init <checkpoint>".into()));
            }
            let cfg = effective_config(config.as_deref(), seed, &overrides).map_err(|e| CliError::Usage(e.to_string()))?;
            let ds = load_dataset(&data)?;
            let init = init.map(|p| Checkpoint::<T>::load(&p)).transpose()?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join("config.txt"), &cfg.to_text())?;
            let outcome = train_loop::<T>(stage, &ds.train, &ds.val, &ds.vocab, &cfg.model, &cfg.train, init, Some(&dir), &mut |row| {
                let _ = writeln!(out, "{row}");
            })?;
            writeln!(out, "best val CIDEr-D {:.6} -> {}", outcome.best_cider, dir.join("best.lstn").display()).map_err(io_err)?;
        }
        Command::Eval {
            ckpt,
            captions,
            data,
            split,
            metrics,
            beam,
            per_image,
            dump_captions,
        } => {
            let metrics = parse_metrics(&metrics).map_err(|e| CliError::Usage(e.to_string()))?;
            let ds = load_dataset(&data)?;
            let sp = ds.split(split);
            let rows = match (ckpt, captions) {
                (Some(p), _) => {
                    let ck = Checkpoint::<T>::load(&p)?;
                    check_grid(&sp.features, &ck.model)?;
                    let beam = beam.unwrap_or(ck.model.beam_size);
                    let ids = generate_captions(&ck.params, &ck.model, sp, beam, 50)?;
                    sp.ids().into_iter().zip(ids.iter().map(|w| ds.vocab.decode(w))).collect()
                }
                (None, Some(p)) => parse_caption_tsv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?,
                (None, None) => return Err(CliError::Usage("give --ckpt or --captions".into())),
            };
            let report = evaluate_split(&rows, &group_references(&sp.caption_rows()), &metrics)?;
            write!(out, "{}", report.corpus_tsv()).map_err(io_err)?;
            if let Some(p) = per_image {
                write_file(&p, &report.per_image_tsv())?;
            }
            if let Some(p) = dump_captions {
                write_file(&p, &format_caption_tsv(&rows))?;
            }
        }
        Command::Caption {
            ckpt,
            features,
            beam,
            vocab,
        } => {
            let ck = Checkpoint::<T>::load(&ckpt)?;
            let f = load_features(&features)?;
            check_grid(&f, &ck.model)?;
            let vocab = vocab_for(&features, vocab.as_ref())?;
            let bc = beam_config(&ck.model, beam.unwrap_or(ck.model.beam_size));
            let feats: Vec<T> = f.data.iter().map(|x| T::c(*x as f64)).collect();
            let per = f.cells() * f.c;
            for (i, chunk) in feats.chunks(per * 50).enumerate() {
                let hyps = caption_batch(&ck.params, &ck.model, chunk, chunk.len() / per, &bc)?;
                for (j, h) in hyps.iter().enumerate() {
                    writeln!(out, "{}\t{}", i * 50 + j, vocab.decode(h[0].words(EOS))).map_err(io_err)?;
                }
            }
        }
        Command::Fuse { ckpt, out: path } => {
            let mut ck = Checkpoint::<T>::load(&ckpt)?;
            fuse_model(&mut ck.params, &mut ck.model)?;
            ck.adam = None;
            ck.save(&path)?;
            writeln!(out, "wrote fused checkpoint {}", path.display()).map_err(io_err)?;
        }
        Command::Gradcheck { seed, linear } => {
            let target = if linear { GradcheckTarget::LinearOnly } else { GradcheckTarget::Full };
            let r = gradcheck(&gradcheck_config(), seed, target, None)?;
            writeln!(out, "max_rel_err\t{:e}\ncoords\t{}\nworst\t{}[{}]", r.max_rel_err, r.coords, r.worst.0, r.worst.1).map_err(io_err)?;
            if !(r.max_rel_err <= GRADCHECK_LIMIT) {
                return Err(CliError::Gradcheck(r.max_rel_err));
            }
        }
        Command::AttnDump {
            ckpt,
            features,
            out: dir,
            index,
            beam,
            vocab,
        } => {
            let ck = Checkpoint::<T>::load(&ckpt)?;
            let f = load_features(&features)?;
            check_grid(&f, &ck.model)?;
            if index >= f.n {
                return Err(CliError::Usage(format!("--index {index} but the file holds {} images", f.n)));
            }
            let vocab = vocab_for(&features, vocab.as_ref())?;
            let feats: Vec<T> = f.gather(&[index]).into_iter().map(|x| T::c(x as f64)).collect();
            let bc = beam_config(&ck.model, beam.unwrap_or(ck.model.beam_size));
            let hyps = caption_batch(&ck.params, &ck.model, &feats, 1, &bc)?;
            let words = hyps[0][0].words(EOS).to_vec();
            let (maps, top) = attention_maps(&ck.params, &ck.model, &feats, &words)?;
            let mut tokens: Vec<String> = words.iter().map(|&w| vocab.word(w).to_string()).collect();
            tokens.push(vocab.word(EOS).to_string());
            let files = attn_dump(&dir, ck.model.grid(), &tokens, &maps, &top)?;
            writeln!(out, "{}\nwrote {} maps to {}", vocab.decode(&words), files.len(), dir.display()).map_err(io_err)?;
        }
        Command::Ablate {
            axis,
            config,
            data,
            out: dir,
            seed,
            overrides,
        } => {
            let cfg = effective_config(config.as_deref(), seed, &overrides).map_err(|e| CliError::Usage(e.to_string()))?;
            let ds = load_dataset(&data)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_file(&dir.join(format!("{axis}.config")), &cfg.to_text())?;
            let table = run_ablation(axis, &cfg.model, &cfg.train, &ds, &mut |_| {})?;
            let tsv = table.to_tsv();
            write_file(&dir.join(format!("{axis}.tsv")), &tsv)?;
            write!(out, "{tsv}").map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_exit() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
