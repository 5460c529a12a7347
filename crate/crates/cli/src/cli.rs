use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use imbseg::loss::LossKind;
use imbseg::postprocess::Connectivity;

use crate::commands;
use crate::config::{parse_triple, RunConfig};
use crate::error::{usage, CliResult};

#[derive(Debug, Parser)]
#[command(name = "imbseg", version, about = "Loss-ensemble segmentation of tiny 3D targets")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-case and per-window parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Work directory holding preprocessed/, checkpoints/, predictions/ and metrics/.
    #[arg(long, global = true)]
    pub work: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        cases: usize,
        #[arg(long)]
        out: PathBuf,
        /// Volume size, `n` or `x,y,z`.
        #[arg(long)]
        dims: Option<String>,
        #[arg(long)]
        free_fraction: Option<f64>,
    },
    /// Crop, resample and normalise a dataset into the work directory.
    Preprocess {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        target_spacing: Option<String>,
    },
    /// Train one fold of one loss group.
    Train {
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        loss: String,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        patch: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Pick the best loss group per fold and write the ensemble file.
    Select {
        /// Comma-separated loss groups in tie-break order.
        #[arg(long)]
        groups: Option<String>,
    },
    /// Segment every image in a directory with the ensemble.
    Predict {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Keep components smaller than the minimum size.
        #[arg(long)]
        no_postprocess: bool,
        #[arg(long)]
        min_size: Option<usize>,
        #[arg(long)]
        connectivity: Option<u8>,
        #[arg(long)]
        patch: Option<String>,
    },
    /// Score predicted masks against reference masks.
    Evaluate {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn triple<T: std::str::FromStr + Copy>(s: &str) -> CliResult<[T; 3]> {
    parse_triple(s).map_err(usage)
}

/// Merge the config file with flag overrides.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.work {
        cfg.work_dir = Some(w.clone());
    }
    match &cli.command {
        Command::Synth { dims, free_fraction, .. } => {
            if let Some(d) = dims {
                cfg.synth.dims = triple(d)?;
            }
            if let Some(f) = free_fraction {
                cfg.free_fraction = *f;
            }
        }
        Command::Preprocess { data, target_spacing } => {
            if let Some(d) = data {
                cfg.dataset_dir = Some(d.clone());
            }
            if let Some(t) = target_spacing {
                cfg.target_spacing = Some(triple(t)?);
            }
        }
        Command::Train {
            iterations,
            patch,
            batch_size,
            lr,
            base_channels,
            levels,
            ..
        } => {
            if let Some(v) = iterations {
                cfg.train.iterations = *v;
            }
            if let Some(p) = patch {
                cfg.train.patch_size = triple(p)?;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = *v;
            }
            if let Some(v) = lr {
                cfg.train.initial_lr = *v;
            }
            if let Some(v) = base_channels {
                cfg.net.base_channels = *v;
            }
            if let Some(v) = levels {
                cfg.net.levels = *v;
            }
        }
        Command::Select { groups } => {
            if let Some(g) = groups {
                cfg.groups = g.split(',').map(|s| LossKind::parse(s.trim())).collect::<imbseg::Result<_>>()?;
            }
        }
        Command::Predict {
            ensemble,
            no_postprocess,
            min_size,
            connectivity,
            patch,
            ..
        } => {
            if let Some(e) = ensemble {
                cfg.ensemble = Some(e.clone());
            }
            if *no_postprocess {
                cfg.postprocess.enabled = false;
            }
            if let Some(m) = min_size {
                cfg.postprocess.min_size = *m;
            }
            if let Some(c) = connectivity {
                cfg.postprocess.connectivity = Connectivity::try_from(*c)?;
            }
            if let Some(p) = patch {
                cfg.train.patch_size = triple(p)?;
            }
        }
        Command::Evaluate { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    match &cli.command {
        Command::Synth { cases, out, .. } => commands::cmd_synth(cfg, *cases, out),
        Command::Preprocess { .. } => commands::cmd_preprocess(cfg),
        Command::Train { fold, loss, .. } => {
            let kind = LossKind::parse(loss)?;
            commands::cmd_train(cfg, *fold, kind)
        }
        Command::Select { .. } => commands::cmd_select(cfg).map(|_| ()),
        Command::Predict { images, out, .. } => commands::cmd_predict(cfg, images, out.as_deref()),
        Command::Evaluate { pred, reference, out } => {
            commands::cmd_evaluate(cfg, pred.as_deref(), reference, out.as_deref()).map(|_| ())
        }
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = (|| {
        if cli.jobs < 1 {
            return Err(usage("--jobs must be >= 1"));
        }
        let cfg = resolve_config(&cli)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build()
            .map_err(|e| usage(e.to_string()))?;
        pool.install(|| dispatch(&cli, &cfg))
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
