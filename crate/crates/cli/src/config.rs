use std::path::{Path, PathBuf};

use imbseg::loss::LossKind;
use imbseg::net::{NetConfig, TrainConfig};
use imbseg::postprocess::{Connectivity, DEFAULT_MIN_SIZE};
use imbseg::synth::SynthSpec;
use imbseg::Spacing;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub enabled: bool,
    pub min_size: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_size: DEFAULT_MIN_SIZE,
            connectivity: Connectivity::TwentySix,
        }
    }
}

/// Everything a run needs. Loaded from one JSON file; command-line flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_dir: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
    /// Median spacing of the dataset when unset.
    pub target_spacing: Option<Spacing>,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub n_folds: usize,
    /// Loss groups compared by `select`, in tie-break order.
    pub groups: Vec<LossKind>,
    /// Ensemble description; `<work_dir>/ensemble.json` when unset.
    pub ensemble: Option<PathBuf>,
    pub postprocess: PostprocessConfig,
    pub synth: SynthSpec,
    pub free_fraction: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            work_dir: None,
            target_spacing: None,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            n_folds: 5,
            groups: vec![LossKind::DiceCe, LossKind::DiceTopk],
            ensemble: None,
            postprocess: PostprocessConfig::default(),
            synth: SynthSpec::default(),
            free_fraction: 0.18,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                crate::error::require(p)?;
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        for p in [&self.dataset_dir, &self.work_dir].into_iter().flatten() {
            if p.as_os_str().is_empty() {
                return Err(usage("paths must be nonempty"));
            }
        }
        self.net.validate()?;
        self.train.validate(&self.net)?;
        if self.n_folds < 2 {
            return Err(usage("n_folds must be >= 2"));
        }
        if self.groups.is_empty() {
            return Err(usage("at least one loss group is required"));
        }
        if let Some(t) = self.target_spacing {
            if t.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(usage("target spacing must be positive"));
            }
        }
        Ok(())
    }

    pub fn work_dir(&self) -> CliResult<&Path> {
        self.work_dir.as_deref().ok_or_else(|| usage("--work is required"))
    }

    pub fn dataset_dir(&self) -> CliResult<&Path> {
        self.dataset_dir.as_deref().ok_or_else(|| usage("--data is required"))
    }
}

/// Parse `a,b,c` (or a single `a` for all three axes).
pub fn parse_triple<T: std::str::FromStr + Copy>(s: &str) -> Result<[T; 3], String> {
    let vals = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("invalid value `{p}`")))
        .collect::<Result<Vec<T>, String>>()?;
    match vals[..] {
        [v] => Ok([v; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected one or three comma-separated values, got `{s}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples() {
        assert_eq!(parse_triple::<usize>("32").unwrap(), [32, 32, 32]);
        assert_eq!(parse_triple::<f64>("1, 1.5,2").unwrap(), [1.0, 1.5, 2.0]);
        assert!(parse_triple::<usize>("1,2").is_err());
        assert!(parse_triple::<usize>("a,b,c").is_err());
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "train": {"iterations": 12}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.iterations, 12);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.n_folds, 5);
        assert_eq!(c.postprocess.min_size, 11);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
