use std::fs;
use std::path::{Path, PathBuf};

use imbseg::inference::{plan_windows, Ensemble, EnsembleMember, EnsembleSpec, DEFAULT_THRESHOLD};
use imbseg::loss::{LossKind, LossSpec};
use imbseg::metrics::{aggregate, evaluate_case, CaseMetrics, Summary};
use imbseg::net::{make_folds, save_checkpoint, select_best_per_fold, train_fold, Case, FoldSplit, LogRow, NetConfig, SelectionTable, TrainConfig};
use imbseg::nifti::{read_mask, read_nifti, read_volume, write_mask, write_volume};
use imbseg::postprocess::remove_small_components;
use imbseg::preprocess::{median_spacing, preprocess_case, restore_to_original};
use imbseg::synth::{generate_dataset, CaseMeta, SynthSpec};
use imbseg::{LabelMask, Spacing};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{require, usage, CliError, CliResult};

/// Fixed locations under the work directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn plan(&self) -> PathBuf {
        self.preprocessed().join("plan.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn folds(&self) -> PathBuf {
        self.checkpoints().join("folds.json")
    }

    /// Checkpoint path relative to the work directory.
    pub fn checkpoint_rel(loss: LossKind, fold: usize) -> PathBuf {
        PathBuf::from("checkpoints").join(loss.name()).join(format!("fold_{fold}.ckpt"))
    }

    pub fn fold_record(&self, loss: LossKind, fold: usize) -> PathBuf {
        self.checkpoints().join(loss.name()).join(format!("fold_{fold}.json"))
    }

    pub fn fold_log(&self, loss: LossKind, fold: usize) -> PathBuf {
        self.checkpoints().join(loss.name()).join(format!("fold_{fold}_log.csv"))
    }

    pub fn selection(&self) -> PathBuf {
        self.checkpoints().join("selection.json")
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub meta: CaseMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub free_fraction: f64,
    pub cases: Vec<ManifestCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCase {
    pub id: String,
    pub has_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub target_spacing: Spacing,
    pub cases: Vec<PlanCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub loss: LossKind,
    pub best_val_dsc: Option<f64>,
    pub iterations: usize,
    pub checkpoint: PathBuf,
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub fold: usize,
    pub group: LossKind,
    pub dsc: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub table: SelectionTable,
    pub selected: Vec<Selected>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))
}

/// Strip `.nii` or `.nii.gz`; `None` for other files.
fn case_id(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .filter(|s| !s.is_empty())
}

/// NIfTI files in `dir` as `(id, path)`, sorted by id.
pub fn list_cases(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    require(dir)?;
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(case_id) {
            out.push((id.to_string(), path.clone()));
        }
    }
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(usage(format!("case `{}` appears twice in {}", w[0].0, dir.display())));
    }
    Ok(out)
}

fn find_case(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}.nii.gz"), format!("{id}.nii")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

pub fn cmd_synth(cfg: &RunConfig, cases: usize, out: &Path) -> CliResult<()> {
    if cases < 1 {
        return Err(usage("cases must be ≥ 1"));
    }
    let spec = SynthSpec {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    spec.validate()?;
    let data = generate_dataset(&spec, cases, cfg.free_fraction)?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let mut manifest = DatasetManifest {
        spec,
        free_fraction: cfg.free_fraction,
        cases: Vec::new(),
    };
    for c in data {
        let image = format!("images/{}.nii.gz", c.id);
        let mask = format!("masks/{}.nii.gz", c.id);
        write_volume(&c.image, out.join(&image), None)?;
        write_mask(&c.mask, out.join(&mask), None)?;
        manifest.cases.push(ManifestCase {
            id: c.id,
            image,
            mask,
            meta: c.meta,
        });
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    log::info!("wrote {cases} cases to {}", out.display());
    Ok(())
}

pub fn cmd_preprocess(cfg: &RunConfig) -> CliResult<()> {
    let data = cfg.dataset_dir()?;
    let layout = Layout::new(cfg.work_dir()?);
    let cases = list_cases(&data.join("images"))?;
    if cases.is_empty() {
        return Err(CliError::Missing(format!("no images in {}", data.join("images").display())));
    }
    let images = cases
        .par_iter()
        .map(|(_, p)| read_volume(p))
        .collect::<imbseg::Result<Vec<_>>>()?;
    let target = match cfg.target_spacing {
        Some(t) => t,
        None => median_spacing(&images.iter().map(|v| v.spacing()).collect::<Vec<_>>())?,
    };
    let dir = layout.preprocessed();
    fs::create_dir_all(&dir)?;
    let plan_cases = cases
        .par_iter()
        .zip(images.par_iter())
        .map(|((id, _), image)| -> CliResult<PlanCase> {
            let mask = match find_case(&data.join("masks"), id) {
                Some(p) => Some(read_mask(p)?),
                None => None,
            };
            let (img, m, record) = preprocess_case(image, mask.as_ref(), target)?;
            if record.normalization.constant {
                log::warn!("case {id}: constant image");
            }
            write_volume(&img, dir.join(format!("{id}_image.nii.gz")), None)?;
            if let Some(m) = &m {
                write_mask(m, dir.join(format!("{id}_mask.nii.gz")), None)?;
            }
            write_json(&dir.join(format!("{id}.json")), &record)?;
            Ok(PlanCase {
                id: id.clone(),
                has_mask: m.is_some(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_json(
        &layout.plan(),
        &Plan {
            target_spacing: target,
            cases: plan_cases,
        },
    )?;
    log::info!("preprocessed {} cases at spacing {target:?}", cases.len());
    Ok(())
}

/// Preprocessed cases with masks, in plan order.
pub fn load_training_cases(layout: &Layout) -> CliResult<(Plan, Vec<Case>)> {
    let plan: Plan = read_json(&layout.plan())?;
    let dir = layout.preprocessed();
    let cases = plan
        .cases
        .par_iter()
        .map(|c| -> CliResult<Case> {
            if !c.has_mask {
                return Err(usage(format!("case `{}` has no mask and cannot be used for training", c.id)));
            }
            let img = dir.join(format!("{}_image.nii.gz", c.id));
            let msk = dir.join(format!("{}_mask.nii.gz", c.id));
            require(&img)?;
            require(&msk)?;
            Ok(Case {
                id: c.id.clone(),
                image: read_volume(&img)?,
                mask: read_mask(&msk)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((plan, cases))
}

pub fn folds_for(cfg: &RunConfig, plan: &Plan) -> CliResult<Vec<FoldSplit>> {
    let ids: Vec<String> = plan.cases.iter().map(|c| c.id.clone()).collect();
    Ok(make_folds(&ids, cfg.n_folds, cfg.seed)?)
}

fn write_log(path: &Path, rows: &[LogRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "lr", "val_dsc"])?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
            r.val_dsc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, fold: usize, loss: LossKind) -> CliResult<()> {
    if fold >= cfg.n_folds {
        return Err(usage(format!("fold must be in 0..{}, got {fold}", cfg.n_folds - 1)));
    }
    let layout = Layout::new(cfg.work_dir()?);
    let tc = TrainConfig {
        loss: LossSpec {
            kind: loss,
            ..cfg.train.loss.clone()
        },
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    tc.validate(&cfg.net)?;
    let (plan, cases) = load_training_cases(&layout)?;
    let folds = folds_for(cfg, &plan)?;
    write_json(&layout.folds(), &folds)?;
    let split = &folds[fold];
    log::info!(
        "training {} fold {fold}: {} train / {} val cases, {} iterations",
        loss.name(),
        split.train_case_ids.len(),
        split.val_case_ids.len(),
        tc.iterations
    );
    let outcome = train_fold(&cases, split, &cfg.net, &tc)?;
    let rel = Layout::checkpoint_rel(loss, fold);
    fs::create_dir_all(layout.checkpoints().join(loss.name()))?;
    save_checkpoint(layout.root().join(&rel), &cfg.net, &outcome.best_params)?;
    write_log(&layout.fold_log(loss, fold), &outcome.log)?;
    write_json(
        &layout.fold_record(loss, fold),
        &FoldRecord {
            fold,
            loss,
            best_val_dsc: outcome.best_val_dsc,
            iterations: tc.iterations,
            checkpoint: rel,
            net: cfg.net.clone(),
            train: tc,
        },
    )?;
    log::info!("fold {fold} {}: best validation DSC {:?}", loss.name(), outcome.best_val_dsc);
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig) -> CliResult<Selection> {
    let layout = Layout::new(cfg.work_dir()?);
    let mut records = Vec::new();
    for fold in 0..cfg.n_folds {
        let row = cfg
            .groups
            .iter()
            .map(|&g| read_json::<FoldRecord>(&layout.fold_record(g, fold)))
            .collect::<CliResult<Vec<_>>>()?;
        records.push(row);
    }
    let table = SelectionTable {
        groups: cfg.groups.iter().map(|g| g.name().to_string()).collect(),
        dsc: records
            .iter()
            .map(|row| row.iter().map(|r| r.best_val_dsc).collect())
            .collect(),
    };
    let chosen = select_best_per_fold(&table)?;
    let selected: Vec<Selected> = chosen
        .iter()
        .map(|(fold, name)| {
            let g = cfg.groups.iter().position(|k| k.name() == name).expect("group from table");
            let r = &records[*fold][g];
            Selected {
                fold: *fold,
                group: r.loss,
                dsc: r.best_val_dsc.unwrap_or(f64::NAN),
                checkpoint: r.checkpoint.clone(),
            }
        })
        .collect();
    let ensemble = EnsembleSpec {
        members: selected
            .iter()
            .map(|s| EnsembleMember {
                checkpoint: s.checkpoint.clone(),
                net: records[s.fold][0].net.clone(),
            })
            .collect(),
        threshold: DEFAULT_THRESHOLD,
    };
    let selection = Selection { table, selected };
    write_json(&layout.selection(), &selection)?;
    write_json(&layout.ensemble(), &ensemble)?;
    for s in &selection.selected {
        log::info!("fold {}: {} (DSC {:.4})", s.fold, s.group.name(), s.dsc);
    }
    Ok(selection)
}

/// Load an ensemble file, resolving relative member paths against the
/// file's directory.
pub fn load_ensemble(path: &Path) -> CliResult<Ensemble> {
    let mut spec: EnsembleSpec = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for m in &mut spec.members {
        if m.checkpoint.is_relative() {
            m.checkpoint = base.join(&m.checkpoint);
        }
        crate::error::require(&m.checkpoint)?;
    }
    if spec.members.is_empty() {
        return Err(usage(format!("ensemble {} has no members", path.display())));
    }
    Ok(Ensemble::load(&spec)?)
}

/// Predict one raw image: preprocess, ensemble, restore geometry and
/// optionally drop small components. Returns the mask before and after
/// post-processing.
pub fn predict_image(cfg: &RunConfig, ensemble: &Ensemble, target: Spacing, image: &imbseg::Volume) -> CliResult<(LabelMask, LabelMask)> {
    let (pre, _, record) = preprocess_case(image, None, target)?;
    let plan = plan_windows(pre.dims(), cfg.train.patch_size)?;
    let (_, mask) = ensemble.predict(&pre, &plan)?;
    let raw = restore_to_original(&mask, &record)?;
    let cleaned = if cfg.postprocess.enabled {
        remove_small_components(&raw, cfg.postprocess.min_size, cfg.postprocess.connectivity)?.0
    } else {
        raw.clone()
    };
    Ok((raw, cleaned))
}

pub fn cmd_predict(cfg: &RunConfig, images: &Path, out: Option<&Path>) -> CliResult<()> {
    let layout = Layout::new(cfg.work_dir()?);
    let plan: Plan = read_json(&layout.plan())?;
    let ens_path = cfg.ensemble.clone().unwrap_or_else(|| layout.ensemble());
    let ensemble = load_ensemble(&ens_path)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| layout.predictions());
    fs::create_dir_all(&out)?;
    let cases = list_cases(images)?;
    for (id, path) in &cases {
        let (header, image) = read_nifti(path)?;
        let (_, mask) = predict_image(cfg, &ensemble, plan.target_spacing, &image)?;
        write_mask(&mask, out.join(format!("{id}.nii.gz")), Some(&header))?;
        log::info!("{id}: {} foreground voxels", mask.foreground_count());
    }
    Ok(())
}

pub fn write_metrics(dir: &Path, rows: &[(String, CaseMetrics)]) -> CliResult<Summary> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record(["case_id", "dsc", "hd95", "vs", "pred_components", "ref_components", "flags"])?;
    for (id, m) in rows {
        w.write_record([
            id.clone(),
            m.dsc.to_string(),
            m.hd95_text(),
            m.volumetric_similarity.to_string(),
            m.pred_components.to_string(),
            m.ref_components.to_string(),
            m.flags(),
        ])?;
    }
    w.flush()?;
    let metrics: Vec<CaseMetrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    let summary = aggregate(&metrics)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_evaluate(cfg: &RunConfig, pred: Option<&Path>, reference: &Path, out: Option<&Path>) -> CliResult<Summary> {
    let layout = cfg.work_dir.as_deref().map(Layout::new);
    let pred = match (pred, &layout) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(l)) => l.predictions(),
        (None, None) => return Err(usage("--pred or --work is required")),
    };
    let out = match (out, &layout) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(l)) => l.metrics(),
        (None, None) => return Err(usage("--out or --work is required")),
    };
    require(reference)?;
    let cases = list_cases(&pred)?;
    let rows = cases
        .par_iter()
        .map(|(id, p)| -> CliResult<(String, CaseMetrics)> {
            let r = find_case(reference, id).ok_or_else(|| CliError::Missing(reference.join(format!("{id}.nii.gz")).display().to_string()))?;
            let m = evaluate_case(&read_mask(p)?, &read_mask(&r)?)?;
            Ok((id.clone(), m))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let summary = write_metrics(&out, &rows)?;
    log::info!(
        "{} cases: mean DSC {:.4}, mean HD95 {:?}, mean VS {:.4}",
        summary.cases,
        summary.mean_dsc,
        summary.mean_hd95,
        summary.mean_volumetric_similarity
    );
    Ok(summary)
}
