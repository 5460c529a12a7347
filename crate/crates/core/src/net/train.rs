//! Patch sampling, SGD with nesterov momentum and poly decay, fold training
//! and validation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FoldSplit, ModelParams, NetConfig, Network};
use crate::error::{Error, Result};
use crate::inference::{plan_windows, predict_volume, threshold, DEFAULT_THRESHOLD};
use crate::loss::{sigmoid, LossSpec};
use crate::metrics::dsc;
use crate::volume::{index, Dims, LabelMask, Volume};

/// A preprocessed training case.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub patch_size: Dims,
    pub batch_size: usize,
    pub iterations: usize,
    pub initial_lr: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of patches forced to centre on a foreground voxel.
    pub oversample_foreground: f64,
    pub log_interval: usize,
    /// Validate every this many iterations (and after the last one).
    pub val_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            patch_size: [32, 32, 32],
            batch_size: 2,
            iterations: 300,
            initial_lr: 0.01,
            poly_exponent: 0.9,
            momentum: 0.99,
            nesterov: true,
            weight_decay: 3e-5,
            grad_clip: 12.0,
            oversample_foreground: 1.0 / 3.0,
            log_interval: 10,
            val_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetConfig) -> Result<()> {
        self.loss.validate()?;
        net.check_patch(self.patch_size)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.initial_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be > 0 and momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.oversample_foreground) {
            return Err(Error::Config("oversampling fraction must be in [0, 1]".into()));
        }
        if self.log_interval == 0 || self.val_interval == 0 {
            return Err(Error::Config("intervals must be >= 1".into()));
        }
        Ok(())
    }

    /// `lr0 * (1 - t / T)^0.9`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let t = iteration as f64 / self.iterations.max(1) as f64;
        self.initial_lr * (1.0 - t).max(0.0).powf(self.poly_exponent)
    }
}

/// SGD state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    velocity: Vec<f32>,
    momentum: f32,
    nesterov: bool,
    weight_decay: f32,
}

impl Optimizer {
    pub fn new(n: usize, tc: &TrainConfig) -> Self {
        Self {
            velocity: vec![0.0; n],
            momentum: tc.momentum as f32,
            nesterov: tc.nesterov,
            weight_decay: tc.weight_decay as f32,
        }
    }

    /// `v = mu v + g`, then `p -= lr (g + mu v)` (nesterov) or `p -= lr v`.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        let lr = lr as f32;
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            let update = if self.nesterov { g + self.momentum * *v } else { *v };
            *p -= lr * update;
        }
    }
}

/// Draws training patches, forcing a fixed fraction of them to centre on a
/// foreground voxel.
pub struct PatchSampler<'a> {
    cases: Vec<&'a Case>,
    foreground: Vec<Vec<usize>>,
    patch: Dims,
    fraction: f64,
    drawn: usize,
    rng: ChaCha8Rng,
}

pub struct Sample {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub forced_foreground: bool,
}

impl<'a> PatchSampler<'a> {
    pub fn new(cases: Vec<&'a Case>, patch: Dims, fraction: f64, seed: u64) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let foreground = cases
            .iter()
            .map(|c| {
                c.mask
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Ok(Self {
            cases,
            foreground,
            patch,
            fraction,
            drawn: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Whether draw number `j` is a forced-foreground draw: exactly
    /// `floor(j * f)` of the first `j` draws are.
    fn forced(&self, j: usize) -> bool {
        ((j + 1) as f64 * self.fraction).floor() > (j as f64 * self.fraction).floor()
    }

    pub fn draw(&mut self) -> Sample {
        let forced = self.forced(self.drawn);
        self.drawn += 1;
        let with_fg: Vec<usize> = (0..self.cases.len()).filter(|&i| !self.foreground[i].is_empty()).collect();
        let forced = forced && !with_fg.is_empty();
        let ci = if forced {
            with_fg[self.rng.gen_range(0..with_fg.len())]
        } else {
            self.rng.gen_range(0..self.cases.len())
        };
        let case = self.cases[ci];
        let d = case.image.dims();
        let mut origin = [0isize; 3];
        if forced {
            let fg = &self.foreground[ci];
            let center = crate::volume::coords(d, fg[self.rng.gen_range(0..fg.len())]);
            for a in 0..3 {
                let lo = (d[a] as isize - self.patch[a] as isize).min(0);
                let hi = (d[a] as isize - self.patch[a] as isize).max(0);
                origin[a] = (center[a] as isize - (self.patch[a] / 2) as isize).clamp(lo, hi);
            }
        } else {
            for a in 0..3 {
                let span = d[a] as isize - self.patch[a] as isize;
                origin[a] = if span >= 0 {
                    self.rng.gen_range(0..=span)
                } else {
                    span / 2
                };
            }
        }
        let (image, mask) = extract(case, origin, self.patch);
        Sample {
            image,
            mask,
            forced_foreground: forced,
        }
    }
}

/// Copy a patch at `origin`; voxels outside the case read as zero.
fn extract(case: &Case, origin: [isize; 3], patch: Dims) -> (Vec<f32>, Vec<u8>) {
    let d = case.image.dims();
    let n = patch.iter().product();
    let mut img = vec![0.0; n];
    let mut msk = vec![0; n];
    let src_img = case.image.data();
    let src_msk = case.mask.data();
    let mut k = 0;
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                let p = [origin[0] + x as isize, origin[1] + y as isize, origin[2] + z as isize];
                if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]) {
                    let i = index(d, p[0] as usize, p[1] as usize, p[2] as usize);
                    img[k] = src_img[i];
                    msk[k] = src_msk[i];
                }
                k += 1;
            }
        }
    }
    (img, msk)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean batch loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub val_dsc: Option<f64>,
}

pub struct TrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub best_val_dsc: Option<f64>,
    pub log: Vec<LogRow>,
}

/// Saturated logits give per-voxel gradients far below f32 resolution; left
/// in, they turn into subnormals that make every backward conv many times
/// slower.
fn flush_tiny(g: f64) -> f32 {
    if g.abs() < TINY_GRADIENT {
        0.0
    } else {
        g as f32
    }
}

const TINY_GRADIENT: f64 = 1e-30;

/// Loss value and parameter gradient for one batch. Patches are evaluated
/// in parallel; gradients are summed in batch order.
pub fn batch_gradient(params: &[f32], net: &NetConfig, spec: &LossSpec, batch: &[Sample], patch: Dims) -> Result<(f64, Vec<f32>)> {
    let network = Network::new(net, params)?;
    let forwards = batch
        .par_iter()
        .map(|s| network.forward_tape(patch, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = forwards
        .iter()
        .flat_map(|(logits, _)| logits.iter().map(|&z| sigmoid(f64::from(z))))
        .collect();
    let target: Vec<u8> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let loss = spec.eval_logit_grad(&probs, &target)?;
    if !loss.value.is_finite() {
        return Err(Error::Numerical(format!("loss became {}", loss.value)));
    }
    let per = probs.len() / batch.len();
    let grads = forwards
        .par_iter()
        .enumerate()
        .map(|(b, (_, tape))| {
            let range = b * per..(b + 1) * per;
            let dlogits: Vec<f32> = loss.grad[range].iter().map(|&g| flush_tiny(g)).collect();
            network.backward_tape(patch, tape, &dlogits)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0f32; params.len()];
    for g in grads {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok((loss.value, total))
}

fn clip(grads: &mut [f32], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            *g *= s;
        }
    }
}

fn lookup<'a>(cases: &'a [Case], ids: &[String]) -> Result<Vec<&'a Case>> {
    ids.iter()
        .map(|id| {
            cases
                .iter()
                .find(|c| &c.id == id)
                .ok_or_else(|| Error::Config(format!("case `{id}` not in dataset")))
        })
        .collect()
}

/// Train one fold. Returns the last parameters and the ones with the best
/// validation DSC.
pub fn train_fold(cases: &[Case], fold: &FoldSplit, net: &NetConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate(net)?;
    let train = lookup(cases, &fold.train_case_ids)?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let init_seed = tc.seed ^ (fold.fold_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut params = ModelParams::init(net, init_seed)?;
    let mut best = params.clone();
    let mut best_dsc: Option<f64> = None;
    let mut log = Vec::new();
    if tc.iterations == 0 {
        return Ok(TrainOutcome {
            final_params: params,
            best_params: best,
            best_val_dsc: None,
            log,
        });
    }

    let mut sampler = PatchSampler::new(train, tc.patch_size, tc.oversample_foreground, tc.seed.wrapping_add(1))?;
    let mut opt = Optimizer::new(params.len(), tc);
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    for it in 0..tc.iterations {
        let batch: Vec<Sample> = (0..tc.batch_size).map(|_| sampler.draw()).collect();
        let (loss, mut grads) = batch_gradient(&params.values, net, &tc.loss, &batch, tc.patch_size)?;
        clip(&mut grads, tc.grad_clip);
        let lr = tc.lr_at(it);
        opt.step(&mut params.values, &grads, lr);
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("parameters diverged at iteration {it}")));
        }
        loss_acc += loss;
        loss_n += 1;

        let done = it + 1;
        let validate = done % tc.val_interval == 0 || done == tc.iterations;
        if done % tc.log_interval == 0 || validate {
            let val_dsc = if validate && !fold.val_case_ids.is_empty() {
                let v = validate_fold(&params, net, fold, cases, tc.patch_size)?;
                if best_dsc.map_or(true, |b| v > b) {
                    best_dsc = Some(v);
                    best = params.clone();
                }
                Some(v)
            } else {
                None
            };
            log::debug!("fold {} it {done} loss {:.4} lr {lr:.5} val {val_dsc:?}", fold.fold_index, loss_acc / loss_n as f64);
            log.push(LogRow {
                iteration: done,
                loss: loss_acc / loss_n as f64,
                lr,
                val_dsc,
            });
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    if best_dsc.is_none() {
        best = params.clone();
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best,
        best_val_dsc: best_dsc,
        log,
    })
}

/// Mean DSC of thresholded full-volume predictions over the fold's
/// validation cases.
pub fn validate_fold(params: &ModelParams, net: &NetConfig, fold: &FoldSplit, cases: &[Case], patch: Dims) -> Result<f64> {
    let val = lookup(cases, &fold.val_case_ids)?;
    if val.is_empty() {
        return Err(Error::Config("fold has no validation cases".into()));
    }
    let mut total = 0.0;
    for c in &val {
        let plan = plan_windows(c.image.dims(), patch)?;
        let probs = predict_volume(params, net, &c.image, &plan)?;
        total += dsc(&threshold(&probs, DEFAULT_THRESHOLD), &c.mask)?;
    }
    Ok(total / val.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_case(id: &str, dims: Dims, center: [usize; 3], r: f64) -> Case {
        let n = dims.iter().product();
        let mut img = vec![0.0f32; n];
        let mut m = vec![0u8; n];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(center)
                        .map(|(&a, b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>();
                    let i = index(dims, x, y, z);
                    if d2 <= r * r {
                        img[i] = 2.0;
                        m[i] = 1;
                    } else {
                        img[i] = -0.2 + 0.05 * ((i * 31) % 7) as f32;
                    }
                }
            }
        }
        Case {
            id: id.into(),
            image: Volume::new(dims, [1.0; 3], img).unwrap(),
            mask: LabelMask::new(dims, [1.0; 3], m).unwrap(),
        }
    }

    #[test]
    fn poly_schedule() {
        let tc = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(tc.lr_at(0), 0.01);
        assert!((tc.lr_at(50) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        let lrs: Vec<f64> = (0..100).map(|t| tc.lr_at(t)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn nesterov_step_matches_hand_computation() {
        let tc = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(1, &tc);
        let mut p = [1.0f32];
        opt.step(&mut p, &[2.0], 0.1);
        // v = 2, update = 2 + 0.99 * 2
        assert!((p[0] - (1.0 - 0.1 * 3.98)).abs() < 1e-6);
        opt.step(&mut p, &[1.0], 0.1);
        // v = 0.99 * 2 + 1 = 2.98, update = 1 + 0.99 * 2.98
        assert!((p[0] - (1.0 - 0.398 - 0.1 * (1.0 + 0.99 * 2.98))).abs() < 1e-5);
    }

    #[test]
    fn oversampling_fraction() {
        let cases: Vec<Case> = (0..4)
            .map(|i| {
                if i == 0 {
                    blob_case("a", [40, 40, 40], [30, 8, 20], 1.5)
                } else {
                    let mut c = blob_case("b", [40, 40, 40], [0, 0, 0], 0.0);
                    c.mask = LabelMask::zeros([40, 40, 40], [1.0; 3]).unwrap();
                    c
                }
            })
            .collect();
        let mut s = PatchSampler::new(cases.iter().collect(), [16, 16, 16], 1.0 / 3.0, 5).unwrap();
        let mut with_fg = 0;
        let mut forced = 0;
        for _ in 0..300 {
            let sample = s.draw();
            forced += usize::from(sample.forced_foreground);
            if sample.mask.iter().any(|&v| v == 1) {
                with_fg += 1;
            }
        }
        assert_eq!(forced, 100);
        assert!(with_fg as f64 / 300.0 >= 0.33, "{with_fg}");
    }

    #[test]
    fn sampler_pads_small_cases() {
        let c = blob_case("s", [6, 10, 4], [3, 5, 2], 1.0);
        let mut s = PatchSampler::new(vec![&c], [8, 8, 8], 1.0, 0).unwrap();
        let sample = s.draw();
        assert_eq!(sample.image.len(), 512);
        assert!(sample.mask.iter().any(|&v| v == 1));
        assert!(PatchSampler::new(vec![], [8, 8, 8], 0.3, 0).is_err());
    }

    fn small_setup() -> (Vec<Case>, FoldSplit, NetConfig) {
        let cases = vec![
            blob_case("c0", [16, 16, 16], [8, 8, 8], 2.5),
            blob_case("c1", [16, 16, 16], [5, 9, 10], 2.0),
            blob_case("c2", [16, 16, 16], [10, 6, 7], 2.5),
        ];
        let fold = FoldSplit {
            fold_index: 0,
            train_case_ids: vec!["c0".into(), "c1".into()],
            val_case_ids: vec!["c2".into()],
        };
        let net = NetConfig {
            base_channels: 4,
            ..NetConfig::default()
        };
        (cases, fold, net)
    }

    #[test]
    fn zero_iterations_returns_init() {
        let (cases, fold, net) = small_setup();
        let tc = TrainConfig {
            iterations: 0,
            patch_size: [16; 3],
            ..TrainConfig::default()
        };
        let out = train_fold(&cases, &fold, &net, &tc).unwrap();
        let init = ModelParams::init(&net, tc.seed).unwrap();
        assert_eq!(out.final_params.values, init.values);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (cases, fold, net) = small_setup();
        let tc = TrainConfig {
            iterations: 40,
            patch_size: [16; 3],
            val_interval: 20,
            log_interval: 10,
            ..TrainConfig::default()
        };
        let a = train_fold(&cases, &fold, &net, &tc).unwrap();
        let b = train_fold(&cases, &fold, &net, &tc).unwrap();
        assert_eq!(a.final_params.values, b.final_params.values);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 4);
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
        assert!(a.log.last().unwrap().loss < a.log[0].loss);
        assert!(a.best_val_dsc.is_some());
        let v = validate_fold(&a.best_params, &net, &fold, &cases, tc.patch_size).unwrap();
        assert_eq!(Some(v), a.best_val_dsc);
    }

    #[test]
    fn empty_training_set_errors() {
        let (cases, mut fold, net) = small_setup();
        fold.train_case_ids.clear();
        let tc = TrainConfig {
            patch_size: [16; 3],
            ..TrainConfig::default()
        };
        assert!(train_fold(&cases, &fold, &net, &tc).is_err());
    }

    #[test]
    fn config_validation() {
        let net = NetConfig::default();
        let bad = TrainConfig {
            patch_size: [30, 32, 32],
            ..TrainConfig::default()
        };
        assert!(bad.validate(&net).is_err());
        assert!(TrainConfig::default().validate(&net).is_ok());
    }
}
