//! A small 3D U-Net with hand-written forward and backward passes, its SGD
//! trainer, and cross-validation bookkeeping.
//!
//! Each level holds two 3x3x3 conv + leaky-ReLU blocks. Levels are joined by
//! 2x2x2 average pooling on the way down and nearest upsampling followed by
//! a conv on the way up, with skip connections concatenated before the
//! decoder blocks. A 1x1x1 conv produces one foreground logit per voxel.

mod folds;
pub mod tensor;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use folds::{make_folds, select_best_per_fold, FoldSplit, SelectionTable};
pub use tensor::Real;
pub use train::{
    batch_gradient, train_fold, validate_fold, Case, LogRow, Optimizer, PatchSampler, Sample, TrainConfig,
    TrainOutcome,
};

use crate::error::{Error, Result};
use crate::loss::{sigmoid, Prediction};
use crate::volume::{Dims, Volume};
use tensor::{
    avg_pool, avg_pool_backward, conv_backward, conv_forward, leaky_relu, leaky_relu_backward, upsample,
    upsample_backward, Tensor, LEAKY_SLOPE,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Channel cap per level.
    pub max_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            levels: 2,
            max_channels: 320,
        }
    }
}

/// Configuration of the full-size reference network. Recorded for
/// comparison; far beyond what this crate trains on a CPU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePreset {
    pub net: NetConfig,
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub desk_runnable: bool,
}

pub fn full_scale_preset() -> ScalePreset {
    ScalePreset {
        net: NetConfig {
            in_channels: 1,
            base_channels: 32,
            levels: 6,
            max_channels: 360,
        },
        patch_size: [256, 224, 56],
        batch_size: 2,
        desk_runnable: false,
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels < 1 || self.in_channels < 1 || self.max_channels < 1 {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    /// Patch sides must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_patch(&self, dims: Dims) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Geometry(format!(
                "patch dims {dims:?} must be divisible by {d} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    /// Parameter layout, in the order forward visits the layers.
    pub fn layers(&self) -> Vec<LayerShape> {
        let mut v = Vec::new();
        let mut push = |name: String, cin: usize, cout: usize, k: usize| {
            v.push(LayerShape { name, cin, cout, k });
        };
        for l in 0..self.levels {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            push(format!("enc{l}a"), cin, self.channels(l), 3);
            push(format!("enc{l}b"), self.channels(l), self.channels(l), 3);
        }
        for l in (0..self.levels - 1).rev() {
            let c = self.channels(l);
            push(format!("up{l}"), self.channels(l + 1), c, 3);
            push(format!("dec{l}a"), 2 * c, c, 3);
            push(format!("dec{l}b"), c, c, 3);
        }
        push("head".into(), self.channels(0), 1, 1);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::size).sum()
    }

    fn enc(&self, level: usize, second: bool) -> usize {
        2 * level + usize::from(second)
    }

    fn dec(&self, level: usize, part: usize) -> usize {
        2 * self.levels + 3 * (self.levels - 2 - level) + part
    }

    fn head(&self) -> usize {
        2 * self.levels + 3 * (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k * self.k
    }

    /// Weights followed by biases.
    pub fn size(&self) -> usize {
        self.weight_len() + self.cout
    }
}

/// Flat parameter vector plus its layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f32>,
    pub layers: Vec<LayerShape>,
    pub seed: Option<u64>,
}

impl ModelParams {
    /// He-normal weights (gain for the leaky slope), zero biases.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(cfg.param_count());
        for layer in &layers {
            let fan_in = (layer.cin * layer.k * layer.k * layer.k) as f64;
            let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            values.extend((0..layer.weight_len()).map(|_| normal.sample(&mut rng) as f32));
            values.extend(std::iter::repeat(0.0f32).take(layer.cout));
        }
        Ok(Self {
            values,
            layers,
            seed: Some(seed),
        })
    }

    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            values: vec![0.0; cfg.param_count()],
            layers: cfg.layers(),
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offset of each layer's block in `values`.
    pub fn offsets(&self) -> Vec<usize> {
        layer_offsets(&self.layers)
    }

    fn check(&self, cfg: &NetConfig) -> Result<()> {
        if self.layers != cfg.layers() || self.values.len() != cfg.param_count() {
            return Err(Error::Config("parameters do not match network config".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }
}

fn layer_offsets(layers: &[LayerShape]) -> Vec<usize> {
    let mut off = Vec::with_capacity(layers.len());
    let mut at = 0;
    for l in layers {
        off.push(at);
        at += l.size();
    }
    off
}

/// Activations kept for the backward pass.
pub struct Tape<T> {
    inputs: Vec<Option<Tensor<T>>>,
    outputs: Vec<Option<Tensor<T>>>,
    level_dims: Vec<Dims>,
}

impl<T: Real> Tape<T> {
    /// Which side of the leaky-ReLU kink each recorded activation is on.
    pub fn negative_activations(&self) -> Vec<bool> {
        let zero = T::default();
        self.outputs
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter().map(move |&v| v < zero))
            .collect()
    }
}

/// The network evaluated with parameters of type `T`.
pub struct Network<'a, T> {
    cfg: &'a NetConfig,
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: &'a [T],
}

impl<'a, T: Real> Network<'a, T> {
    pub fn new(cfg: &'a NetConfig, params: &'a [T]) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg.layers();
        let offsets = layer_offsets(&layers);
        if params.len() != cfg.param_count() {
            return Err(Error::ShapeMismatch {
                expected: cfg.param_count(),
                actual: params.len(),
            });
        }
        Ok(Self {
            cfg,
            layers,
            offsets,
            params,
        })
    }

    fn weights(&self, layer: usize) -> (&[T], &[T]) {
        let s = &self.layers[layer];
        let block = &self.params[self.offsets[layer]..self.offsets[layer] + s.size()];
        block.split_at(s.weight_len())
    }

    fn conv_act(&self, layer: usize, input: Tensor<T>, tape: &mut Tape<T>) -> Tensor<T> {
        let (w, b) = self.weights(layer);
        let s = &self.layers[layer];
        let out = leaky_relu(conv_forward(&input, w, b, s.cout, s.k));
        tape.inputs[layer] = Some(input);
        tape.outputs[layer] = Some(out.clone());
        out
    }

    fn conv_act_back(&self, layer: usize, g: Tensor<T>, tape: &Tape<T>, grads: &mut [T], need_input: bool) -> Option<Tensor<T>> {
        let out = tape.outputs[layer].as_ref().expect("forward ran");
        let g = leaky_relu_backward(out, g);
        self.conv_back(layer, &g, tape, grads, need_input)
    }

    fn conv_back(&self, layer: usize, g: &Tensor<T>, tape: &Tape<T>, grads: &mut [T], need_input: bool) -> Option<Tensor<T>> {
        let s = &self.layers[layer];
        let (w, _) = self.weights(layer);
        let block = &mut grads[self.offsets[layer]..self.offsets[layer] + s.size()];
        let (gw, gb) = block.split_at_mut(s.weight_len());
        let input = tape.inputs[layer].as_ref().expect("forward ran");
        conv_backward(input, g, w, gw, gb, s.k, need_input)
    }

    /// Logits for a single-channel input given unpadded in x-fastest order.
    pub fn forward_tape(&self, dims: Dims, input: &[T]) -> Result<(Vec<T>, Tape<T>)> {
        self.cfg.check_patch(dims)?;
        if self.cfg.in_channels != 1 {
            return Err(Error::Config("only single-channel input is supported".into()));
        }
        let expected: usize = dims.iter().product();
        if input.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: input.len(),
            });
        }
        let levels = self.cfg.levels;
        let n = self.layers.len();
        let mut tape = Tape {
            inputs: (0..n).map(|_| None).collect(),
            outputs: (0..n).map(|_| None).collect(),
            level_dims: Vec::with_capacity(levels),
        };
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(levels);
        let mut cur = Tensor::from_dense(dims, input);
        for l in 0..levels {
            if l > 0 {
                cur = avg_pool(&cur);
            }
            tape.level_dims.push(cur.dims());
            cur = self.conv_act(self.cfg.enc(l, false), cur, &mut tape);
            cur = self.conv_act(self.cfg.enc(l, true), cur, &mut tape);
            skips.push(cur.clone());
        }
        for l in (0..levels - 1).rev() {
            let up = self.conv_act(self.cfg.dec(l, 0), upsample(&cur), &mut tape);
            let cat = Tensor::concat(&skips[l], &up);
            cur = self.conv_act(self.cfg.dec(l, 1), cat, &mut tape);
            cur = self.conv_act(self.cfg.dec(l, 2), cur, &mut tape);
        }
        let head = self.cfg.head();
        let (w, b) = self.weights(head);
        let logits = conv_forward(&cur, w, b, 1, 1);
        tape.inputs[head] = Some(cur);
        Ok((logits.to_dense(0), tape))
    }

    pub fn logits(&self, dims: Dims, input: &[T]) -> Result<Vec<T>> {
        self.forward_tape(dims, input).map(|(l, _)| l)
    }

    /// Parameter gradient given `dL/dlogit` per voxel.
    pub fn backward_tape(&self, dims: Dims, tape: &Tape<T>, dlogits: &[T]) -> Result<Vec<T>> {
        let expected: usize = dims.iter().product();
        if dlogits.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: dlogits.len(),
            });
        }
        let levels = self.cfg.levels;
        let mut grads = vec![T::default(); self.params.len()];
        let g_out = Tensor::from_dense(dims, dlogits);
        let mut g = self
            .conv_back(self.cfg.head(), &g_out, tape, &mut grads, true)
            .expect("input grad requested");
        let mut g_skip: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            g = self.conv_act_back(self.cfg.dec(l, 2), g, tape, &mut grads, true).expect("input grad");
            let g_cat = self.conv_act_back(self.cfg.dec(l, 1), g, tape, &mut grads, true).expect("input grad");
            let (gs, gu) = g_cat.split(self.cfg.channels(l));
            g_skip[l] = Some(gs);
            let gu = self.conv_act_back(self.cfg.dec(l, 0), gu, tape, &mut grads, true).expect("input grad");
            g = upsample_backward(&gu);
        }
        g_skip[levels - 1] = Some(g);
        let mut carry: Option<Tensor<T>> = None;
        for l in (0..levels).rev() {
            let mut g = g_skip[l].take().expect("set above");
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let g = self.conv_act_back(self.cfg.enc(l, true), g, tape, &mut grads, true).expect("input grad");
            let g_in = self.conv_act_back(self.cfg.enc(l, false), g, tape, &mut grads, l > 0);
            if let Some(g_in) = g_in {
                carry = Some(avg_pool_backward(&g_in, tape.level_dims[l - 1]));
            }
        }
        Ok(grads)
    }
}

/// Foreground probabilities for one patch.
pub fn forward(params: &ModelParams, cfg: &NetConfig, patch: &Volume) -> Result<Prediction> {
    params.check(cfg)?;
    let net = Network::new(cfg, &params.values)?;
    let logits = net.logits(patch.dims(), patch.data())?;
    Prediction::from_logits(patch.dims(), logits.into_iter().map(f64::from).collect())
}

/// Parameter gradient for `dL/dp` on one patch (chain rule through the
/// logistic function).
pub fn backward(params: &ModelParams, cfg: &NetConfig, patch: &Volume, loss_grad: &[f64]) -> Result<Vec<f64>> {
    params.check(cfg)?;
    let net = Network::new(cfg, &params.values)?;
    let dims = patch.dims();
    let (logits, tape) = net.forward_tape(dims, patch.data())?;
    if loss_grad.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            expected: logits.len(),
            actual: loss_grad.len(),
        });
    }
    let dlogits: Vec<f32> = logits
        .iter()
        .zip(loss_grad)
        .map(|(&z, &g)| {
            let p = sigmoid(f64::from(z));
            (g * p * (1.0 - p)) as f32
        })
        .collect();
    let grads = net.backward_tape(dims, &tape, &dlogits)?;
    Ok(grads.into_iter().map(f64::from).collect())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IMBSEG01";

/// Magic, u32 little-endian JSON length, JSON config, f32 LE parameters.
pub fn encode_checkpoint(cfg: &NetConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let json = serde_json::to_vec(cfg)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetConfig, ModelParams)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing IMBSEG01 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Checkpoint("truncated config".into()))?;
    let cfg: NetConfig = serde_json::from_slice(json)?;
    cfg.validate()?;
    let body = &bytes[12 + len..];
    let expected = cfg.param_count() * 4;
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} parameter bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = ModelParams {
        values,
        layers: cfg.layers(),
        seed: None,
    };
    params.check(&cfg)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &NetConfig, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(cfg, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetConfig, ModelParams)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            base_channels: 2,
            ..NetConfig::default()
        }
    }

    fn patch(dims: Dims, seed: u64) -> Volume {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|i| (((i as u64 * 7919 + seed * 31) % 211) as f32 / 105.0) - 1.0)
            .collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn layer_table_and_count() {
        let cfg = NetConfig::default();
        let names: Vec<String> = cfg.layers().into_iter().map(|l| l.name).collect();
        assert_eq!(names, ["enc0a", "enc0b", "enc1a", "enc1b", "up0", "dec0a", "dec0b", "head"]);
        // 8 and 16 channels
        let expected = (27 * 8 + 8) + (27 * 64 + 8) + (27 * 128 + 16) + (27 * 256 + 16) + (27 * 128 + 8)
            + (27 * 128 + 8) + (27 * 64 + 8) + (8 + 1);
        assert_eq!(cfg.param_count(), expected);
        let p = ModelParams::init(&cfg, 1).unwrap();
        assert_eq!(p.len(), expected);
        assert!(p.values.iter().all(|v| v.is_finite()));
        let capped = NetConfig {
            base_channels: 8,
            levels: 3,
            max_channels: 12,
            ..NetConfig::default()
        };
        assert_eq!(capped.channels(2), 12);
    }

    #[test]
    fn zero_params_give_head_bias() {
        let cfg = tiny();
        let mut p = ModelParams::zeros(&cfg).unwrap();
        let last = p.len() - 1;
        p.values[last] = 0.7;
        let pred = forward(&p, &cfg, &patch([8, 8, 8], 1)).unwrap();
        let logits = pred.logits.as_ref().unwrap();
        assert!(logits.iter().all(|&z| (z - 0.7).abs() < 1e-7));
        let first = pred.probs[0];
        assert!(pred.probs.iter().all(|&q| q == first));

        // hidden activations are zero, so head weights are irrelevant
        let head_w = last - 2..last;
        for i in head_w {
            p.values[i] = 2.0 * p.values[i] + 1.0;
        }
        let again = forward(&p, &cfg, &patch([8, 8, 8], 1)).unwrap();
        assert_eq!(again.probs, pred.probs);
    }

    #[test]
    fn shape_contract_and_errors() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 3).unwrap();
        for dims in [[4, 4, 4], [8, 12, 4], [16, 8, 8]] {
            let pred = forward(&p, &cfg, &patch(dims, 2)).unwrap();
            assert_eq!(pred.dims, dims);
            assert_eq!(pred.probs.len(), dims.iter().product::<usize>());
        }
        assert!(forward(&p, &cfg, &patch([6, 4, 4], 2)).is_err());
        assert!(backward(&p, &cfg, &patch([4, 4, 4], 2), &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradient() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 4).unwrap();
        let g = backward(&p, &cfg, &patch([8, 8, 8], 1), &vec![0.0; 512]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_bias_gradient_is_sum_of_logit_gradients() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 5).unwrap();
        let x = patch([8, 8, 8], 3);
        let lg: Vec<f64> = (0..512).map(|i| ((i % 7) as f64 - 3.0) * 0.01).collect();
        let g = backward(&p, &cfg, &x, &lg).unwrap();
        let pred = forward(&p, &cfg, &x).unwrap();
        let expected: f64 = pred.probs.iter().zip(&lg).map(|(q, d)| d * q * (1.0 - q)).sum();
        let bias = *g.last().unwrap();
        assert!((bias - expected).abs() < 1e-4 * expected.abs().max(1e-3), "{bias} vs {expected}");
    }

    #[test]
    fn identical_patches_identical_gradients() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 6).unwrap();
        let x = patch([8, 8, 8], 9);
        let lg = vec![0.05; 512];
        assert_eq!(backward(&p, &cfg, &x, &lg).unwrap(), backward(&p, &cfg, &x.clone(), &lg).unwrap());
    }

    #[test]
    fn single_level_network_runs() {
        let cfg = NetConfig {
            levels: 1,
            base_channels: 3,
            ..NetConfig::default()
        };
        let p = ModelParams::init(&cfg, 7).unwrap();
        let pred = forward(&p, &cfg, &patch([4, 2, 6], 1)).unwrap();
        assert_eq!(pred.probs.len(), 48);
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 8).unwrap();
        let bytes = encode_checkpoint(&cfg, &p).unwrap();
        assert_eq!(&bytes[..8], b"IMBSEG01");
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2.values, p.values);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_checkpoint(b"IMBSEG02xxxx").is_err());
    }

    #[test]
    fn preset_is_marked_not_runnable() {
        let p = full_scale_preset();
        assert_eq!(p.net.max_channels, 360);
        assert_eq!(p.patch_size, [256, 224, 56]);
        assert_eq!(p.batch_size, 2);
        assert!(!p.desk_runnable);
    }
}
