//! Anti-imbalance losses on foreground probabilities, with gradients
//! `dL/dp` for every voxel.
//!
//! Soft Dice uses the linear denominator `sum p + sum g + eps`, so an empty
//! prediction against an empty target scores 0. Cross-entropy clamps
//! probabilities to `[1e-7, 1 - 1e-7]` and its gradient vanishes where the
//! clamp is active. TopK averages the `ceil(k N)` largest per-voxel CE
//! terms; voxels tied with the cut are all kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask};

pub const CE_CLAMP: f64 = 1e-7;
pub const DEFAULT_DICE_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOPK_FRACTION: f64 = 0.10;

/// Foreground probabilities on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub dims: Dims,
    pub probs: Vec<f64>,
    pub logits: Option<Vec<f64>>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Prediction {
    pub fn from_probs(dims: Dims, probs: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().product();
        if probs.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: probs.len(),
            });
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numerical(format!(
                "probability {} at index {i} outside [0, 1]",
                probs[i]
            )));
        }
        Ok(Self {
            dims,
            probs,
            logits: None,
        })
    }

    pub fn from_logits(dims: Dims, logits: Vec<f64>) -> Result<Self> {
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("non-finite logit at index {i}")));
        }
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        let mut p = Self::from_probs(dims, probs)?;
        p.logits = Some(logits);
        Ok(p)
    }
}

/// Scalar loss and `dL/dp` per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn scaled_add(mut self, w_self: f64, other: LossValue, w_other: f64) -> LossValue {
        self.value = w_self * self.value + w_other * other.value;
        for (a, b) in self.grad.iter_mut().zip(other.grad) {
            *a = w_self * *a + w_other * b;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    Ce,
    Topk,
    DiceCe,
    DiceTopk,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Ce => "ce",
            LossKind::Topk => "topk",
            LossKind::DiceCe => "dice_ce",
            LossKind::DiceTopk => "dice_topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dice" => LossKind::Dice,
            "ce" => LossKind::Ce,
            "topk" => LossKind::Topk,
            "dice_ce" => LossKind::DiceCe,
            "dice_topk" => LossKind::DiceTopk,
            other => return Err(Error::Config(format!("unknown loss `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub topk_fraction: f64,
    pub dice_epsilon: f64,
    /// `(w_dice, w_other)` for the compound kinds.
    pub weights: (f64, f64),
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::DiceCe,
            topk_fraction: DEFAULT_TOPK_FRACTION,
            dice_epsilon: DEFAULT_DICE_EPSILON,
            weights: (1.0, 1.0),
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "topk fraction must be in (0, 1], got {}",
                self.topk_fraction
            )));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::Config("dice epsilon must be positive".into()));
        }
        let (a, b) = self.weights;
        if !(a >= 0.0 && b >= 0.0) || (a == 0.0 && b == 0.0) {
            return Err(Error::Config(format!("invalid loss weights ({a}, {b})")));
        }
        Ok(())
    }

    /// Evaluate on flat slices; `target` holds 0/1.
    pub fn eval(&self, probs: &[f64], target: &[u8]) -> Result<LossValue> {
        self.validate()?;
        check_shapes(probs, target)?;
        let (wd, wo) = self.weights;
        Ok(match self.kind {
            LossKind::Dice => dice(probs, target, self.dice_epsilon),
            LossKind::Ce => ce(probs, target),
            LossKind::Topk => topk(probs, target, self.topk_fraction),
            LossKind::DiceCe => dice(probs, target, self.dice_epsilon).scaled_add(wd, ce(probs, target), wo),
            LossKind::DiceTopk => dice(probs, target, self.dice_epsilon).scaled_add(
                wd,
                topk(probs, target, self.topk_fraction),
                wo,
            ),
        })
    }

    /// Loss value with the gradient taken with respect to the logits
    /// `z = logit(p)`. The Dice part is chained through `p (1 - p)`; the CE
    /// and TopK parts use the logistic identity `d ce_i / d z_i = p_i - g_i`,
    /// which stays informative when the sigmoid saturates.
    pub fn eval_logit_grad(&self, probs: &[f64], target: &[u8]) -> Result<LossValue> {
        let value = self.eval(probs, target)?.value;
        let (wd, wo) = self.weights;
        let n = probs.len();
        let mut grad = vec![0.0; n];
        if matches!(self.kind, LossKind::Dice | LossKind::DiceCe | LossKind::DiceTopk) {
            let w = if self.kind == LossKind::Dice { 1.0 } else { wd };
            let d = dice(probs, target, self.dice_epsilon);
            for ((o, &gp), &p) in grad.iter_mut().zip(&d.grad).zip(probs) {
                *o += w * gp * p * (1.0 - p);
            }
        }
        let w = if matches!(self.kind, LossKind::Ce | LossKind::Topk) { 1.0 } else { wo };
        match self.kind {
            LossKind::Ce | LossKind::DiceCe => {
                let scale = w / n.max(1) as f64;
                for ((o, &p), &g) in grad.iter_mut().zip(probs).zip(target) {
                    *o += scale * (p - f64::from(g));
                }
            }
            LossKind::Topk | LossKind::DiceTopk if n > 0 => {
                let values: Vec<f64> = probs.iter().zip(target).map(|(&p, &g)| voxel_ce(p, g).0).collect();
                let (cut, selected) = topk_cut(&values, self.topk_fraction);
                let scale = w / selected as f64;
                for (((o, &p), &g), &v) in grad.iter_mut().zip(probs).zip(target).zip(&values) {
                    if v >= cut {
                        *o += scale * (p - f64::from(g));
                    }
                }
            }
            _ => {}
        }
        Ok(LossValue { value, grad })
    }
}

fn check_shapes(probs: &[f64], target: &[u8]) -> Result<()> {
    if probs.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: target.len(),
            actual: probs.len(),
        });
    }
    Ok(())
}

fn check_pair(pred: &Prediction, target: &LabelMask) -> Result<()> {
    if pred.dims != target.dims() {
        return Err(Error::Geometry(format!(
            "prediction dims {:?} vs target dims {:?}",
            pred.dims,
            target.dims()
        )));
    }
    check_shapes(&pred.probs, target.data())
}

fn dice(p: &[f64], g: &[u8], eps: f64) -> LossValue {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        let gi = f64::from(gi);
        inter += pi * gi;
        sp += pi;
        sg += gi;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sg + eps;
    let den2 = den * den;
    let grad = g
        .iter()
        .map(|&gi| -(2.0 * f64::from(gi) * den - num) / den2)
        .collect();
    LossValue {
        value: 1.0 - num / den,
        grad,
    }
}

/// Per-voxel clamped binary CE and its derivative.
#[inline]
fn voxel_ce(p: f64, g: u8) -> (f64, f64) {
    let active = !(CE_CLAMP..=1.0 - CE_CLAMP).contains(&p);
    let pc = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
    if g == 1 {
        (-pc.ln(), if active { 0.0 } else { -1.0 / pc })
    } else {
        (-(1.0 - pc).ln(), if active { 0.0 } else { 1.0 / (1.0 - pc) })
    }
}

fn ce(p: &[f64], g: &[u8]) -> LossValue {
    let n = p.len().max(1) as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .zip(g)
        .map(|(&pi, &gi)| {
            let (l, d) = voxel_ce(pi, gi);
            value += l;
            d / n
        })
        .collect();
    LossValue {
        value: value / n,
        grad,
    }
}

/// Number of voxels TopK keeps before tie expansion.
pub fn topk_count(n: usize, k: f64) -> usize {
    // the small slack keeps e.g. 0.3 * 10 from rounding up to 4
    (((k * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// CE cut value and number of voxels TopK keeps, ties at the cut included.
fn topk_cut(ce_values: &[f64], k: f64) -> (f64, usize) {
    let n = ce_values.len();
    let m = topk_count(n, k);
    let cut = if m == n {
        f64::NEG_INFINITY
    } else {
        let mut vals = ce_values.to_vec();
        let (_, kth, _) = vals.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
        *kth
    };
    (cut, ce_values.iter().filter(|&&v| v >= cut).count())
}

fn topk(p: &[f64], g: &[u8], k: f64) -> LossValue {
    if p.is_empty() {
        return LossValue {
            value: 0.0,
            grad: Vec::new(),
        };
    }
    let terms: Vec<(f64, f64)> = p.iter().zip(g).map(|(&pi, &gi)| voxel_ce(pi, gi)).collect();
    let values: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let (cut, selected) = topk_cut(&values, k);
    let selected = selected as f64;
    let mut value = 0.0;
    let grad = terms
        .iter()
        .map(|&(l, d)| {
            if l >= cut {
                value += l;
                d / selected
            } else {
                0.0
            }
        })
        .collect();
    LossValue {
        value: value / selected,
        grad,
    }
}

/// `1 - (2 sum pg + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(pred: &Prediction, target: &LabelMask, eps: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    if !(eps > 0.0) {
        return Err(Error::Config("dice epsilon must be positive".into()));
    }
    Ok(dice(&pred.probs, target.data(), eps))
}

/// Mean clamped binary cross-entropy.
pub fn ce_loss(pred: &Prediction, target: &LabelMask) -> Result<LossValue> {
    check_pair(pred, target)?;
    Ok(ce(&pred.probs, target.data()))
}

/// Mean of the hardest `ceil(k N)` per-voxel CE terms.
pub fn topk_loss(pred: &Prediction, target: &LabelMask, k: f64) -> Result<LossValue> {
    check_pair(pred, target)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Config(format!("topk fraction must be in (0, 1], got {k}")));
    }
    Ok(topk(&pred.probs, target.data(), k))
}

pub fn compound_loss(spec: &LossSpec, pred: &Prediction, target: &LabelMask) -> Result<LossValue> {
    check_pair(pred, target)?;
    spec.eval(&pred.probs, target.data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pair(probs: Vec<f64>, g: Vec<u8>) -> (Prediction, LabelMask) {
        let n = probs.len();
        (
            Prediction::from_probs([n, 1, 1], probs).unwrap(),
            LabelMask::new([n, 1, 1], [1.0; 3], g).unwrap(),
        )
    }

    #[test]
    fn dice_examples() {
        let (p, g) = pair(vec![1.0, 0.0, 1.0, 0.0], vec![1, 0, 1, 0]);
        let l = dice_loss(&p, &g, 1e-5).unwrap();
        assert!(l.value <= 1e-5 / (4.0 + 1e-5) + 1e-15);

        let (p, g) = pair(vec![0.5, 0.5], vec![1, 0]);
        let l = dice_loss(&p, &g, 1e-5).unwrap();
        assert_abs_diff_eq!(l.value, 1.0 - (1.0 + 1e-5) / (2.0 + 1e-5), epsilon = 1e-15);
        assert_abs_diff_eq!(l.value, 0.5, epsilon = 1e-5);

        let (p, g) = pair(vec![0.0; 5], vec![0; 5]);
        assert_eq!(dice_loss(&p, &g, 1e-5).unwrap().value, 0.0);
    }

    #[test]
    fn ce_examples() {
        let (p, g) = pair(vec![1.0, 0.0, 1.0], vec![1, 0, 1]);
        let l = ce_loss(&p, &g).unwrap();
        assert!(l.value <= -(1.0 - CE_CLAMP).ln() + 1e-15);
        assert!(l.grad.iter().all(|&d| d == 0.0));

        let (p, g) = pair(vec![0.5; 4], vec![1, 0, 0, 1]);
        assert_abs_diff_eq!(ce_loss(&p, &g).unwrap().value, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ce_loss(&p, &g).unwrap().value, 0.6931, epsilon = 1e-4);

        let (p, g) = pair(vec![CE_CLAMP], vec![1]);
        let v = ce_loss(&p, &g).unwrap().value;
        assert_abs_diff_eq!(v, -(1e-7f64).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(v, 16.118, epsilon = 1e-3);
    }

    #[test]
    fn topk_examples() {
        let probs = vec![0.3, 0.8, 0.6, 0.1, 0.9];
        let g = vec![1, 0, 1, 0, 1];
        let (p, gm) = pair(probs, g);
        assert_eq!(topk_loss(&p, &gm, 1.0).unwrap(), ce_loss(&p, &gm).unwrap());

        // sort-and-average: nine confident-correct voxels, one at 0.5
        let mut probs = vec![1.0; 9];
        probs.push(0.5);
        let (p, gm) = pair(probs, vec![1; 10]);
        let l = topk_loss(&p, &gm, 0.1).unwrap();
        assert_abs_diff_eq!(l.value, 2f64.ln(), epsilon = 1e-12);
        assert!(l.grad[..9].iter().all(|&d| d == 0.0));
        assert_abs_diff_eq!(l.grad[9], -2.0, epsilon = 1e-12);

        let (p, gm) = pair(vec![0.25, 0.75, 0.25, 0.75], vec![1, 0, 1, 0]);
        for k in [0.1, 0.25, 0.5, 0.9] {
            let t = topk_loss(&p, &gm, k).unwrap();
            let c = ce_loss(&p, &gm).unwrap();
            assert_abs_diff_eq!(t.value, c.value, epsilon = 1e-15);
            for (a, b) in t.grad.iter().zip(&c.grad) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn compound_examples() {
        let (p, g) = pair(vec![1.0, 0.0, 0.0], vec![1, 0, 0]);
        let l = compound_loss(&LossSpec::new(LossKind::DiceCe), &p, &g).unwrap();
        assert!(l.value < 1e-5);

        let (p, g) = pair(vec![0.5, 0.5], vec![1, 0]);
        let l = compound_loss(&LossSpec::new(LossKind::DiceCe), &p, &g).unwrap();
        let expected = 1.0 - (1.0 + 1e-5) / (2.0 + 1e-5) + 2f64.ln();
        assert_abs_diff_eq!(l.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 1.1931, epsilon = 1e-4);

        let (p, g) = pair(vec![0.2, 0.9, 0.4, 0.55], vec![0, 1, 1, 0]);
        let dt = LossSpec {
            kind: LossKind::DiceTopk,
            topk_fraction: 1.0,
            ..LossSpec::default()
        };
        assert_eq!(
            compound_loss(&dt, &p, &g).unwrap(),
            compound_loss(&LossSpec::new(LossKind::DiceCe), &p, &g).unwrap()
        );
    }

    #[test]
    fn shape_and_spec_errors() {
        let (p, _) = pair(vec![0.5; 3], vec![0; 3]);
        let g = LabelMask::zeros([4, 1, 1], [1.0; 3]).unwrap();
        assert!(dice_loss(&p, &g, 1e-5).is_err());
        assert!(ce_loss(&p, &g).is_err());
        assert!(topk_loss(&p, &g, 0.1).is_err());
        let g = LabelMask::zeros([3, 1, 1], [1.0; 3]).unwrap();
        assert!(topk_loss(&p, &g, 0.0).is_err());
        let bad = LossSpec {
            weights: (0.0, 0.0),
            ..LossSpec::default()
        };
        assert!(compound_loss(&bad, &p, &g).is_err());
        assert!(Prediction::from_probs([2, 1, 1], vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn logits_route_through_sigmoid() {
        let p = Prediction::from_logits([3, 1, 1], vec![0.0, 800.0, -800.0]).unwrap();
        assert_eq!(p.probs, vec![0.5, 1.0, 0.0]);
    }

    #[test]
    fn spec_serializes_kind_names() {
        let s = serde_json::to_string(&LossSpec::new(LossKind::DiceTopk)).unwrap();
        assert!(s.contains("\"dice_topk\""));
        let back: LossSpec = serde_json::from_str(r#"{"kind":"dice_ce"}"#).unwrap();
        assert_eq!(back, LossSpec::new(LossKind::DiceCe));
    }

    fn instance(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (
            proptest::collection::vec(0.05f64..0.95, n),
            proptest::collection::vec(0u8..2, n),
        )
    }

    proptest! {
        #[test]
        fn dice_monotone_toward_target((probs, g) in instance(12), i in 0usize..12, step in 0.01f64..0.3) {
            let spec = LossSpec::new(LossKind::Dice);
            let before = spec.eval(&probs, &g).unwrap().value;
            let mut moved = probs.clone();
            let goal = f64::from(g[i]);
            moved[i] += (goal - moved[i]).signum() * step.min((goal - moved[i]).abs());
            let after = spec.eval(&moved, &g).unwrap().value;
            prop_assert!(after <= before + 1e-15);
        }

        #[test]
        fn topk_nonincreasing_in_k((probs, g) in instance(20), k1 in 0.01f64..1.0, k2 in 0.01f64..1.0) {
            let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
            let a = topk(&probs, &g, lo).value;
            let b = topk(&probs, &g, hi).value;
            prop_assert!(b <= a + 1e-12);
            prop_assert!(b >= ce(&probs, &g).value - 1e-12);
        }

        #[test]
        fn losses_permutation_equivariant((probs, g) in instance(16), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let gp: Vec<u8> = perm.iter().map(|&i| g[i]).collect();
            for kind in [LossKind::Dice, LossKind::Ce, LossKind::Topk, LossKind::DiceCe, LossKind::DiceTopk] {
                let spec = LossSpec::new(kind);
                let a = spec.eval(&probs, &g).unwrap();
                let b = spec.eval(&pp, &gp).unwrap();
                prop_assert!((a.value - b.value).abs() < 1e-12);
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((b.grad[j] - a.grad[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn logit_grad_is_chain_rule_away_from_clamp((probs, g) in instance(20)) {
            for kind in [LossKind::Dice, LossKind::Ce, LossKind::Topk, LossKind::DiceCe, LossKind::DiceTopk] {
                let spec = LossSpec::new(kind);
                let a = spec.eval(&probs, &g).unwrap();
                let b = spec.eval_logit_grad(&probs, &g).unwrap();
                prop_assert_eq!(a.value, b.value);
                for i in 0..probs.len() {
                    let chained = a.grad[i] * probs[i] * (1.0 - probs[i]);
                    prop_assert!((chained - b.grad[i]).abs() <= 1e-12 * (1.0 + chained.abs()));
                }
            }
        }
    }
}
