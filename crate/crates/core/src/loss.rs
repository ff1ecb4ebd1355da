//! Training objective: pixel cross-entropy, weighted soft Dice, and their mean.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the logarithm.
pub const PROB_CLAMP: f64 = 1e-12;
/// Added to both numerator and denominator of every per-class Dice term.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Per-class Dice weights `gamma_k`, background included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0; n_classes.max(1)])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "class weights must be non-empty, finite and > 0: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn validate_target(op: &'static str, p: &Tensor4, target: &Tensor4) -> Result<()> {
    if p.dims() != target.dims() {
        return Err(shape_err(op, format!("prediction {:?} vs target {:?}", p.dims(), target.dims())));
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("{op}: target is not one-hot (values outside {{0,1}})")));
    }
    let [n, c, _, _] = target.dims();
    if c >= 2 {
        let plane = target.plane();
        for ni in 0..n {
            let img = target.image(ni);
            for px in 0..plane {
                let s: f64 = (0..c).map(|ci| img[ci * plane + px]).sum();
                if s != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{op}: target is not one-hot at image {ni}, pixel {px}"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over batch pixels of `-log p(true class)`. A single-channel input is
/// treated as a sigmoid output and scored with binary cross-entropy.
pub fn cross_entropy_loss(p: &Tensor4, target: &Tensor4) -> Result<f64> {
    validate_target("cross_entropy_loss", p, target)?;
    let pixels = (p.n() * p.plane()) as f64;
    let total: f64 = if p.c() == 1 {
        p.data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = clamp_prob(pv);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum()
    } else {
        p.data()
            .iter()
            .zip(target.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&pv, &t)| -t * clamp_prob(pv).ln())
            .sum()
    };
    Ok(total / pixels)
}

pub(crate) fn cross_entropy_grad(p: &Tensor4, target: &Tensor4) -> Tensor4 {
    let pixels = (p.n() * p.plane()) as f64;
    let inside = |pv: f64| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv);
    if p.c() == 1 {
        p.zip_map(target, |pv, t| {
            if inside(pv) {
                (-t / pv + (1.0 - t) / (1.0 - pv)) / pixels
            } else {
                0.0
            }
        })
    } else {
        p.zip_map(target, |pv, t| if inside(pv) { -t / pv / pixels } else { 0.0 })
    }
    .expect("shapes validated in forward")
}

struct DiceSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
}

fn dice_sums(p: &Tensor4, target: &Tensor4) -> DiceSums {
    let c = p.c();
    let plane = p.plane();
    let mut s = DiceSums {
        inter: vec![0.0; c],
        pred: vec![0.0; c],
        truth: vec![0.0; c],
    };
    for (i, (pc, tc)) in p.data().chunks(plane).zip(target.data().chunks(plane)).enumerate() {
        let k = i % c;
        for (&u, &v) in pc.iter().zip(tc) {
            s.inter[k] += u * v;
            s.pred[k] += u;
            s.truth[k] += v;
        }
    }
    s
}

fn check_weights(p: &Tensor4, weights: &ClassWeights) -> Result<()> {
    if weights.len() != p.c() {
        return Err(shape_err(
            "dice_loss",
            format!("{} class weights for {} channels", weights.len(), p.c()),
        ));
    }
    Ok(())
}

/// `1 - (1/sum gamma) * sum_k gamma_k (2 sum u v + eps) / (sum u + sum v + eps)`,
/// with sums over every pixel in the batch.
pub fn dice_loss(p: &Tensor4, target: &Tensor4, weights: &ClassWeights) -> Result<f64> {
    if p.dims() != target.dims() {
        return Err(shape_err("dice_loss", format!("prediction {:?} vs target {:?}", p.dims(), target.dims())));
    }
    check_weights(p, weights)?;
    let s = dice_sums(p, target);
    let wsum: f64 = weights.as_slice().iter().sum();
    let score: f64 = weights
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, g)| g * (2.0 * s.inter[k] + DICE_SMOOTH) / (s.pred[k] + s.truth[k] + DICE_SMOOTH))
        .sum();
    Ok(1.0 - score / wsum)
}

pub(crate) fn dice_loss_grad(p: &Tensor4, target: &Tensor4, weights: &ClassWeights) -> Tensor4 {
    let s = dice_sums(p, target);
    let c = p.c();
    let plane = p.plane();
    let wsum: f64 = weights.as_slice().iter().sum();
    let mut out = Tensor4::zeros(p.dims());
    for (i, (oc, tc)) in out.data_mut().chunks_mut(plane).zip(target.data().chunks(plane)).enumerate() {
        let k = i % c;
        let num = 2.0 * s.inter[k] + DICE_SMOOTH;
        let den = s.pred[k] + s.truth[k] + DICE_SMOOTH;
        let coef = -weights.as_slice()[k] / wsum;
        for (o, &v) in oc.iter_mut().zip(tc) {
            *o = coef * (2.0 * v * den - num) / (den * den);
        }
    }
    out
}

/// Arithmetic mean of the two loss terms.
pub fn total_loss(l1: f64, l2: f64) -> f64 {
    (l1 + l2) * 0.5
}

/// One-hot target tensor `(n, channels, h, w)` from class-index maps. With one
/// output channel the target is the binary foreground `label != 0`.
pub fn encode_target(labels: &[&[u8]], h: usize, w: usize, channels: usize) -> Result<Tensor4> {
    if labels.is_empty() || channels == 0 {
        return Err(Error::InvalidArgument("encode_target needs labels and >= 1 channel".into()));
    }
    let plane = h * w;
    let mut t = Tensor4::zeros([labels.len(), channels, h, w]);
    for (ni, lab) in labels.iter().enumerate() {
        if lab.len() != plane {
            return Err(shape_err("encode_target", format!("label has {} pixels, expected {plane}", lab.len())));
        }
        let img = t.image_mut(ni);
        for (px, &cls) in lab.iter().enumerate() {
            if channels == 1 {
                img[px] = if cls != 0 { 1.0 } else { 0.0 };
            } else {
                let k = cls as usize;
                if k >= channels {
                    return Err(Error::InvalidArgument(format!("class {k} outside {channels} classes")));
                }
                img[k * plane + px] = 1.0;
            }
        }
    }
    Ok(t)
}
