//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records each differentiable operation as it executes. Values that
//! do not depend on a tracked leaf or parameter are plain constants and leave
//! no record, so a non-recording tape ([`Tape::no_grad`]) evaluates a network
//! without retaining intermediates.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::loss::{self, ClassWeights};
use crate::tensor::Tensor4;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A value flowing through a tape, optionally tied to a recorded node.
#[derive(Clone, Debug)]
pub struct Var {
    node: Option<(u64, usize)>,
    value: Arc<Tensor4>,
}

impl Var {
    pub fn constant(value: Tensor4) -> Self {
        Self {
            node: None,
            value: Arc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn dims(&self) -> [usize; 4] {
        self.value.dims()
    }

    pub fn c(&self) -> usize {
        self.value.c()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var {
        Self {
            node: None,
            value: Arc::clone(&self.value),
        }
    }

    pub fn into_tensor(self) -> Tensor4 {
        Arc::try_unwrap(self.value).unwrap_or_else(|arc| (*arc).clone())
    }

    /// The scalar held by a `(1,1,1,1)` value.
    pub fn scalar(&self) -> Result<f64> {
        if self.value.len() != 1 {
            return Err(shape_err("scalar", format!("{:?} is not a scalar", self.dims())));
        }
        Ok(self.value.data()[0])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, index: usize },
    Conv2d { x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, k: Var, b: Option<Var>, stride: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Tensor4, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Elu { x: Var, out: Arc<Tensor4> },
    Sigmoid { x: Var, out: Arc<Tensor4> },
    Softmax { x: Var, out: Arc<Tensor4> },
    GlobalAvgPool { x: Var },
    ChannelScale { x: Var, gate: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    CrossEntropy { p: Var, target: Tensor4 },
    Dice { p: Var, target: Tensor4, weights: ClassWeights },
}

/// Ordered record of executed operations for one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of tracked leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor4> {
        match var.node {
            Some((tape, idx)) if tape == self.tape => self.grads.get(idx)?.as_ref(),
            _ => None,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that records nothing; every result is a constant.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: &Var) -> Result<()> {
        match v.node {
            Some((tape, _)) if tape != self.id => Err(Error::InvalidArgument(
                "value recorded on a different tape; detach it first".into(),
            )),
            _ => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor4, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if self.recording && tracked {
            self.nodes.push(op());
            Var {
                node: Some((self.id, self.nodes.len() - 1)),
                value: Arc::new(value),
            }
        } else {
            Var::constant(value)
        }
    }

    fn push_arc(&mut self, value: Arc<Tensor4>, tracked: bool, op: impl FnOnce() -> Op) -> Var {
        if self.recording && tracked {
            self.nodes.push(op());
            Var {
                node: Some((self.id, self.nodes.len() - 1)),
                value,
            }
        } else {
            Var { node: None, value }
        }
    }

    pub fn constant(&self, value: Tensor4) -> Var {
        Var::constant(value)
    }

    /// An input whose gradient should be reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, true, || Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_arc(p.value_arc(), true, || Op::Param {
            store: id.store,
            index: id.index,
        })
    }

    pub fn conv2d(&mut self, x: &Var, k: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let out = kernels::conv2d(x.value(), k.value(), b.map(|b| b.value()), stride, pad)?;
        let tracked = x.is_tracked() || k.is_tracked() || b.is_some_and(Var::is_tracked);
        Ok(self.push(out, tracked, || Op::Conv2d {
            x: x.clone(),
            k: k.clone(),
            b: b.cloned(),
            stride,
            pad,
        }))
    }

    pub fn conv_transpose2d(&mut self, x: &Var, k: &Var, b: Option<&Var>, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let out = kernels::conv_transpose2d(x.value(), k.value(), b.map(|b| b.value()), stride)?;
        let tracked = x.is_tracked() || k.is_tracked() || b.is_some_and(Var::is_tracked);
        Ok(self.push(out, tracked, || Op::ConvTranspose2d {
            x: x.clone(),
            k: k.clone(),
            b: b.cloned(),
            stride,
        }))
    }

    pub fn maxpool2d(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let (out, argmax) = kernels::maxpool2x2(x.value())?;
        Ok(self.push(out, x.is_tracked(), || Op::MaxPool { x: x.clone(), argmax }))
    }

    /// Batch-statistics normalization. Returns the output and the biased batch
    /// mean and variance used, so callers can update running statistics.
    pub fn batchnorm_train(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check(x)?;
        let [n, _, h, w] = x.dims();
        if n * h * w < 2 {
            return Err(shape_err(
                "batchnorm2d",
                format!("train mode needs >= 2 values per channel, input {:?}", x.dims()),
            ));
        }
        let (mean, var) = kernels::channel_stats(x.value());
        let out = kernels::batchnorm_apply(x.value(), gamma.value(), beta.value(), &mean, &var)?;
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        let out = self.push(out, tracked, || {
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect();
            let ones = Tensor4::ones([x.c(), 1, 1, 1]);
            let zeros = Tensor4::zeros([x.c(), 1, 1, 1]);
            let xhat = kernels::batchnorm_apply(x.value(), &ones, &zeros, &mean, &var)
                .expect("shapes checked above");
            Op::BatchNormTrain {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            }
        });
        Ok((out, mean, var))
    }

    /// Normalization with fixed statistics (inference / frozen layers).
    pub fn batchnorm_eval(&mut self, x: &Var, gamma: &Var, beta: &Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.check(x)?;
        if mean.len() != x.c() || var.len() != x.c() {
            return Err(shape_err(
                "batchnorm2d",
                format!("statistics for {} channels, input {:?}", mean.len(), x.dims()),
            ));
        }
        let out = kernels::batchnorm_apply(x.value(), gamma.value(), beta.value(), mean, var)?;
        let tracked = x.is_tracked() || gamma.is_tracked() || beta.is_tracked();
        Ok(self.push(out, tracked, || Op::BatchNormEval {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.to_vec(),
            inv_std: var.iter().map(|v| 1.0 / (v + kernels::BN_EPS).sqrt()).collect(),
        }))
    }

    pub fn elu(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let out = Arc::new(x.value().map(kernels::elu));
        Ok(self.push_arc(Arc::clone(&out), x.is_tracked(), || Op::Elu { x: x.clone(), out }))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let out = Arc::new(x.value().map(kernels::sigmoid));
        Ok(self.push_arc(Arc::clone(&out), x.is_tracked(), || Op::Sigmoid { x: x.clone(), out }))
    }

    pub fn softmax_channels(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let out = Arc::new(kernels::softmax_channels(x.value())?);
        Ok(self.push_arc(Arc::clone(&out), x.is_tracked(), || Op::Softmax { x: x.clone(), out }))
    }

    /// Mean over `(h, w)`: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let [n, c, _, _] = x.dims();
        let plane = x.value().plane();
        let data = x
            .value()
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor4::from_vec([n, c, 1, 1], data)?;
        Ok(self.push(out, x.is_tracked(), || Op::GlobalAvgPool { x: x.clone() }))
    }

    /// Multiplies every `(n, c)` plane of `x` by `gate[n, c]`.
    pub fn channel_scale(&mut self, x: &Var, gate: &Var) -> Result<Var> {
        self.check(x)?;
        self.check(gate)?;
        let [n, c, _, _] = x.dims();
        if gate.dims() != [n, c, 1, 1] {
            return Err(shape_err(
                "channel_scale",
                format!("gate {:?} for input {:?}", gate.dims(), x.dims()),
            ));
        }
        let plane = x.value().plane();
        let mut out = x.value().clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let g = gate.value().data()[i];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        let tracked = x.is_tracked() || gate.is_tracked();
        Ok(self.push(out, tracked, || Op::ChannelScale {
            x: x.clone(),
            gate: gate.clone(),
        }))
    }

    /// Squeeze-and-excitation: global average pool, `c -> c/r` projection,
    /// ELU, `c/r -> c` projection, sigmoid, then channel-wise rescaling of `x`.
    /// `w1` is `[c/r, c, 1, 1]` and `w2` is `[c, c/r, 1, 1]`.
    pub fn se_block(&mut self, x: &Var, w1: &Var, w2: &Var) -> Result<Var> {
        let c = x.c();
        let [hidden, w1_in, _, _] = w1.dims();
        if w1.dims() != [hidden, c, 1, 1] || w2.dims() != [c, hidden, 1, 1] || c % hidden != 0 {
            return Err(shape_err(
                "se_block",
                format!(
                    "weights {:?} / {:?} incompatible with {c} channels (w1 takes {w1_in})",
                    w1.dims(),
                    w2.dims()
                ),
            ));
        }
        let pooled = self.global_avg_pool(x)?;
        let z = self.conv2d(&pooled, w1, None, 1, 0)?;
        let z = self.elu(&z)?;
        let z = self.conv2d(&z, w2, None, 1, 0)?;
        let gate = self.sigmoid(&z)?;
        self.channel_scale(x, &gate)
    }

    /// Channel concatenation with `a`'s channels first.
    pub fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let [n, ca, h, w] = a.dims();
        let [nb, cb, hb, wb] = b.dims();
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?} differ outside the channel axis", a.dims(), b.dims()),
            ));
        }
        let mut data = Vec::with_capacity(a.value().len() + b.value().len());
        for ni in 0..n {
            data.extend_from_slice(a.value().image(ni));
            data.extend_from_slice(b.value().image(ni));
        }
        let out = Tensor4::from_vec([n, ca + cb, h, w], data)?;
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(out, tracked, || Op::Concat {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = a.value().zip_map(b.value(), |x, y| x + y)?;
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(out, tracked, || Op::Add {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        let tracked = a.is_tracked() || b.is_tracked();
        Ok(self.push(out, tracked, || Op::Mul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        self.check(x)?;
        let out = x.value().map(|v| v * factor);
        Ok(self.push(out, x.is_tracked(), || Op::Scale { x: x.clone(), factor }))
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor4::scalar(x.value().sum());
        Ok(self.push(out, x.is_tracked(), || Op::Sum { x: x.clone() }))
    }

    /// Mean pixel cross-entropy of probabilities against a one-hot target.
    pub fn cross_entropy(&mut self, p: &Var, target: &Tensor4) -> Result<Var> {
        self.check(p)?;
        let value = loss::cross_entropy_loss(p.value(), target)?;
        Ok(self.push(Tensor4::scalar(value), p.is_tracked(), || Op::CrossEntropy {
            p: p.clone(),
            target: target.clone(),
        }))
    }

    pub fn dice_loss(&mut self, p: &Var, target: &Tensor4, weights: &ClassWeights) -> Result<Var> {
        self.check(p)?;
        let value = loss::dice_loss(p.value(), target, weights)?;
        Ok(self.push(Tensor4::scalar(value), p.is_tracked(), || Op::Dice {
            p: p.clone(),
            target: target.clone(),
            weights: weights.clone(),
        }))
    }

    /// `(l1 + l2) / 2`.
    pub fn total_loss(&mut self, l1: &Var, l2: &Var) -> Result<Var> {
        let s = self.add(l1, l2)?;
        self.scale(&s, 0.5)
    }

    /// Back-propagates from a scalar `loss`, accumulating into parameters of `store`.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) -> Result<Gradients> {
        self.backward_impl(loss, Some(store))
    }

    /// Back-propagates into tracked leaves only; fails if parameters were used.
    pub fn gradients(&self, loss: &Var) -> Result<Gradients> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&self, loss: &Var, mut store: Option<&mut ParamStore>) -> Result<Gradients> {
        if loss.value().len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", loss.dims())));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        self.check(loss)?;
        let Some((_, root)) = loss.node else {
            return Err(Error::InvalidArgument("loss does not depend on any tracked value".into()));
        };
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor4::ones(loss.dims()));
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Op::Leaf => grads[i] = Some(g),
                Op::Param { store: owner, index } => {
                    let store = store.as_deref_mut().ok_or_else(|| {
                        Error::InvalidArgument("tape uses parameters; call backward with their store".into())
                    })?;
                    if store.store_id() != *owner {
                        return Err(Error::InvalidArgument(
                            "tape uses parameters from a different store".into(),
                        ));
                    }
                    store.by_index_mut(*index).accumulate_grad(&g)?;
                }
                op => propagate(op, &g, &mut grads)?,
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor4>], v: &Var, g: Tensor4) -> Result<()> {
    if let Some((_, idx)) = v.node {
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
    }
    Ok(())
}

fn propagate(op: &Op, g: &Tensor4, grads: &mut [Option<Tensor4>]) -> Result<()> {
    match op {
        Op::Leaf | Op::Param { .. } => unreachable!("handled by caller"),
        Op::Conv2d { x, k, b, stride, pad } => {
            let cg = kernels::conv2d_backward(x.value(), k.value(), g, *stride, *pad, x.is_tracked())?;
            if let Some(dx) = cg.input {
                accumulate(grads, x, dx)?;
            }
            accumulate(grads, k, cg.kernel)?;
            if let Some(b) = b {
                accumulate(grads, b, cg.bias.reshape(b.dims())?)?;
            }
        }
        Op::ConvTranspose2d { x, k, b, stride } => {
            let cg = kernels::conv_transpose2d_backward(x.value(), k.value(), g, *stride, x.is_tracked())?;
            if let Some(dx) = cg.input {
                accumulate(grads, x, dx)?;
            }
            accumulate(grads, k, cg.kernel)?;
            if let Some(b) = b {
                accumulate(grads, b, cg.bias.reshape(b.dims())?)?;
            }
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = Tensor4::zeros(x.dims());
            for (o, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src] += g.data()[o];
            }
            accumulate(grads, x, dx)?;
        }
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            let [n, c, _, _] = x.dims();
            let plane = xhat.plane();
            let count = (n * plane) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                    for (gy, xh) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                        dgamma[ci] += gy * xh;
                        dbeta[ci] += gy;
                    }
                }
            }
            if x.is_tracked() {
                let mut dx = Tensor4::zeros(x.dims());
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                        let gam = gamma.value().data()[ci];
                        let k = gam * inv_std[ci] / count;
                        for ((d, gy), xh) in dx.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&xhat.data()[r])
                        {
                            *d = k * (count * gy - dbeta[ci] - xh * dgamma[ci]);
                        }
                    }
                }
                accumulate(grads, x, dx)?;
            }
            accumulate(grads, gamma, Tensor4::from_vec(gamma.dims(), dgamma)?)?;
            accumulate(grads, beta, Tensor4::from_vec(beta.dims(), dbeta)?)?;
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let c = x.c();
            let plane = x.value().plane();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = Tensor4::zeros(x.dims());
            for (i, (gch, xch)) in g.data().chunks(plane).zip(x.value().data().chunks(plane)).enumerate() {
                let ci = i % c;
                let scale = gamma.value().data()[ci] * inv_std[ci];
                for (j, (gy, xv)) in gch.iter().zip(xch).enumerate() {
                    dgamma[ci] += gy * (xv - mean[ci]) * inv_std[ci];
                    dbeta[ci] += gy;
                    dx.data_mut()[i * plane + j] = gy * scale;
                }
            }
            accumulate(grads, x, dx)?;
            accumulate(grads, gamma, Tensor4::from_vec(gamma.dims(), dgamma)?)?;
            accumulate(grads, beta, Tensor4::from_vec(beta.dims(), dbeta)?)?;
        }
        Op::Elu { x, out } => {
            let dx = x
                .value()
                .zip_map(out, |xv, yv| if xv > 0.0 { 1.0 } else { yv + 1.0 })?
                .zip_map(g, |d, gy| d * gy)?;
            accumulate(grads, x, dx)?;
        }
        Op::Sigmoid { x, out } => {
            let dx = out.zip_map(g, |y, gy| gy * y * (1.0 - y))?;
            accumulate(grads, x, dx)?;
        }
        Op::Softmax { x, out } => {
            let [n, c, _, _] = out.dims();
            let plane = out.plane();
            let mut dx = Tensor4::zeros(out.dims());
            for ni in 0..n {
                let y = out.image(ni);
                let gy = g.image(ni);
                let d = dx.image_mut(ni);
                for p in 0..plane {
                    let dotp: f64 = (0..c).map(|ci| y[ci * plane + p] * gy[ci * plane + p]).sum();
                    for ci in 0..c {
                        let o = ci * plane + p;
                        d[o] = y[o] * (gy[o] - dotp);
                    }
                }
            }
            accumulate(grads, x, dx)?;
        }
        Op::GlobalAvgPool { x } => {
            let plane = x.value().plane();
            let mut dx = Tensor4::zeros(x.dims());
            for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                chunk.fill(g.data()[i] / plane as f64);
            }
            accumulate(grads, x, dx)?;
        }
        Op::ChannelScale { x, gate } => {
            let plane = x.value().plane();
            if x.is_tracked() {
                let mut dx = g.clone();
                for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let gv = gate.value().data()[i];
                    chunk.iter_mut().for_each(|v| *v *= gv);
                }
                accumulate(grads, x, dx)?;
            }
            let dg: Vec<f64> = g
                .data()
                .chunks(plane)
                .zip(x.value().data().chunks(plane))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                .collect();
            accumulate(grads, gate, Tensor4::from_vec(gate.dims(), dg)?)?;
        }
        Op::Concat { a, b } => {
            let n = g.n();
            let (la, lb) = (a.value().len() / n, b.value().len() / n);
            let mut da = Vec::with_capacity(a.value().len());
            let mut db = Vec::with_capacity(b.value().len());
            for ni in 0..n {
                let img = g.image(ni);
                da.extend_from_slice(&img[..la]);
                db.extend_from_slice(&img[la..la + lb]);
            }
            accumulate(grads, a, Tensor4::from_vec(a.dims(), da)?)?;
            accumulate(grads, b, Tensor4::from_vec(b.dims(), db)?)?;
        }
        Op::Add { a, b } => {
            accumulate(grads, a, g.clone())?;
            accumulate(grads, b, g.clone())?;
        }
        Op::Mul { a, b } => {
            if a.is_tracked() {
                accumulate(grads, a, g.zip_map(b.value(), |x, y| x * y)?)?;
            }
            if b.is_tracked() {
                accumulate(grads, b, g.zip_map(a.value(), |x, y| x * y)?)?;
            }
        }
        Op::Scale { x, factor } => accumulate(grads, x, g.map(|v| v * factor))?,
        Op::Sum { x } => accumulate(grads, x, Tensor4::filled(x.dims(), g.data()[0]))?,
        Op::CrossEntropy { p, target } => {
            let mut d = loss::cross_entropy_grad(p.value(), target);
            d.scale(g.data()[0]);
            accumulate(grads, p, d)?;
        }
        Op::Dice { p, target, weights } => {
            let mut d = loss::dice_loss_grad(p.value(), target, weights);
            d.scale(g.data()[0]);
            accumulate(grads, p, d)?;
        }
    }
    Ok(())
}
