//! Parameterized layers. Each layer holds ids into a shared [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::engine::{BufferId, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Momentum of the running statistics: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Allocates parameters under a name prefix with name-keyed initialization.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl Builder<'_> {
    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(bytes)
    }

    /// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    fn he_uniform(&mut self, name: String, dims: [usize; 4], fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = self.rng_for(&name);
        let t = Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-bound..bound));
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, dims: [usize; 4], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor4::filled(dims, v))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    pad: usize,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<Self> {
        let weight = b.he_uniform(format!("{name}/weight"), [cout, cin, k, k], cin * k * k)?;
        let bias = if bias { Some(b.constant(format!("{name}/bias"), [cout, 1, 1, 1], 0.0)?) } else { None };
        Ok(Conv { weight, bias, pad: k / 2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|id| tape.param(store, id));
        tape.conv2d(x, &w, b.as_ref(), 1, self.pad)
    }
}

/// 2×2 stride-2 learned upsampling.
#[derive(Clone, Debug)]
pub(crate) struct UpConv {
    weight: ParamId,
    bias: ParamId,
}

impl UpConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let weight = b.he_uniform(format!("{name}/weight"), [cin, cout, 2, 2], cin)?;
        let bias = b.constant(format!("{name}/bias"), [cout, 1, 1, 1], 0.0)?;
        Ok(UpConv { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, &w, Some(&b), 2)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Result<Self> {
        let gamma = b.constant(format!("{name}/gamma"), [c, 1, 1, 1], 1.0)?;
        let beta = b.constant(format!("{name}/beta"), [c, 1, 1, 1], 0.0)?;
        let running_mean = b.store.add_buffer(format!("{name}/running_mean"), Tensor4::zeros([c, 1, 1, 1]))?;
        let running_var = b.store.add_buffer(format!("{name}/running_var"), Tensor4::ones([c, 1, 1, 1]))?;
        Ok(BatchNorm { gamma, beta, running_mean, running_var })
    }

    /// Batch statistics are used (and folded into the running averages) only
    /// when the tape records and this layer is trainable.
    pub fn is_training(&self, tape: &Tape, store: &ParamStore) -> bool {
        tape.is_recording() && !store.get(self.gamma).is_frozen()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if self.is_training(tape, store) {
            let (y, mean, var) = tape.batchnorm_train(x, &gamma, &beta)?;
            let update = |buf: BufferId, batch: &[f64]| {
                store.buffer(buf).with(|t| {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                })
            };
            update(self.running_mean, &mean);
            update(self.running_var, &var);
            Ok(y)
        } else {
            let mean = store.buffer(self.running_mean).get();
            let var = store.buffer(self.running_var).get();
            tape.batchnorm_eval(x, &gamma, &beta, mean.data(), var.data())
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SqueezeExcite {
    squeeze: ParamId,
    excite: ParamId,
}

impl SqueezeExcite {
    pub fn new(b: &mut Builder, name: &str, c: usize, reduction: usize) -> Result<Self> {
        let hidden = c / reduction;
        let squeeze = b.he_uniform(format!("{name}/squeeze"), [hidden, c, 1, 1], c)?;
        let excite = b.he_uniform(format!("{name}/excite"), [c, hidden, 1, 1], hidden)?;
        Ok(SqueezeExcite { squeeze, excite })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let w1 = tape.param(store, self.squeeze);
        let w2 = tape.param(store, self.excite);
        tape.se_block(x, &w1, &w2)
    }
}

/// `repeats` × (conv3×3 → ELU → batchnorm), optionally followed by SE.
#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    units: Vec<(Conv, BatchNorm)>,
    se: Option<SqueezeExcite>,
}

impl ConvBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        repeats: usize,
        se_reduction: Option<usize>,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(repeats);
        for i in 0..repeats {
            let conv = Conv::new(b, &format!("{name}/conv{i}"), if i == 0 { cin } else { cout }, cout, 3, true)?;
            let bn = BatchNorm::new(b, &format!("{name}/bn{i}"), cout)?;
            units.push((conv, bn));
        }
        let se = match se_reduction {
            Some(r) => Some(SqueezeExcite::new(b, &format!("{name}/se"), cout, r)?),
            None => None,
        };
        Ok(ConvBlock { units, se })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (conv, bn) in &self.units {
            h = conv.forward(tape, store, &h)?;
            h = tape.elu(&h)?;
            h = bn.forward(tape, store, &h)?;
        }
        match &self.se {
            Some(se) => se.forward(tape, store, &h),
            None => Ok(h),
        }
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.units.iter().map(|(_, bn)| bn)
    }
}
