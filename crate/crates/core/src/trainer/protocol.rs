use std::collections::HashSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::CheckpointBundle;
use super::config::{Protocol, TrainConfig};
use super::normalize::{compute_stats, normalize, NormStats};
use crate::arch::{Encoded, Head, LfbNet};
use crate::data::Dataset;
use crate::engine::{Adam, AdamConfig, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{self, ClassWeights};
use crate::metrics::{dice_coefficient, probabilities_to_labels, BinaryMask};
use crate::tensor::Tensor4;

/// Which of the three training steps a loss row belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    Forward = 1,
    Feedback = 2,
    Decoder = 3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub cycle: usize,
    pub step: Step,
    pub train_loss: f64,
    /// Validation loss measured at the end of this row's cycle.
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub val_loss: f64,
    /// Mean Dice over foreground classes.
    pub val_dice: f64,
    pub best_val_loss: f64,
}

#[derive(Debug)]
pub struct TrainState {
    pub cycle: usize,
    pub best_val_loss: f64,
    pub cycles_since_improvement: usize,
    pub forward_optimizer: Adam,
    pub feedback_optimizer: Adam,
    pub history: Vec<HistoryRow>,
    pub cycles: Vec<CycleSummary>,
}

impl TrainState {
    pub fn new(net: &LfbNet, config: &TrainConfig) -> Self {
        let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
        TrainState {
            cycle: 0,
            best_val_loss: f64::INFINITY,
            cycles_since_improvement: 0,
            forward_optimizer: Adam::new(adam, net.store()),
            feedback_optimizer: Adam::new(adam, net.store()),
            history: Vec::new(),
            cycles: Vec::new(),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best: CheckpointBundle,
    pub stats: NormStats,
}

/// Per-step loss context shared by the training steps.
pub struct StepContext<'a> {
    pub data: &'a Dataset,
    pub order: &'a [usize],
    pub batch_size: usize,
    pub weights: &'a ClassWeights,
}

impl StepContext<'_> {
    fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }
}

pub fn target_channels(net: &LfbNet) -> usize {
    match net.config().head {
        Head::Sigmoid => 1,
        Head::Softmax => net.config().n_classes,
    }
}

fn check_data(net: &LfbNet, ctx: &StepContext) -> Result<()> {
    if ctx.order.is_empty() || ctx.data.is_empty() {
        return Err(Error::Dataset("empty training data".into()));
    }
    if ctx.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let cfg = net.config();
    if ctx.data.n_classes != cfg.n_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {}",
            ctx.data.n_classes, cfg.n_classes
        )));
    }
    Ok(())
}

/// Segmentation objective: mean of cross-entropy and weighted Dice loss.
pub fn objective(tape: &mut Tape, probs: &Var, target: &Tensor4, weights: &ClassWeights) -> Result<Var> {
    let ce = tape.cross_entropy(probs, target)?;
    let dice = tape.dice_loss(probs, target, weights)?;
    tape.total_loss(&ce, &dice)
}

fn freeze_only(net: &mut LfbNet, trainable: &[&str]) -> Result<()> {
    net.set_frozen("all", true)?;
    for g in trainable {
        net.set_frozen(g, false)?;
    }
    Ok(())
}

fn apply_update(net: &mut LfbNet, tape: &Tape, loss: &Var, opt: &mut Adam) -> Result<f64> {
    let value = loss.scalar()?;
    if !value.is_finite() {
        return Err(Error::InvalidArgument(format!("training loss became {value}")));
    }
    net.store_mut().zero_grad();
    tape.backward(loss, net.store_mut())?;
    opt.step(net.store_mut())?;
    Ok(value)
}

/// Step 1: train S_e and S_d on S_d(S_e(x), h_0). Returns the sample-weighted mean loss.
pub fn step1_train_forward(net: &mut LfbNet, opt: &mut Adam, ctx: &StepContext) -> Result<f64> {
    check_data(net, ctx)?;
    freeze_only(net, &["S_e", "S_d"])?;
    let tc = target_channels(net);
    let mut total = 0.0;
    for batch in ctx.batches() {
        let (x, t) = ctx.data.batch(batch, tc)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _) = net.forward_pass(&mut tape, &xv, None)?;
        let loss = objective(&mut tape, &y, &t, ctx.weights)?;
        total += apply_update(net, &tape, &loss, opt)? * batch.len() as f64;
    }
    Ok(total / ctx.order.len() as f64)
}

/// Step 2: with S frozen, train F to reconstruct y from S's prediction.
pub fn step2_train_feedback(net: &mut LfbNet, opt: &mut Adam, ctx: &StepContext) -> Result<f64> {
    check_data(net, ctx)?;
    freeze_only(net, &["F_e", "F_d"])?;
    let tc = target_channels(net);
    let mut total = 0.0;
    for batch in ctx.batches() {
        let (x, t) = ctx.data.batch(batch, tc)?;
        let y_hat = {
            let mut frozen = Tape::no_grad();
            let xv = frozen.constant(x);
            net.forward_pass(&mut frozen, &xv, None)?.0.into_tensor()
        };
        let mut tape = Tape::new();
        let yv = tape.constant(y_hat);
        let rec = net.feedback_full(&mut tape, &yv)?;
        let loss = objective(&mut tape, &rec, &t, ctx.weights)?;
        total += apply_update(net, &tape, &loss, opt)? * batch.len() as f64;
    }
    Ok(total / ctx.order.len() as f64)
}

/// Inputs to the trainable part of step 3, computed without gradient.
pub struct DecoderInputs {
    pub encoded: Encoded,
    pub feedback: Var,
}

/// h_s = S_e(x), ŷ = S_d(h_s, h_0) and h_f = F_e(ŷ), all with frozen weights.
pub fn step3_inputs(net: &LfbNet, x: Tensor4) -> Result<DecoderInputs> {
    let mut frozen = Tape::no_grad();
    let xv = frozen.constant(x);
    let enc = net.encode(&mut frozen, &xv)?;
    let y0 = net.decode(&mut frozen, &enc, None)?;
    let h_f = net.feedback_encode(&mut frozen, &y0)?;
    Ok(DecoderInputs {
        encoded: Encoded { latent: enc.latent.detach(), skips: enc.skips.iter().map(Var::detach).collect() },
        feedback: h_f.detach(),
    })
}

/// Step 3 loss for one batch on `tape`: S_d(h_s, h_f) against the target.
pub fn step3_loss(net: &LfbNet, tape: &mut Tape, inputs: &DecoderInputs, target: &Tensor4, weights: &ClassWeights) -> Result<Var> {
    let y = net.decode(tape, &inputs.encoded, Some(&inputs.feedback))?;
    objective(tape, &y, target, weights)
}

/// Step 3: train S_d alone on the decoder output driven by the feedback latent.
pub fn step3_train_decoder(net: &mut LfbNet, opt: &mut Adam, ctx: &StepContext) -> Result<f64> {
    check_data(net, ctx)?;
    freeze_only(net, &["S_d"])?;
    let tc = target_channels(net);
    let mut total = 0.0;
    for batch in ctx.batches() {
        let (x, t) = ctx.data.batch(batch, tc)?;
        let inputs = step3_inputs(net, x)?;
        let mut tape = Tape::new();
        let loss = step3_loss(net, &mut tape, &inputs, &t, ctx.weights)?;
        total += apply_update(net, &tape, &loss, opt)? * batch.len() as f64;
    }
    Ok(total / ctx.order.len() as f64)
}

/// Test-time prediction: ŷ⁰ = S_d(S_e(x), h_0), then `iterations` feedback
/// refinements ŷᵗ = S_d(h_s, F_e(ŷᵗ⁻¹)). F_d is never run.
pub fn infer(net: &LfbNet, x: &Tensor4, iterations: usize) -> Result<Tensor4> {
    if iterations > 0 && !net.has_feedback() {
        return Err(Error::InvalidArgument(format!(
            "{iterations} feedback iterations requested from a model without feedback"
        )));
    }
    if let Some(p) = net.store().params().find(|p| !p.value().all_finite()) {
        return Err(Error::InvalidArgument(format!("parameter `{}` holds non-finite values", p.name())));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let enc = net.encode(&mut tape, &xv)?;
    let mut y = net.decode(&mut tape, &enc, None)?;
    for _ in 0..iterations {
        let h_f = net.feedback_encode(&mut tape, &y)?;
        y = net.decode(&mut tape, &enc, Some(&h_f))?;
    }
    Ok(y.into_tensor())
}

/// Mean objective and mean foreground Dice of `infer` over a dataset.
pub fn evaluate(net: &LfbNet, data: &Dataset, iterations: usize, batch_size: usize, weights: &ClassWeights) -> Result<(f64, f64)> {
    let tc = target_channels(net);
    let order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut dice_count = 0usize;
    for batch in order.chunks(batch_size.max(1)) {
        let (x, t) = data.batch(batch, tc)?;
        let y = infer(net, &x, iterations)?;
        let l = loss::total_loss(loss::cross_entropy_loss(&y, &t)?, loss::dice_loss(&y, &t, weights)?);
        loss_sum += l * batch.len() as f64;
        for (pred, &i) in probabilities_to_labels(&y).iter().zip(batch) {
            for class in 1..data.n_classes as u8 {
                let p = BinaryMask::from_labels(pred, data.height, data.width, class)?;
                let r = BinaryMask::from_labels(&data.labels[i], data.height, data.width, class)?;
                dice_sum += dice_coefficient(&p, &r)?;
                dice_count += 1;
            }
        }
    }
    Ok((loss_sum / data.len() as f64, dice_sum / dice_count.max(1) as f64))
}

/// Deterministic visiting order for one step of one cycle.
pub fn epoch_order(n: usize, seed: u64, cycle: usize, step: Step) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((cycle as u64).to_le_bytes());
    h.update([step as u8]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(h.finalize().into()));
    order
}

fn image_digests(data: &Dataset) -> HashSet<[u8; 32]> {
    data.images
        .iter()
        .map(|t| {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect()
}

/// Runs training cycles until patience runs out, `max_cycles` is reached, or
/// the optional validation Dice target is met. Data are z-scored with
/// training statistics first.
pub fn train_loop(net: &mut LfbNet, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.protocol == Protocol::FeedbackLoop && !net.has_feedback() {
        return Err(Error::InvalidArgument("feedback protocol needs a model with a feedback network".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    if !image_digests(train).is_disjoint(&image_digests(val)) {
        return Err(Error::Dataset("training and validation sets share images".into()));
    }
    let stats = compute_stats(train)?;
    let train = normalize(train, stats)?;
    let val = normalize(val, stats)?;
    let weights = config.weights(net.config().n_classes)?;
    let val_iters = config.validation_iterations();

    let mut state = TrainState::new(net, config);
    let mut best = CheckpointBundle::capture(net, config, stats, 0);
    let steps: &[Step] = match config.protocol {
        Protocol::ForwardOnly => &[Step::Forward],
        Protocol::FeedbackLoop => &[Step::Forward, Step::Feedback, Step::Decoder],
    };
    while state.cycle < config.max_cycles {
        let cycle = state.cycle + 1;
        let mut losses = Vec::with_capacity(steps.len());
        for &step in steps {
            let order = epoch_order(train.len(), config.seed, cycle, step);
            let ctx = StepContext { data: &train, order: &order, batch_size: config.batch_size, weights: &weights };
            let l = match step {
                Step::Forward => step1_train_forward(net, &mut state.forward_optimizer, &ctx)?,
                Step::Feedback => step2_train_feedback(net, &mut state.feedback_optimizer, &ctx)?,
                Step::Decoder => step3_train_decoder(net, &mut state.forward_optimizer, &ctx)?,
            };
            losses.push((step, l));
        }
        net.set_frozen("all", false)?;
        let (val_loss, val_dice) = evaluate(net, &val, val_iters, config.batch_size, &weights)?;
        state.cycle = cycle;
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.cycles_since_improvement = 0;
            best = CheckpointBundle::capture(net, config, stats, cycle);
        } else {
            state.cycles_since_improvement += 1;
        }
        for (step, l) in losses {
            state.history.push(HistoryRow { cycle, step, train_loss: l, val_loss, val_dice });
        }
        state.cycles.push(CycleSummary { cycle, val_loss, val_dice, best_val_loss: state.best_val_loss });
        info!("cycle {cycle}: val loss {val_loss:.5}, val dice {val_dice:.4}");
        if state.cycles_since_improvement >= config.early_stop_patience {
            break;
        }
        if config.target_val_dice.is_some_and(|t| val_dice >= t) {
            break;
        }
    }
    Ok(TrainOutcome { state, best, stats })
}
