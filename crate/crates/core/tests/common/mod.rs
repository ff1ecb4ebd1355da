#![allow(dead_code)]
pub mod oracles;
pub mod toy;

use lfbnet::engine::{Tape, Var};
use lfbnet::{Result, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_in(dims: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

/// `||a - b|| / max(||a||, ||b||)` over paired samples.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-14 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite-difference oracle for the gradient of
/// `sum(f(inputs) * probe)` with respect to every input, sampled at up to
/// `max_coords` coordinates per input. Returns the worst relative error.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor4], seed: u64, max_coords: usize) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-4;
    let mut r = rng(seed ^ 0x5eed);
    let probe_dims = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().cloned().map(Var::constant).collect();
        f(&mut tape, &vars).expect("forward").dims()
    };
    let probe = random_tensor(probe_dims, &mut r);
    let objective = |vals: &[Tensor4]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = vals.iter().cloned().map(Var::constant).collect();
        f(&mut tape, &vars).expect("forward").value().dot(&probe).unwrap()
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &leaves).expect("forward");
    let probe_var = tape.constant(probe.clone());
    let prod = tape.mul(&out, &probe_var).unwrap();
    let loss = tape.sum(&prod).unwrap();
    let grads = tape.gradients(&loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic_full = grads
            .get(&leaves[i])
            .cloned()
            .unwrap_or_else(|| Tensor4::zeros(input.dims()));
        let coords: Vec<usize> = if input.len() <= max_coords {
            (0..input.len()).collect()
        } else {
            (0..max_coords).map(|_| r.gen_range(0..input.len())).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &c in &coords {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[c] += H;
            let up = objective(&vals);
            vals[i].data_mut()[c] -= 2.0 * H;
            let down = objective(&vals);
            numeric.push((up - down) / (2.0 * H));
            analytic.push(analytic_full.data()[c]);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Central finite differences of a scalar network loss with respect to
/// `coords` randomly chosen entries of parameters under `prefix`. The caller
/// sets the freeze state; the loss is rebuilt on a recording tape for every
/// probe so batchnorm behaves as in training.
pub fn parameter_gradient_check<F>(net: &mut lfbnet::arch::LfbNet, prefix: &str, f: F, seed: u64, coords: usize) -> f64
where
    F: Fn(&lfbnet::arch::LfbNet, &mut Tape) -> Result<Var>,
{
    const H: f64 = 1e-5;
    let mut r = rng(seed ^ 0xfd);
    let mut tape = Tape::new();
    let loss = f(net, &mut tape).expect("loss");
    net.store_mut().zero_grad();
    tape.backward(&loss, net.store_mut()).expect("backward");

    let candidates: Vec<String> =
        net.store().params().filter(|p| p.name().starts_with(prefix)).map(|p| p.name().to_string()).collect();
    assert!(!candidates.is_empty(), "no parameters under {prefix}");
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..coords {
        let name = &candidates[r.gen_range(0..candidates.len())];
        let id = net.store().param_id(name).unwrap();
        let len = net.store().get(id).value().len();
        let c = r.gen_range(0..len);
        analytic.push(net.store().get(id).grad().map_or(0.0, |g| g.data()[c]));
        let mut eval = |delta: f64| {
            net.store_mut().get_mut(id).value_mut().data_mut()[c] += delta;
            let v = f(net, &mut Tape::new()).expect("loss").scalar().unwrap();
            net.store_mut().get_mut(id).value_mut().data_mut()[c] -= delta;
            v
        };
        numeric.push((eval(H) - eval(-H)) / (2.0 * H));
    }
    rel_error(&analytic, &numeric)
}
