use std::time::Instant;

use lfbnet::arch::{LfbNet, ModelConfig};
use lfbnet::data::{generate, split_indices, Dataset, PhantomSpec};
use lfbnet::trainer::{train_loop, TrainConfig};

fn main() -> lfbnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let base: usize = args.get(1).map_or(16, |s| s.parse().unwrap());
    let latent: usize = args.get(2).map_or(64, |s| s.parse().unwrap());
    let cycles: usize = args.get(3).map_or(3, |s| s.parse().unwrap());
    let spec = PhantomSpec { seed: 1, ..Default::default() };
    let samples = generate(&spec, 200)?;
    let [tr, va, _] = split_indices(200, [0.7, 0.2, 0.1], 1)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let train = Dataset::from_samples(&pick(&tr), 4)?;
    let val = Dataset::from_samples(&pick(&va), 4)?;
    let cfg = ModelConfig {
        input_size: [64, 64],
        base_channels: base,
        latent_channels: latent,
        feedback_base_channels: base / 2,
        latent_repeats: 1,
        ..Default::default()
    };
    let mut net = LfbNet::new(cfg, 0)?;
    println!("params {}", net.train_parameter_count());
    let tc = TrainConfig { max_cycles: cycles, ..Default::default() };
    let t0 = Instant::now();
    let out = train_loop(&mut net, &train, &val, &tc)?;
    for c in &out.state.cycles {
        println!("{c:?}");
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
