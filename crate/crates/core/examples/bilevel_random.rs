//! Bilevel attack from U(0, 1) noise. The attack converges in weight space
//! while the inputs it finds stay far from every training sample.

use recon::dataio::{partition_counts, synth_dataset};
use recon::evalmetrics::{mean_nn_l2, nn_table};
use recon::initsch::{make_init, InitKind, InitScheme, InitSources};
use recon::model::{LossSpec, ModelSpec};
use recon::recon_bilevel::{reconstruct, ReconConfig};
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = partition_counts(&synth_dataset(24, 48, 1.0, seed)?, 12, seed)?.train;
    let spec = ModelSpec::affine(48);
    let loss = LossSpec::logistic(1e-4);
    let star = train(&spec, &data, &loss, &TrainConfig { seed, ..TrainConfig::default() })?.theta_star;

    let x0 = make_init(&InitScheme::new(InitKind::Uniform01, seed), data.inputs.shape(), InitSources::default())?.x0;
    let t = std::time::Instant::now();
    let res = reconstruct(&spec, &star, &data.labels, &x0, &loss, &ReconConfig::default())?;
    println!("seed {seed}: {:?} after {} iterations in {:.2?}", res.stop_reason, res.iters, t.elapsed());
    println!("theta_dist {:.2e}", res.theta_dist);
    println!("mean NN-L2 to training {:.3}, to the noise it started from {:.3}", mean_nn_l2(&res.x_rec, &data.inputs)?, mean_nn_l2(&res.x_rec, &x0)?);
    for r in nn_table(&res.x_rec, &data.inputs)?.iter().take(4) {
        println!("  recon {} -> nearest training row {} at {:.3}", r.recon_index, r.nn_index, r.l2);
    }
    Ok(())
}
