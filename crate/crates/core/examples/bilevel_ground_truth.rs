//! Bilevel attack started from the true training inputs: they are a fixed
//! point, so the attack hands them back unchanged.

use recon::dataio::{partition_counts, synth_dataset};
use recon::model::{Activation, LossSpec, ModelSpec};
use recon::pipeline::mean_abs_diff;
use recon::recon_bilevel::{reconstruct, ReconConfig};
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let data = partition_counts(&synth_dataset(24, 48, 1.0, 1)?, 12, 1)?.train;
    let loss = LossSpec::logistic(1e-4);
    for spec in [ModelSpec::affine(48), ModelSpec::one_hidden(48, 96, Activation::Softplus { beta: 20.0 })] {
        let star = train(&spec, &data, &loss, &TrainConfig::default())?.theta_star;
        let res = reconstruct(&spec, &star, &data.labels, &data.inputs, &loss, &ReconConfig::default())?;
        println!(
            "{} params: stop {:?} after {} iterations, theta_dist {:.2e}, mean |x_rec - x_gt| {:.2e}",
            spec.param_count(),
            res.stop_reason,
            res.iters,
            res.theta_dist,
            mean_abs_diff(&res.x_rec, &data.inputs)?
        );
    }
    Ok(())
}
