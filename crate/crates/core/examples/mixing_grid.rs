//! A 3×3 λ-grid of mixed initializations for the bilevel attack. Each cell
//! reports how far its reconstructions end up from the ground truth.

use recon::dataio::{partition_counts, synth_dataset};
use recon::evalmetrics::{grid_aggregate, GridReferences};
use recon::initsch::{grid, make_init, InitKind, InitScheme, InitSources, MixScheme};
use recon::model::{LossSpec, ModelSpec};
use recon::recon_bilevel::{reconstruct, ReconConfig};
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let split = partition_counts(&synth_dataset(24, 48, 1.0, 1)?, 12, 1)?;
    let data = split.train;
    let spec = ModelSpec::affine(48);
    let loss = LossSpec::logistic(1e-4);
    let star = train(&spec, &data, &loss, &TrainConfig::default())?.theta_star;

    let sources = InitSources { ground_truth: Some(&data), partition: Some(&split.holdout) };
    let init = |m: MixScheme| make_init(&InitScheme::new(InitKind::Mix(m), 1), data.inputs.shape(), sources).map(|o| o.x0);
    let schemes = grid(&[0.0, 0.5, 1.0])?;
    let mut runs = Vec::new();
    for &m in &schemes {
        let res = reconstruct(&spec, &star, &data.labels, &init(m)?, &loss, &ReconConfig::default())?;
        runs.push((m, res.x_rec));
    }
    let x_part = init(MixScheme::new(0.0, 1.0)?)?;
    let x_rnd = init(MixScheme::new(0.0, 0.0)?)?;
    let refs = GridReferences { ground_truth: &data.inputs, partition: &x_part, random: &x_rnd };
    println!("{:>4} {:>4} {:>8} {:>8} {:>8}", "λ1", "λ2", "to_gt", "to_part", "to_rnd");
    for c in grid_aggregate(&schemes, &runs, refs)? {
        println!(
            "{:>4} {:>4} {:>8.3} {:>8.3} {:>8.3}",
            c.lambda1, c.lambda2, c.avg_l2_to_gt, c.avg_l2_to_partition, c.avg_l2_to_random
        );
    }
    Ok(())
}
