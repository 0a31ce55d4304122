//! Both attacks started from held-out samples of the same distribution.
//! Reconstructions stay next to the images they started from.

use recon::dataio::{partition_counts, synth_dataset};
use recon::evalmetrics::fraction_closer_to_init;
use recon::initsch::{make_init, InitKind, InitScheme, InitSources};
use recon::model::{LossSpec, ModelSpec};
use recon::recon_bilevel::{reconstruct, ReconConfig};
use recon::recon_gradpen::{penalty, reconstruct_gradpen, GradPenConfig};
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let split = partition_counts(&synth_dataset(24, 48, 1.0, 1)?, 12, 1)?;
    let (data, holdout) = (split.train, split.holdout);
    let spec = ModelSpec::affine(48);
    let loss = LossSpec::logistic(1e-4);
    let star = train(&spec, &data, &loss, &TrainConfig::default())?.theta_star;

    let sources = InitSources { ground_truth: Some(&data), partition: Some(&holdout) };
    let init = make_init(&InitScheme::new(InitKind::Partition, 1), data.inputs.shape(), sources)?;
    println!("holdout rows used: {:?}", init.assignment.unwrap_or_default());

    let gp = reconstruct_gradpen(&spec, &star, &data.labels, &init.x0, &loss, &GradPenConfig::default())?;
    let before = penalty(&spec, &star, &data.with_inputs(init.x0.clone())?, &loss)?;
    let after = gp.trace.last().map_or(f64::NAN, |r| r.objective);
    println!(
        "gradpen: penalty {before:.2e} -> {after:.2e}, closer to init {:.2}",
        fraction_closer_to_init(&gp.x_rec, &init.x0, &data.inputs)?
    );

    let bl = reconstruct(&spec, &star, &data.labels, &init.x0, &loss, &ReconConfig::default())?;
    println!(
        "bilevel: theta_dist {:.2e}, closer to init {:.2}",
        bl.theta_dist,
        fraction_closer_to_init(&bl.x_rec, &init.x0, &data.inputs)?
    );
    Ok(())
}
