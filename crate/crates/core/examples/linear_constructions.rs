//! Datasets other than the training set that a trained affine model is
//! equally optimal for: exact interpolation under squared error, and one
//! confidently classified sample repeated N times under logistic loss.

use recon::dataio::{partition_counts, synth_dataset};
use recon::linear_analysis::{
    check_stationarity, construct_collapse, construct_interpolating_inputs, push_to_margin, underdetermination_report,
    Instance, COLLAPSE_MARGIN,
};
use recon::model::{LossSpec, ModelSpec};
use recon::recon_gradpen::penalty;
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let split = partition_counts(&synth_dataset(24, 48, 1.0, 1)?, 12, 1)?;
    let data = split.train;
    let spec = ModelSpec::affine(48);
    let loss = LossSpec::logistic(1e-4);
    let star = train(&spec, &data, &loss, &TrainConfig::default())?.theta_star;

    println!("stationarity at θ*: {:.2e}", check_stationarity(&data, &star, &loss)?);
    let u = underdetermination_report(data.len(), data.dim(), 1, Some(Instance { data: &data, theta_star: &star, loss: &loss }))?;
    println!("{} equations, {} unknowns, dim ker(X̄ᵀ) = {}", u.n_equations, u.n_unknowns, u.kernel_dim_lower_bound);

    let x = construct_interpolating_inputs(&star, &data.labels, None)?;
    let p = penalty(&spec, &star, &data.with_inputs(x)?, &LossSpec::mse(0.0))?;
    println!("interpolating inputs: squared-error penalty {p:.2e}");

    let seed = split.holdout.inputs.row(0);
    let y = split.holdout.labels[0];
    let pushed = push_to_margin(&spec, &star, seed, y, COLLAPSE_MARGIN)?;
    let c = construct_collapse(&pushed, &spec, &star, y, data.len(), &loss.data_term(), COLLAPSE_MARGIN)?;
    let nearest = data
        .inputs
        .row_iter()
        .map(|r| recon::numcore::sq_dist(r, &pushed).sqrt())
        .fold(f64::INFINITY, f64::min);
    println!(
        "collapse: {} copies at margin {:.1}, penalty {:.2e}, nearest training row {nearest:.3}",
        c.data.len(),
        c.margin,
        c.penalty
    );
    Ok(())
}
