//! Train an affine logistic model and a one-hidden Softplus net on the
//! synthetic blobs and report how well each converged.

use recon::dataio::{partition_counts, synth_dataset};
use recon::linear_analysis::check_stationarity;
use recon::model::{Activation, LossSpec, ModelSpec};
use recon::trainer::{train, TrainConfig};

fn main() -> recon::Result<()> {
    let all = synth_dataset(24, 48, 1.0, 1)?;
    let data = partition_counts(&all, 12, 1)?.train;
    let loss = LossSpec::logistic(1e-4);
    let cfg = TrainConfig::default();

    for spec in [ModelSpec::affine(48), ModelSpec::one_hidden(48, 96, Activation::Softplus { beta: 20.0 })] {
        let t = std::time::Instant::now();
        let r = train(&spec, &data, &loss, &cfg)?;
        println!(
            "{:>10}: {} params, converged {}, |grad| {:.2e}, {} iterations ({} Newton), energy {:.4e}, {:.2?}",
            if spec.is_affine() { "affine" } else { "one-hidden" },
            spec.param_count(),
            r.converged,
            r.final_grad_norm,
            r.iters_used,
            r.newton_steps_used,
            r.energy_trace.last().copied().unwrap_or(f64::NAN),
            t.elapsed()
        );
        if spec.is_affine() {
            println!("            stationarity residual {:.2e}", check_stationarity(&data, &r.theta_star, &loss)?);
        }
    }
    Ok(())
}
