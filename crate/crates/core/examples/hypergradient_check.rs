//! Compare the implicit hypergradient against central differences of the
//! upper loss, re-solving the lower problem at every perturbed point.

use recon::model::{Activation, Dataset, LossSpec, ModelSpec, ParamVector};
use recon::numcore::{fd_grad, rel_error, Matrix, RngStream};
use recon::recon_bilevel::{hypergradient, solve_lower, CgConfig, UpperLoss};
use recon::trainer::TrainConfig;

fn main() -> recon::Result<()> {
    let mut rng = RngStream::new(7, 0);
    let (n, k) = (3, 4);
    let spec = ModelSpec::one_hidden(k, 5, Activation::Softplus { beta: 2.0 });
    let loss = LossSpec::logistic(1e-1);
    let y = vec![1.0, -1.0, 1.0];
    let x = rng.uniform_matrix(n, k);
    let theta_star = ParamVector::from_flat(&spec, rng.normal_vec(spec.param_count()))?;
    let lower = TrainConfig { grad_tol: 1e-13, ..TrainConfig::default() };
    let cg = CgConfig { damping: 0.0, tol: 1e-13, ..CgConfig::default() };

    let data = Dataset::new(x.clone(), y.clone())?;
    let theta_x = solve_lower(&spec, &data, &loss, &lower, &theta_star)?;
    let (a, _) = hypergradient(&spec, &theta_star, &data, &loss, &theta_x, UpperLoss::HalfSqDist, &cg)?;

    let upper = |flat: &[f64]| {
        let d = Dataset::new(Matrix::from_vec(n, k, flat.to_vec()).unwrap(), y.clone()).unwrap();
        let t = solve_lower(&spec, &d, &loss, &lower, &theta_x).unwrap();
        UpperLoss::HalfSqDist.value(theta_star.as_slice(), t.as_slice())
    };
    let fd = fd_grad(upper, x.as_slice(), 1e-5)?;
    for (i, (ai, fi)) in a.as_slice().iter().zip(&fd).enumerate().take(6) {
        println!("x[{}][{}]  implicit {ai:+.8e}  fd {fi:+.8e}", i / k, i % k);
    }
    println!("relative error over all {} entries: {:.2e}", fd.len(), rel_error(a.as_slice(), &fd, 1e-12));
    Ok(())
}
