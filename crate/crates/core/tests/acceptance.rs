//! Acceptance suite. Runs without the libtest harness so each criterion
//! prints exactly one line; the process exits nonzero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use recon::dataio::read_dataset_csv;
use recon::model::{
    energy, grad_theta, grad_x, hvp_theta, mixed_vjp, Activation, Dataset, DiffMode, LossSpec, ModelSpec, ParamVector,
};
use recon::numcore::{dot, fd_grad, fd_hvp, rel_error, Matrix, RngStream};
use recon::pipeline::{self, ArchKind, Construct, InitChoice, RunConfig, RunOutcome};
use recon::recon_bilevel::{hypergradient, CgConfig, Method, UpperLoss};
use recon::recon_gradpen::{penalty, penalty_grad};
use serde_json::Value;

const FIXTURE_SEED: u64 = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> recon::Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn fixture(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }
}

fn num(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or(f64::NAN)
}

fn within(t: Instant, limit: Duration) -> (bool, f64) {
    let s = t.elapsed().as_secs_f64();
    (s <= limit.as_secs_f64(), s)
}

/// Random smooth instance: one-hidden Softplus net, K ≤ 32, N ≤ 8, H ≤ 16.
fn random_instance(rng: &mut RngStream, case: usize) -> (ModelSpec, ParamVector, Dataset, LossSpec) {
    let k = 1 + rng.below(32);
    let n = 1 + rng.below(8);
    let h = 1 + rng.below(16);
    let beta = 0.5 + 4.5 * rng.uniform();
    let spec = ModelSpec::one_hidden(k, h, Activation::Softplus { beta });
    let theta: Vec<f64> = rng.normal_vec(spec.param_count()).iter().map(|v| 0.5 * v).collect();
    let theta = ParamVector::from_flat(&spec, theta).unwrap();
    let y: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.5 { 1.0 } else { -1.0 }).collect();
    let data = Dataset::new(rng.uniform_matrix(n, k), y).unwrap();
    let rho = 1e-3 * (1.0 + rng.uniform());
    let loss = if case % 4 == 3 { LossSpec::logistic(rho) } else { LossSpec::mse(rho) };
    (spec, theta, data, loss)
}

fn criterion_1() -> recon::Result<Verdict> {
    let t = Instant::now();
    let mut rng = RngStream::new(101, 0);
    let cases = 120;
    let mut worst = [0.0f64; 5];
    for case in 0..cases {
        let (spec, theta, data, loss) = random_instance(&mut rng, case);
        let (n, k) = data.inputs.shape();
        let th = theta.as_slice().to_vec();
        let with_theta = |flat: &[f64]| ParamVector::from_flat(&spec, flat.to_vec()).unwrap();
        let with_x = |flat: &[f64]| data.with_inputs(Matrix::from_vec(n, k, flat.to_vec()).unwrap()).unwrap();
        let floor = 1e-6;

        let g = grad_theta(&spec, &theta, &data, &loss)?;
        let fd = fd_grad(|p| energy(&spec, &with_theta(p), &data, &loss).unwrap(), &th, 1e-5)?;
        worst[0] = worst[0].max(rel_error(g.as_slice(), &fd, floor));

        let gx = grad_x(&spec, &theta, &data, &loss, DiffMode::Bilevel)?;
        let fd = fd_grad(|x| energy(&spec, &theta, &with_x(x), &loss).unwrap(), data.inputs.as_slice(), 1e-5)?;
        worst[1] = worst[1].max(rel_error(gx.as_slice(), &fd, floor));

        let v = ParamVector::from_flat(&spec, rng.normal_vec(spec.param_count()))?;
        let hv = hvp_theta(&spec, &theta, &data, &loss, &v, DiffMode::Bilevel)?;
        let fd = fd_hvp(|p| grad_theta(&spec, &with_theta(p), &data, &loss).unwrap().into_vec(), &th, v.as_slice(), 1e-5)?;
        worst[2] = worst[2].max(rel_error(hv.as_slice(), &fd, floor));

        let p = ParamVector::from_flat(&spec, rng.normal_vec(spec.param_count()))?;
        let m = mixed_vjp(&spec, &theta, &data, &loss, &p, DiffMode::Bilevel)?;
        let fd = fd_grad(
            |x| dot(grad_theta(&spec, &theta, &with_x(x), &loss).unwrap().as_slice(), p.as_slice()),
            data.inputs.as_slice(),
            1e-5,
        )?;
        worst[3] = worst[3].max(rel_error(m.as_slice(), &fd, floor));

        let (_, pg) = penalty_grad(&spec, &theta, &data, &loss, DiffMode::Bilevel)?;
        let fd = fd_grad(|x| penalty(&spec, &theta, &with_x(x), &loss).unwrap(), data.inputs.as_slice(), 1e-5)?;
        worst[4] = worst[4].max(rel_error(pg.as_slice(), &fd, floor));
    }
    let (fast, secs) = within(t, Duration::from_secs(60));
    let pass = worst[0] <= 1e-5 && worst[1] <= 1e-5 && worst[2..].iter().all(|&e| e <= 1e-4) && fast;
    verdict(
        pass,
        format!(
            "{cases} instances, worst rel err grad_theta {:.1e} grad_x {:.1e} hvp {:.1e} mixed_vjp {:.1e} penalty_grad {:.1e}, {secs:.1}s",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

/// `θ(x) = (X̄ᵀX̄/N + ρI)⁻¹ X̄ᵀy/N` for squared error on an affine model.
fn ridge_solution(x: &[f64], n: usize, k: usize, y: &[f64], rho: f64) -> DVector<f64> {
    let xb = DMatrix::from_fn(n, k + 1, |i, j| if j < k { x[i * k + j] } else { 1.0 });
    let a = xb.transpose() * &xb / n as f64 + DMatrix::identity(k + 1, k + 1) * rho;
    let b = xb.transpose() * DVector::from_column_slice(y) / n as f64;
    a.cholesky().expect("ridge system is positive definite").solve(&b)
}

fn criterion_2() -> recon::Result<Verdict> {
    let t = Instant::now();
    let mut rng = RngStream::new(202, 0);
    let cases = 60;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = 1 + rng.below(10);
        let n = 1 + rng.below(8);
        let rho = 10f64.powf(-2.0 + 2.0 * rng.uniform());
        let spec = ModelSpec::affine(k);
        let loss = LossSpec::mse(rho);
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let x = rng.uniform_matrix(n, k);
        let star = DVector::from_vec(rng.normal_vec(k + 1));
        let theta_star = ParamVector::from_flat(&spec, star.as_slice().to_vec())?;
        let theta_x = ParamVector::from_flat(&spec, ridge_solution(x.as_slice(), n, k, &y, rho).as_slice().to_vec())?;
        let data = Dataset::new(x.clone(), y.clone())?;
        let cg = CgConfig { max_iters: None, tol: 1e-13, damping: 0.0 };
        let (a, _) = hypergradient(&spec, &theta_star, &data, &loss, &theta_x, UpperLoss::HalfSqDist, &cg)?;
        let upper = |flat: &[f64]| 0.5 * (&star - ridge_solution(flat, n, k, &y, rho)).norm_squared();
        let fd = fd_grad(upper, x.as_slice(), 1e-6)?;
        worst = worst.max(rel_error(a.as_slice(), &fd, 1e-8));
    }
    let (fast, secs) = within(t, Duration::from_secs(60));
    verdict(worst <= 1e-4 && fast, format!("{cases} ridge instances, worst rel err {worst:.1e}, {secs:.1}s"))
}

fn reconstruct(root: &Path, cfg: &RunConfig) -> recon::Result<RunOutcome> {
    pipeline::cmd_reconstruct(cfg, root)
}

struct GtRuns {
    affine: RunOutcome,
    nn_l2: f64,
}

fn criterion_3(root: &Path) -> recon::Result<(Verdict, GtRuns)> {
    let t = Instant::now();
    let mut cfg = fixture(FIXTURE_SEED);
    cfg.recon.init = InitChoice::Gt;
    let affine = reconstruct(root, &cfg)?;
    let a = &affine.summary;
    let (a_diff, a_td) = (num(a, "mean_abs_diff_gt"), num(a, "theta_dist"));

    cfg.model.arch = ArchKind::OneHidden;
    let hidden = reconstruct(root, &cfg)?;
    let h = &hidden.summary;
    let (h_diff, h_td) = (num(h, "mean_abs_diff_gt"), num(h, "theta_dist"));
    let (fast, secs) = within(t, Duration::from_secs(300));
    let pass = a_diff <= 1e-3 && a_td <= 1e-3 && h_diff <= 1e-2 && h_td <= 1e-2 && fast;
    let nn_l2 = num(a, "mean_nn_l2_train");
    let v = Verdict {
        pass,
        detail: format!(
            "affine |dx| {a_diff:.2e} theta_dist {a_td:.2e}; one-hidden |dx| {h_diff:.2e} theta_dist {h_td:.2e}; {secs:.1}s"
        ),
    };
    Ok((v, GtRuns { affine, nn_l2 }))
}

fn criterion_4(root: &Path, gt: &GtRuns) -> recon::Result<Verdict> {
    let t = Instant::now();
    let mut cfg = fixture(FIXTURE_SEED);
    cfg.recon.init = InitChoice::Random;
    let out = reconstruct(root, &cfg)?;
    let td = num(&out.summary, "theta_dist");
    let nn = num(&out.summary, "mean_nn_l2_train");
    let pass = td <= 1e-2 && nn >= 10.0 * gt.nn_l2;
    verdict(
        pass,
        format!(
            "theta_dist {td:.2e}, NN-L2 to training {nn:.3} vs GT run {:.2e} (ratio {}), stop {}; {:.1}s",
            gt.nn_l2,
            if gt.nn_l2 > 0.0 { format!("{:.1e}", nn / gt.nn_l2) } else { "unbounded".into() },
            out.summary["stop_reason"],
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_5(root: &Path) -> recon::Result<Verdict> {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for method in [Method::Bilevel, Method::GradPen] {
        let mut cfg = fixture(FIXTURE_SEED);
        cfg.recon.init = InitChoice::Partition;
        cfg.recon.method = method;
        let out = reconstruct(root, &cfg)?;
        let frac = num(&out.summary, "fraction_closer_to_init");
        pass &= frac >= 0.8;
        parts.push(format!("{method:?} {frac:.2} (theta_dist {:.1e})", num(&out.summary, "theta_dist")));
    }
    verdict(pass, format!("closer to init: {}; {:.1}s", parts.join(", "), t.elapsed().as_secs_f64()))
}

fn criterion_6(root: &Path) -> recon::Result<(Verdict, RunOutcome)> {
    let t = Instant::now();
    let mut cfg = fixture(FIXTURE_SEED);
    cfg.analysis.construct = vec![Construct::Collapse, Construct::Interpolate];
    let out = pipeline::cmd_linear_analysis(&cfg, root)?;
    let s = &out.summary;
    let stat = num(s, "stationarity_residual");
    let collapse = num(&s["collapse"], "penalty");
    let interp = num(&s["interpolation"], "penalty");
    let dist = num(&s["collapse"], "nn_distance");
    let bound = 0.1 * (cfg.data.k as f64).sqrt();

    // independent re-check of the collapse rows against every training row
    let data = read_dataset_csv(&out.dir.join("collapse.csv"))?;
    let train = read_dataset_csv(&train_csv(root)?)?;
    let min_dist = data
        .inputs
        .row_iter()
        .flat_map(|r| train.inputs.row_iter().map(move |t| recon::numcore::sq_dist(r, t).sqrt()))
        .fold(f64::INFINITY, f64::min);

    let (fast, secs) = within(t, Duration::from_secs(30));
    let pass = interp <= 1e-12 && collapse <= 1e-12 && dist >= bound && min_dist >= bound && stat <= 1e-6 && fast;
    let v = Verdict {
        pass,
        detail: format!(
            "interpolation penalty {interp:.1e}, collapse penalty {collapse:.1e}, NN distance {min_dist:.3} (bound {bound:.3}), stationarity {stat:.1e}; {secs:.1}s"
        ),
    };
    Ok((v, out))
}

/// Writes the fixture's training split once (via `train`) and returns its CSV.
fn train_csv(root: &Path) -> recon::Result<std::path::PathBuf> {
    let out = pipeline::cmd_train(&fixture(FIXTURE_SEED), &root.join("fixture"))?;
    Ok(out.dir.join("train.csv"))
}

fn read_grid(path: &Path) -> recon::Result<Vec<[f64; 3]>> {
    let text = std::fs::read_to_string(path).map_err(|e| recon::Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect();
            [f[0], f[1], f[2]]
        })
        .collect())
}

fn criterion_7(root: &Path) -> recon::Result<(Verdict, RunOutcome)> {
    let t = Instant::now();
    let out = pipeline::cmd_sweep(&fixture(FIXTURE_SEED), root)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["bilevel", "gradpen"] {
        let cells = read_grid(&out.dir.join(format!("grid_{name}.csv")))?;
        let at = |l1: f64, l2: f64| cells.iter().find(|c| c[0] == l1 && c[1] == l2).map_or(f64::NAN, |c| c[2]);
        let corner = at(1.0, 1.0);
        let worst_zero = cells.iter().filter(|c| c[1] == 0.0).map(|c| c[2]).fold(f64::INFINITY, f64::min);
        let mut row: Vec<&[f64; 3]> = cells.iter().filter(|c| c[0] == 1.0).collect();
        row.sort_by(|a, b| a[1].total_cmp(&b[1]));
        let monotone = row.windows(2).all(|w| w[1][2] <= w[0][2] * 1.05);
        let ok = cells.len() == 25 && corner <= worst_zero && monotone;
        pass &= ok;
        let trend: Vec<String> = row.iter().map(|c| format!("{:.3}", c[2])).collect();
        parts.push(format!(
            "{name} {} cells, (1,1) {corner:.2e} vs min over λ2=0 {worst_zero:.3}, λ1=1 row [{}]",
            cells.len(),
            trend.join(" ")
        ));
    }
    let (fast, secs) = within(t, Duration::from_secs(900));
    let v = Verdict { pass: pass && fast, detail: format!("{}; {secs:.1}s", parts.join("; ")) };
    Ok((v, out))
}

fn criterion_8(root: &Path, runs: &[&RunOutcome]) -> recon::Result<Verdict> {
    let t = Instant::now();
    let train = pipeline::cmd_train(&fixture(FIXTURE_SEED), root)?;
    let mut all: Vec<&RunOutcome> = vec![&train];
    all.extend_from_slice(runs);
    let replay_root = root.join("replay");
    let mut checked = Vec::new();
    for run in &all {
        let replayed = pipeline::replay(&run.dir.join(pipeline::MANIFEST_FILE), &replay_root)?;
        // replay already errors on a hash mismatch; compare the bytes as well
        for name in run.manifest.artifacts.keys().filter(|n| n.ends_with(".csv") || n.ends_with(".bin")) {
            let a = std::fs::read(run.dir.join(name)).map_err(|e| recon::Error::io(name, e))?;
            let b = std::fs::read(replayed.dir.join(name)).map_err(|e| recon::Error::io(name, e))?;
            if a != b {
                return verdict(false, format!("{} differs after replaying {}", name, run.manifest.command.name()));
            }
        }
        checked.push(run.manifest.command.name());
    }
    let commands: std::collections::BTreeSet<&str> = all.iter().map(|r| r.manifest.command.name()).collect();
    verdict(
        commands.len() == 4,
        format!("replayed {} byte-identically; {:.1}s", checked.join(", "), t.elapsed().as_secs_f64()),
    )
}

fn report(n: usize, r: recon::Result<Verdict>, failed: &mut usize) {
    match r {
        Ok(v) => {
            if !v.pass {
                *failed += 1;
            }
            println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        }
        Err(e) => {
            *failed += 1;
            println!("criterion {n}: FAIL error: {e}");
        }
    }
}

fn split<T>(r: recon::Result<(Verdict, T)>) -> (recon::Result<Verdict>, Option<T>) {
    match r {
        Ok((v, t)) => (Ok(v), Some(t)),
        Err(e) => (Err(e), None),
    }
}

fn main() {
    // `cargo test -- --list` and friends probe test binaries
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut failed = 0;

    report(1, criterion_1(), &mut failed);
    report(2, criterion_2(), &mut failed);
    let (v3, gt) = split(criterion_3(root));
    report(3, v3, &mut failed);
    let v4 = match &gt {
        Some(gt) => criterion_4(root, gt),
        None => Err(recon::Error::Config("criterion 3 produced no reference run".into())),
    };
    report(4, v4, &mut failed);
    report(5, criterion_5(root), &mut failed);
    let (v6, analysis) = split(criterion_6(root));
    report(6, v6, &mut failed);
    let (v7, sweep) = split(criterion_7(root));
    report(7, v7, &mut failed);
    let v8 = match (&gt, &analysis, &sweep) {
        (Some(gt), Some(a), Some(s)) => criterion_8(root, &[&gt.affine, a, s]),
        _ => Err(recon::Error::Config("an earlier criterion produced no run to replay".into())),
    };
    report(8, v8, &mut failed);

    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
