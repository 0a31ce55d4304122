//! End-to-end run on CIFAR-10 batch files through the pipeline: train,
//! reconstruct from a partition init, and replay the reconstruction.
//!
//! ```text
//! cargo run --release --example cifar_pipeline -- data_batch_1.bin [more.bin]
//! ```
//!
//! Without arguments a small file of random records in the CIFAR-10 layout
//! is generated so the example runs offline. Inputs are 3072-dimensional, so
//! the defaults here use few samples and an affine model.

use std::path::PathBuf;

use recon::dataio::{CifarRecord, CIFAR_PIXELS};
use recon::numcore::RngStream;
use recon::pipeline::{self, DataSource, InitChoice, RunConfig, MANIFEST_FILE};

fn fake_batch(path: &PathBuf) -> std::io::Result<()> {
    let mut rng = RngStream::new(3, 0);
    let mut bytes = Vec::new();
    for i in 0..40u8 {
        let label = i % 2;
        let base = if label == 0 { 60.0 } else { 190.0 };
        let pixels = (0..CIFAR_PIXELS).map(|_| (base + 40.0 * rng.normal()).clamp(0.0, 255.0) as u8).collect();
        bytes.extend(CifarRecord { label, pixels }.to_bytes());
    }
    std::fs::write(path, bytes)
}

fn main() -> recon::Result<()> {
    let mut paths: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let out = std::env::temp_dir().join("recon-cifar-example");
    if paths.is_empty() {
        std::fs::create_dir_all(&out).map_err(|e| recon::Error::io(&out, e))?;
        let p = out.join("fake_batch.bin");
        fake_batch(&p).map_err(|e| recon::Error::io(&p, e))?;
        paths.push(p);
    }

    let mut cfg = RunConfig { seed: 5, ..RunConfig::default() };
    cfg.data.source = DataSource::Cifar;
    cfg.data.cifar_paths = paths;
    cfg.data.n = 4;
    cfg.data.holdout = 4;
    cfg.recon.init = InitChoice::Partition;
    cfg.recon.bilevel.outer_iters = 200;

    let trained = pipeline::cmd_train(&cfg, &out)?;
    println!("trained: {}", trained.dir.display());
    let run = pipeline::cmd_reconstruct(&cfg, &out)?;
    println!("reconstructed: {}", run.dir.display());
    for key in ["theta_dist", "stop_reason", "mean_nn_l2_train", "fraction_closer_to_init"] {
        println!("  {key}: {}", run.summary[key]);
    }
    let again = pipeline::replay(&run.dir.join(MANIFEST_FILE), &out)?;
    println!("replayed into {} with identical artifacts", again.dir.display());
    Ok(())
}
