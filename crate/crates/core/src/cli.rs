//! Command-line front end. Flags override a `--config` JSON file, which
//! overrides the built-in defaults; the merged tree is what the manifest
//! records.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Result;
use crate::model::LossKind;
use crate::pipeline::{
    output_root, replay, run_command, ActKind, ArchKind, Command, Construct, DataSource, InitChoice, RunConfig,
    RunOutcome,
};
use crate::recon_bilevel::Method;

#[derive(Debug, Parser)]
#[command(name = "recon", version, args_conflicts_with_subcommands = true)]
#[command(about = "Train small models and reconstruct their training data from the weights")]
pub struct Cli {
    /// Re-run the manifest of an earlier run and check its artifacts byte for byte
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,

    /// Output root directory [env: RECON_OUT_DIR] [default: runs]
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Sub>,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Train a model to a stationary point and write its weights
    Train(CommonArgs),
    /// Reconstruct training inputs from released weights
    Reconstruct {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Run the λ₁ × λ₂ initialization grid
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        attack: AttackArgs,
        /// λ values for both mixing weights
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Methods to run
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<MethodArg>>,
    },
    /// Stationarity residual, equation counts, and explicit constructions for an affine model
    LinearAnalysis {
        #[command(flatten)]
        common: CommonArgs,
        /// Weights file; trained in-process when omitted
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Constructions to build and verify
        #[arg(long, value_delimiter = ',')]
        construct: Option<Vec<ConstructArg>>,
        /// Logit margin required of the collapse seed
        #[arg(long)]
        margin: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON configuration file (partial trees are fine)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed
    #[arg(long, required_unless_present = "config")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<DataArg>,
    /// CIFAR-10 binary batch files
    #[arg(long = "cifar", value_name = "PATH")]
    pub cifar_paths: Vec<PathBuf>,
    /// CIFAR-10 classes for labels +1 and −1, e.g. `0,1`
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub classes: Option<Vec<u8>>,
    /// Training samples
    #[arg(long)]
    pub n: Option<usize>,
    /// Held-out samples
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Synthetic input dimension
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub arch: Option<ArchArg>,
    /// Hidden widths, comma separated
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<ActArg>,
    /// Softplus sharpness β
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub loss: Option<LossArg>,
    /// Weight decay ρ
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub newton_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Weights file; trained in-process when omitted
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub init: Option<InitArg>,
    /// Standard deviation for `--init gaussian`
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Bilevel step size η
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub stop_tol: Option<f64>,
    /// Damping μ of the inverse Hessian-vector product
    #[arg(long)]
    pub cg_damping: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Clip reconstructions to [0, 1] after every step
    #[arg(long)]
    pub project_box: bool,
    #[arg(long)]
    pub gp_lr: Option<f64>,
    #[arg(long)]
    pub gp_momentum: Option<f64>,
    #[arg(long)]
    pub gp_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataArg {
    Synth,
    Cifar,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Affine,
    OneHidden,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActArg {
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Logistic,
    Mse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Bilevel,
    Gradpen,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Random,
    Gaussian,
    Gt,
    Partition,
    Mix,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConstructArg {
    Collapse,
    Interpolate,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Bilevel => Method::Bilevel,
            MethodArg::Gradpen => Method::GradPen,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl CommonArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set(
            &mut c.data.source,
            self.data.map(|d| match d {
                DataArg::Synth => DataSource::Synth,
                DataArg::Cifar => DataSource::Cifar,
            }),
        );
        if !self.cifar_paths.is_empty() {
            c.data.cifar_paths = self.cifar_paths.clone();
        }
        set(&mut c.data.classes, self.classes.as_ref().map(|v| [v[0], v[1]]));
        set(&mut c.data.n, self.n);
        set(&mut c.data.holdout, self.holdout);
        set(&mut c.data.k, self.k);
        set(&mut c.data.separation, self.separation);
        set(
            &mut c.model.arch,
            self.arch.map(|a| match a {
                ArchArg::Affine => ArchKind::Affine,
                ArchArg::OneHidden => ArchKind::OneHidden,
                ArchArg::Mlp => ArchKind::Mlp,
            }),
        );
        set(&mut c.model.hidden, self.hidden.clone());
        set(
            &mut c.model.activation,
            self.activation.map(|a| match a {
                ActArg::Softplus => ActKind::Softplus,
                ActArg::Relu => ActKind::Relu,
            }),
        );
        set(&mut c.model.beta, self.beta);
        set(
            &mut c.model.loss,
            self.loss.map(|l| match l {
                LossArg::Logistic => LossKind::Logistic,
                LossArg::Mse => LossKind::Mse,
            }),
        );
        set(&mut c.model.weight_decay, self.weight_decay);
        set(&mut c.train.lr, self.lr);
        set(&mut c.train.momentum, self.momentum);
        set(&mut c.train.max_iters, self.max_iters);
        set(&mut c.train.grad_tol, self.grad_tol);
        set(&mut c.train.newton_steps, self.newton_steps);
        Ok(c)
    }
}

impl AttackArgs {
    fn apply(&self, c: &mut RunConfig) {
        if self.weights.is_some() {
            c.weights = self.weights.clone();
        }
        set(&mut c.recon.method, self.method.map(Method::from));
        set(
            &mut c.recon.init,
            self.init.map(|i| match i {
                InitArg::Random => InitChoice::Random,
                InitArg::Gaussian => InitChoice::Gaussian,
                InitArg::Gt => InitChoice::Gt,
                InitArg::Partition => InitChoice::Partition,
                InitArg::Mix => InitChoice::Mix,
            }),
        );
        set(&mut c.recon.sigma, self.sigma);
        set(&mut c.recon.lambda1, self.lambda1);
        set(&mut c.recon.lambda2, self.lambda2);
        let b = &mut c.recon.bilevel;
        set(&mut b.eta, self.eta);
        set(&mut b.outer_iters, self.outer_iters);
        set(&mut b.stop_tol, self.stop_tol);
        set(&mut b.cg.damping, self.cg_damping);
        set(&mut b.cg.tol, self.cg_tol);
        let g = &mut c.recon.gradpen;
        set(&mut g.lr, self.gp_lr);
        set(&mut g.momentum, self.gp_momentum);
        set(&mut g.iters, self.gp_iters);
        if self.project_box {
            c.recon.bilevel.project_box = true;
            c.recon.gradpen.project_box = true;
        }
    }
}

/// Resolves the command and its effective configuration.
pub fn resolve(sub: &Sub) -> Result<(Command, RunConfig)> {
    Ok(match sub {
        Sub::Train(common) => (Command::Train, common.config()?),
        Sub::Reconstruct { common, attack } => {
            let mut c = common.config()?;
            attack.apply(&mut c);
            (Command::Reconstruct, c)
        }
        Sub::Sweep { common, attack, lambdas, methods } => {
            let mut c = common.config()?;
            attack.apply(&mut c);
            set(&mut c.sweep.lambdas, lambdas.clone());
            set(&mut c.sweep.methods, methods.as_ref().map(|m| m.iter().copied().map(Method::from).collect()));
            (Command::Sweep, c)
        }
        Sub::LinearAnalysis { common, weights, construct, margin } => {
            let mut c = common.config()?;
            if weights.is_some() {
                c.weights = weights.clone();
            }
            set(
                &mut c.analysis.construct,
                construct.as_ref().map(|v| {
                    v.iter()
                        .map(|a| match a {
                            ConstructArg::Collapse => Construct::Collapse,
                            ConstructArg::Interpolate => Construct::Interpolate,
                        })
                        .collect()
                }),
            );
            set(&mut c.analysis.margin, *margin);
            (Command::LinearAnalysis, c)
        }
    })
}

fn execute(cli: &Cli) -> Result<RunOutcome> {
    let root = output_root(cli.out_dir.as_deref());
    if let Some(m) = &cli.replay {
        return replay(m, &root);
    }
    let sub = cli.command.as_ref().expect("checked by the caller");
    let (command, cfg) = resolve(sub)?;
    run_command(command, &cfg, &root)
}

/// Parses `args`, runs the command, and returns the process exit code:
/// 0 success, 2 usage or configuration, 3 numerical failure, 4 I/O.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.replay.is_none() && cli.command.is_none() {
        eprintln!("error: a subcommand or --replay is required (see --help)");
        return 2;
    }
    match execute(&cli) {
        Ok(out) => {
            println!("{}", out.dir.display());
            println!("{}", serde_json::to_string_pretty(&out.summary).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
