//! `lora-dyn <subcommand> [flags]`
//!
//! Every subcommand accepts `--config <file.json>`; flags given on the
//! command line override the file. Exit codes: 0 success, 2 configuration
//! or I/O error, 3 numerical failure, 4 a check on the results failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lora_dyn::dynamics::TrainingMode;
use lora_dyn::harness::{run_experiment, verify, ExperimentConfig, ExperimentKind};
use lora_dyn::network::{CMode, NeuronScaling, WeightRegime};
use lora_dyn::Error;

#[derive(Parser)]
#[command(name = "lora-dyn", version, about = "Rank-1 fine-tuning dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Online SGD on one instance for every seed.
    RunSgd(Common),
    /// Weak-recovery times over a grid of xi.
    SweepXi(Common),
    /// Weak-recovery times over a list of activations.
    SweepActivation(Common),
    /// Desk-scale data for one of the five simulation figures.
    ReproduceFig {
        /// Figure number, 1 to 5.
        figure: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Closed form, series and Monte Carlo estimates of the drift.
    ValidateGradients(Common),
    /// Perturbed Gram check and fine-tuning on the hardness instance.
    HardnessDemo(Common),
    /// Second-layer fit on the learned direction and sign extraction.
    RecoverC(Common),
    /// Small-ball probabilities of h(0) over random signs.
    Anticonc(Common),
    /// Gradient moments against their worst-case bounds.
    ConditionSuite(Common),
    /// SGD with u partly inside span(W).
    OrthogonalityAblation(Common),
    /// Recompute the digests of a finished run.
    Verify {
        /// Run directory.
        dir: PathBuf,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Args, Default)]
struct Common {
    /// Base configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for run folders.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Instance JSON to load instead of generating one.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    xi_bar: Option<f64>,
    #[arg(long)]
    activation: Option<String>,
    /// orthonormal, random, separated or hardness.
    #[arg(long, value_parser = parse_enum::<WeightRegime>)]
    regime: Option<WeightRegime>,
    /// normalized, unnormalized or figure.
    #[arg(long, value_parser = parse_enum::<NeuronScaling>)]
    scaling: Option<NeuronScaling>,
    /// quantized or spherical.
    #[arg(long, value_parser = parse_enum::<CMode>)]
    c_mode: Option<CMode>,
    /// Norm of the component of u inside span(W).
    #[arg(long)]
    alpha: Option<f64>,
    /// New teacher per seed.
    #[arg(long)]
    fresh_instances: bool,
    #[arg(long)]
    eta: Option<f64>,
    /// Number of SGD steps.
    #[arg(long = "T", alias = "steps")]
    steps: Option<u64>,
    /// frozen_c, joint, linearized or linearized_joint.
    #[arg(long, value_parser = |s: &str| TrainingMode::parse(s).map_err(|e| e.to_string()))]
    mode: Option<TrainingMode>,
    /// orth_xi1, orth_frob or separated.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    log_stride: Option<u64>,
    /// Let u_hat leave span(W)^perp.
    #[arg(long)]
    unconstrained: bool,
    /// Flip u_0 when m_0 h(0) < 0.
    #[arg(long)]
    restart_on_sign: bool,
    /// Divide eta by E[sigma'(g)^2] of the activation.
    #[arg(long)]
    scale_eta: bool,
    /// Weak-recovery threshold (default 1/sqrt(2)).
    #[arg(long)]
    weak_threshold: Option<f64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    xi_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    activations: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    m_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gamma_grid: Option<Vec<f64>>,
    /// Monte Carlo samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    aligned_signs: bool,
    #[arg(long)]
    d_per_k: Option<usize>,
    /// Hardness demo horizon T = ceil(C d).
    #[arg(long)]
    budget_constant: Option<f64>,
    /// Learned direction, JSON array.
    #[arg(long)]
    u_hat: Option<PathBuf>,
    #[arg(long)]
    use_true_u: bool,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    fit_samples: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

impl Common {
    fn into_config(self, kind: ExperimentKind, figure: Option<u8>) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        c.kind = kind;
        c.figure = figure.or(c.figure);
        set!(c.out_dir, self.out);
        set!(c.root_seed, self.seed);
        set!(c.seeds, self.seeds);
        let inst = &mut c.instance;
        inst.path = self.instance.or(inst.path.take());
        set!(inst.k, self.k);
        set!(inst.d, self.d);
        if self.xi.is_some() {
            inst.xi = self.xi;
            inst.xi_bar = None;
        }
        if self.xi_bar.is_some() {
            inst.xi_bar = self.xi_bar;
            inst.xi = None;
        }
        set!(inst.activation, self.activation);
        set!(inst.regime, self.regime);
        set!(inst.scaling, self.scaling);
        set!(inst.c_mode, self.c_mode);
        set!(inst.alpha, self.alpha);
        inst.fresh_per_seed |= self.fresh_instances;
        let t = &mut c.training;
        t.eta = self.eta.or(t.eta);
        t.steps = self.steps.or(t.steps);
        t.schedule = self.schedule.or(t.schedule.take());
        set!(t.mode, self.mode);
        set!(t.epsilon, self.epsilon);
        set!(t.log_stride, self.log_stride);
        set!(t.weak_threshold, self.weak_threshold);
        set!(t.eval_samples, self.eval_samples);
        if self.unconstrained {
            t.constrain_subspace = false;
        }
        t.restart_on_sign |= self.restart_on_sign;
        t.scale_eta_by_activation |= self.scale_eta;
        set!(c.xi_grid, self.xi_grid);
        set!(c.activation_grid, self.activations);
        set!(c.alpha_grid, self.alpha_grid);
        set!(c.k_grid, self.k_grid);
        set!(c.m_grid, self.m_grid);
        set!(c.gamma_grid, self.gamma_grid);
        set!(c.mc_samples, self.samples);
        set!(c.trials, self.trials);
        c.aligned_signs |= self.aligned_signs;
        c.d_per_k = self.d_per_k.or(c.d_per_k);
        c.budget_constant = self.budget_constant.or(c.budget_constant);
        c.u_hat_path = self.u_hat.or(c.u_hat_path.take());
        c.use_true_u |= self.use_true_u;
        set!(c.ridge, self.ridge);
        c.fit_samples = self.fit_samples.or(c.fit_samples);
        c.grid_size = self.grid_size.or(c.grid_size);
        Ok(c)
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (common, kind, figure) = match cli.command {
        Command::Verify { dir } => {
            return match verify(&dir) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    if report.ok() { ExitCode::SUCCESS } else { ExitCode::from(4) }
                }
                Err(e) => fail(&e),
            };
        }
        Command::RunSgd(c) => (c, ExperimentKind::RunSgd, None),
        Command::SweepXi(c) => (c, ExperimentKind::SweepXi, None),
        Command::SweepActivation(c) => (c, ExperimentKind::SweepActivation, None),
        Command::ReproduceFig { figure, common } => (common, ExperimentKind::ReproduceFig, Some(figure)),
        Command::ValidateGradients(c) => (c, ExperimentKind::ValidateGradients, None),
        Command::HardnessDemo(c) => (c, ExperimentKind::HardnessDemo, None),
        Command::RecoverC(c) => (c, ExperimentKind::RecoverC, None),
        Command::Anticonc(c) => (c, ExperimentKind::Anticonc, None),
        Command::ConditionSuite(c) => (c, ExperimentKind::ConditionSuite, None),
        Command::OrthogonalityAblation(c) => (c, ExperimentKind::OrthogonalityAblation, None),
    };
    let config = match common.into_config(kind, figure) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run_experiment(&config) {
        Ok(outcome) => {
            let report = serde_json::json!({
                "dir": outcome.dir,
                "checks": outcome.checks,
                "summary": outcome.summary,
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("summary serializes"));
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("one or more checks failed");
                ExitCode::from(4)
            }
        }
        Err(e) => fail(&e),
    }
}
