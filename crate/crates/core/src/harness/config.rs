use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ScheduleConstants, SgdConfig, TrainingMode};
use crate::error::{Error, Result};
use crate::network::{CMode, NeuronScaling, WeightRegime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RunSgd,
    SweepXi,
    SweepActivation,
    ReproduceFig,
    ValidateGradients,
    HardnessDemo,
    RecoverC,
    Anticonc,
    ConditionSuite,
    OrthogonalityAblation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RunSgd => "run-sgd",
            ExperimentKind::SweepXi => "sweep-xi",
            ExperimentKind::SweepActivation => "sweep-activation",
            ExperimentKind::ReproduceFig => "reproduce-fig",
            ExperimentKind::ValidateGradients => "validate-gradients",
            ExperimentKind::HardnessDemo => "hardness-demo",
            ExperimentKind::RecoverC => "recover-c",
            ExperimentKind::Anticonc => "anticonc",
            ExperimentKind::ConditionSuite => "condition-suite",
            ExperimentKind::OrthogonalityAblation => "orthogonality-ablation",
        }
    }
}

/// How to obtain the teacher: read from `path`, or generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub path: Option<PathBuf>,
    pub k: usize,
    pub d: usize,
    pub xi: Option<f64>,
    /// `xi = xi_bar sqrt(k)`; exclusive with `xi`.
    pub xi_bar: Option<f64>,
    pub activation: String,
    pub regime: WeightRegime,
    pub scaling: NeuronScaling,
    pub c_mode: CMode,
    /// `||P_W u||`; 0 keeps `u` orthogonal to the base rows.
    pub alpha: f64,
    /// Draw a new teacher for every seed instead of sharing one.
    pub fresh_per_seed: bool,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            path: None,
            k: 25,
            d: 500,
            xi: None,
            xi_bar: None,
            activation: "relu".into(),
            regime: WeightRegime::Orthonormal,
            scaling: NeuronScaling::Normalized,
            c_mode: CMode::Quantized,
            alpha: 0.0,
            fresh_per_seed: false,
        }
    }
}

impl InstanceSpec {
    pub fn xi(&self) -> f64 {
        match (self.xi, self.xi_bar) {
            (Some(xi), _) => xi,
            (None, Some(bar)) => bar * (self.k as f64).sqrt(),
            (None, None) => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.path {
            if !p.exists() {
                return Err(Error::invalid(format!("instance file {} does not exist", p.display())));
            }
            return Ok(());
        }
        if self.xi.is_some() && self.xi_bar.is_some() {
            return Err(Error::invalid("give xi or xi_bar, not both"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be positive"));
        }
        if self.regime != WeightRegime::Hardness && self.d <= self.k {
            return Err(Error::invalid(format!("need d > k, got k={}, d={}", self.k, self.d)));
        }
        if !(self.xi() >= 0.0) || !self.xi().is_finite() {
            return Err(Error::invalid("xi must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1)"));
        }
        if self.regime == WeightRegime::Custom {
            return Err(Error::invalid("custom weights must come from an instance file"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub eta: Option<f64>,
    pub steps: Option<u64>,
    /// Theorem schedule to take `(eta, T)` from: orth_xi1, orth_frob or
    /// separated. Explicit `eta` / `steps` override it.
    pub schedule: Option<String>,
    pub constants: ScheduleConstants,
    pub epsilon: f64,
    pub mode: TrainingMode,
    pub constrain_subspace: bool,
    pub restart_on_sign: bool,
    pub log_stride: u64,
    pub c_eta: Option<f64>,
    pub weak_threshold: f64,
    pub eval_samples: usize,
    pub c_hat_mode: CMode,
    /// Success threshold on the final `m_T^2`.
    pub success_m2: f64,
    /// Divide `eta` by `E[sigma'(g)^2]` so activations of very different
    /// scale see comparable gradient magnitudes.
    pub scale_eta_by_activation: bool,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainingSpec {
            eta: None,
            steps: None,
            schedule: None,
            constants: ScheduleConstants::default(),
            epsilon: sgd.epsilon,
            mode: sgd.mode,
            constrain_subspace: sgd.constrain_subspace,
            restart_on_sign: sgd.restart_on_sign,
            log_stride: sgd.log_stride,
            c_eta: None,
            weak_threshold: sgd.weak_threshold,
            eval_samples: 0,
            c_hat_mode: sgd.c_hat_mode,
            success_m2: 0.9,
            scale_eta_by_activation: false,
        }
    }
}

impl TrainingSpec {
    /// SGD settings with explicit `(eta, steps)`.
    pub fn sgd_config(&self, eta: f64, steps: u64, seed: u64) -> SgdConfig {
        SgdConfig {
            eta,
            steps,
            epsilon: self.epsilon,
            seed,
            mode: self.mode,
            constrain_subspace: self.constrain_subspace,
            restart_on_sign: self.restart_on_sign,
            log_stride: self.log_stride,
            c_eta: self.c_eta,
            weak_threshold: self.weak_threshold,
            eval_samples: self.eval_samples,
            c_hat_mode: self.c_hat_mode,
        }
    }
}

/// Everything an experiment needs. Serialized (with sorted keys) as the
/// config echo of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Figure number for `reproduce-fig`.
    pub figure: Option<u8>,
    pub instance: InstanceSpec,
    pub training: TrainingSpec,
    pub root_seed: u64,
    pub seeds: usize,
    pub xi_grid: Vec<f64>,
    pub activation_grid: Vec<String>,
    pub alpha_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub m_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// Monte Carlo sample count.
    pub mc_samples: usize,
    /// Random draws for anticoncentration, random directions for the
    /// condition suite.
    pub trials: usize,
    /// Condition suite: use `c = c_hat = 1/sqrt(k)` (the worst case of the
    /// variance bound) instead of random signs.
    pub aligned_signs: bool,
    /// Condition suite: `d = d_per_k * k` for each grid point.
    pub d_per_k: Option<usize>,
    /// Hardness demo: `T = ceil(budget_constant * d)`.
    pub budget_constant: Option<f64>,
    /// Recovery: learned direction (JSON array of floats).
    pub u_hat_path: Option<PathBuf>,
    pub use_true_u: bool,
    pub ridge: f64,
    pub fit_samples: Option<usize>,
    /// Quantization grid size for general `c`; off when unset.
    pub grid_size: Option<usize>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::RunSgd,
            figure: None,
            instance: InstanceSpec::default(),
            training: TrainingSpec::default(),
            root_seed: 0,
            seeds: 1,
            xi_grid: Vec::new(),
            activation_grid: Vec::new(),
            alpha_grid: Vec::new(),
            k_grid: Vec::new(),
            m_grid: Vec::new(),
            gamma_grid: Vec::new(),
            mc_samples: 200_000,
            trials: 10_000,
            aligned_signs: false,
            d_per_k: None,
            budget_constant: None,
            u_hat_path: None,
            use_true_u: false,
            ridge: crate::recovery::DEFAULT_RIDGE,
            fit_samples: None,
            grid_size: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Canonical JSON: sorted keys, pretty printed, trailing newline.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        if self.seeds == 0 {
            return Err(Error::invalid("seed count must be at least 1"));
        }
        self.instance.validate()?;
        let t = &self.training;
        if !(t.epsilon > 0.0 && t.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if t.log_stride == 0 {
            return Err(Error::invalid("log_stride must be positive"));
        }
        let needs_training = matches!(
            self.kind,
            RunSgd | SweepXi | SweepActivation | HardnessDemo | OrthogonalityAblation
        );
        if needs_training && t.schedule.is_none() && (t.eta.is_none() || (t.steps.is_none() && self.budget_constant.is_none())) {
            return Err(Error::invalid("give eta and steps, or a schedule"));
        }
        if let Some(eta) = t.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::invalid("eta must be finite and >= 0"));
            }
        }
        match self.kind {
            SweepXi if self.xi_grid.is_empty() => Err(Error::invalid("xi grid is empty")),
            SweepActivation if self.activation_grid.is_empty() => Err(Error::invalid("activation grid is empty")),
            OrthogonalityAblation if self.alpha_grid.is_empty() => Err(Error::invalid("alpha grid is empty")),
            OrthogonalityAblation if self.alpha_grid.iter().any(|a| !(0.0..1.0).contains(a)) => {
                Err(Error::invalid("alpha grid must lie in [0, 1)"))
            }
            ReproduceFig if !matches!(self.figure, Some(1..=5)) => Err(Error::invalid("figure must be 1 to 5")),
            ConditionSuite if self.mc_samples < crate::dynamics::MIN_CONDITION_SAMPLES => {
                Err(Error::invalid("condition suite needs mc_samples >= 10000"))
            }
            RecoverC if !self.use_true_u && self.u_hat_path.is_none() => {
                Err(Error::invalid("recover-c needs u_hat_path or use_true_u"))
            }
            RecoverC if self.u_hat_path.as_ref().is_some_and(|p| !p.exists()) => {
                Err(Error::invalid("u_hat file does not exist"))
            }
            HardnessDemo if self.instance.k < 2 => Err(Error::invalid("hardness instance needs k >= 2")),
            _ => Ok(()),
        }
    }
}
