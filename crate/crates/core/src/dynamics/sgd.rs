//! The online SGD loop and its trajectory record.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gradient::{sample_gradient, sample_loss, spherical_projection, StudentForm};
use crate::error::{Error, Result};
use crate::network::{sample_c, CMode, StudentState, SubspaceProjector, TeacherModel};
use crate::population::{h_closed, PopulationParams};
use crate::rng::{fill_gaussian, streams, unit_vector, SeedTree};

/// Update norms below this are treated as a collapse of the iterate.
pub const DEGENERATE_NORM: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Only `u_hat` is trained; `c_hat` is a fixed random draw.
    #[default]
    FrozenC,
    /// `u_hat` and `c_hat` are trained together, `c_hat` on the unit sphere.
    Joint,
    /// Like `FrozenC`, but the student is linearized in the perturbation.
    Linearized,
    /// Like `Joint`, with the linearized student.
    LinearizedJoint,
}

impl TrainingMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "frozen_c" | "frozen" => Ok(TrainingMode::FrozenC),
            "joint" => Ok(TrainingMode::Joint),
            "linearized" | "linear" => Ok(TrainingMode::Linearized),
            "linearized_joint" => Ok(TrainingMode::LinearizedJoint),
            _ => Err(Error::invalid(format!(
                "unknown mode {name:?} (frozen_c, joint, linearized, linearized_joint)"
            ))),
        }
    }

    pub fn form(self) -> StudentForm {
        match self {
            TrainingMode::Linearized | TrainingMode::LinearizedJoint => StudentForm::Linearized,
            _ => StudentForm::Full,
        }
    }

    /// Whether `c_hat` is trained.
    pub fn trains_c(self) -> bool {
        matches!(self, TrainingMode::Joint | TrainingMode::LinearizedJoint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub steps: u64,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    pub constrain_subspace: bool,
    pub restart_on_sign: bool,
    pub log_stride: u64,
    /// Step size for `c_hat` in joint mode; defaults to `eta`.
    pub c_eta: Option<f64>,
    /// Weak-recovery threshold `r`.
    pub weak_threshold: f64,
    /// Size of a fixed evaluation batch scored at every logged step; 0 turns
    /// evaluation off.
    pub eval_samples: usize,
    /// Distribution of the initial `c_hat`.
    pub c_hat_mode: CMode,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            eta: 1e-3,
            steps: 1000,
            epsilon: 0.1,
            seed: 0,
            mode: TrainingMode::FrozenC,
            constrain_subspace: true,
            restart_on_sign: false,
            log_stride: 100,
            c_eta: None,
            weak_threshold: std::f64::consts::FRAC_1_SQRT_2,
            eval_samples: 0,
            c_hat_mode: CMode::Quantized,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.steps < 1 {
            return Err(Error::invalid("T must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.log_stride < 1 {
            return Err(Error::invalid("log stride must be at least 1"));
        }
        Ok(())
    }

    /// Strong-recovery crossing threshold `1 - epsilon/6`.
    pub fn strong_threshold(&self) -> f64 {
        1.0 - self.epsilon / 6.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    pub grad_norm: f64,
    /// `||u_t - eta grad||`.
    pub pi: f64,
    /// `<grad, u>`.
    pub grad_dot_u: f64,
}

/// One update: draws `x ~ N(0, I_d)`, steps along the spherical gradient,
/// renormalizes, and (when constrained) removes any span(W) drift.
pub fn sgd_step<R: Rng + ?Sized>(
    state: &mut StudentState,
    teacher: &TeacherModel,
    projector: Option<&SubspaceProjector>,
    eta: f64,
    mode: TrainingMode,
    c_eta: f64,
    rng: &mut R,
) -> Result<StepInfo> {
    let mut x = DVector::zeros(teacher.d());
    fill_gaussian(rng, x.as_mut_slice());
    let proj = if state.constrain_subspace { projector } else { None };
    let g = sample_gradient(teacher, state, proj, mode.form(), &x);
    let grad_norm = g.u_grad.norm();
    let grad_dot_u = g.u_grad.dot(&teacher.pert.u);
    let mut next = &state.u_hat - &g.u_grad * eta;
    let pi = next.norm();
    if !(pi >= DEGENERATE_NORM) {
        return Err(Error::DegenerateState { step: state.t, norm: pi });
    }
    next /= pi;
    if let Some(p) = proj {
        p.project_out_mut(&mut next);
        next.normalize_mut();
    }
    if mode.trains_c() {
        let mut cg = g.c_grad;
        spherical_projection(&mut cg, &state.c_hat, None);
        let mut c = &state.c_hat - cg * c_eta;
        let n = c.norm();
        if n >= DEGENERATE_NORM {
            c /= n;
            state.c_hat = c;
        }
    }
    state.u_hat = next;
    state.t += 1;
    Ok(StepInfo {
        loss: g.loss,
        grad_norm,
        pi,
        grad_dot_u,
    })
}

/// One logged row of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: u64,
    pub m_t: f64,
    pub c_overlap: f64,
    /// Loss on the sample consumed by the step leading to `t` (the first
    /// sample's loss at t = 0).
    pub loss_sample: f64,
    pub grad_norm: f64,
    pub pi_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub seed: u64,
    pub steps: u64,
    /// First t with |m_t| > r.
    pub tau_weak: Option<u64>,
    /// First t with |m_t| > 1 - epsilon/6.
    pub tau_strong: Option<u64>,
    pub initial_m: f64,
    pub final_m: f64,
    pub final_c_overlap: f64,
    pub restarted: bool,
    pub h0: Option<f64>,
    pub min_pi: f64,
    /// Mean loss over the evaluation batch at each logged row, if enabled.
    pub eval_loss: Vec<f64>,
}

impl TrajectorySummary {
    pub fn strong_recovery(&self, epsilon: f64) -> bool {
        self.final_m * self.final_m >= 1.0 - epsilon
    }

    /// Weak, then strong crossing, both before the horizon.
    pub fn ordered_crossings(&self) -> bool {
        matches!((self.tau_weak, self.tau_strong), (Some(a), Some(b)) if a < b && b < self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub config: SgdConfig,
    pub rows: Vec<TrajectoryRow>,
    pub summary: TrajectorySummary,
}

pub const TRAJECTORY_COLUMNS: [&str; 7] = ["run_id", "t", "m_t", "c_overlap", "loss_sample", "grad_norm", "pi_t"];

impl TrajectoryRecord {
    /// Writes the trajectory CSV with a header row. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                self.run_id.clone(),
                r.t.to_string(),
                r.m_t.to_string(),
                r.c_overlap.to_string(),
                r.loss_sample.to_string(),
                r.grad_norm.to_string(),
                r.pi_t.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Reads a trajectory CSV back into rows, checking the header.
pub fn read_trajectory_csv(text: &str) -> Result<(String, Vec<TrajectoryRow>)> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != TRAJECTORY_COLUMNS {
        return Err(Error::Format {
            what: "trajectory csv",
            detail: format!("unexpected header {:?}", header),
        });
    }
    let mut run_id = String::new();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Format {
                what: "trajectory csv",
                detail: format!("column {} is not a number: {:?}", TRAJECTORY_COLUMNS[i], &rec[i]),
            })
        };
        run_id = rec[0].to_string();
        rows.push(TrajectoryRow {
            t: rec[1].parse().map_err(|_| Error::Format {
                what: "trajectory csv",
                detail: format!("bad step {:?}", &rec[1]),
            })?,
            m_t: num(2)?,
            c_overlap: num(3)?,
            loss_sample: num(4)?,
            grad_norm: num(5)?,
            pi_t: num(6)?,
        });
    }
    Ok((run_id, rows))
}

/// Initial student: `u_0` uniform on the unit sphere of span(W)^perp
/// (constrained) or of R^d, and `c_hat` from `config.c_hat_mode`. With
/// `restart_on_sign`, `u_0` is flipped when `m_0 h(0) < 0`.
pub fn initial_state(
    teacher: &TeacherModel,
    projector: &SubspaceProjector,
    config: &SgdConfig,
    tree: &SeedTree,
) -> Result<(StudentState, bool, Option<f64>)> {
    let mut init = tree.stream(streams::INIT, 0);
    let u0 = if config.constrain_subspace {
        projector.sample_complement(&mut init)?
    } else {
        unit_vector(&mut init, teacher.d())
    };
    let c_hat = sample_c(teacher.k(), config.c_hat_mode, &mut tree.stream(streams::C_HAT, 0));
    let mut state = StudentState::new(u0, c_hat, config.constrain_subspace);
    let mut restarted = false;
    let mut h0 = None;
    if config.restart_on_sign {
        let params = PopulationParams::from_teacher(teacher, &state.c_hat)?;
        let h = h_closed(&params, 0.0)?.value;
        h0 = Some(h);
        if state.overlap(&teacher.pert.u) * h < 0.0 {
            state.u_hat = -state.u_hat;
            restarted = true;
        }
    }
    Ok((state, restarted, h0))
}

/// Runs SGD from a fresh initialization drawn from `tree`.
pub fn run_online_sgd(teacher: &TeacherModel, config: &SgdConfig, tree: &SeedTree, run_id: &str) -> Result<TrajectoryRecord> {
    config.validate()?;
    let projector = SubspaceProjector::from_rows(teacher.base.w());
    let (state, restarted, h0) = initial_state(teacher, &projector, config, tree)?;
    run_from(teacher, &projector, config, state, tree, run_id, restarted, h0)
}

/// Joint training of `(u_hat, c_hat)`.
pub fn run_joint_sgd(teacher: &TeacherModel, config: &SgdConfig, tree: &SeedTree, run_id: &str) -> Result<TrajectoryRecord> {
    if !config.mode.trains_c() {
        return Err(Error::invalid("run_joint_sgd needs a joint mode"));
    }
    run_online_sgd(teacher, config, tree, run_id)
}

/// Training of the linearized student.
pub fn run_linearized(teacher: &TeacherModel, config: &SgdConfig, tree: &SeedTree, run_id: &str) -> Result<TrajectoryRecord> {
    if config.mode.form() != StudentForm::Linearized {
        return Err(Error::invalid("run_linearized needs a linearized mode"));
    }
    run_online_sgd(teacher, config, tree, run_id)
}

/// Runs `config.steps` updates from `state`, drawing data from the `data`
/// stream of `tree`.
#[allow(clippy::too_many_arguments)]
pub fn run_from(
    teacher: &TeacherModel,
    projector: &SubspaceProjector,
    config: &SgdConfig,
    mut state: StudentState,
    tree: &SeedTree,
    run_id: &str,
    restarted: bool,
    h0: Option<f64>,
) -> Result<TrajectoryRecord> {
    config.validate()?;
    let u = &teacher.pert.u;
    let c = &teacher.pert.c;
    let c_norm = c.norm();
    let c_overlap = |s: &StudentState| if c_norm > 0.0 { s.c_hat.dot(c) / c_norm } else { 0.0 };
    let form = config.mode.form();
    let eval_batch: Vec<DVector<f64>> = {
        let mut rng = tree.stream(streams::EVAL, 0);
        (0..config.eval_samples)
            .map(|_| {
                let mut x = DVector::zeros(teacher.d());
                fill_gaussian(&mut rng, x.as_mut_slice());
                x
            })
            .collect()
    };
    let evaluate = |s: &StudentState| -> f64 {
        eval_batch.iter().map(|x| sample_loss(teacher, s, form, x)).sum::<f64>() / eval_batch.len() as f64
    };

    let mut data = tree.stream(streams::DATA, 0);
    let c_eta = config.c_eta.unwrap_or(config.eta);
    let initial_m = state.overlap(u);
    let initial_c_overlap = c_overlap(&state);
    let mut rows = Vec::new();
    let mut eval_loss = Vec::new();
    if !eval_batch.is_empty() {
        eval_loss.push(evaluate(&state));
    }
    let mut tau_weak = None;
    let mut tau_strong = None;
    let mut min_pi = f64::INFINITY;
    let mut check_crossings = |t: u64, m: f64| {
        if tau_weak.is_none() && m.abs() > config.weak_threshold {
            tau_weak = Some(t);
        }
        if tau_strong.is_none() && m.abs() > config.strong_threshold() {
            tau_strong = Some(t);
        }
    };
    check_crossings(0, initial_m);

    for t in 0..config.steps {
        let info = sgd_step(&mut state, teacher, Some(projector), config.eta, config.mode, c_eta, &mut data)?;
        min_pi = min_pi.min(info.pi);
        let m = state.overlap(u);
        check_crossings(t + 1, m);
        if t == 0 {
            // Row for the initial state, with the first sample's diagnostics.
            rows.push(TrajectoryRow {
                t: 0,
                m_t: initial_m,
                c_overlap: initial_c_overlap,
                loss_sample: info.loss,
                grad_norm: info.grad_norm,
                pi_t: info.pi,
            });
        }
        let step = t + 1;
        if step % config.log_stride == 0 || step == config.steps {
            rows.push(TrajectoryRow {
                t: step,
                m_t: m,
                c_overlap: c_overlap(&state),
                loss_sample: info.loss,
                grad_norm: info.grad_norm,
                pi_t: info.pi,
            });
            if !eval_batch.is_empty() {
                eval_loss.push(evaluate(&state));
            }
        }
    }
    Ok(TrajectoryRecord {
        run_id: run_id.to_string(),
        config: config.clone(),
        rows,
        summary: TrajectorySummary {
            seed: config.seed,
            steps: config.steps,
            tau_weak,
            tau_strong,
            initial_m,
            final_m: state.overlap(u),
            final_c_overlap: c_overlap(&state),
            restarted,
            h0,
            min_pi,
            eval_loss,
        },
    })
}
