//! Quadratic iteration scheme on doubling Galerkin scales.
//!
//! The solver runs stages `n = 0, 1, 2, ...` at truncation scales
//! `N_n = N0^(2^n)`.  Each stage solves the projected equation on the next
//! scale by a chord-Newton fixed point preconditioned with the inverse of
//! the linearized operator at the current iterate, assembled either
//! densely or through the multiscale inversion.  Stage diagnostics track
//! the scheme's certified invariants; at desk scale most asymptotic
//! bounds are advisory and recorded rather than enforced.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay_matrix::Basis;
use crate::index_space::{SeqVec, Site};
use crate::multiscale::{
    certify_matrix_n_good, multiscale_inverse, LedgerItem, MultiscaleParams,
};
use crate::pde_instances::{eval_f, linearize, reality_defect, PDEProblem};
use crate::spectral_model::SpectralModel;

#[derive(Debug, Error)]
pub enum NashMoserError {
    #[error("linearized operator could not be inverted at stage {stage}: {detail}")]
    InverseFailed { stage: usize, in_a: bool, detail: String },
    #[error("contraction diverged at stage {stage} (step growth {factor})")]
    Diverged { stage: usize, factor: f64 },
}

/// Which inverse feeds the chord-Newton preconditioner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InverseStrategy {
    Dense,
    Multiscale,
}

/// Structural invariant enforced on the iterates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardKind {
    None,
    /// Real-valued solutions: coefficients conjugate-symmetric under
    /// `k -> -k`.
    RealSymmetry,
    /// Doubled systems: the second component is the conjugate of the
    /// first.
    ConjugatePair,
}

/// Measure how far an iterate strays from the guarded subspace.
pub fn invariant_subspace_guard(u: &SeqVec, guard: GuardKind) -> f64 {
    match guard {
        GuardKind::None => 0.0,
        GuardKind::RealSymmetry => {
            let mut worst = 0.0f64;
            for (k, b) in &u.entries {
                let neg = Site::new(
                    k.l.iter().map(|x| -x).collect(),
                    crate::index_space::LatticePoint::new(
                        k.j.coords.iter().map(|x| -x).collect(),
                    ),
                    k.a,
                );
                let other = u.get(&neg);
                for (i, c) in b.iter().enumerate() {
                    let o = other.map(|v| v[i]).unwrap_or(Complex64::new(0.0, 0.0));
                    worst = worst.max((c - o.conj()).norm());
                }
            }
            worst
        }
        GuardKind::ConjugatePair => reality_defect(u),
    }
}

/// Iteration configuration: scales, exponents, targets and the embedded
/// inversion parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashMoserConfig {
    pub n0: i64,
    pub sigma: f64,
    pub nu: f64,
    pub s1: f64,
    /// Top Sobolev index for the high norm diagnostics.
    pub s_cap: f64,
    pub lambdas: Vec<f64>,
    pub max_stages: usize,
    pub residual_target: f64,
    pub contraction_tol: f64,
    /// Largest active-window radius used for the linear solves; the
    /// residual is still measured at the full truncation scale.
    pub active_cap: i64,
    /// Accepted constant in the smallness requirement `eps N0^S <= c`.
    pub smallness_c: f64,
    pub guard: GuardKind,
    pub strategy: InverseStrategy,
    pub params: MultiscaleParams,
}

impl NashMoserConfig {
    pub fn desk(lambdas: Vec<f64>) -> Self {
        NashMoserConfig {
            n0: 8,
            sigma: 6.0,
            nu: 2.0,
            s1: 6.0,
            s_cap: 12.0,
            lambdas,
            max_stages: 8,
            residual_target: 1e-10,
            contraction_tol: 1e-13,
            active_cap: 12,
            smallness_c: 1.0,
            guard: GuardKind::None,
            strategy: InverseStrategy::Dense,
            params: MultiscaleParams::desk(2),
        }
    }

    /// Linear-solve loss exponent `mu = tau + delta s1`.
    pub fn mu(&self) -> f64 {
        self.params.tau + self.params.delta * self.s1
    }

    /// Evaluate the scheme's exponent constraints and the smallness
    /// requirement for a given forcing amplitude.
    pub fn ledger_check(&self, epsilon: f64) -> Vec<LedgerItem> {
        let a = self.mu(); // tau + delta s1
        let lower = (2.0 * a + 3.0 * self.nu + 2.0).max(4.0 * (a + self.nu));
        let gap = self.s_cap - self.s1;
        let gap_lower = 2.0 * (2.0 * a + self.nu + 3.0 + self.sigma);
        let gap_upper = 4.0 * (self.sigma + 1.0);
        let small = epsilon * (self.n0 as f64).powf(self.s_cap);
        vec![
            LedgerItem {
                name: "sigma >= max(2(tau+delta*s1)+3nu+2, 4(tau+delta*s1+nu))".into(),
                lhs: self.sigma,
                rhs: lower,
                satisfied: self.sigma >= lower,
            },
            LedgerItem {
                name: "2(2(tau+delta*s1)+nu+3+sigma) <= S - s1".into(),
                lhs: gap_lower,
                rhs: gap,
                satisfied: gap_lower <= gap,
            },
            LedgerItem {
                name: "S - s1 <= 4(sigma+1)".into(),
                lhs: gap,
                rhs: gap_upper,
                satisfied: gap <= gap_upper,
            },
            LedgerItem {
                name: "eps * N0^S <= c".into(),
                lhs: small,
                rhs: self.smallness_c,
                satisfied: small <= self.smallness_c,
            },
        ]
    }
}

/// `N_n = N0^(2^n)`, saturating on overflow.
pub fn stage_scale(n0: i64, stage: u32) -> i64 {
    let mut v = n0;
    for _ in 0..stage {
        v = v.saturating_mul(v);
    }
    v
}

/// Per-stage diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub scale: i64,
    pub active_radius: i64,
    pub contraction_iters: usize,
    pub residual_s1: f64,
    pub residual_cap: f64,
    pub step_s1: f64,
    pub u_s1: f64,
    /// `B_n = 1 + |u|_S`.
    pub b_n: f64,
    /// Membership in the good parameter set: the linearized operator at
    /// this stage certifies as scale-good.
    pub in_a: bool,
    /// `|u|_s1 <= 1`.
    pub s1_ok: bool,
    /// Step bound `|u_n - u_{n-1}|_s1 <= N_n^{-sigma-1}` (advisory).
    pub s2_ok: bool,
    /// High-norm growth `B_n <= 2 N_{n+1}^p` with `p = mu + nu/2 + 1`
    /// (advisory).
    pub s4_ok: bool,
    pub guard_defect: f64,
}

/// Solver state for one parameter value: the completed stage count and
/// the current iterate.
#[derive(Clone, Debug)]
pub struct IterationState {
    pub stage: usize,
    pub u: SeqVec,
    pub history: Vec<StageReport>,
}

impl IterationState {
    pub fn initial(model: SpectralModel) -> Self {
        IterationState { stage: 0, u: SeqVec::zero(model), history: Vec::new() }
    }
}

fn to_vec(u: &SeqVec, b: &Basis) -> DVector<Complex64> {
    let mut v = DVector::zeros(b.total);
    for (k, &(a, e)) in &b.site_ranges {
        if let Some(block) = u.entries.get(k) {
            for (i, gi) in (a..e).enumerate() {
                v[gi] = block[i];
            }
        }
    }
    v
}

fn from_vec(v: &DVector<Complex64>, b: &Basis, model: &SpectralModel) -> SeqVec {
    let mut u = SeqVec::zero(model.clone());
    for (k, &(a, e)) in &b.site_ranges {
        u.insert(k.clone(), (a..e).map(|i| v[i]).collect());
    }
    u
}

/// One stage of the iteration at parameter `lambda`: solve the projected
/// equation on the next scale starting from the current iterate.
pub fn newton_stage(
    problem: &PDEProblem,
    state: &IterationState,
    config: &NashMoserConfig,
    lambda: f64,
) -> Result<IterationState, NashMoserError> {
    let stage = state.stage;
    let scale = stage_scale(config.n0, stage as u32);
    let prev_scale = if stage == 0 { 0 } else { stage_scale(config.n0, stage as u32 - 1) };
    let model = problem.model().clone();
    let prev_in_a = state.history.last().map(|r| r.in_a).unwrap_or(false);

    let mut active = config.active_cap.min(scale);
    let hard_cap = (2 * config.active_cap).min(scale).max(active);
    loop {
        let op = linearize(problem, &state.u, lambda, 0.0, active);
        let a_mat = op.to_block_matrix();
        let ad = a_mat.to_dense();
        let bas = a_mat.row_basis();
        let linv_res: Result<DMatrix<Complex64>, String> = match config.strategy {
            InverseStrategy::Dense => ad
                .clone()
                .try_inverse()
                .ok_or_else(|| "dense LU inversion failed".to_string()),
            InverseStrategy::Multiscale => {
                let ms_n = 2.max((active as f64).sqrt().round() as i64);
                multiscale_inverse(&op, ms_n, 2.0, &config.params)
                    .map(|(inv, _)| inv.to_dense())
                    .map_err(|e| e.to_string())
            }
        };
        let linv = match linv_res {
            Ok(m) => m,
            Err(detail) => {
                let in_a = certify_matrix_n_good(&a_mat, scale, &config.params).good;
                return Err(NashMoserError::InverseFailed { stage, in_a, detail });
            }
        };

        let f_u = eval_f(problem, &state.u, lambda, scale);
        // near the good set the previous scale's residual is already
        // solved; only the newly admitted modes drive the correction
        let r_n = if prev_in_a && prev_scale > 0 {
            f_u.sub(&f_u.project(prev_scale))
        } else {
            f_u.clone()
        };

        let mut h = SeqVec::zero(model.clone());
        let mut prev_step = f64::INFINITY;
        let mut iters = 0usize;
        for it in 0..30 {
            iters = it + 1;
            let f_uh = eval_f(problem, &state.u.add(&h), lambda, scale);
            let inner = r_n.add(&f_uh.sub(&f_u));
            let mut rhs = to_vec(&inner, &bas);
            rhs -= &ad * to_vec(&h, &bas);
            let h_new_vec = -(&linv * rhs);
            let h_new = from_vec(&h_new_vec, &bas, &model);
            let step = h_new.sub(&h).sobolev_norm(config.s1);
            h = h_new;
            if step <= config.contraction_tol * 1.0f64.max(h.sobolev_norm(config.s1)) {
                break;
            }
            if step > prev_step && step > 1e-6 {
                let factor = step / prev_step;
                if factor > 2.0 {
                    return Err(NashMoserError::Diverged { stage, factor });
                }
            }
            // rounding-noise plateau: no further progress possible
            if it >= 2 && step >= 0.9 * prev_step {
                break;
            }
            prev_step = step;
        }

        let u_next = state.u.add(&h);
        let residual_s1 = eval_f(problem, &u_next, lambda, scale).sobolev_norm(config.s1);
        if residual_s1 > config.residual_target && active < hard_cap {
            active = (active * 2).min(hard_cap);
            continue;
        }

        let in_a = certify_matrix_n_good(&a_mat, scale, &config.params).good;
        let residual_cap = eval_f(problem, &u_next, lambda, scale).sobolev_norm(config.s_cap);
        let step_s1 = h.sobolev_norm(config.s1);
        let u_s1 = u_next.sobolev_norm(config.s1);
        let b_n = 1.0 + u_next.sobolev_norm(config.s_cap);
        let next_scale = stage_scale(config.n0, stage as u32 + 1) as f64;
        let p = config.mu() + config.nu / 2.0 + 1.0;
        let report = StageReport {
            stage,
            scale,
            active_radius: active,
            contraction_iters: iters,
            residual_s1,
            residual_cap,
            step_s1,
            u_s1,
            b_n,
            in_a,
            s1_ok: u_s1 <= 1.0,
            s2_ok: step_s1 <= (scale as f64).powf(-config.sigma - 1.0),
            s4_ok: b_n <= 2.0 * next_scale.powf(p),
            guard_defect: invariant_subspace_guard(&u_next, config.guard),
        };
        let mut history = state.history.clone();
        history.push(report);
        return Ok(IterationState { stage: stage + 1, u: u_next, history });
    }
}

/// Cubic ramp on `[0, 1]`.
pub fn smoothstep01(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// C^1 cutoff in the frequency-scaling parameter: 1 within distance
/// `N^{-sigma/2}` of the good set, 0 beyond twice that distance, cubic
/// in between.  The maximal slope is `1.5 N^{sigma/2}`.
pub fn lambda_cutoff(lambda: f64, good_intervals: &[(f64, f64)], n: i64, sigma: f64) -> f64 {
    let w = (n as f64).powf(-sigma / 2.0);
    let dist = good_intervals
        .iter()
        .map(|&(a, b)| {
            if lambda < a {
                a - lambda
            } else if lambda > b {
                lambda - b
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min);
    if dist <= w {
        1.0
    } else if dist >= 2.0 * w {
        0.0
    } else {
        smoothstep01((2.0 * w - dist) / w)
    }
}

/// Extend a family of iterates defined near the good set to the whole
/// parameter interval by the cutoff.
pub fn lambda_cutoff_extend(
    family: &[(f64, SeqVec)],
    good_intervals: &[(f64, f64)],
    n: i64,
    sigma: f64,
) -> Vec<(f64, SeqVec)> {
    family
        .iter()
        .map(|(lam, u)| {
            let psi = lambda_cutoff(*lam, good_intervals, n, sigma);
            (*lam, u.scale(Complex64::new(psi, 0.0)))
        })
        .collect()
}

/// Outcome for a single parameter value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaReport {
    pub lambda: f64,
    pub stages: Vec<StageReport>,
    pub converged: bool,
    pub final_residual: f64,
    /// First stage whose goodness test failed, if any.
    pub first_a_failure: Option<usize>,
    pub error: Option<String>,
}

/// Whole-run report (serializable; the iterates themselves are returned
/// separately).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub lambdas: Vec<LambdaReport>,
    pub ledger: Vec<LedgerItem>,
}

/// Solutions and diagnostics of a full run over the parameter grid.
pub struct RunOutcome {
    pub solutions: Vec<(f64, SeqVec)>,
    pub report: RunReport,
}

fn run_one(problem: &PDEProblem, config: &NashMoserConfig, lambda: f64) -> (SeqVec, LambdaReport) {
    let mut state = IterationState::initial(problem.model().clone());
    let mut error = None;
    let mut first_a_failure = None;
    let mut converged = false;
    while state.stage < config.max_stages {
        match newton_stage(problem, &state, config, lambda) {
            Ok(next) => {
                let rep = next.history.last().unwrap();
                if !rep.in_a && first_a_failure.is_none() {
                    first_a_failure = Some(rep.stage);
                }
                let res = rep.residual_s1;
                state = next;
                if res <= config.residual_target {
                    converged = true;
                    break;
                }
            }
            Err(e) => {
                if let NashMoserError::InverseFailed { stage, in_a: false, .. } = &e {
                    if first_a_failure.is_none() {
                        first_a_failure = Some(*stage);
                    }
                }
                error = Some(e.to_string());
                break;
            }
        }
    }
    let final_residual = state
        .history
        .last()
        .map(|r| r.residual_s1)
        .unwrap_or(f64::INFINITY);
    let report = LambdaReport {
        lambda,
        stages: state.history.clone(),
        converged,
        final_residual,
        first_a_failure,
        error,
    };
    (state.u, report)
}

/// Run the iteration over the configured parameter grid.  Failures at
/// individual parameter values are recorded, not fatal.
pub fn run(problem: &PDEProblem, config: &NashMoserConfig) -> RunOutcome {
    use rayon::prelude::*;
    let results: Vec<(f64, (SeqVec, LambdaReport))> = config
        .lambdas
        .par_iter()
        .map(|&lam| (lam, run_one(problem, config, lam)))
        .collect();
    let mut solutions = Vec::new();
    let mut lambdas = Vec::new();
    for (lam, (u, rep)) in results {
        solutions.push((lam, u));
        lambdas.push(rep);
    }
    RunOutcome {
        solutions,
        report: RunReport { lambdas, ledger: config.ledger_check(problem.epsilon) },
    }
}
