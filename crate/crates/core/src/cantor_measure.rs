//! Frequency-amplitude exclusion tests and measure scans.
//!
//! A solution family survives only on the parameter set where the truncated
//! linearized operators stay invertible with quantitative bounds.  This module
//! provides the four membership predicates making up that set — a smallest
//! singular value test for the origin-centered truncation, theta-interval
//! covers of the singular set on each frequency fiber, a first-scale
//! diagonal separation test, and a quadratic Diophantine test on the forcing
//! frequency — together with grid scans measuring the excluded set and a
//! census of singular and bad sites per fiber.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::decay_matrix::dense_sigma_min;
use crate::index_space::{IndexWindow, LatticePoint, SeqVec};
use crate::linearized_operator::{omega_dot, DispersionKind, DispersionRule};
use crate::multiscale::{certify_matrix_n_good, MultiscaleParams};
use crate::nash_moser::{run, stage_scale, NashMoserConfig};
use crate::pde_instances::{linearize_on, PDEProblem};
use crate::spectral_model::SpectralModel;

/// Tunables for the exclusion tests and scans.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CantorParams {
    pub ms: MultiscaleParams,
    /// First truncation scale, used by the diagonal and Diophantine tests.
    pub n0: i64,
    /// The theta scans cover `[-g N, g N]` with this factor `g`.
    pub theta_range_factor: f64,
    /// Cone opening constant; fibers with `|j0| > (c+5)/c * N` take the
    /// large-fiber shortcut.
    pub frak_c: f64,
    /// Coefficient box half-width for the quadratic Diophantine test.
    pub p_max: i64,
    /// Radius cap for dense certification windows.  Full-scale windows grow
    /// quadratically per stage; capping keeps the dense singular value
    /// decompositions tractable while still probing every diagonal resonance
    /// within the cap.
    pub window_cap: i64,
}

impl CantorParams {
    pub fn desk(n: usize) -> Self {
        CantorParams {
            ms: MultiscaleParams::desk(n),
            n0: 8,
            theta_range_factor: 10.0,
            frak_c: 1.0,
            p_max: 20,
            window_cap: 10,
        }
    }

    /// Fiber scan bound `(c+5)/c * N`.
    pub fn j0_range(&self, n: i64) -> i64 {
        ((self.frak_c + 5.0) / self.frak_c * n as f64).ceil() as i64
    }

    pub fn theta_range(&self, n: i64) -> f64 {
        self.theta_range_factor * n as f64
    }

    /// Theta grid step `N^{-tau1}/4`.
    pub fn grid_step(&self, n: i64) -> f64 {
        (n as f64).powf(-self.ms.tau1) / 4.0
    }

    fn cert_radius(&self, n: i64) -> i64 {
        n.min(self.window_cap)
    }
}

/// Verdict of the smallest-singular-value membership test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrakGReport {
    pub n: i64,
    /// Radius of the assembled window (capped).
    pub radius: i64,
    pub sigma_min: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn frak_g_with_threshold(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    n: i64,
    threshold: f64,
    params: &CantorParams,
) -> FrakGReport {
    let radius = params.cert_radius(n);
    let model = problem.model().clone();
    let window = IndexWindow::origin(model.d, model.r, radius, problem.rule.comps());
    let op = linearize_on(problem, u, lambda, 0.0, window);
    let sigma_min = dense_sigma_min(&op.to_block_matrix().to_dense());
    FrakGReport { n, radius, sigma_min, threshold, pass: sigma_min >= threshold }
}

/// Membership test for the solution-level set: the scale-`n` truncation at
/// the origin must satisfy `sigma_min >= 2 n^{-tau1}` (equivalently, the
/// operator norm of the inverse is at most `n^{tau1}/2`).
pub fn frak_g_test(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    n: i64,
    params: &CantorParams,
) -> FrakGReport {
    let thr = 2.0 * (n as f64).powf(-params.ms.tau1);
    frak_g_with_threshold(problem, u, lambda, n, thr, params)
}

/// Relaxed variant used along the iteration (`sigma_min >= n^{-tau1}`),
/// appropriate when `u` is a stage iterate rather than the final solution.
pub fn frak_g_stage_test(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    n: i64,
    params: &CantorParams,
) -> FrakGReport {
    let thr = (n as f64).powf(-params.ms.tau1);
    frak_g_with_threshold(problem, u, lambda, n, thr, params)
}

/// Closed-form theta-intervals on which `|D_k(theta)| <= thr`, clipped to
/// `[-range, range]`.  The diagonal symbol is quadratic (wave) or affine
/// (Schroedinger) in `theta`, so the sublevel sets are at most two intervals.
fn site_bad_intervals(
    rule: &DispersionRule,
    k: &crate::index_space::Site,
    lambda: f64,
    thr: f64,
    range: f64,
) -> Vec<(f64, f64)> {
    let b = lambda * omega_dot(&rule.omega_bar, &k.l);
    let c = rule.mass - rule.model.eigenvalue(&k.j);
    let raw: Vec<(f64, f64)> = match rule.kind {
        DispersionKind::Nlw => {
            // |c - y^2| <= thr with y = b + theta.
            if c + thr <= 0.0 {
                Vec::new()
            } else {
                let hi = (c + thr).sqrt();
                if c - thr <= 0.0 {
                    vec![(-hi - b, hi - b)]
                } else {
                    let lo = (c - thr).sqrt();
                    vec![(lo - b, hi - b), (-hi - b, -lo - b)]
                }
            }
        }
        DispersionKind::Nls => {
            // |c - a y| <= thr with y = b + theta.
            let a = k.a as f64;
            let y1 = (c - thr) / a;
            let y2 = (c + thr) / a;
            vec![(y1.min(y2) - b, y1.max(y2) - b)]
        }
    };
    raw.into_iter()
        .filter_map(|(lo, hi)| {
            let lo = lo.max(-range);
            let hi = hi.min(range);
            (lo <= hi).then_some((lo, hi))
        })
        .collect()
}

/// Exact minimum of `|D_k(theta)|` over `[-range, range]`: attained at an
/// endpoint, at the vertex of the quadratic, or at a root.
fn site_min_abs_d(
    rule: &DispersionRule,
    k: &crate::index_space::Site,
    lambda: f64,
    range: f64,
) -> f64 {
    let b = lambda * omega_dot(&rule.omega_bar, &k.l);
    let c = rule.mass - rule.model.eigenvalue(&k.j);
    let mut cands = vec![-range, range];
    match rule.kind {
        DispersionKind::Nlw => {
            cands.push(-b);
            if c >= 0.0 {
                cands.push(c.sqrt() - b);
                cands.push(-c.sqrt() - b);
            }
        }
        DispersionKind::Nls => {
            cands.push(c / (k.a as f64) - b);
        }
    }
    cands
        .into_iter()
        .filter(|t| (-range..=range).contains(t))
        .map(|t| rule.diag_entry(k, lambda, t).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Connected components of `{theta in [-range, range] : |D_k(theta)| <= thr}`
/// for one site, in closed form: at most two intervals (roots of a quadratic)
/// for the wave dispersion, one for the Schroedinger dispersion.
pub fn site_theta_bad_components(
    rule: &DispersionRule,
    k: &crate::index_space::Site,
    lambda: f64,
    thr: f64,
    range: f64,
) -> Vec<(f64, f64)> {
    site_bad_intervals(rule, k, lambda, thr, range)
}

fn merge_intervals(mut v: Vec<(f64, f64)>, gap: f64) -> Vec<(f64, f64)> {
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in v {
        if let Some(last) = out.last_mut() {
            if a <= last.1 + gap {
                last.1 = last.1.max(b);
                continue;
            }
        }
        out.push((a, b));
    }
    out
}

/// Interval cover of the singular theta-set on one frequency fiber.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThetaCover {
    pub n: i64,
    pub j0: LatticePoint,
    /// Maximal bad runs found by the scan, dilated by one grid step.
    pub runs: Vec<(f64, f64)>,
    /// The runs chopped into pieces of length at most `n^{-tau1}`.
    pub intervals: Vec<(f64, f64)>,
    pub count_limit: f64,
    /// Allowed piece length including one grid step of slack on each side.
    pub length_limit: f64,
    pub pass: bool,
    /// True when the fiber lies beyond the scan bound and the diagonal lower
    /// bound certifies an empty singular set without scanning.
    pub skipped_large_j0: bool,
    /// Total length of the dilated runs.
    pub bad_measure: f64,
}

/// Cover the theta-set where the fiber truncation loses invertibility.
///
/// The truncation is centered at `(l, j) = (0, j0)` with the capped radius;
/// a theta is flagged bad when some diagonal entry on the window drops below
/// `2 n^{-tau1} + |eps| * |T|_op`, a sufficient condition for the smallest
/// singular value to possibly fall under `2 n^{-tau1}`.  The scan only visits
/// neighborhoods of the closed-form sublevel intervals of the diagonal, at
/// grid step `n^{-tau1}/4`.
pub fn theta_cover(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    n: i64,
    j0: &LatticePoint,
    params: &CantorParams,
) -> ThetaCover {
    let nf = n as f64;
    let model = problem.model().clone();
    let rule = &problem.rule;
    let radius = params.cert_radius(n);
    let range = params.theta_range(n);
    let step = params.grid_step(n);
    let count_limit = nf.powf(params.ms.e_exp);
    let cap = nf.powf(-params.ms.tau1);
    let length_limit = cap + 2.0 * step;

    let window = IndexWindow::centered(vec![0; model.d], j0.clone(), radius, rule.comps());
    let sites = window.sites(&model);

    // Large-fiber shortcut: beyond the scan bound the diagonal stays bounded
    // away from zero on the whole theta range, so the singular set is empty.
    if j0.sup_norm() > params.j0_range(n) {
        let min_d = sites
            .iter()
            .map(|k| site_min_abs_d(rule, k, lambda, range))
            .fold(f64::INFINITY, f64::min);
        if min_d >= 1.0 {
            return ThetaCover {
                n,
                j0: j0.clone(),
                runs: Vec::new(),
                intervals: Vec::new(),
                count_limit,
                length_limit,
                pass: true,
                skipped_large_j0: true,
                bad_measure: 0.0,
            };
        }
    }

    // Perturbation margin: at eps = 0 the test is exact on the diagonal.
    let op0 = linearize_on(problem, u, lambda, 0.0, window.clone());
    let thr = 2.0 * cap + problem.epsilon.abs() * op0.t.op_norm();

    let per_site: Vec<Vec<(f64, f64)>> = sites
        .iter()
        .map(|k| site_bad_intervals(rule, k, lambda, thr, range))
        .collect();
    let all: Vec<(f64, f64)> = per_site.iter().flatten().copied().collect();
    let domains = merge_intervals(all, 2.0 * step);

    let mut runs: Vec<(f64, f64)> = Vec::new();
    for &(a, b) in &domains {
        let lo = (a - step).max(-range);
        let hi = (b + step).min(range);
        if lo > hi {
            continue;
        }
        let relevant: Vec<usize> = (0..sites.len())
            .filter(|&si| per_site[si].iter().any(|&(x, y)| x <= hi && y >= lo))
            .collect();
        let nsteps = ((hi - lo) / step).ceil() as usize + 1;
        let mut run_start: Option<f64> = None;
        let mut last_bad = lo;
        for i in 0..=nsteps {
            let th = (lo + i as f64 * step).min(hi);
            let bad = relevant
                .iter()
                .any(|&si| rule.diag_entry(&sites[si], lambda, th).abs() <= thr);
            if bad {
                if run_start.is_none() {
                    run_start = Some(th);
                }
                last_bad = th;
            } else if let Some(s) = run_start.take() {
                runs.push((s, last_bad));
            }
        }
        if let Some(s) = run_start {
            runs.push((s, last_bad));
        }
    }

    let dilated: Vec<(f64, f64)> = runs
        .iter()
        .map(|&(a, b)| ((a - step).max(-range), (b + step).min(range)))
        .collect();
    let runs = merge_intervals(dilated, 0.0);
    let bad_measure: f64 = runs.iter().map(|(a, b)| b - a).sum();

    let mut intervals = Vec::new();
    for &(a, b) in &runs {
        let len = b - a;
        let pieces = (len / cap).ceil().max(1.0) as usize;
        let w = len / pieces as f64;
        for q in 0..pieces {
            intervals.push((a + q as f64 * w, a + (q + 1) as f64 * w));
        }
    }
    let pass = (intervals.len() as f64) <= count_limit
        && intervals.iter().all(|(a, b)| b - a <= length_limit);

    ThetaCover {
        n,
        j0: j0.clone(),
        runs,
        intervals,
        count_limit,
        length_limit,
        pass,
        skipped_large_j0: false,
        bad_measure,
    }
}

/// First-scale diagonal separation: `|D_k(lambda)| >= n0^{-tau0}` for every
/// site with `|i| <= n0`.
pub fn bar_i_test(rule: &DispersionRule, lambda: f64, n0: i64, tau0: f64) -> bool {
    let model = &rule.model;
    let window = IndexWindow::origin(model.d, model.r, n0, rule.comps());
    let floor = (n0 as f64).powf(-tau0);
    window
        .sites(model)
        .iter()
        .all(|k| rule.diag_entry(k, lambda, 0.0).abs() >= floor)
}

/// Verdict of the quadratic Diophantine test on `lambda * omega_bar`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TildeIReport {
    pub pass: bool,
    /// Smallest ratio `|P(x)| / (gamma / (1 + |p|^{d(d+1)}))` over the box.
    pub min_margin: f64,
    /// Coefficient vector attaining the minimum.
    pub worst: Vec<i64>,
}

/// Check that no small-integer quadratic polynomial nearly vanishes at the
/// rescaled frequency: for all integer vectors `p` with `0 < |p| <= p_max`,
/// `|p_0 + sum p_{i1 i2} x_{i1} x_{i2}| >= gamma / (1 + |p|^{d(d+1)})` with
/// `x = lambda * omega_bar` and `gamma = 1/n0`.
pub fn tilde_i_test(omega_bar: &[f64], lambda: f64, n0: i64, p_max: i64) -> TildeIReport {
    let d = omega_bar.len();
    let x: Vec<f64> = omega_bar.iter().map(|w| lambda * w).collect();
    let mut monomials = vec![1.0];
    for i in 0..d {
        for j in i..d {
            monomials.push(x[i] * x[j]);
        }
    }
    let dims = monomials.len();
    let gamma = 1.0 / n0 as f64;
    let exp = (d * (d + 1)) as i32;

    let mut p = vec![-p_max; dims];
    let mut min_margin = f64::INFINITY;
    let mut worst = vec![0; dims];
    loop {
        let sup = p.iter().map(|v| v.abs()).max().unwrap_or(0);
        if sup > 0 {
            let val: f64 = p.iter().zip(&monomials).map(|(&c, &m)| c as f64 * m).sum();
            let bound = gamma / (1.0 + (sup as f64).powi(exp));
            let margin = val.abs() / bound;
            if margin < min_margin {
                min_margin = margin;
                worst = p.clone();
            }
        }
        // Advance the odometer.
        let mut idx = 0;
        loop {
            if idx == dims {
                return TildeIReport { pass: min_margin >= 1.0, min_margin, worst };
            }
            p[idx] += 1;
            if p[idx] <= p_max {
                break;
            }
            p[idx] = -p_max;
            idx += 1;
        }
    }
}

/// Enumerate lattice fibers `|j0| <= bound` (restricted to the model cone),
/// subsampled with the given per-coordinate stride.
pub fn fiber_grid(model: &SpectralModel, bound: i64, stride: i64) -> Vec<LatticePoint> {
    let stride = stride.max(1);
    let mut coords: Vec<Vec<i64>> = vec![Vec::new()];
    for _ in 0..model.r {
        let mut next = Vec::new();
        for base in &coords {
            let mut v = -bound;
            while v <= bound {
                let mut c = base.clone();
                c.push(v);
                next.push(c);
                v += stride;
            }
        }
        coords = next;
    }
    coords
        .into_iter()
        .map(LatticePoint::new)
        .filter(|j| model.in_cone(j))
        .collect()
}

/// Configuration of the parameter-grid measure scan.
#[derive(Clone, Debug)]
pub struct MeasureScanConfig {
    pub lambdas: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Iteration template; its lambda grid is replaced by `lambdas`.
    pub nm: NashMoserConfig,
    /// Per-coordinate stride subsampling the fiber scan.
    pub j0_stride: i64,
    /// How many realized stage scales get the singular value test.
    pub max_stage_tests: usize,
}

/// One grid point of the measure scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub fracg_pass: bool,
    pub cover_pass: bool,
    pub bar_i: bool,
    pub tilde_i: bool,
    pub in_cantor: bool,
    pub nm_converged: bool,
    /// True when every stage of the iteration passed its goodness test.
    pub stage_memberships_ok: bool,
    /// Surviving parameters must have passed every stage test.
    pub consistent: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    /// Fraction of the lambda grid excluded from the surviving set.
    pub complement_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureTable {
    pub rows: Vec<MeasureRow>,
    pub summary: Vec<EpsilonSummary>,
    pub all_consistent: bool,
}

/// For each forcing size, solve over the lambda grid and test every grid
/// point for membership in the surviving parameter set; report per-point
/// verdicts and per-size excluded fractions.
pub fn measure_scan(
    problem: &PDEProblem,
    cfg: &MeasureScanConfig,
    params: &CantorParams,
) -> MeasureTable {
    use rayon::prelude::*;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &eps in &cfg.epsilons {
        let mut prob = problem.clone();
        prob.epsilon = eps;
        let mut nm = cfg.nm.clone();
        nm.lambdas = cfg.lambdas.clone();
        let outcome = run(&prob, &nm);

        let eps_rows: Vec<MeasureRow> = outcome
            .solutions
            .par_iter()
            .zip(&outcome.report.lambdas)
            .map(|((lambda, u), rep)| {
                let lambda = *lambda;
                let stages = rep.stages.len().max(1).min(cfg.max_stage_tests);
                let fracg_pass = (0..stages).all(|s| {
                    let n = stage_scale(cfg.nm.n0, s as u32);
                    frak_g_test(&prob, u, lambda, n, params).pass
                });
                let n = cfg.nm.n0;
                let fibers = fiber_grid(prob.model(), params.j0_range(n), cfg.j0_stride);
                let cover_pass = fibers
                    .iter()
                    .all(|j0| theta_cover(&prob, u, lambda, n, j0, params).pass);
                let bar_i = bar_i_test(&prob.rule, lambda, params.n0, params.ms.tau0);
                let tilde_i =
                    tilde_i_test(&prob.rule.omega_bar, lambda, params.n0, params.p_max).pass;
                let in_cantor = fracg_pass && cover_pass && bar_i && tilde_i;
                let stage_memberships_ok = rep.first_a_failure.is_none() && rep.error.is_none();
                MeasureRow {
                    epsilon: eps,
                    lambda,
                    fracg_pass,
                    cover_pass,
                    bar_i,
                    tilde_i,
                    in_cantor,
                    nm_converged: rep.converged,
                    stage_memberships_ok,
                    consistent: !in_cantor || stage_memberships_ok,
                }
            })
            .collect();

        let kept = eps_rows.iter().filter(|r| r.in_cantor).count();
        summary.push(EpsilonSummary {
            epsilon: eps,
            complement_fraction: 1.0 - kept as f64 / eps_rows.len().max(1) as f64,
        });
        rows.extend(eps_rows);
    }
    let all_consistent = rows.iter().all(|r| r.consistent);
    MeasureTable { rows, summary, all_consistent }
}

/// Per-lambda aggregate of the singular theta-measure over the fiber grid.
/// Diagnostic only: reported, never asserted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FubiniRow {
    pub lambda: f64,
    pub bad_theta_measure: f64,
}

pub fn fubini_scan(
    problem: &PDEProblem,
    family: &[(f64, SeqVec)],
    n: i64,
    j0_stride: i64,
    params: &CantorParams,
) -> Vec<FubiniRow> {
    use rayon::prelude::*;
    let fibers = fiber_grid(problem.model(), params.j0_range(n), j0_stride);
    family
        .par_iter()
        .map(|(lambda, u)| {
            let total: f64 = fibers
                .iter()
                .map(|j0| theta_cover(problem, u, *lambda, n, j0, params).bad_measure)
                .sum();
            FubiniRow { lambda: *lambda, bad_theta_measure: total }
        })
        .collect()
}

/// Counts of singular and bad sites on one fiber.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CensusReport {
    pub n: i64,
    pub chi: f64,
    pub j0: LatticePoint,
    /// Sites `(l, j0, a)` with `|l| <= 2 N^chi` whose centered truncation
    /// fails the goodness test.
    pub weakly_singular: usize,
    /// Allowed count `|A| N^e`.
    pub singular_limit: f64,
    /// Sites `(l, j0, a)` with `|l| <= N^chi` that are neither diagonally
    /// regular nor surrounded (within distance N) by good truncations.
    pub weakly_bad: usize,
    /// Allowed count `N^{e+d+r+1}`.
    pub bad_limit: f64,
    /// Number of component tags `|A|`.
    pub comp_count: usize,
    pub within_limits: bool,
}

fn l_box(d: usize, bound: i64) -> Vec<Vec<i64>> {
    let mut out: Vec<Vec<i64>> = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for base in &out {
            for v in -bound..=bound {
                let mut c = base.clone();
                c.push(v);
                next.push(c);
            }
        }
        out = next;
    }
    out
}

/// Count weakly-singular and weakly-bad sites on the fiber `j0`.
///
/// A site `(l, j, a)` is strongly regular when the radius-N truncation
/// centered at `(l, j)` passes the goodness test; by the shift identity the
/// centered operator equals the origin-centered one on fiber `j` evaluated at
/// `theta + lambda omega_bar . l`, which is how it is assembled here.  A site
/// is weakly bad when its diagonal entry is below 1 in modulus and some
/// neighbor within distance N is not strongly regular.
pub fn weakly_bad_census(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    theta: f64,
    n: i64,
    chi: f64,
    j0: &LatticePoint,
    params: &CantorParams,
) -> CensusReport {
    let nf = n as f64;
    let model = problem.model().clone();
    let rule = &problem.rule;
    let comps = rule.comps();
    let af = comps.len();
    let radius = params.cert_radius(n);
    let sing_bound = (2.0 * nf.powf(chi)).floor() as i64;
    let bad_bound = nf.powf(chi).floor() as i64;

    // Cache of window perturbations per fiber center and of goodness
    // verdicts per (l, j) center.
    let mut t_cache: BTreeMap<LatticePoint, crate::linearized_operator::TruncatedOperator> =
        BTreeMap::new();
    let mut good_cache: BTreeMap<(Vec<i64>, LatticePoint), bool> = BTreeMap::new();

    let mut strongly_regular = |l: &Vec<i64>, j: &LatticePoint| -> bool {
        if let Some(&v) = good_cache.get(&(l.clone(), j.clone())) {
            return v;
        }
        let base = t_cache.entry(j.clone()).or_insert_with(|| {
            let window = IndexWindow::centered(vec![0; model.d], j.clone(), radius, comps.clone());
            linearize_on(problem, u, lambda, theta, window)
        });
        let shifted = crate::linearized_operator::TruncatedOperator::assemble(
            base.rule.clone(),
            base.window.clone(),
            lambda,
            theta + lambda * omega_dot(&rule.omega_bar, l),
            base.epsilon,
            base.t.clone(),
        );
        let good = certify_matrix_n_good(&shifted.to_block_matrix(), n, &params.ms).good;
        good_cache.insert((l.clone(), j.clone()), good);
        good
    };

    let weakly_singular: usize = l_box(model.d, sing_bound)
        .iter()
        .filter(|l| !strongly_regular(l, j0))
        .count()
        * af;

    let neighbor_fibers: Vec<LatticePoint> = l_box(model.r, n)
        .into_iter()
        .map(|off| {
            LatticePoint::new(
                j0.coords.iter().zip(&off).map(|(&c, &o)| c + o).collect::<Vec<i64>>(),
            )
        })
        .filter(|j| model.in_cone(j))
        .collect();

    let mut weakly_bad = 0usize;
    for l in l_box(model.d, bad_bound) {
        for &a in &comps {
            let site = crate::index_space::Site::new(l.clone(), j0.clone(), a);
            if rule.diag_entry(&site, lambda, theta).abs() >= 1.0 {
                continue;
            }
            let mut surrounded = true;
            'outer: for off in l_box(model.d, n) {
                let lp: Vec<i64> = l.iter().zip(&off).map(|(&c, &o)| c + o).collect();
                for jp in &neighbor_fibers {
                    if !strongly_regular(&lp, jp) {
                        surrounded = false;
                        break 'outer;
                    }
                }
            }
            if !surrounded {
                weakly_bad += 1;
            }
        }
    }

    let singular_limit = af as f64 * nf.powf(params.ms.e_exp);
    let bad_limit = nf.powf(params.ms.e_exp + (model.d + model.r + 1) as f64);
    CensusReport {
        n,
        chi,
        j0: j0.clone(),
        weakly_singular,
        singular_limit,
        weakly_bad,
        bad_limit,
        comp_count: af,
        within_limits: (weakly_singular as f64) <= singular_limit
            && (weakly_bad as f64) <= bad_limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index_space::Site;
    use crate::linearized_operator::golden_omega;
    use crate::nash_moser::{GuardKind, InverseStrategy};
    use crate::pde_instances::{linearize, PDEProblem};

    fn desk_nlw(eps: f64) -> PDEProblem {
        PDEProblem::default_nlw(eps)
    }

    fn small_params() -> CantorParams {
        let mut p = CantorParams::desk(2);
        p.window_cap = 4;
        p
    }

    fn zero_u(p: &PDEProblem) -> SeqVec {
        SeqVec::zero(p.model().clone())
    }

    #[test]
    fn frak_g_passes_off_resonance_and_fails_on_it() {
        let p = desk_nlw(0.0);
        let u = zero_u(&p);
        let params = small_params();
        let good = frak_g_test(&p, &u, 0.5, 8, &params);
        assert!(good.pass, "sigma_min {} vs {}", good.sigma_min, good.threshold);
        // lambda = 1/omega makes the (l=1, j=0) diagonal entry vanish.
        let resonant = 1.0 / golden_omega()[0];
        let bad = frak_g_test(&p, &u, resonant, 8, &params);
        assert!(!bad.pass);
        assert!(bad.sigma_min < bad.threshold);
        // The stage variant is weaker.
        assert!(frak_g_stage_test(&p, &u, 0.5, 8, &params).threshold < good.threshold);
    }

    #[test]
    fn frak_g_matches_dense_svd_oracle() {
        let p = desk_nlw(1e-4);
        let mut u = zero_u(&p);
        u.insert_scalar(
            Site::new(vec![1], LatticePoint::new(vec![1]), 1),
            crate::Complex64::new(0.05, 0.0),
        );
        let params = small_params();
        for lambda in [0.4, 1.0, 1.3] {
            let rep = frak_g_test(&p, &u, lambda, 6, &params);
            let op = linearize(&p, &u, lambda, 0.0, rep.radius);
            let smin = dense_sigma_min(&op.to_block_matrix().to_dense());
            assert!((rep.sigma_min - smin).abs() <= 1e-12 * smin.max(1.0));
            assert_eq!(rep.pass, smin >= 2.0 * 6f64.powf(-params.ms.tau1));
        }
    }

    #[test]
    fn large_fiber_shortcut_certifies_empty_cover() {
        let p = desk_nlw(0.0);
        let u = zero_u(&p);
        let params = small_params();
        let n = 4;
        // Far beyond the scan bound the diagonal entries dominate the range.
        let j0 = LatticePoint::new(vec![100 * n]);
        let cover = theta_cover(&p, &u, 1.0, n, &j0, &params);
        assert!(cover.skipped_large_j0);
        assert!(cover.pass);
        assert!(cover.intervals.is_empty());
    }

    #[test]
    fn isolated_resonance_gives_two_short_intervals() {
        // Mass 2 pushes the resonances of the radius-2 window to
        // theta = +-(sqrt(2) - 2 lambda omega), the only roots within +-0.4.
        let rule = DispersionRule::new(
            DispersionKind::Nlw,
            2.0,
            golden_omega(),
            SpectralModel::torus(1, 1, 2.0),
        );
        let mut f = crate::pde_instances::Nonlinearity::default();
        f.add_term(
            crate::spectral_model::FourierFunction::constant(crate::Complex64::new(1.0, 0.0)),
            3,
            0,
        );
        let p = PDEProblem::new_nlw(rule, f, 0.0);
        let u = zero_u(&p);
        let mut params = CantorParams::desk(2);
        params.window_cap = 2;
        params.theta_range_factor = 0.2;
        let n = 2;
        let j0 = LatticePoint::origin(1);
        let cover = theta_cover(&p, &u, 1.0, n, &j0, &params);
        assert_eq!(cover.runs.len(), 2, "runs: {:?}", cover.runs);
        let step = params.grid_step(n);
        // Slope-based width bound for the quadratic near a simple root.
        let width = 4.0 * (n as f64).powf(-params.ms.tau1) / 2.0f64.sqrt() + 8.0 * step;
        for (a, b) in &cover.runs {
            assert!(b - a <= width, "run length {} vs {}", b - a, width);
        }
        let root = 2.0f64.sqrt() - 2.0 * golden_omega()[0];
        assert!(cover.runs.iter().any(|(a, b)| *a <= root && root <= *b));
        assert!(cover.runs.iter().any(|(a, b)| *a <= -root && -root <= *b));
        assert!(cover.pass);
    }

    #[test]
    fn per_site_bad_set_has_at_most_two_components() {
        let p = desk_nlw(0.0);
        let rule = &p.rule;
        let thr = 2.0 * 8f64.powf(-4.5);
        for l in -8i64..=8 {
            for j in -8i64..=8 {
                let k = Site::new(vec![l], LatticePoint::new(vec![j]), 1);
                let ints = site_bad_intervals(rule, &k, 1.0, thr, 80.0);
                assert!(ints.len() <= 2);
                let c = rule.mass - p.model().eigenvalue(&k.j);
                let width = 4.0 * thr / (2.0 * c.sqrt());
                for (a, b) in ints {
                    assert!(b - a <= width + 1e-12, "site ({l},{j}) width {}", b - a);
                }
            }
        }
    }

    #[test]
    fn covariance_intervals_shift_with_l() {
        let p = desk_nlw(0.0);
        let rule = &p.rule;
        let thr = 1e-2;
        let lambda = 0.9;
        for (l, j) in [(3i64, 1i64), (-2, 0), (5, -2)] {
            let shifted = Site::new(vec![l], LatticePoint::new(vec![j]), 1);
            let centered = Site::new(vec![0], LatticePoint::new(vec![j]), 1);
            let a = site_bad_intervals(rule, &shifted, lambda, thr, 1e6);
            let b = site_bad_intervals(rule, &centered, lambda, thr, 1e6);
            let shift = lambda * omega_dot(&rule.omega_bar, &shifted.l);
            assert_eq!(a.len(), b.len());
            for (ia, ib) in a.iter().zip(&b) {
                assert!((ia.0 - (ib.0 - shift)).abs() <= 1e-13);
                assert!((ia.1 - (ib.1 - shift)).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn bar_i_detects_constructed_root() {
        let p = desk_nlw(0.0);
        assert!(bar_i_test(&p.rule, 1.0, 4, 5.5));
        // lambda solving (lambda omega)^2 = m at (l=1, j=0).
        let resonant = 1.0 / golden_omega()[0];
        assert!(!bar_i_test(&p.rule, resonant, 4, 5.5));
        // A sub-resonance scale passes everywhere on a small grid.
        for q in 0..10 {
            let lambda = 0.3 + 0.04 * q as f64;
            assert!(bar_i_test(&p.rule, lambda, 2, 5.5));
        }
    }

    #[test]
    fn tilde_i_accepts_golden_and_rejects_rational_square() {
        let rep = tilde_i_test(&golden_omega(), 1.0, 8, 20);
        assert!(rep.pass, "margin {} at {:?}", rep.min_margin, rep.worst);
        // lambda = 1/omega gives x = 1, killed by p = (1, -1).
        let rep = tilde_i_test(&golden_omega(), 1.0 / golden_omega()[0], 8, 20);
        assert!(!rep.pass);
        assert!(rep.min_margin <= 1e-9);
    }

    fn cheap_nm(lambdas: Vec<f64>) -> NashMoserConfig {
        let mut nm = NashMoserConfig::desk(lambdas);
        nm.max_stages = 1;
        nm.active_cap = 6;
        nm.guard = GuardKind::RealSymmetry;
        nm.strategy = InverseStrategy::Dense;
        nm
    }

    #[test]
    fn measure_scan_excludes_resonant_grid_point() {
        let p = desk_nlw(1e-4);
        let params = small_params();
        let resonant = 1.0 / golden_omega()[0];
        let cfg = MeasureScanConfig {
            lambdas: vec![0.5, resonant],
            epsilons: vec![1e-4],
            nm: cheap_nm(Vec::new()),
            j0_stride: 8,
            max_stage_tests: 1,
        };
        let table = measure_scan(&p, &cfg, &params);
        assert_eq!(table.rows.len(), 2);
        let good = &table.rows[0];
        let bad = &table.rows[1];
        assert!(good.in_cantor, "{:?}", good);
        assert!(!bad.in_cantor, "{:?}", bad);
        assert!((table.summary[0].complement_fraction - 0.5).abs() <= 1e-12);
        assert!(table.all_consistent);
    }

    #[test]
    fn measure_scan_complement_monotone_in_epsilon() {
        let p = desk_nlw(1e-3);
        let params = small_params();
        let cfg = MeasureScanConfig {
            lambdas: vec![0.45, 0.8, 1.1],
            epsilons: vec![1e-3, 1e-5],
            nm: cheap_nm(Vec::new()),
            j0_stride: 8,
            max_stage_tests: 1,
        };
        let table = measure_scan(&p, &cfg, &params);
        assert_eq!(table.summary.len(), 2);
        assert!(
            table.summary[1].complement_fraction <= table.summary[0].complement_fraction + 1e-12
        );
        assert!(table.all_consistent);
    }

    #[test]
    fn census_is_empty_off_resonance() {
        let p = desk_nlw(0.0);
        let u = zero_u(&p);
        let mut params = small_params();
        params.window_cap = 3;
        let j0 = LatticePoint::origin(1);
        // Away from every resonance of the small window the diagonal
        // dominates and every centered truncation is good.
        let rep = weakly_bad_census(&p, &u, 0.45, 0.0, 3, 1.0, &j0, &params);
        assert_eq!(rep.weakly_singular, 0);
        assert_eq!(rep.weakly_bad, 0);
        assert!(rep.within_limits);
    }

    #[test]
    fn census_respects_paper_bounds_on_desk_instance() {
        let p = desk_nlw(1e-4);
        let u = zero_u(&p);
        let mut params = small_params();
        params.window_cap = 3;
        let j0 = LatticePoint::origin(1);
        let rep = weakly_bad_census(&p, &u, 1.0, 0.0, 3, 1.0, &j0, &params);
        assert_eq!(rep.comp_count, 1);
        assert!(rep.within_limits, "{:?}", rep);
        assert!((rep.weakly_singular as f64) <= rep.singular_limit);
    }

    #[test]
    fn census_shows_component_factor_for_doubled_system() {
        let p = PDEProblem::default_nls(0.0);
        let u = zero_u(&p);
        let mut params = small_params();
        params.window_cap = 2;
        let j0 = LatticePoint::origin(1);
        // Near the first resonance the centered truncations degrade; every
        // affected frequency contributes both component tags to the count.
        let near_resonant = 1.0 / golden_omega()[0] - 1e-5;
        let rep = weakly_bad_census(&p, &u, near_resonant, 0.0, 2, 1.0, &j0, &params);
        assert_eq!(rep.comp_count, 2);
        assert!(rep.weakly_singular > 0);
        assert_eq!(rep.weakly_singular % 2, 0);
        assert!(rep.within_limits, "{:?}", rep);
    }

    #[test]
    fn reports_serialize() {
        let p = desk_nlw(0.0);
        let u = zero_u(&p);
        let params = small_params();
        let rep = frak_g_test(&p, &u, 0.5, 4, &params);
        let s = serde_json::to_string(&rep).unwrap();
        assert!(s.contains("sigma_min"));
        let cover = theta_cover(&p, &u, 0.5, 4, &LatticePoint::origin(1), &params);
        let s = serde_json::to_string(&cover).unwrap();
        assert!(s.contains("intervals"));
    }
}
