//! Experiment runner: property suites, iteration runs over lambda grids,
//! parameter-set measure scans, and chain/cluster geometry reports.
//!
//! Outputs are deterministic for a fixed config and seed: CSV files carry the
//! version header `# smallsep-v1` and floats are printed with 17 significant
//! digits so they round-trip exactly.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use smallsep_core::cantor_measure::{CantorParams, MeasureScanConfig};
use smallsep_core::decay_matrix::{group_sites, BlockMatrix, GroupIndex, NormParams};
use smallsep_core::index_space::IndexWindow;
use smallsep_core::linearized_operator::{cluster_bad_sites, enumerate_chains};
use smallsep_core::multiscale::MultiscaleParams;
use smallsep_core::nash_moser::{GuardKind, InverseStrategy, NashMoserConfig};
use smallsep_core::pde_instances::{linearize, PDEProblem};
use smallsep_core::Complex64;

const CSV_HEADER: &str = "# smallsep-v1";

/// Format a float with 17 significant digits (round-trip exact).
fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Parser)]
#[command(name = "smallsep", about = "Experiment runner for the smallsep library")]
struct Cli {
    /// Path to a JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for the randomized property suites.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Turn flagged rows into a nonzero exit code.
    #[arg(long, global = true, default_value_t = false)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the seeded norm-algebra and left-inverse property suites.
    Properties,
    /// Solve over the lambda grid and write residual tables.
    Solve,
    /// Measure the surviving parameter set over the (epsilon, lambda) grid.
    Cantor,
    /// Report chain components and bad-site clusters.
    Chains,
}

/// Run configuration; every field has a desk-scale default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Built-in problem instance: "nlw" or "nls".
    problem: String,
    epsilons: Vec<f64>,
    lambda_min: f64,
    lambda_max: f64,
    lambda_count: usize,
    n0: i64,
    sigma: f64,
    s0: f64,
    s1: f64,
    s2: f64,
    /// Top regularity cap (the scale `S`).
    s_cap: f64,
    tau: f64,
    tau0: f64,
    tau1: f64,
    delta: f64,
    chi0: f64,
    c1: f64,
    e_exp: f64,
    s_exp: f64,
    /// Linear-solve strategy: "dense" or "multiscale".
    strategy: String,
    max_stages: usize,
    active_cap: i64,
    /// Radius cap for dense certification windows in the measure scan.
    window_cap: i64,
    /// Fiber subsampling stride for the theta covers.
    j0_stride: i64,
    /// Scales for the chains subcommand.
    chain_scales: Vec<i64>,
    /// Override of the norm constant; values below the admissible floor make
    /// the algebra property fail, which the suite reports.
    k1_override: Option<f64>,
    /// Family size per property in the properties suite.
    samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: "nlw".into(),
            epsilons: vec![1e-4],
            lambda_min: 0.9,
            lambda_max: 1.1,
            lambda_count: 8,
            n0: 8,
            sigma: 6.0,
            s0: 1.5,
            s1: 6.0,
            s2: 5.0,
            s_cap: 12.0,
            tau: 13.0,
            tau0: 5.5,
            tau1: 4.5,
            delta: 0.2,
            chi0: 2.0,
            c1: 2.0,
            e_exp: 7.0,
            s_exp: 2.0,
            strategy: "dense".into(),
            max_stages: 2,
            active_cap: 6,
            window_cap: 6,
            j0_stride: 8,
            chain_scales: vec![8, 16],
            k1_override: None,
            samples: 50,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let raw = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                serde_json::from_str(&raw)
                    .with_context(|| format!("cannot parse config {}", p.display()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = 2.0; // built-in instances have one time and one space dimension
        anyhow::ensure!(
            self.delta > 0.0 && self.delta < 0.25,
            "delta must lie in (0, 1/4), got {}",
            self.delta
        );
        anyhow::ensure!(
            self.s0 > dims / 2.0,
            "s0 must exceed (d+r)/2 = {}, got {}",
            dims / 2.0,
            self.s0
        );
        anyhow::ensure!(self.lambda_count >= 1, "lambda grid must have at least one point");
        anyhow::ensure!(!self.epsilons.is_empty(), "epsilon list must be nonempty");
        anyhow::ensure!(
            matches!(self.problem.as_str(), "nlw" | "nls"),
            "unknown problem {:?}",
            self.problem
        );
        anyhow::ensure!(
            matches!(self.strategy.as_str(), "dense" | "multiscale"),
            "unknown strategy {:?}",
            self.strategy
        );
        Ok(())
    }

    fn lambdas(&self) -> Vec<f64> {
        if self.lambda_count == 1 {
            return vec![self.lambda_min];
        }
        let step = (self.lambda_max - self.lambda_min) / (self.lambda_count - 1) as f64;
        (0..self.lambda_count).map(|i| self.lambda_min + i as f64 * step).collect()
    }

    fn problem(&self, epsilon: f64) -> PDEProblem {
        match self.problem.as_str() {
            "nls" => PDEProblem::default_nls(epsilon),
            _ => PDEProblem::default_nlw(epsilon),
        }
    }

    fn norm_params(&self) -> NormParams {
        let mut np = NormParams::new(2, self.s0);
        if let Some(k1) = self.k1_override {
            np.k1 = k1;
        }
        np
    }

    fn ms_params(&self) -> MultiscaleParams {
        let mut p = MultiscaleParams::desk(2);
        p.s0 = self.s0;
        p.s1 = self.s1;
        p.s2 = self.s2;
        p.s_cap = self.s_cap;
        p.tau = self.tau;
        p.tau0 = self.tau0;
        p.tau1 = self.tau1;
        p.delta = self.delta;
        p.chi0 = self.chi0;
        p.c1 = self.c1;
        p.e_exp = self.e_exp;
        p.s_exp = self.s_exp;
        p.norm = self.norm_params();
        p
    }

    fn nm_config(&self, lambdas: Vec<f64>) -> NashMoserConfig {
        let mut nm = NashMoserConfig::desk(lambdas);
        nm.n0 = self.n0;
        nm.sigma = self.sigma;
        nm.s1 = self.s1;
        nm.s_cap = self.s_cap;
        nm.max_stages = self.max_stages;
        nm.active_cap = self.active_cap;
        nm.guard = match self.problem.as_str() {
            "nls" => GuardKind::ConjugatePair,
            _ => GuardKind::RealSymmetry,
        };
        nm.strategy = match self.strategy.as_str() {
            "multiscale" => InverseStrategy::Multiscale,
            _ => InverseStrategy::Dense,
        };
        nm.params = self.ms_params();
        nm
    }

    fn cantor_params(&self) -> CantorParams {
        let mut p = CantorParams::desk(2);
        p.ms = self.ms_params();
        p.n0 = self.n0;
        p.window_cap = self.window_cap;
        p
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, content).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

// ---------------------------------------------------------------------------
// properties

#[derive(Serialize)]
struct PropertyVerdict {
    name: String,
    samples: usize,
    failures: usize,
    pass: bool,
}

fn random_matrix(rng: &mut ChaCha8Rng, groups: &[GroupIndex], model: &str, amp: f64) -> BlockMatrix {
    let m = match model {
        "degenerate" => smallsep_core::spectral_model::SpectralModel::degenerate(1, 1.0),
        _ => smallsep_core::spectral_model::SpectralModel::torus(1, 1, 1.0),
    };
    let mut out = BlockMatrix::zero(groups.to_vec(), groups.to_vec(), m.clone());
    for ri in 0..groups.len() {
        for ci in 0..groups.len() {
            let d = groups[ri].index_dist(&groups[ci]) as f64;
            let scale = amp / (1.0 + d).powi(2);
            let nr = groups[ri].dim(&m);
            let nc = groups[ci].dim(&m);
            if rng.gen::<f64>() < 0.7 {
                let b = DMatrix::from_fn(nr, nc, |_, _| {
                    Complex64::new(
                        rng.gen_range(-scale..scale),
                        rng.gen_range(-scale..scale),
                    )
                });
                out.set_block(ri, ci, b);
            }
        }
    }
    out
}

fn window_groups(model: &str, radius: i64) -> Vec<GroupIndex> {
    let m = match model {
        "degenerate" => smallsep_core::spectral_model::SpectralModel::degenerate(1, 1.0),
        _ => smallsep_core::spectral_model::SpectralModel::torus(1, 1, 1.0),
    };
    let w = IndexWindow::origin(m.d, m.r, radius, vec![1]);
    group_sites(&w.sites(&m))
}

fn cmd_properties(cfg: &RunConfig, out: &Path, seed: u64) -> Result<bool> {
    let np = cfg.norm_params();
    let mut verdicts: Vec<PropertyVerdict> = Vec::new();
    let s_list = [0.0, cfg.s0, 3.0];

    for model in ["torus", "degenerate"] {
        let groups = window_groups(model, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ model.len() as u64);
        let mut fails = [0usize; 6];
        for _ in 0..cfg.samples {
            let m1 = random_matrix(&mut rng, &groups, model, 0.4);
            let m2 = random_matrix(&mut rng, &groups, model, 0.4);
            // (a) the majorant has the same s-norm
            let maj = m1.toeplitz_majorant();
            for &s in &s_list {
                let a = m1.s_norm(s, &np);
                let b = maj.s_norm(s, &np);
                if (a - b).abs() > 1e-12 * b.max(1.0) {
                    fails[0] += 1;
                }
            }
            let prod = m1.multiply(&m2).expect("windows match");
            // (b) algebra property at s0
            if prod.s_norm(cfg.s0, &np)
                > m1.s_norm(cfg.s0, &np) * m2.s_norm(cfg.s0, &np) * (1.0 + 1e-10)
            {
                fails[1] += 1;
            }
            // (c) product dominated by the majorant product
            let majprod = m1.toeplitz_majorant().multiply(&m2.toeplitz_majorant()).unwrap();
            for &s in &s_list {
                if prod.s_norm(s, &np) > majprod.s_norm(s, &np) * (1.0 + 1e-10) {
                    fails[2] += 1;
                }
            }
            // (d) smoothing split bounds; the split is by sup-distance while
            // the weights are Euclidean, so the near bound carries the
            // comparability factor sqrt(d+r).
            let nn = 2;
            let (near, far) = m1.smoothing_split(nn);
            let b_exp = 1.5f64;
            let comp = (np.n as f64).sqrt();
            if near.s_norm(cfg.s0 + b_exp, &np)
                > (comp * nn as f64).powf(b_exp) * m1.s_norm(cfg.s0, &np) * (1.0 + 1e-10)
                || far.s_norm(cfg.s0, &np)
                    > (nn as f64).powf(-b_exp) * m1.s_norm(cfg.s0 + b_exp, &np) * (1.0 + 1e-10)
            {
                fails[3] += 1;
            }
            // (e) operator norm below the s0 norm
            if m1.op_norm() > m1.s_norm(cfg.s0, &np) * (1.0 + 1e-10) {
                fails[4] += 1;
            }
            // (f) decay along lines dominates the s-norm
            for &s in &s_list {
                if m1.s_norm(s, &np) > m1.decay_along_lines_bound(s, &np) * (1.0 + 1e-10) {
                    fails[5] += 1;
                }
            }
        }
        let names = [
            "majorant_norm_identity",
            "algebra_at_s0",
            "majorant_product_domination",
            "smoothing_split",
            "op_norm_below_s0",
            "decay_along_lines",
        ];
        for (i, name) in names.iter().enumerate() {
            verdicts.push(PropertyVerdict {
                name: format!("{model}/{name}"),
                samples: cfg.samples,
                failures: fails[i],
                pass: fails[i] == 0,
            });
        }
    }

    // Left-inverse perturbation: Neumann series residual and norm growth.
    {
        let groups = window_groups("torus", 1);
        let model = smallsep_core::spectral_model::SpectralModel::torus(1, 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let mut failures = 0usize;
        for _ in 0..cfg.samples {
            let mut m = BlockMatrix::identity(groups.clone(), model.clone());
            for ri in 0..groups.len() {
                for ci in 0..groups.len() {
                    if rng.gen::<f64>() < 0.3 {
                        let cur = m
                            .blocks
                            .get(&(ri, ci))
                            .cloned()
                            .unwrap_or_else(|| DMatrix::zeros(1, 1));
                        m.set_block(
                            ri,
                            ci,
                            cur + DMatrix::from_element(
                                1,
                                1,
                                Complex64::new(
                                    rng.gen_range(-0.02..0.02),
                                    rng.gen_range(-0.02..0.02),
                                ),
                            ),
                        );
                    }
                }
            }
            let minv_dense = match m.to_dense().try_inverse() {
                Some(v) => v,
                None => continue,
            };
            let minv =
                BlockMatrix::from_dense(groups.clone(), groups.clone(), model.clone(), &minv_dense);
            let mut p = BlockMatrix::zero(groups.clone(), groups.clone(), model.clone());
            for ri in 0..groups.len() {
                p.set_block(
                    ri,
                    ri,
                    DMatrix::from_element(1, 1, Complex64::new(rng.gen_range(-0.002..0.002), 0.0)),
                );
            }
            if minv.s_norm(cfg.s0, &np) * p.s_norm(cfg.s0, &np) > 0.45 {
                continue;
            }
            match BlockMatrix::perturbed_left_inverse(&minv, &p, &np) {
                Err(_) => failures += 1,
                Ok(li) => {
                    let total = m.add(&p).unwrap();
                    let resid = (li.multiply(&total).unwrap().to_dense()
                        - DMatrix::<Complex64>::identity(m.scalar_rows(), m.scalar_rows()))
                    .norm();
                    let grew = li.s_norm(cfg.s0, &np) > 2.0 * minv.s_norm(cfg.s0, &np) + 1e-12;
                    if resid > 1e-10 || grew {
                        failures += 1;
                    }
                }
            }
        }
        verdicts.push(PropertyVerdict {
            name: "left_inverse_perturbation".into(),
            samples: cfg.samples,
            failures,
            pass: failures == 0,
        });
    }

    let all_pass = verdicts.iter().all(|v| v.pass);
    write_json(&out.join("properties.json"), &verdicts)?;
    let mut csv = format!("{CSV_HEADER}\nname,samples,failures,pass\n");
    for v in &verdicts {
        csv.push_str(&format!("{},{},{},{}\n", v.name, v.samples, v.failures, v.pass));
    }
    write_text(&out.join("properties.csv"), &csv)?;
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// solve

#[derive(Serialize)]
struct SolutionDump {
    epsilon: f64,
    lambda: f64,
    converged: bool,
    first_a_failure: Option<usize>,
    /// Coefficients as (site, [re, im] per basis slot) pairs.
    solution: Vec<(smallsep_core::index_space::Site, Vec<[f64; 2]>)>,
}

fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let lambdas = cfg.lambdas();
    let mut csv = format!(
        "{CSV_HEADER}\nepsilon,lambda,stage,residual_s1,residual_S,step_norm,An_member\n"
    );
    let mut dumps = Vec::new();
    let mut all_clean = true;
    for &eps in &cfg.epsilons {
        let problem = cfg.problem(eps);
        let nm = cfg.nm_config(lambdas.clone());
        let outcome = smallsep_core::nash_moser::run(&problem, &nm);
        for ((lambda, u), rep) in outcome.solutions.iter().zip(&outcome.report.lambdas) {
            for st in &rep.stages {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    fmt(eps),
                    fmt(*lambda),
                    st.stage,
                    fmt(st.residual_s1),
                    fmt(st.residual_cap),
                    fmt(st.step_s1),
                    st.in_a
                ));
            }
            if !rep.converged || rep.first_a_failure.is_some() || rep.error.is_some() {
                all_clean = false;
            }
            dumps.push(SolutionDump {
                epsilon: eps,
                lambda: *lambda,
                converged: rep.converged,
                first_a_failure: rep.first_a_failure,
                solution: u
                    .entries
                    .iter()
                    .map(|(k, b)| (k.clone(), b.iter().map(|c| [c.re, c.im]).collect()))
                    .collect(),
            });
        }
        write_json(
            &out.join(format!("solve_report_{}.json", fmt(eps))),
            &outcome.report,
        )?;
    }
    write_text(&out.join("solve.csv"), &csv)?;
    write_json(&out.join("solutions.json"), &dumps)?;
    Ok(all_clean)
}

// ---------------------------------------------------------------------------
// cantor

fn cmd_cantor(cfg: &RunConfig, out: &Path) -> Result<bool> {
    anyhow::ensure!(
        out.join("solve.csv").exists(),
        "missing solve outputs in {}; run `smallsep solve` first",
        out.display()
    );
    let params = cfg.cantor_params();
    let scan = MeasureScanConfig {
        lambdas: cfg.lambdas(),
        epsilons: cfg.epsilons.clone(),
        nm: cfg.nm_config(Vec::new()),
        j0_stride: cfg.j0_stride,
        max_stage_tests: cfg.max_stages.max(1),
    };
    let problem = cfg.problem(cfg.epsilons[0]);
    let table = smallsep_core::cantor_measure::measure_scan(&problem, &scan, &params);

    let mut csv = format!(
        "{CSV_HEADER}\nepsilon,lambda,fracG_pass,cover_pass,barI,tildeI,in_Cantor\n"
    );
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt(r.epsilon),
            fmt(r.lambda),
            r.fracg_pass,
            r.cover_pass,
            r.bar_i,
            r.tilde_i,
            r.in_cantor
        ));
    }
    write_text(&out.join("cantor.csv"), &csv)?;

    let mut summary = format!("{CSV_HEADER}\nepsilon,complement_fraction\n");
    for s in &table.summary {
        summary.push_str(&format!("{},{}\n", fmt(s.epsilon), fmt(s.complement_fraction)));
    }
    write_text(&out.join("cantor_summary.csv"), &summary)?;
    write_json(&out.join("cantor_detail.json"), &table)?;
    Ok(table.all_consistent)
}

// ---------------------------------------------------------------------------
// chains

#[derive(Serialize)]
struct ChainRow {
    n: i64,
    lambda: f64,
    singular_sites: usize,
    components: usize,
    max_component_size: usize,
    max_graph_diameter: usize,
    clusters: usize,
    max_cluster_diameter: i64,
    min_pairwise_dist: Option<i64>,
    diameter_cap: f64,
    oversized: usize,
}

fn cmd_chains(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let lambda = cfg.lambdas()[0];
    let eps = cfg.epsilons[0];
    let problem = cfg.problem(eps);
    let u = smallsep_core::index_space::SeqVec::zero(problem.model().clone());
    let mut rows = Vec::new();
    let mut all_ok = true;
    for &n in &cfg.chain_scales {
        let op = linearize(&problem, &u, lambda, 0.0, n);
        let (_, singular) = op.classify_sites();
        let sing: BTreeSet<_> = singular.into_iter().collect();
        let chain = enumerate_chains(&sing, 2, (n * n) as usize, cfg.s_exp);
        let cluster = cluster_bad_sites(&sing, n.max(2), cfg.c1);
        if let Some(d) = cluster.min_pairwise_dist {
            if d < cluster.link_threshold {
                all_ok = false;
            }
        }
        rows.push(ChainRow {
            n,
            lambda,
            singular_sites: sing.len(),
            components: chain.components.len(),
            max_component_size: chain.max_component_size,
            max_graph_diameter: chain.max_graph_diameter,
            clusters: cluster.clusters.len(),
            max_cluster_diameter: cluster.diameters.iter().copied().max().unwrap_or(0),
            min_pairwise_dist: cluster.min_pairwise_dist,
            diameter_cap: cluster.diameter_cap,
            oversized: cluster.oversized.len(),
        });
    }
    let mut csv = format!(
        "{CSV_HEADER}\nn,lambda,singular_sites,components,max_component_size,max_graph_diameter,clusters,max_cluster_diameter,min_pairwise_dist,oversized\n"
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.n,
            fmt(r.lambda),
            r.singular_sites,
            r.components,
            r.max_component_size,
            r.max_graph_diameter,
            r.clusters,
            r.max_cluster_diameter,
            r.min_pairwise_dist.map(|d| d.to_string()).unwrap_or_default(),
            r.oversized
        ));
    }
    write_text(&out.join("chains.csv"), &csv)?;
    write_json(&out.join("chains.json"), &rows)?;
    Ok(all_ok)
}

// ---------------------------------------------------------------------------

fn real_main() -> Result<u8> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore failure when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.validate()?;
    fs::create_dir_all(&cli.out)?;
    let ok = match cli.cmd {
        Cmd::Properties => cmd_properties(&cfg, &cli.out, cli.seed)?,
        Cmd::Solve => {
            let clean = cmd_solve(&cfg, &cli.out)?;
            clean || !cli.strict
        }
        Cmd::Cantor => {
            let consistent = cmd_cantor(&cfg, &cli.out)?;
            consistent || !cli.strict
        }
        Cmd::Chains => cmd_chains(&cfg, &cli.out)?,
    };
    Ok(if ok { 0 } else { 1 })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
