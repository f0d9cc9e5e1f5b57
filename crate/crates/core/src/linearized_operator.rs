//! The linearized operator family `L = D(lambda, theta) + epsilon T`:
//! dispersion diagonals with their covariance in time, windowed truncations,
//! regular/singular site classification, chain enumeration over singular
//! sites, and bad-site clustering.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decay_matrix::{group_sites, BlockMatrix, GroupIndex};
use crate::index_space::{dist, IndexWindow, Site};
use crate::spectral_model::SpectralModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispersionKind {
    /// Wave-type: second order in time, scalar unknown.
    Nlw,
    /// Schroedinger-type: first order in time, doubled unknown with
    /// component tags +1/-1.
    Nls,
}

/// Dispersion data: mass, frequency direction and the space model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionRule {
    pub kind: DispersionKind,
    pub mass: f64,
    pub omega_bar: Vec<f64>,
    pub model: SpectralModel,
}

pub fn omega_dot(omega: &[f64], l: &[i64]) -> f64 {
    omega.iter().zip(l).map(|(w, &v)| w * v as f64).sum()
}

/// Golden-mean frequency `1/phi`, the default honest Diophantine direction.
pub fn golden_omega() -> Vec<f64> {
    vec![(5f64.sqrt() - 1.0) / 2.0]
}

impl DispersionRule {
    pub fn new(kind: DispersionKind, mass: f64, omega_bar: Vec<f64>, model: SpectralModel) -> Self {
        assert!(mass > 0.0, "mass must be positive");
        assert_eq!(omega_bar.len(), model.d, "frequency dimension mismatch");
        let l1: f64 = omega_bar.iter().map(|w| w.abs()).sum();
        assert!(l1 <= 1.0 + 1e-12, "|omega_bar|_1 must be <= 1");
        DispersionRule { kind, mass, omega_bar, model }
    }

    pub fn comps(&self) -> Vec<i8> {
        match self.kind {
            DispersionKind::Nlw => SpectralModel::scalar_comps(),
            DispersionKind::Nls => SpectralModel::doubled_comps(),
        }
    }

    /// Diagonal symbol at one site: the dispersion evaluated at
    /// `y = lambda omega_bar . l + theta`.
    pub fn diag_entry(&self, k: &Site, lambda: f64, theta: f64) -> f64 {
        let y = lambda * omega_dot(&self.omega_bar, &k.l) + theta;
        let mu = self.model.eigenvalue(&k.j);
        match self.kind {
            DispersionKind::Nlw => -y * y + self.mass - mu,
            DispersionKind::Nls => -(k.a as f64) * y - mu + self.mass,
        }
    }
}

/// A finite truncation `L = D + epsilon T` over one window.
#[derive(Clone, Debug)]
pub struct TruncatedOperator {
    pub rule: DispersionRule,
    pub window: IndexWindow,
    pub lambda: f64,
    pub theta: f64,
    pub epsilon: f64,
    /// Perturbation over the window's grouped sites (rows = cols = groups).
    pub t: BlockMatrix,
}

impl TruncatedOperator {
    /// Assemble from a ready perturbation matrix over the window's groups.
    pub fn assemble(
        rule: DispersionRule,
        window: IndexWindow,
        lambda: f64,
        theta: f64,
        epsilon: f64,
        t: BlockMatrix,
    ) -> Self {
        let groups = group_sites(&window.sites(&rule.model));
        assert_eq!(t.rows, groups, "perturbation rows must match the window");
        assert_eq!(t.cols, groups, "perturbation cols must match the window");
        TruncatedOperator { rule, window, lambda, theta, epsilon, t }
    }

    pub fn sites(&self) -> Vec<Site> {
        self.window.sites(&self.rule.model)
    }

    pub fn groups(&self) -> Vec<GroupIndex> {
        self.t.rows.clone()
    }

    /// Diagonal-only block matrix `D(lambda, theta)` over the window.
    pub fn diag_matrix(&self) -> BlockMatrix {
        let groups = self.groups();
        let model = self.rule.model.clone();
        let mut m = BlockMatrix::zero(groups.clone(), groups.clone(), model.clone());
        for (gi, g) in groups.iter().enumerate() {
            let dj = model.multiplicity(&g.j);
            let dim = g.dim(&model);
            let mut b = DMatrix::<Complex64>::zeros(dim, dim);
            for (ci, &a) in g.comps.iter().enumerate() {
                let k = Site::new(g.l.clone(), g.j.clone(), a);
                let v = self.rule.diag_entry(&k, self.lambda, self.theta);
                for t in 0..dj {
                    b[(ci * dj + t, ci * dj + t)] = Complex64::new(v, 0.0);
                }
            }
            m.set_block(gi, gi, b);
        }
        m
    }

    /// The full truncation `D + epsilon T` as one block matrix.
    pub fn to_block_matrix(&self) -> BlockMatrix {
        self.diag_matrix()
            .add(&self.t.scale(Complex64::new(self.epsilon, 0.0)))
            .expect("windows match by construction")
    }

    /// Partition of the window's sites by `|D_k| >= 1` (boundary regular).
    pub fn classify_sites(&self) -> (BTreeSet<Site>, BTreeSet<Site>) {
        let mut regular = BTreeSet::new();
        let mut singular = BTreeSet::new();
        for k in self.sites() {
            if self.rule.diag_entry(&k, self.lambda, self.theta).abs() >= 1.0 {
                regular.insert(k);
            } else {
                singular.insert(k);
            }
        }
        (regular, singular)
    }

    /// Restriction of `D + epsilon T` to site subsets.
    pub fn submatrix(&self, row_sites: &BTreeSet<Site>, col_sites: &BTreeSet<Site>) -> BlockMatrix {
        self.to_block_matrix().restrict_sites(row_sites, col_sites)
    }
}

/// Exact Toeplitz-in-time check: blocks must depend on `l - l'` (and the
/// `(j, j', comps)` data) only.
pub fn is_toeplitz_in_time(t: &BlockMatrix, tol: f64) -> bool {
    type Key = (Vec<i64>, Vec<i64>, Vec<i64>, Vec<i8>, Vec<i8>);
    let mut seen: BTreeMap<Key, DMatrix<Complex64>> = BTreeMap::new();
    for (&(ri, ci), b) in &t.blocks {
        let rg = &t.rows[ri];
        let cg = &t.cols[ci];
        let dl: Vec<i64> = rg.l.iter().zip(&cg.l).map(|(a, c)| a - c).collect();
        let key = (
            dl,
            rg.j.coords.clone(),
            cg.j.coords.clone(),
            rg.comps.clone(),
            cg.comps.clone(),
        );
        match seen.get(&key) {
            Some(prev) => {
                if (prev - b).norm() > tol {
                    return false;
                }
            }
            None => {
                seen.insert(key, b.clone());
            }
        }
    }
    true
}

/// Minimal union-find with union by size.
struct UnionFind {
    nodes: Vec<(usize, usize)>, // (size, parent)
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { nodes: (0..n).map(|i| (1, i)).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.nodes[x].1 != x {
            let parent = self.nodes[x].1;
            self.nodes[x].1 = self.nodes[parent].1;
            x = parent;
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.nodes[ra].0 < self.nodes[rb].0 {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.nodes[rb].1 = ra;
        self.nodes[ra].0 += self.nodes[rb].0;
    }
}

/// Connected components of the `dist <= gamma` graph on a site set.
fn graph_components(sites: &[Site], gamma: i64) -> Vec<Vec<Site>> {
    let n = sites.len();
    let mut uf = UnionFind::new(n);
    for a in 0..n {
        for b in (a + 1)..n {
            if dist(&sites[a], &sites[b]) <= gamma {
                uf.union(a, b);
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<Site>> = BTreeMap::new();
    for i in 0..n {
        let root = uf.find(i);
        comps.entry(root).or_default().push(sites[i].clone());
    }
    comps.into_values().collect()
}

/// BFS diameter of one component in graph distance (edges: `dist <= gamma`).
fn component_diameter(comp: &[Site], gamma: i64) -> usize {
    let n = comp.len();
    let mut best = 0usize;
    for start in 0..n {
        let mut depth = vec![usize::MAX; n];
        depth[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for w in 0..n {
                if depth[w] == usize::MAX && dist(&comp[v], &comp[w]) <= gamma {
                    depth[w] = depth[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        best = best.max(depth.iter().copied().filter(|&d| d != usize::MAX).max().unwrap_or(0));
    }
    best
}

/// Report on chain structure of a (typically singular) site set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainReport {
    pub components: Vec<Vec<Site>>,
    pub max_component_size: usize,
    /// Largest graph diameter among components (hop count).
    pub max_graph_diameter: usize,
    /// Sites dropped by the per-fiber cardinality cap.
    pub filtered: usize,
    /// `(Gamma K)^s` sanity threshold and whether all components respect it.
    pub length_bound: f64,
    pub bound_satisfied: bool,
}

/// Enumerates chain components of the `dist <= Gamma` graph after capping
/// each `(j, a)` fiber at `k_cap` sites.
pub fn enumerate_chains(sites: &BTreeSet<Site>, gamma: i64, k_cap: usize, s_exp: f64) -> ChainReport {
    assert!(gamma >= 1);
    let mut by_fiber: BTreeMap<(Vec<i64>, i8), Vec<Site>> = BTreeMap::new();
    for k in sites {
        by_fiber
            .entry((k.j.coords.clone(), k.a))
            .or_default()
            .push(k.clone());
    }
    let mut kept = Vec::new();
    let mut filtered = 0usize;
    for (_, mut fiber) in by_fiber {
        fiber.sort();
        if fiber.len() > k_cap {
            filtered += fiber.len() - k_cap;
            fiber.truncate(k_cap);
        }
        kept.extend(fiber);
    }
    kept.sort();
    let components = graph_components(&kept, gamma);
    let max_component_size = components.iter().map(|c| c.len()).max().unwrap_or(0);
    let max_graph_diameter = components
        .iter()
        .map(|c| component_diameter(c, gamma))
        .max()
        .unwrap_or(0);
    let length_bound = ((gamma as f64) * (k_cap as f64)).powf(s_exp);
    let bound_satisfied = (max_component_size as f64) <= length_bound;
    ChainReport {
        components,
        max_component_size,
        max_graph_diameter,
        filtered,
        length_bound,
        bound_satisfied,
    }
}

/// Partition of bad sites into clusters with guaranteed mutual separation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<Vec<Site>>,
    pub diameters: Vec<i64>,
    /// Smallest inter-cluster distance (None when < 2 clusters).
    pub min_pairwise_dist: Option<i64>,
    /// Linking threshold used: sites at distance < N^2 share a cluster.
    pub link_threshold: i64,
    /// Diameter cap `N^C1` and the indices of clusters exceeding it.
    pub diameter_cap: f64,
    pub oversized: Vec<usize>,
}

/// Clusters bad sites by chaining at distance < N^2; inter-cluster distance
/// >= N^2 then holds by construction.  Clusters with diameter above `N^C1`
/// are flagged, not rejected.
pub fn cluster_bad_sites(bad: &BTreeSet<Site>, n: i64, c1: f64) -> ClusterReport {
    assert!(n >= 2);
    let sites: Vec<Site> = bad.iter().cloned().collect();
    let threshold = n * n;
    // linking at dist <= N^2 - 1 == dist < N^2
    let clusters = graph_components(&sites, threshold - 1);
    let diameters: Vec<i64> = clusters
        .iter()
        .map(|c| {
            let mut d = 0;
            for a in 0..c.len() {
                for b in (a + 1)..c.len() {
                    d = d.max(dist(&c[a], &c[b]));
                }
            }
            d
        })
        .collect();
    let mut min_pd: Option<i64> = None;
    for a in 0..clusters.len() {
        for b in (a + 1)..clusters.len() {
            for ka in &clusters[a] {
                for kb in &clusters[b] {
                    let d = dist(ka, kb);
                    min_pd = Some(min_pd.map_or(d, |m: i64| m.min(d)));
                }
            }
        }
    }
    let cap = (n as f64).powf(c1);
    let oversized = diameters
        .iter()
        .enumerate()
        .filter(|(_, &d)| (d as f64) > cap)
        .map(|(i, _)| i)
        .collect();
    ClusterReport {
        clusters,
        diameters,
        min_pairwise_dist: min_pd,
        link_threshold: threshold,
        diameter_cap: cap,
        oversized,
    }
}

/// Outcome of the finite-range Diophantine scans on the frequency direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub linear_ok: bool,
    /// Minimal `|omega.l| |l|^d` over the scanned range.
    pub linear_margin: f64,
    pub quadratic_ok: bool,
    /// Minimal `|sum omega_i omega_j p_ij| |p|^(d(d+1))` over the scan.
    pub quadratic_margin: f64,
}

/// Checks `|omega.l| >= 2 gamma0 |l|^(-d)` for `0 < |l| <= lmax` and the
/// quadratic condition on products `omega_i omega_j` for `0 < |p| <= pmax`.
pub fn diophantine_check(omega_bar: &[f64], gamma0: f64, lmax: i64, pmax: i64) -> DiophantineReport {
    let d = omega_bar.len();
    // linear scan
    let mut linear_margin = f64::INFINITY;
    let mut ls: Vec<Vec<i64>> = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for base in &ls {
            for v in -lmax..=lmax {
                let mut b = base.clone();
                b.push(v);
                next.push(b);
            }
        }
        ls = next;
    }
    for l in &ls {
        let sup = l.iter().map(|v| v.abs()).max().unwrap_or(0);
        if sup == 0 {
            continue;
        }
        let margin = omega_dot(omega_bar, l).abs() * (sup as f64).powi(d as i32);
        if margin < linear_margin {
            linear_margin = margin;
        }
    }
    let linear_ok = linear_margin >= 2.0 * gamma0;

    // quadratic scan over symmetric integer coefficient arrays p_ij, i <= j
    let npairs = d * (d + 1) / 2;
    let mut ps: Vec<Vec<i64>> = vec![Vec::new()];
    for _ in 0..npairs {
        let mut next = Vec::new();
        for base in &ps {
            for v in -pmax..=pmax {
                let mut b = base.clone();
                b.push(v);
                next.push(b);
            }
        }
        ps = next;
    }
    let mut quadratic_margin = f64::INFINITY;
    for p in &ps {
        let sup = p.iter().map(|v| v.abs()).max().unwrap_or(0);
        if sup == 0 {
            continue;
        }
        let mut val = 0.0;
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                let sym = if i == j { 1.0 } else { 2.0 };
                val += sym * omega_bar[i] * omega_bar[j] * p[idx] as f64;
                idx += 1;
            }
        }
        let margin = val.abs() * (sup as f64).powi((d * (d + 1)) as i32);
        if margin < quadratic_margin {
            quadratic_margin = margin;
        }
    }
    let quadratic_ok = quadratic_margin >= gamma0;

    DiophantineReport { linear_ok, linear_margin, quadratic_ok, quadratic_margin }
}
