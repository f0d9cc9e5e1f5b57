//! Index sets, distances, weights and the weighted sequence spaces the whole
//! solver operates on.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::spectral_model::SpectralModel;

/// Space index: coefficients on the fundamental weights of the lattice.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatticePoint {
    pub coords: Vec<i64>,
}

impl LatticePoint {
    pub fn new(coords: Vec<i64>) -> Self {
        LatticePoint { coords }
    }

    pub fn origin(r: usize) -> Self {
        LatticePoint { coords: vec![0; r] }
    }

    pub fn sup_norm(&self) -> i64 {
        self.coords.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    /// Difference in the ambient lattice (no cone restriction).
    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.coords.len(), other.coords.len(), "rank mismatch");
        LatticePoint {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// A point of the full index set: time frequency, space index, component tag.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub l: Vec<i64>,
    pub j: LatticePoint,
    pub a: i8,
}

impl Site {
    pub fn new(l: Vec<i64>, j: LatticePoint, a: i8) -> Self {
        Site { l, j, a }
    }

    /// `|k| = max(|l|_inf, |j|_inf)`.
    pub fn sup_norm(&self) -> i64 {
        let li = self.l.iter().map(|c| c.abs()).max().unwrap_or(0);
        li.max(self.j.sup_norm())
    }

    pub fn index_part(&self) -> (Vec<i64>, LatticePoint) {
        (self.l.clone(), self.j.clone())
    }
}

/// Distance between sites: 1 when the indices agree but the component tags
/// differ, otherwise the sup-distance of the `(l, j)` parts in the ambient
/// lattice.
pub fn dist(k: &Site, kp: &Site) -> i64 {
    assert_eq!(k.l.len(), kp.l.len(), "time dimension mismatch");
    assert_eq!(k.j.coords.len(), kp.j.coords.len(), "space rank mismatch");
    let dl = k
        .l
        .iter()
        .zip(&kp.l)
        .map(|(a, b)| (a - b).abs())
        .max()
        .unwrap_or(0);
    let dj = k.j.sub(&kp.j).sup_norm();
    let di = dl.max(dj);
    if di == 0 && k.a != kp.a {
        1
    } else {
        di
    }
}

/// Distance of the `(l, j)` parts only (component tags ignored).
pub fn index_dist(l1: &[i64], j1: &LatticePoint, l2: &[i64], j2: &LatticePoint) -> i64 {
    let dl = l1
        .iter()
        .zip(l2)
        .map(|(a, b)| (a - b).abs())
        .max()
        .unwrap_or(0);
    dl.max(j1.sub(j2).sup_norm())
}

/// Compensated (Kahan) summation of nonnegative terms.
pub fn kahan_sum(it: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in it {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Finitely supported element of the weighted sequence spaces; each site
/// carries a complex block of length `d_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqVec {
    pub entries: BTreeMap<Site, Vec<Complex64>>,
    pub model: SpectralModel,
}

impl SeqVec {
    pub fn zero(model: SpectralModel) -> Self {
        SeqVec { entries: BTreeMap::new(), model }
    }

    pub fn insert(&mut self, k: Site, block: Vec<Complex64>) {
        assert_eq!(
            block.len(),
            self.model.multiplicity(&k.j),
            "block length must equal the multiplicity d_j"
        );
        if block.iter().all(|c| c.norm() == 0.0) {
            self.entries.remove(&k);
        } else {
            self.entries.insert(k, block);
        }
    }

    /// Scalar-site convenience for multiplicity-1 models.
    pub fn insert_scalar(&mut self, k: Site, v: Complex64) {
        self.insert(k, vec![v]);
    }

    pub fn get(&self, k: &Site) -> Option<&Vec<Complex64>> {
        self.entries.get(k)
    }

    pub fn get_scalar(&self, k: &Site) -> Complex64 {
        self.entries
            .get(k)
            .map(|b| b[0])
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Euclidean block norm at one site.
    pub fn block_norm(&self, k: &Site) -> f64 {
        self.entries
            .get(k)
            .map(|b| kahan_sum(b.iter().map(|c| c.norm_sqr())).sqrt())
            .unwrap_or(0.0)
    }

    /// `||u||_s^2 = sum_k <w_k>^(2s) ||u_k||^2`.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        assert!(s >= 0.0, "norm index must be nonnegative");
        kahan_sum(self.entries.iter().map(|(k, b)| {
            let w = self.model.weight(k);
            let b2 = kahan_sum(b.iter().map(|c| c.norm_sqr()));
            w.powf(2.0 * s) * b2
        }))
        .sqrt()
    }

    /// Galerkin projection: zero all entries with `|k| > N`.
    pub fn project(&self, n: i64) -> SeqVec {
        assert!(n >= 0);
        let mut out = SeqVec::zero(self.model.clone());
        for (k, b) in &self.entries {
            if k.sup_norm() <= n {
                out.entries.insert(k.clone(), b.clone());
            }
        }
        out
    }

    /// Complement projection `(1 - Pi^(N)) u`.
    pub fn project_tail(&self, n: i64) -> SeqVec {
        let mut out = SeqVec::zero(self.model.clone());
        for (k, b) in &self.entries {
            if k.sup_norm() > n {
                out.entries.insert(k.clone(), b.clone());
            }
        }
        out
    }

    pub fn add(&self, other: &SeqVec) -> SeqVec {
        let mut out = self.clone();
        for (k, b) in &other.entries {
            match out.entries.get_mut(k) {
                Some(eb) => {
                    for (x, y) in eb.iter_mut().zip(b) {
                        *x += *y;
                    }
                }
                None => {
                    out.entries.insert(k.clone(), b.clone());
                }
            }
        }
        out.prune();
        out
    }

    pub fn sub(&self, other: &SeqVec) -> SeqVec {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> SeqVec {
        let mut out = self.clone();
        for b in out.entries.values_mut() {
            for x in b.iter_mut() {
                *x *= c;
            }
        }
        out.prune();
        out
    }

    /// Largest `|k|` in the support (0 for the zero vector).
    pub fn support_radius(&self) -> i64 {
        self.entries.keys().map(|k| k.sup_norm()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    fn prune(&mut self) {
        self.entries.retain(|_, b| b.iter().any(|c| c.norm() > 0.0));
    }
}

/// Log-convexity of the norm in `s`:
/// `||u||_(t s1 + (1-t) s2) <= ||u||_s1^t ||u||_s2^(1-t)` (constant 1).
pub fn interpolation_check(u: &SeqVec, s1: f64, s2: f64, t: f64) -> bool {
    assert!(s1 < s2 && (0.0..=1.0).contains(&t));
    let mid = u.sobolev_norm(t * s1 + (1.0 - t) * s2);
    let bound = u.sobolev_norm(s1).powf(t) * u.sobolev_norm(s2).powf(1.0 - t);
    mid <= bound * (1.0 + 1e-12) + 1e-300
}

/// Finite truncation window: all sites within `radius` of a center index,
/// restricted to the model cone, for a fixed set of component tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexWindow {
    pub center_l: Vec<i64>,
    pub center_j: LatticePoint,
    pub radius: i64,
    pub comps: Vec<i8>,
}

impl IndexWindow {
    pub fn centered(center_l: Vec<i64>, center_j: LatticePoint, radius: i64, comps: Vec<i8>) -> Self {
        assert!(radius >= 0);
        IndexWindow { center_l, center_j, radius, comps }
    }

    pub fn origin(d: usize, r: usize, radius: i64, comps: Vec<i8>) -> Self {
        Self::centered(vec![0; d], LatticePoint::origin(r), radius, comps)
    }

    /// Enumerate the window's sites in canonical order.
    pub fn sites(&self, model: &SpectralModel) -> Vec<Site> {
        let mut ls: Vec<Vec<i64>> = vec![Vec::new()];
        for p in 0..self.center_l.len() {
            let c = self.center_l[p];
            let mut next = Vec::new();
            for base in &ls {
                for v in (c - self.radius)..=(c + self.radius) {
                    let mut b = base.clone();
                    b.push(v);
                    next.push(b);
                }
            }
            ls = next;
        }
        let mut js: Vec<Vec<i64>> = vec![Vec::new()];
        for p in 0..self.center_j.coords.len() {
            let c = self.center_j.coords[p];
            let mut next = Vec::new();
            for base in &js {
                for v in (c - self.radius)..=(c + self.radius) {
                    let mut b = base.clone();
                    b.push(v);
                    next.push(b);
                }
            }
            js = next;
        }
        let mut out = Vec::new();
        for l in &ls {
            for j in &js {
                let jp = LatticePoint::new(j.clone());
                if !model.in_cone(&jp) {
                    continue;
                }
                for &a in &self.comps {
                    out.push(Site::new(l.clone(), jp.clone(), a));
                }
            }
        }
        out.sort();
        out
    }

    /// Total scalar dimension of the window.
    pub fn scalar_dim(&self, model: &SpectralModel) -> usize {
        self.sites(model)
            .iter()
            .map(|k| model.multiplicity(&k.j))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus() -> SpectralModel {
        SpectralModel::torus(1, 1, 1.0)
    }

    fn site(l: &[i64], j: &[i64], a: i8) -> Site {
        Site::new(l.to_vec(), LatticePoint::new(j.to_vec()), a)
    }

    #[test]
    fn dist_component_flip() {
        let k = site(&[0], &[0], 1);
        let kp = site(&[0], &[0], -1);
        assert_eq!(dist(&k, &kp), 1);
        assert_eq!(dist(&k, &k), 0);
    }

    #[test]
    fn dist_sup_metric() {
        let k = Site::new(vec![2, 0], LatticePoint::new(vec![3]), 1);
        let kp = Site::new(vec![-1, 0], LatticePoint::new(vec![1]), 1);
        assert_eq!(dist(&k, &kp), 3);
    }

    #[test]
    fn dist_metric_axioms_exhaustive() {
        // symmetry + triangle inequality on a fixed-component window, radius 6 in 1+1 dims
        let m = torus();
        let w = IndexWindow::origin(1, 1, 6, vec![1]);
        let sites = w.sites(&m);
        // sampled triples to keep runtime sane but still cover the box densely
        let step = 7;
        for (ai, a) in sites.iter().enumerate().step_by(3) {
            for (bi, b) in sites.iter().enumerate().step_by(step) {
                assert_eq!(dist(a, b), dist(b, a));
                for c in sites.iter().skip((ai + bi) % 11).step_by(step) {
                    assert!(dist(a, c) <= dist(a, b) + dist(b, c));
                }
            }
        }
    }

    #[test]
    fn weights() {
        let m = torus();
        assert_eq!(m.weight(&site(&[3], &[4], 1)), 5.0);
        assert_eq!(m.weight(&site(&[0], &[0], 1)), 1.0);
        let dm = SpectralModel::degenerate(1, 1.0);
        assert_eq!(dm.weight(&site(&[0], &[2], 1)), 3.0);
    }

    #[test]
    fn sobolev_norm_examples() {
        let m = torus();
        let mut u = SeqVec::zero(m.clone());
        // single site with weight 5 and block norm 2, s = 1 -> 10
        u.insert_scalar(site(&[3], &[4], 1), Complex64::new(2.0, 0.0));
        assert!((u.sobolev_norm(1.0) - 10.0).abs() < 1e-12);
        assert_eq!(SeqVec::zero(m.clone()).sobolev_norm(2.0), 0.0);
        // two sites with weights 1 and 2, unit blocks, s = 2 -> sqrt(17)
        let mut v = SeqVec::zero(m);
        v.insert_scalar(site(&[0], &[0], 1), Complex64::new(1.0, 0.0));
        v.insert_scalar(site(&[2], &[0], 1), Complex64::new(1.0, 0.0));
        assert!((v.sobolev_norm(2.0) - 17.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn norm_monotone_in_s() {
        let m = torus();
        let mut u = SeqVec::zero(m);
        for (i, (l, j)) in [(1, 2), (-3, 0), (0, 5), (2, -2)].iter().enumerate() {
            u.insert_scalar(site(&[*l], &[*j], 1), Complex64::new(0.3 * (i as f64 + 1.0), 0.1));
        }
        let mut prev = u.sobolev_norm(0.0);
        for i in 1..=8 {
            let cur = u.sobolev_norm(i as f64 * 0.5);
            assert!(cur >= prev - 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn projection_boundary_and_tame_bounds() {
        let m = torus();
        let mut u = SeqVec::zero(m.clone());
        u.insert_scalar(site(&[7], &[0], 1), Complex64::new(1.0, 0.0));
        assert_eq!(u.project(7), u);
        let mut v = SeqVec::zero(m.clone());
        v.insert_scalar(site(&[8], &[0], 1), Complex64::new(1.0, 0.0));
        assert!(v.project(7).is_zero());

        // (P1)/(P2) with constant 1 on a mixed-support vector
        let mut w = SeqVec::zero(m);
        for (l, j) in [(0, 1), (3, 2), (6, -1), (9, 4), (12, 0)] {
            w.insert_scalar(site(&[l], &[j], 1), Complex64::new(1.0, -0.5));
        }
        let (s, nu, n) = (1.5, 2.0, 5i64);
        let p1 = w.project(n).sobolev_norm(s + nu);
        assert!(p1 <= (n as f64).powf(nu) * w.sobolev_norm(s) * (1.0 + 1e-12));
        let p2 = w.project_tail(n).sobolev_norm(s);
        assert!(p2 <= (n as f64).powf(-nu) * w.sobolev_norm(s + nu) * (1.0 + 1e-12));
    }

    #[test]
    fn interpolation_log_convexity() {
        let m = torus();
        // single mode: equality
        let mut u = SeqVec::zero(m.clone());
        u.insert_scalar(site(&[2], &[3], 1), Complex64::new(1.0, 1.0));
        assert!(interpolation_check(&u, 1.0, 3.0, 0.5));
        // t = 0 / t = 1 trivial
        assert!(interpolation_check(&u, 1.0, 3.0, 0.0));
        assert!(interpolation_check(&u, 1.0, 3.0, 1.0));
        // 50-mode pseudo-random vector
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut v = SeqVec::zero(m);
        for _ in 0..50 {
            let l = rng.gen_range(-10..=10);
            let j = rng.gen_range(-10..=10);
            let re: f64 = rng.gen_range(-1.0..1.0);
            let im: f64 = rng.gen_range(-1.0..1.0);
            v.insert_scalar(site(&[l], &[j], 1), Complex64::new(re, im));
        }
        for t in [0.25, 0.5, 0.75] {
            assert!(interpolation_check(&v, 0.5, 4.0, t));
        }
    }

    #[test]
    fn cone_product_structure() {
        // coordinate boxes between cone points stay in the cone
        let m = SpectralModel::degenerate(1, 1.0);
        for a in 0..=6i64 {
            for b in 0..=6i64 {
                let (lo, hi) = (a.min(b), a.max(b));
                for mid in lo..=hi {
                    assert!(m.in_cone(&LatticePoint::new(vec![mid])));
                }
            }
        }
    }

    #[test]
    fn window_enumeration() {
        let m = torus();
        let w = IndexWindow::origin(1, 1, 2, vec![1]);
        assert_eq!(w.sites(&m).len(), 25);
        let dm = SpectralModel::degenerate(1, 1.0);
        let wd = IndexWindow::origin(1, 1, 2, vec![1]);
        // cone cuts j to {0, 1, 2}
        assert_eq!(wd.sites(&dm).len(), 15);
        // scalar dimension counts multiplicities 1 + 2 + 3 per l-column
        assert_eq!(wd.scalar_dim(&dm), 5 * 6);
    }
}
