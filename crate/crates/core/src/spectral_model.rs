//! Concrete spectral data: the torus model and a rank-1 model with unbounded
//! eigenvalue multiplicities.  Supplies eigenvalues, multiplicities, weights
//! and multiplication-operator matrices.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decay_matrix::{BlockMatrix, GroupIndex};
use crate::index_space::{LatticePoint, Site};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Flat torus: rank-r lattice, all multiplicities 1, `mu_j = -|j|^2`.
    Torus,
    /// Rank-1 model with SU(2)-type degeneracies: `d_j = j + 1`,
    /// `mu_j = -(j+1)^2 + 1`, cone `j >= 0`.
    Degenerate,
}

/// Lattice geometry plus eigenvalue/multiplicity data for one space model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    pub kind: ModelKind,
    /// Rank of the weight lattice (number of space coordinates).
    pub r: usize,
    /// Number of time frequencies.
    pub d: usize,
    /// Group dimension, controls the multiplicity bound `d_j <= |j+rho|^(gd-r)`.
    pub gd: usize,
    /// Weyl-vector coordinates (zeros on the torus).
    pub rho: Vec<i64>,
    /// Mass parameter of the dispersion relations built on this model.
    pub mass: f64,
    /// Lower comparability constant `c` in `c|k| <= w_k`; enters the weight
    /// floor `<w_k> = max(c, 1, w_k)`.
    pub weight_floor: f64,
}

impl SpectralModel {
    pub fn torus(d: usize, r: usize, mass: f64) -> Self {
        SpectralModel {
            kind: ModelKind::Torus,
            r,
            d,
            gd: r,
            rho: vec![0; r],
            mass,
            weight_floor: 1.0,
        }
    }

    /// Rank-1 degenerate model: r = 1, group dimension 3, rho = 1.
    pub fn degenerate(d: usize, mass: f64) -> Self {
        SpectralModel {
            kind: ModelKind::Degenerate,
            r: 1,
            d,
            gd: 3,
            rho: vec![1],
            mass,
            weight_floor: 1.0,
        }
    }

    /// Is `j` inside the cone of admissible space indices?
    pub fn in_cone(&self, j: &LatticePoint) -> bool {
        match self.kind {
            ModelKind::Torus => j.coords.len() == self.r,
            ModelKind::Degenerate => j.coords.len() == self.r && j.coords.iter().all(|&c| c >= 0),
        }
    }

    /// `mu_j = -|j+rho|^2 + |rho|^2`.
    pub fn eigenvalue(&self, j: &LatticePoint) -> f64 {
        assert!(self.in_cone(j), "lattice point outside the model cone");
        let mut shifted = 0.0;
        for (p, &c) in j.coords.iter().enumerate() {
            let v = (c + self.rho[p]) as f64;
            shifted += v * v;
        }
        let rho2: f64 = self.rho.iter().map(|&c| (c * c) as f64).sum::<f64>();
        -shifted + rho2
    }

    /// Eigenvalue multiplicity `d_j`.
    pub fn multiplicity(&self, j: &LatticePoint) -> usize {
        let m = match self.kind {
            ModelKind::Torus => 1usize,
            ModelKind::Degenerate => (j.coords[0] + 1) as usize,
        };
        // multiplicity bound d_j <= |j+rho|^(gd-r)
        let jr = self.j_plus_rho_norm(j);
        debug_assert!(
            (m as f64) <= jr.powi((self.gd - self.r) as i32).max(1.0) + 1e-9,
            "multiplicity bound violated"
        );
        m
    }

    pub fn j_plus_rho_norm(&self, j: &LatticePoint) -> f64 {
        j.coords
            .iter()
            .enumerate()
            .map(|(p, &c)| {
                let v = (c + self.rho[p]) as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Raw weight `w_k = sqrt(|l|^2 + |j+rho|^2)`.
    pub fn raw_weight(&self, k: &Site) -> f64 {
        let l2: f64 = k.l.iter().map(|&c| (c * c) as f64).sum();
        let jr = self.j_plus_rho_norm(&k.j);
        (l2 + jr * jr).sqrt()
    }

    /// Floored weight `<w_k> = max(c, 1, w_k)`.
    pub fn weight(&self, k: &Site) -> f64 {
        self.raw_weight(k).max(1.0).max(self.weight_floor)
    }

    /// Loss-of-derivatives constant `nu0 = (2d + gd + r + 1)/2`.
    pub fn nu0(&self) -> f64 {
        (2 * self.d + self.gd + self.r + 1) as f64 / 2.0
    }

    /// Component tags of the scalar (NLW-type) setting.
    pub fn scalar_comps() -> Vec<i8> {
        vec![1]
    }

    /// Component tags of the doubled (NLS-type) setting.
    pub fn doubled_comps() -> Vec<i8> {
        vec![1, -1]
    }
}

/// Finitely supported Fourier coefficients of a function `b(phi, x)` on the
/// time-space torus; keys are `(l, i)` frequency pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierFunction {
    pub coeffs: BTreeMap<(Vec<i64>, Vec<i64>), Complex64>,
    /// Declares `b` real-valued: coefficients must be conjugate-symmetric.
    pub real: bool,
}

impl FourierFunction {
    pub fn zero() -> Self {
        FourierFunction { coeffs: BTreeMap::new(), real: true }
    }

    pub fn constant(c: Complex64) -> Self {
        let mut f = FourierFunction::zero();
        if c.norm() > 0.0 {
            f.coeffs.insert((Vec::new(), Vec::new()), c);
            f.real = c.im == 0.0;
        }
        f
    }

    /// `cos(l.phi + i.x)` as two symmetric coefficients.
    pub fn cosine(l: Vec<i64>, i: Vec<i64>) -> Self {
        let mut f = FourierFunction::zero();
        let half = Complex64::new(0.5, 0.0);
        let neg_l: Vec<i64> = l.iter().map(|&v| -v).collect();
        let neg_i: Vec<i64> = i.iter().map(|&v| -v).collect();
        *f.coeffs.entry((l, i)).or_insert(Complex64::new(0.0, 0.0)) += half;
        *f.coeffs.entry((neg_l, neg_i)).or_insert(Complex64::new(0.0, 0.0)) += half;
        f.prune();
        f
    }

    pub fn get(&self, l: &[i64], i: &[i64]) -> Complex64 {
        self.coeffs
            .get(&(l.to_vec(), i.to_vec()))
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn add_term(&mut self, l: Vec<i64>, i: Vec<i64>, c: Complex64) {
        *self.coeffs.entry((l, i)).or_insert(Complex64::new(0.0, 0.0)) += c;
        self.prune();
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for v in out.coeffs.values_mut() {
            *v *= c;
        }
        out.real = out.is_conjugate_symmetric(1e-15);
        out.prune();
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, v) in &other.coeffs {
            *out.coeffs.entry(k.clone()).or_insert(Complex64::new(0.0, 0.0)) += *v;
        }
        out.real = self.real && other.real;
        out.prune();
        out
    }

    /// Pointwise product via coefficient convolution (exact for trig
    /// polynomials).  Constants carry empty frequency keys; they combine with
    /// any dimension.
    pub fn convolve(&self, other: &Self) -> Self {
        fn combine(a: &[i64], b: &[i64]) -> Vec<i64> {
            if a.is_empty() {
                b.to_vec()
            } else if b.is_empty() {
                a.to_vec()
            } else {
                assert_eq!(a.len(), b.len(), "frequency dimension mismatch");
                a.iter().zip(b).map(|(x, y)| x + y).collect()
            }
        }
        let mut out = FourierFunction { coeffs: BTreeMap::new(), real: self.real && other.real };
        for ((l1, i1), v1) in &self.coeffs {
            for ((l2, i2), v2) in &other.coeffs {
                let l = combine(l1, l2);
                let i = combine(i1, i2);
                *out.coeffs.entry((l, i)).or_insert(Complex64::new(0.0, 0.0)) += v1 * v2;
            }
        }
        out.prune();
        out
    }

    pub fn conj(&self) -> Self {
        let mut out = FourierFunction { coeffs: BTreeMap::new(), real: self.real };
        for ((l, i), v) in &self.coeffs {
            let nl: Vec<i64> = l.iter().map(|&x| -x).collect();
            let ni: Vec<i64> = i.iter().map(|&x| -x).collect();
            out.coeffs.insert((nl, ni), v.conj());
        }
        out
    }

    pub fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        for ((l, i), v) in &self.coeffs {
            let nl: Vec<i64> = l.iter().map(|&x| -x).collect();
            let ni: Vec<i64> = i.iter().map(|&x| -x).collect();
            let w = self.coeffs.get(&(nl, ni)).copied().unwrap_or(Complex64::new(0.0, 0.0));
            if (v - w.conj()).norm() > tol {
                return false;
            }
        }
        true
    }

    /// Evaluate at a point of the torus (for cross-checks).
    pub fn eval(&self, phi: &[f64], x: &[f64]) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for ((l, i), v) in &self.coeffs {
            let mut arg = 0.0;
            for (p, &lp) in l.iter().enumerate() {
                arg += lp as f64 * phi[p];
            }
            for (p, &ip) in i.iter().enumerate() {
                arg += ip as f64 * x[p];
            }
            acc += v * Complex64::new(0.0, arg).exp();
        }
        acc
    }

    pub fn sup_radius(&self) -> i64 {
        self.coeffs
            .keys()
            .map(|(l, i)| {
                l.iter()
                    .chain(i.iter())
                    .map(|&v| v.abs())
                    .max()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    fn prune(&mut self) {
        self.coeffs.retain(|_, v| v.norm() > 0.0);
    }
}

/// Assembles the matrix of the multiplication operator `u -> b u` on the torus:
/// component-diagonal blocks `b_hat(l - l', j - j')`.
pub fn multiplication_matrix(
    model: &SpectralModel,
    b: &FourierFunction,
    row_window: &[GroupIndex],
    col_window: &[GroupIndex],
) -> BlockMatrix {
    assert!(
        model.kind == ModelKind::Torus,
        "analytic multiplication matrices exist only on the torus; use synthetic blocks for the degenerate model"
    );
    let mut m = BlockMatrix::zero(row_window.to_vec(), col_window.to_vec(), model.clone());
    let rad = b.sup_radius();
    for (ri, rg) in row_window.iter().enumerate() {
        for (ci, cg) in col_window.iter().enumerate() {
            let dl: Vec<i64> = rg.l.iter().zip(&cg.l).map(|(a, b)| a - b).collect();
            let dj: Vec<i64> = rg.j.coords.iter().zip(&cg.j.coords).map(|(a, b)| a - b).collect();
            if dl.iter().chain(dj.iter()).any(|&v| v.abs() > rad) {
                continue;
            }
            let c = b.get(&dl, &dj);
            if c.norm() == 0.0 {
                continue;
            }
            // component-diagonal scalar action
            let nr = rg.comps.len();
            let nc = cg.comps.len();
            let mut block = nalgebra::DMatrix::<Complex64>::zeros(nr, nc);
            for (a_r, &ar) in rg.comps.iter().enumerate() {
                for (a_c, &ac) in cg.comps.iter().enumerate() {
                    if ar == ac {
                        block[(a_r, a_c)] = c;
                    }
                }
            }
            m.set_block(ri, ci, block);
        }
    }
    m
}
