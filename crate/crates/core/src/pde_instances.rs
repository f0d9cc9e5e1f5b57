//! Concrete nonlinear problems: the forced wave equation (scalar unknown) and
//! the doubled Schroedinger system (components +1/-1 with the reality
//! subspace `u^- = conj(u^+)`).  Provides `F(eps, lambda, u)`, its
//! linearization as a truncated operator, and the holomorphic extension pair
//! for first-order nonlinearities.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decay_matrix::{group_sites, BlockMatrix, GroupIndex};
use crate::index_space::{IndexWindow, LatticePoint, SeqVec, Site};
use crate::linearized_operator::{DispersionKind, DispersionRule, TruncatedOperator};
use crate::spectral_model::{multiplication_matrix, FourierFunction, ModelKind, SpectralModel};

/// One monomial `c(phi, x) u^a v^b`; `v` is the second unknown of the doubled
/// system (`b = 0` for the scalar problem).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonomialTerm {
    pub coeff: FourierFunction,
    pub pow_u: u32,
    pub pow_v: u32,
}

/// Polynomial nonlinearity with trigonometric-polynomial coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub terms: Vec<MonomialTerm>,
}

/// `f^p` by repeated coefficient convolution (exact for trig polynomials).
pub fn fourier_pow(f: &FourierFunction, p: u32) -> FourierFunction {
    let mut out = FourierFunction::constant(Complex64::new(1.0, 0.0));
    for _ in 0..p {
        out = out.convolve(f);
    }
    out
}

impl Nonlinearity {
    pub fn new(terms: Vec<MonomialTerm>) -> Self {
        Nonlinearity { terms }
    }

    pub fn add_term(&mut self, coeff: FourierFunction, pow_u: u32, pow_v: u32) {
        self.terms.push(MonomialTerm { coeff, pow_u, pow_v });
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|t| t.pow_u + t.pow_v).max().unwrap_or(0)
    }

    /// Evaluate `sum c u^a v^b` in coefficient space.
    pub fn eval(&self, u: &FourierFunction, v: &FourierFunction) -> FourierFunction {
        let mut acc = FourierFunction::zero();
        for t in &self.terms {
            let m = t.coeff.convolve(&fourier_pow(u, t.pow_u)).convolve(&fourier_pow(v, t.pow_v));
            acc = acc.add(&m);
        }
        acc
    }

    /// Partial derivative with respect to the first unknown.
    pub fn partial_u(&self, u: &FourierFunction, v: &FourierFunction) -> FourierFunction {
        let mut acc = FourierFunction::zero();
        for t in &self.terms {
            if t.pow_u == 0 {
                continue;
            }
            let m = t
                .coeff
                .scale(Complex64::new(t.pow_u as f64, 0.0))
                .convolve(&fourier_pow(u, t.pow_u - 1))
                .convolve(&fourier_pow(v, t.pow_v));
            acc = acc.add(&m);
        }
        acc
    }

    /// Partial derivative with respect to the second unknown.
    pub fn partial_v(&self, u: &FourierFunction, v: &FourierFunction) -> FourierFunction {
        let mut acc = FourierFunction::zero();
        for t in &self.terms {
            if t.pow_v == 0 {
                continue;
            }
            let m = t
                .coeff
                .scale(Complex64::new(t.pow_v as f64, 0.0))
                .convolve(&fourier_pow(u, t.pow_u))
                .convolve(&fourier_pow(v, t.pow_v - 1));
            acc = acc.add(&m);
        }
        acc
    }

    /// Companion nonlinearity for the second row of the doubled system:
    /// conjugated coefficients with the `(u, v)` powers swapped, so that on
    /// the reality subspace it evaluates to the conjugate of the original.
    pub fn swapped_conjugate(&self) -> Nonlinearity {
        Nonlinearity {
            terms: self
                .terms
                .iter()
                .map(|t| MonomialTerm {
                    coeff: t.coeff.conj(),
                    pow_u: t.pow_v,
                    pow_v: t.pow_u,
                })
                .collect(),
        }
    }
}

/// Holomorphic extension of a first-order nonlinearity in `(u, conj u)` to
/// independent variables `(u, v)` by monomial substitution, paired with the
/// second-row companion.  On `v = conj u` the first returns the original
/// nonlinearity, the second its conjugate, which keeps the reality subspace
/// invariant under the doubled flow.
pub fn nls_extension_pair(f: &Nonlinearity) -> (Nonlinearity, Nonlinearity) {
    (f.clone(), f.swapped_conjugate())
}

/// Full problem data: dispersion, nonlinearity, strength.
#[derive(Clone, Debug)]
pub struct PDEProblem {
    pub rule: DispersionRule,
    /// Scalar nonlinearity, or the first row of the doubled system.
    pub f: Nonlinearity,
    /// Second row of the doubled system (ignored for the scalar problem).
    pub g: Nonlinearity,
    pub epsilon: f64,
    /// Order of the diagonal operator in the smoothing estimate.
    pub nu: f64,
}

impl PDEProblem {
    pub fn new_nlw(rule: DispersionRule, f: Nonlinearity, epsilon: f64) -> Self {
        assert_eq!(rule.kind, DispersionKind::Nlw);
        assert!(f.terms.iter().all(|t| t.pow_v == 0), "scalar problem cannot depend on v");
        let g = Nonlinearity::default();
        PDEProblem { rule, f, g, epsilon, nu: 2.0 }
    }

    pub fn new_nls(rule: DispersionRule, f: Nonlinearity, epsilon: f64) -> Self {
        assert_eq!(rule.kind, DispersionKind::Nls);
        let (f, g) = nls_extension_pair(&f);
        PDEProblem { rule, f, g, epsilon, nu: 2.0 }
    }

    /// Default desk experiment: 1 time frequency, 1-dimensional torus,
    /// golden frequency, `f = cos(phi) cos(x) + u^3`.
    pub fn default_nlw(epsilon: f64) -> Self {
        let model = SpectralModel::torus(1, 1, 1.0);
        let rule = DispersionRule::new(
            DispersionKind::Nlw,
            1.0,
            crate::linearized_operator::golden_omega(),
            model,
        );
        let mut f = Nonlinearity::default();
        f.add_term(
            FourierFunction::cosine(vec![1], vec![0]).convolve(&FourierFunction::cosine(vec![0], vec![1])),
            0,
            0,
        );
        f.add_term(FourierFunction::constant(Complex64::new(1.0, 0.0)), 3, 0);
        PDEProblem::new_nlw(rule, f, epsilon)
    }

    /// Cubic Hamiltonian default for the doubled system:
    /// `cos(phi) cos(x) + |u|^2 u`.
    pub fn default_nls(epsilon: f64) -> Self {
        let model = SpectralModel::torus(1, 1, 1.0);
        let rule = DispersionRule::new(
            DispersionKind::Nls,
            1.0,
            crate::linearized_operator::golden_omega(),
            model,
        );
        let mut f = Nonlinearity::default();
        f.add_term(
            FourierFunction::cosine(vec![1], vec![0]).convolve(&FourierFunction::cosine(vec![0], vec![1])),
            0,
            0,
        );
        f.add_term(FourierFunction::constant(Complex64::new(1.0, 0.0)), 2, 1);
        PDEProblem::new_nls(rule, f, epsilon)
    }

    pub fn model(&self) -> &SpectralModel {
        &self.rule.model
    }
}

/// Extract one component of a sequence vector as a coefficient function
/// (torus models only: multiplicity 1 everywhere).
pub fn seq_component(u: &SeqVec, a: i8) -> FourierFunction {
    assert_eq!(u.model.kind, ModelKind::Torus);
    let mut f = FourierFunction { coeffs: Default::default(), real: false };
    for (k, b) in &u.entries {
        if k.a == a {
            f.coeffs.insert((k.l.clone(), k.j.coords.clone()), b[0]);
        }
    }
    f
}

/// Write a coefficient function into the `a`-component of a sequence vector,
/// truncated to `|k| <= n`.
pub fn add_component(dst: &mut SeqVec, f: &FourierFunction, a: i8, n: i64) {
    let (d, r) = (dst.model.d, dst.model.r);
    for ((l, i), &c) in &f.coeffs {
        // constants carry empty keys; pad to the model's dimensions
        let l = if l.is_empty() { vec![0; d] } else { l.clone() };
        let i = if i.is_empty() { vec![0; r] } else { i.clone() };
        let k = Site::new(l, LatticePoint::new(i), a);
        if k.sup_norm() <= n && c.norm() > 0.0 {
            let prev = dst.get_scalar(&k);
            dst.insert_scalar(k, prev + c);
        }
    }
}

/// Conjugate a component function as a space-time function:
/// `conj(u)(phi, x)` has coefficient `conj(u_hat(-l, -i))` at `(l, i)`.
pub fn conj_function(f: &FourierFunction) -> FourierFunction {
    f.conj()
}

/// Build the doubled-system vector `(u^+, conj u^+)` from one component.
pub fn reality_pair(model: &SpectralModel, up: &FourierFunction, n: i64) -> SeqVec {
    let mut u = SeqVec::zero(model.clone());
    add_component(&mut u, up, 1, n);
    add_component(&mut u, &conj_function(up), -1, n);
    u
}

/// How far a doubled vector is from the reality subspace, in the plain
/// `l^2` distance of coefficient blocks.
pub fn reality_defect(u: &SeqVec) -> f64 {
    let up = seq_component(u, 1);
    let um = seq_component(u, -1);
    let mut d = 0.0f64;
    let expect = conj_function(&up);
    for key in expect.coeffs.keys().chain(um.coeffs.keys()) {
        let a = expect.coeffs.get(key).copied().unwrap_or(Complex64::new(0.0, 0.0));
        let b = um.coeffs.get(key).copied().unwrap_or(Complex64::new(0.0, 0.0));
        d += (a - b).norm_sqr();
    }
    d.sqrt()
}

/// `F(eps, lambda, u) = D(lambda) u - eps f(u)`, truncated to `|k| <= n`.
pub fn eval_f(problem: &PDEProblem, u: &SeqVec, lambda: f64, n: i64) -> SeqVec {
    let rule = &problem.rule;
    let model = problem.model();
    let mut out = SeqVec::zero(model.clone());
    // diagonal part, site by site
    for (k, b) in &u.entries {
        if k.sup_norm() > n {
            continue;
        }
        let dval = rule.diag_entry(k, lambda, 0.0);
        out.insert(k.clone(), b.iter().map(|c| c * dval).collect());
    }
    // nonlinear part via coefficient convolution
    match rule.kind {
        DispersionKind::Nlw => {
            let uf = seq_component(u, 1);
            let one = FourierFunction::constant(Complex64::new(1.0, 0.0));
            let fval = problem.f.eval(&uf, &one).scale(Complex64::new(-problem.epsilon, 0.0));
            add_component(&mut out, &fval, 1, n);
        }
        DispersionKind::Nls => {
            let up = seq_component(u, 1);
            let um = seq_component(u, -1);
            let fp = problem.f.eval(&up, &um).scale(Complex64::new(-problem.epsilon, 0.0));
            let fm = problem.g.eval(&up, &um).scale(Complex64::new(-problem.epsilon, 0.0));
            add_component(&mut out, &fp, 1, n);
            add_component(&mut out, &fm, -1, n);
        }
    }
    out
}

/// Component-resolved multiplication matrix for the doubled system: block
/// entry `(a_r, a_c)` takes its coefficient from the corresponding function.
fn doubled_multiplication_matrix(
    model: &SpectralModel,
    funcs: &[[FourierFunction; 2]; 2], // indexed [row][col], 0 = +1, 1 = -1
    rows: &[GroupIndex],
    cols: &[GroupIndex],
) -> BlockMatrix {
    assert_eq!(model.kind, ModelKind::Torus);
    let comp_idx = |a: i8| if a == 1 { 0usize } else { 1usize };
    let mut m = BlockMatrix::zero(rows.to_vec(), cols.to_vec(), model.clone());
    for (ri, rg) in rows.iter().enumerate() {
        for (ci, cg) in cols.iter().enumerate() {
            let dl: Vec<i64> = rg.l.iter().zip(&cg.l).map(|(a, b)| a - b).collect();
            let dj: Vec<i64> = rg.j.coords.iter().zip(&cg.j.coords).map(|(a, b)| a - b).collect();
            let mut block =
                DMatrix::<Complex64>::zeros(rg.comps.len(), cg.comps.len());
            let mut nonzero = false;
            for (ar, &car) in rg.comps.iter().enumerate() {
                for (ac, &cac) in cg.comps.iter().enumerate() {
                    let c = funcs[comp_idx(car)][comp_idx(cac)].get(&dl, &dj);
                    if c.norm() > 0.0 {
                        block[(ar, ac)] = c;
                        nonzero = true;
                    }
                }
            }
            if nonzero {
                m.set_block(ri, ci, block);
            }
        }
    }
    m
}

/// Assemble `L = D + eps T` with `T = -mult(f'(u))` over the radius-`n`
/// window centered at the origin.
pub fn linearize(problem: &PDEProblem, u: &SeqVec, lambda: f64, theta: f64, n: i64) -> TruncatedOperator {
    let model = problem.model().clone();
    let window = IndexWindow::origin(model.d, model.r, n, problem.rule.comps());
    linearize_on(problem, u, lambda, theta, window)
}

/// Like `linearize` over an arbitrary index window (used for operators
/// centered on a frequency fiber).
pub fn linearize_on(
    problem: &PDEProblem,
    u: &SeqVec,
    lambda: f64,
    theta: f64,
    window: IndexWindow,
) -> TruncatedOperator {
    let rule = problem.rule.clone();
    let model = problem.model().clone();
    let groups = group_sites(&window.sites(&model));
    let t = match rule.kind {
        DispersionKind::Nlw => {
            let uf = seq_component(u, 1);
            let one = FourierFunction::constant(Complex64::new(1.0, 0.0));
            let g = problem.f.partial_u(&uf, &one).scale(Complex64::new(-1.0, 0.0));
            multiplication_matrix(&model, &g, &groups, &groups)
        }
        DispersionKind::Nls => {
            let up = seq_component(u, 1);
            let um = seq_component(u, -1);
            let minus = Complex64::new(-1.0, 0.0);
            let t_pp = problem.f.partial_u(&up, &um).scale(minus);
            let t_pm = problem.f.partial_v(&up, &um).scale(minus);
            let t_mp = problem.g.partial_u(&up, &um).scale(minus);
            let t_mm = problem.g.partial_v(&up, &um).scale(minus);
            doubled_multiplication_matrix(&model, &[[t_pp, t_pm], [t_mp, t_mm]], &groups, &groups)
        }
    };
    TruncatedOperator::assemble(rule, window, lambda, theta, problem.epsilon, t)
}
