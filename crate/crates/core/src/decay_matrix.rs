//! Block matrices with off-diagonal decay norms: Toeplitz majorants, products,
//! smoothing splits, operator norms and Neumann-series left inverses.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_space::{kahan_sum, LatticePoint, Site};
use crate::spectral_model::SpectralModel;

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("window mismatch between operands")]
    WindowMismatch,
    #[error("left-inverse perturbation precondition violated: contraction bound {0} >= 1/2")]
    ContractionTooLarge(f64),
    #[error("Neumann series did not converge (measured contraction factor {0})")]
    SeriesDiverged(f64),
}

/// Norm constants for one `(d + r, s0)` configuration.  `k1` exceeds the
/// lower bound `4 * sum <i>^(-2 s0)` required for the algebra property at
/// `s0`; `k2` is the line-summation constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    /// Ambient lattice dimension `d + r`.
    pub n: usize,
    pub s0: f64,
    pub k1: f64,
    pub k2: f64,
}

const K_SUM_RADIUS: i64 = 50;

/// `sum_{|i|_inf <= R} <i>^(-2q)` over `Z^n` plus a tail bound for `|i| > R`.
fn lattice_weight_sum(n: usize, q: f64) -> f64 {
    assert!(2.0 * q > n as f64, "lattice sum diverges");
    // shells: #{|i|_inf = m} = (2m+1)^n - (2m-1)^n
    let mut sum = 1.0; // i = 0 contributes <0>^{-2q} = 1
    for m in 1..=K_SUM_RADIUS {
        let shell = ((2 * m + 1) as f64).powi(n as i32) - ((2 * m - 1) as f64).powi(n as i32);
        sum += shell * (m as f64).powf(-2.0 * q);
    }
    // tail: shell count <= 2n (2m+1)^(n-1) <= 2n 3^(n-1) m^(n-1)
    let r = K_SUM_RADIUS as f64;
    let tail = 2.0 * n as f64 * 3f64.powi(n as i32 - 1) * r.powf(n as f64 - 2.0 * q)
        / (2.0 * q - n as f64);
    sum + tail
}

impl NormParams {
    pub fn new(n: usize, s0: f64) -> Self {
        assert!(s0 > n as f64 / 2.0, "s0 must exceed (d+r)/2");
        let base = lattice_weight_sum(n, s0);
        let k1 = 4.0 * base + 1.0;
        let k2 = lattice_weight_sum(n, n as f64).sqrt();
        NormParams { n, s0, k1, k2 }
    }

    /// The strict lower bound `4 sum <i>^(-2 s0)` that `k1` must exceed.
    pub fn k1_lower_bound(&self) -> f64 {
        4.0 * lattice_weight_sum(self.n, self.s0)
    }
}

/// Row/column index of a block: a lattice index `(l, j)` together with the
/// component tags grouped into the block.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupIndex {
    pub l: Vec<i64>,
    pub j: LatticePoint,
    pub comps: Vec<i8>,
}

impl GroupIndex {
    pub fn new(l: Vec<i64>, j: LatticePoint, comps: Vec<i8>) -> Self {
        GroupIndex { l, j, comps }
    }

    pub fn dim(&self, model: &SpectralModel) -> usize {
        self.comps.len() * model.multiplicity(&self.j)
    }

    pub fn sites(&self) -> Vec<Site> {
        self.comps
            .iter()
            .map(|&a| Site::new(self.l.clone(), self.j.clone(), a))
            .collect()
    }

    /// Lattice difference to another group index, as a `d + r` vector.
    pub fn diff(&self, other: &GroupIndex) -> Vec<i64> {
        let mut v: Vec<i64> = self.l.iter().zip(&other.l).map(|(a, b)| a - b).collect();
        v.extend(self.j.coords.iter().zip(&other.j.coords).map(|(a, b)| a - b));
        v
    }

    pub fn index_dist(&self, other: &GroupIndex) -> i64 {
        self.diff(other).iter().map(|v| v.abs()).max().unwrap_or(0)
    }
}

/// Group sites sharing an `(l, j)` index into one `GroupIndex` per index, with
/// component tags sorted.  Input order does not matter; output is canonical.
pub fn group_sites(sites: &[Site]) -> Vec<GroupIndex> {
    let mut map: BTreeMap<(Vec<i64>, LatticePoint), Vec<i8>> = BTreeMap::new();
    for s in sites {
        let e = map.entry((s.l.clone(), s.j.clone())).or_default();
        if !e.contains(&s.a) {
            e.push(s.a);
        }
    }
    map.into_iter()
        .map(|((l, j), mut comps)| {
            // ascending tags, matching the ordering of `Site` itself
            comps.sort_unstable();
            GroupIndex::new(l, j, comps)
        })
        .collect()
}

/// Off-diagonal decay profile `[M(i)]` of a block matrix.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecayProfile {
    pub values: BTreeMap<Vec<i64>, f64>,
}

impl DecayProfile {
    pub fn s_norm(&self, s: f64, np: &NormParams) -> f64 {
        (np.k1
            * kahan_sum(self.values.iter().map(|(i, v)| {
                let w = bracket(i);
                v * v * w.powf(2.0 * s)
            })))
        .sqrt()
    }
}

/// `<i> = max(1, |i|_inf)`.
pub fn bracket(i: &[i64]) -> f64 {
    i.iter().map(|v| v.abs()).max().unwrap_or(0).max(1) as f64
}

/// Largest singular value of a dense block; exact SVD for small blocks,
/// power iteration above 64 rows/columns.
pub fn block_op_norm(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].norm();
    }
    if m.nrows().max(m.ncols()) <= 64 {
        m.clone()
            .svd(false, false)
            .singular_values
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    } else {
        power_iteration_norm(|v| m * v, |v| m.adjoint() * v, m.ncols())
    }
}

fn power_iteration_norm(
    apply: impl Fn(&DVector<Complex64>) -> DVector<Complex64>,
    apply_adj: impl Fn(&DVector<Complex64>) -> DVector<Complex64>,
    ncols: usize,
) -> f64 {
    if ncols == 0 {
        return 0.0;
    }
    // deterministic pseudo-random start vector
    let mut v = DVector::<Complex64>::from_fn(ncols, |i, _| {
        let x = ((i as f64) * 0.7548776662466927 + 0.1).fract() - 0.5;
        let y = ((i as f64) * 0.5698402909980532 + 0.2).fract() - 0.5;
        Complex64::new(1.0 + x, y)
    });
    v /= Complex64::new(v.norm(), 0.0);
    let mut sigma = 0.0f64;
    for _ in 0..400 {
        let w = apply(&v);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let u = apply_adj(&w);
        let nu = u.norm();
        if nu == 0.0 {
            return nw;
        }
        v = u / Complex64::new(nu, 0.0);
        let next = (nu / 1.0).sqrt().max(nw); // nu = |A^H A v| ~ sigma^2
        if (next - sigma).abs() <= 1e-13 * next.max(1.0) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

/// Finite block matrix over grouped row/column windows.  Missing blocks are
/// zero.  Rows play the role of the output window, columns of the input one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockMatrix {
    pub rows: Vec<GroupIndex>,
    pub cols: Vec<GroupIndex>,
    pub blocks: BTreeMap<(usize, usize), DMatrix<Complex64>>,
    pub model: SpectralModel,
}

/// Scalar offsets of a grouped window, plus per-site ranges.
#[derive(Clone, Debug)]
pub struct Basis {
    pub offsets: Vec<usize>,
    pub total: usize,
    pub site_ranges: BTreeMap<Site, (usize, usize)>,
}

pub fn basis(groups: &[GroupIndex], model: &SpectralModel) -> Basis {
    let mut offsets = Vec::with_capacity(groups.len());
    let mut site_ranges = BTreeMap::new();
    let mut total = 0usize;
    for g in groups {
        offsets.push(total);
        let dj = model.multiplicity(&g.j);
        for (ci, &a) in g.comps.iter().enumerate() {
            let start = total + ci * dj;
            site_ranges.insert(Site::new(g.l.clone(), g.j.clone(), a), (start, start + dj));
        }
        total += g.comps.len() * dj;
    }
    Basis { offsets, total, site_ranges }
}

impl BlockMatrix {
    pub fn zero(rows: Vec<GroupIndex>, cols: Vec<GroupIndex>, model: SpectralModel) -> Self {
        BlockMatrix { rows, cols, blocks: BTreeMap::new(), model }
    }

    pub fn identity(groups: Vec<GroupIndex>, model: SpectralModel) -> Self {
        let mut m = BlockMatrix::zero(groups.clone(), groups, model);
        for (i, g) in m.rows.clone().iter().enumerate() {
            let d = g.dim(&m.model);
            m.blocks.insert((i, i), DMatrix::identity(d, d));
        }
        m
    }

    pub fn set_block(&mut self, ri: usize, ci: usize, b: DMatrix<Complex64>) {
        debug_assert_eq!(b.nrows(), self.rows[ri].dim(&self.model));
        debug_assert_eq!(b.ncols(), self.cols[ci].dim(&self.model));
        if b.iter().any(|c| c.norm() > 0.0) {
            self.blocks.insert((ri, ci), b);
        } else {
            self.blocks.remove(&(ri, ci));
        }
    }

    pub fn row_basis(&self) -> Basis {
        basis(&self.rows, &self.model)
    }

    pub fn col_basis(&self) -> Basis {
        basis(&self.cols, &self.model)
    }

    pub fn scalar_rows(&self) -> usize {
        self.rows.iter().map(|g| g.dim(&self.model)).sum()
    }

    pub fn scalar_cols(&self) -> usize {
        self.cols.iter().map(|g| g.dim(&self.model)).sum()
    }

    /// `[M(i)]`: per lattice difference, the largest grouped-block operator norm.
    pub fn decay_profile(&self) -> DecayProfile {
        let mut values: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        for (&(ri, ci), b) in &self.blocks {
            let key = self.rows[ri].diff(&self.cols[ci]);
            let nrm = block_op_norm(b);
            let e = values.entry(key).or_insert(0.0);
            if nrm > *e {
                *e = nrm;
            }
        }
        DecayProfile { values }
    }

    /// Decay norm `|M|_s` evaluated through the profile.
    pub fn s_norm(&self, s: f64, np: &NormParams) -> f64 {
        self.decay_profile().s_norm(s, np)
    }

    /// Toeplitz majorant: same windows, block `(i, i')` replaced by
    /// `[M(i - i')]` times the rectangular identity.  Has the same `s`-norm.
    pub fn toeplitz_majorant(&self) -> BlockMatrix {
        let profile = self.decay_profile();
        let mut m = BlockMatrix::zero(self.rows.clone(), self.cols.clone(), self.model.clone());
        for (ri, rg) in self.rows.iter().enumerate() {
            for (ci, cg) in self.cols.iter().enumerate() {
                let key = rg.diff(cg);
                if let Some(&v) = profile.values.get(&key) {
                    if v > 0.0 {
                        let nr = rg.dim(&self.model);
                        let nc = cg.dim(&self.model);
                        let mut b = DMatrix::<Complex64>::zeros(nr, nc);
                        for t in 0..nr.min(nc) {
                            b[(t, t)] = Complex64::new(v, 0.0);
                        }
                        m.blocks.insert((ri, ci), b);
                    }
                }
            }
        }
        m
    }

    pub fn multiply(&self, other: &BlockMatrix) -> Result<BlockMatrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::WindowMismatch);
        }
        let mut out = BlockMatrix::zero(self.rows.clone(), other.cols.clone(), self.model.clone());
        // bucket the right factor by row index
        let mut by_row: BTreeMap<usize, Vec<(usize, &DMatrix<Complex64>)>> = BTreeMap::new();
        for (&(ri, ci), b) in &other.blocks {
            by_row.entry(ri).or_default().push((ci, b));
        }
        let mut acc: BTreeMap<(usize, usize), DMatrix<Complex64>> = BTreeMap::new();
        for (&(ri, qi), b1) in &self.blocks {
            if let Some(rights) = by_row.get(&qi) {
                for &(ci, b2) in rights {
                    let prod = b1 * b2;
                    acc.entry((ri, ci))
                        .and_modify(|m| *m += &prod)
                        .or_insert(prod);
                }
            }
        }
        for ((ri, ci), b) in acc {
            out.set_block(ri, ci, b);
        }
        Ok(out)
    }

    pub fn add(&self, other: &BlockMatrix) -> Result<BlockMatrix, MatrixError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatrixError::WindowMismatch);
        }
        let mut out = self.clone();
        for (&k, b) in &other.blocks {
            match out.blocks.get_mut(&k) {
                Some(e) => *e += b,
                None => {
                    out.blocks.insert(k, b.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: Complex64) -> BlockMatrix {
        let mut out = self.clone();
        for b in out.blocks.values_mut() {
            *b *= c;
        }
        out
    }

    pub fn sub(&self, other: &BlockMatrix) -> Result<BlockMatrix, MatrixError> {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    /// Matrix-vector product on sequence vectors supported in the column window.
    pub fn apply(&self, h: &crate::index_space::SeqVec) -> crate::index_space::SeqVec {
        let cb = self.col_basis();
        let rb = self.row_basis();
        let mut x = DVector::<Complex64>::zeros(cb.total);
        for (k, block) in &h.entries {
            if let Some(&(st, _en)) = cb.site_ranges.get(k) {
                for (i, &v) in block.iter().enumerate() {
                    x[st + i] = v;
                }
            }
        }
        let mut y = DVector::<Complex64>::zeros(rb.total);
        for (&(ri, ci), b) in &self.blocks {
            let ro = rb.offsets[ri];
            let co = cb.offsets[ci];
            let xr = x.rows(co, b.ncols());
            let prod = b * xr;
            for i in 0..b.nrows() {
                y[ro + i] += prod[i];
            }
        }
        let mut out = crate::index_space::SeqVec::zero(self.model.clone());
        for (site, &(st, en)) in &rb.site_ranges {
            let v: Vec<Complex64> = (st..en).map(|i| y[i]).collect();
            if v.iter().any(|c| c.norm() > 0.0) {
                out.insert(site.clone(), v);
            }
        }
        out
    }

    /// Split into (near, far): near keeps blocks with index distance `<= N`,
    /// far keeps distance `> N`, so both smoothing hypotheses apply.
    pub fn smoothing_split(&self, n: i64) -> (BlockMatrix, BlockMatrix) {
        assert!(n >= 2);
        let mut near = BlockMatrix::zero(self.rows.clone(), self.cols.clone(), self.model.clone());
        let mut far = near.clone();
        for (&(ri, ci), b) in &self.blocks {
            let d = self.rows[ri].index_dist(&self.cols[ci]);
            if d <= n {
                near.blocks.insert((ri, ci), b.clone());
            } else {
                far.blocks.insert((ri, ci), b.clone());
            }
        }
        (near, far)
    }

    /// Dense assembly (row-major by group order).
    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let rb = self.row_basis();
        let cb = self.col_basis();
        let mut m = DMatrix::<Complex64>::zeros(rb.total, cb.total);
        for (&(ri, ci), b) in &self.blocks {
            let ro = rb.offsets[ri];
            let co = cb.offsets[ci];
            m.view_mut((ro, co), (b.nrows(), b.ncols())).copy_from(b);
        }
        m
    }

    /// Rebuild a block matrix from a dense assembly over given windows.
    pub fn from_dense(
        rows: Vec<GroupIndex>,
        cols: Vec<GroupIndex>,
        model: SpectralModel,
        dense: &DMatrix<Complex64>,
    ) -> BlockMatrix {
        let rb = basis(&rows, &model);
        let cb = basis(&cols, &model);
        assert_eq!(dense.nrows(), rb.total);
        assert_eq!(dense.ncols(), cb.total);
        let mut m = BlockMatrix::zero(rows, cols, model);
        for ri in 0..m.rows.len() {
            let rdim = m.rows[ri].dim(&m.model);
            for ci in 0..m.cols.len() {
                let cdim = m.cols[ci].dim(&m.model);
                let b = dense
                    .view((rb.offsets[ri], cb.offsets[ci]), (rdim, cdim))
                    .into_owned();
                m.set_block(ri, ci, b);
            }
        }
        m
    }

    /// `L^2` operator norm of the assembled matrix.
    pub fn op_norm(&self) -> f64 {
        let nr = self.scalar_rows();
        let nc = self.scalar_cols();
        if nr == 0 || nc == 0 {
            return 0.0;
        }
        if nr.max(nc) <= 600 {
            let d = self.to_dense();
            d.svd(false, false)
                .singular_values
                .iter()
                .fold(0.0f64, |a, &b| a.max(b))
        } else {
            let rb = self.row_basis();
            let cb = self.col_basis();
            power_iteration_norm(
                |v| {
                    let mut y = DVector::<Complex64>::zeros(rb.total);
                    for (&(ri, ci), b) in &self.blocks {
                        let prod = b * v.rows(cb.offsets[ci], b.ncols());
                        for i in 0..b.nrows() {
                            y[rb.offsets[ri] + i] += prod[i];
                        }
                    }
                    y
                },
                |v| {
                    let mut y = DVector::<Complex64>::zeros(cb.total);
                    for (&(ri, ci), b) in &self.blocks {
                        let prod = b.adjoint() * v.rows(rb.offsets[ri], b.nrows());
                        for i in 0..b.ncols() {
                            y[cb.offsets[ci] + i] += prod[i];
                        }
                    }
                    y
                },
                cb.total,
            )
        }
    }

    /// Right-hand side of the decay-along-lines bound:
    /// `|c| K2 max_k |M_k|_(s + d + r)` over single-row submatrices.
    pub fn decay_along_lines_bound(&self, s: f64, np: &NormParams) -> f64 {
        let comp_count: BTreeSet<i8> = self.rows.iter().flat_map(|g| g.comps.iter().copied()).collect();
        let c_card = comp_count.len().max(1) as f64;
        let mut best = 0.0f64;
        for (ri, rg) in self.rows.iter().enumerate() {
            // each component tag of the group is a separate line bundle; take
            // the grouped row as one line (upper bound for each of its lines)
            let mut line = BlockMatrix::zero(vec![rg.clone()], self.cols.clone(), self.model.clone());
            for (&(r2, ci), b) in &self.blocks {
                if r2 == ri {
                    line.blocks.insert((0, ci), b.clone());
                }
            }
            let v = line.s_norm(s + np.n as f64, np);
            if v > best {
                best = v;
            }
        }
        c_card * np.k2 * best
    }

    /// Restrict to sub-windows given by site sets (component-resolved).
    pub fn restrict_sites(&self, row_keep: &BTreeSet<Site>, col_keep: &BTreeSet<Site>) -> BlockMatrix {
        let (new_rows, row_sel) = restrict_groups(&self.rows, row_keep, &self.model);
        let (new_cols, col_sel) = restrict_groups(&self.cols, col_keep, &self.model);
        let mut m = BlockMatrix::zero(new_rows, new_cols, self.model.clone());
        for (&(ri, ci), b) in &self.blocks {
            let (Some((nri, rsel)), Some((nci, csel))) = (row_sel.get(&ri), col_sel.get(&ci))
            else {
                continue;
            };
            let mut nb = DMatrix::<Complex64>::zeros(rsel.len(), csel.len());
            for (a, &sr) in rsel.iter().enumerate() {
                for (c, &sc) in csel.iter().enumerate() {
                    nb[(a, c)] = b[(sr, sc)];
                }
            }
            m.set_block(*nri, *nci, nb);
        }
        m
    }

    /// Neumann-series left inverse of `M + P` given a left inverse of `M`.
    pub fn perturbed_left_inverse(
        minv: &BlockMatrix,
        p: &BlockMatrix,
        np: &NormParams,
    ) -> Result<BlockMatrix, MatrixError> {
        let m_s0 = minv.s_norm(np.s0, np);
        let p_s0 = p.s_norm(np.s0, np);
        let contraction = m_s0 * p_s0;
        if contraction > 0.5 + 1e-12 {
            return Err(MatrixError::ContractionTooLarge(contraction));
        }
        let mp = minv.multiply(p)?.scale(Complex64::new(-1.0, 0.0));
        let mut term = minv.clone();
        let mut acc = minv.clone();
        let tol = 1e-14 * m_s0.max(1.0);
        let mut prev_norm = m_s0;
        for _ in 0..200 {
            term = mp.multiply(&term)?;
            let tn = term.s_norm(np.s0, np);
            if prev_norm > 0.0 && tn / prev_norm > 0.9 && tn > tol {
                return Err(MatrixError::SeriesDiverged(tn / prev_norm));
            }
            acc = acc.add(&term)?;
            if tn < tol {
                return Ok(acc);
            }
            prev_norm = tn;
        }
        Err(MatrixError::SeriesDiverged(1.0))
    }
}

type GroupSelection = BTreeMap<usize, (usize, Vec<usize>)>;

fn restrict_groups(
    groups: &[GroupIndex],
    keep: &BTreeSet<Site>,
    model: &SpectralModel,
) -> (Vec<GroupIndex>, GroupSelection) {
    let mut new_groups = Vec::new();
    let mut sel: GroupSelection = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        let dj = model.multiplicity(&g.j);
        let mut comps = Vec::new();
        let mut rows = Vec::new();
        for (ci, &a) in g.comps.iter().enumerate() {
            if keep.contains(&Site::new(g.l.clone(), g.j.clone(), a)) {
                comps.push(a);
                rows.extend((ci * dj)..((ci + 1) * dj));
            }
        }
        if !comps.is_empty() {
            sel.insert(gi, (new_groups.len(), rows));
            new_groups.push(GroupIndex::new(g.l.clone(), g.j.clone(), comps));
        }
    }
    (new_groups, sel)
}

/// Smallest singular value of a dense matrix.
pub fn dense_sigma_min(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Largest singular value of a dense matrix.
pub fn dense_op_norm(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |a, &b| a.max(b))
}

/// Moore-Penrose least-squares left inverse with relative rank tolerance.
pub fn pseudo_left_inverse(m: &DMatrix<Complex64>, rank_tol: f64) -> Option<DMatrix<Complex64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Some(DMatrix::zeros(m.ncols(), m.nrows()));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    if smax == 0.0 {
        return None;
    }
    let cutoff = rank_tol * smax;
    // require full column rank for a genuine left inverse
    if svd.singular_values.len() < m.ncols()
        || svd.singular_values.iter().any(|&s| s <= cutoff)
    {
        return None;
    }
    let pinv = svd.pseudo_inverse(cutoff).ok()?;
    Some(pinv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index_space::{IndexWindow, SeqVec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn torus() -> SpectralModel {
        SpectralModel::torus(1, 1, 1.0)
    }

    fn np2() -> NormParams {
        NormParams::new(2, 1.5)
    }

    fn window_groups(radius: i64) -> Vec<GroupIndex> {
        let m = torus();
        let w = IndexWindow::origin(1, 1, radius, vec![1]);
        group_sites(&w.sites(&m))
    }

    fn random_matrix(rng: &mut ChaCha8Rng, groups: &[GroupIndex], fill: f64) -> BlockMatrix {
        let m = torus();
        let mut out = BlockMatrix::zero(groups.to_vec(), groups.to_vec(), m);
        for ri in 0..groups.len() {
            for ci in 0..groups.len() {
                if rng.gen::<f64>() < fill {
                    let b = DMatrix::from_fn(1, 1, |_, _| {
                        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                    });
                    out.set_block(ri, ci, b);
                }
            }
        }
        out
    }

    #[test]
    fn k1_exceeds_lower_bound() {
        let np = np2();
        assert!(np.k1 > np.k1_lower_bound());
        assert!(np.k1 > 4.0);
    }

    #[test]
    fn identity_norm_is_sqrt_k1() {
        let np = np2();
        let id = BlockMatrix::identity(window_groups(2), torus());
        for s in [0.0, 1.5, 4.0] {
            assert!((id.s_norm(s, &np) - np.k1.sqrt()).abs() < 1e-12);
        }
        let z = BlockMatrix::zero(window_groups(1), window_groups(1), torus());
        assert_eq!(z.s_norm(2.0, &np), 0.0);
    }

    #[test]
    fn single_offdiag_block_norm() {
        // |M|_1 = sqrt(K1) * 2 * 3 for one block of norm 2 at distance 3
        let np = np2();
        let groups = window_groups(3);
        let mut m = BlockMatrix::zero(groups.clone(), groups.clone(), torus());
        let ri = groups.iter().position(|g| g.l[0] == 3 && g.j.coords[0] == 0).unwrap();
        let ci = groups.iter().position(|g| g.l[0] == 0 && g.j.coords[0] == 0).unwrap();
        m.set_block(ri, ci, DMatrix::from_element(1, 1, Complex64::new(2.0, 0.0)));
        assert!((m.s_norm(1.0, &np) - np.k1.sqrt() * 6.0).abs() < 1e-12);
    }

    #[test]
    fn toeplitz_majorant_preserves_norm() {
        let np = np2();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups = window_groups(2);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, &groups, 0.3);
            let maj = m.toeplitz_majorant();
            for s in [0.0, 1.5, 3.0] {
                let a = m.s_norm(s, &np);
                let b = maj.s_norm(s, &np);
                assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }
    }

    #[test]
    fn product_rules() {
        let np = np2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let groups = window_groups(2);
        let id = BlockMatrix::identity(groups.clone(), torus());
        for _ in 0..10 {
            let m1 = random_matrix(&mut rng, &groups, 0.25);
            let m2 = random_matrix(&mut rng, &groups, 0.25);
            // M * I = M
            let mi = m1.multiply(&id).unwrap();
            assert!((mi.to_dense() - m1.to_dense()).norm() < 1e-14);
            // algebra property at s0
            let prod = m1.multiply(&m2).unwrap();
            assert!(
                prod.s_norm(np.s0, &np)
                    <= m1.s_norm(np.s0, &np) * m2.s_norm(np.s0, &np) * (1.0 + 1e-12)
            );
            // majorant domination
            let majprod = m1.toeplitz_majorant().multiply(&m2.toeplitz_majorant()).unwrap();
            for s in [np.s0, 3.0] {
                assert!(prod.s_norm(s, &np) <= majprod.s_norm(s, &np) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn apply_examples() {
        let groups = window_groups(2);
        let id = BlockMatrix::identity(groups.clone(), torus());
        let mut h = SeqVec::zero(torus());
        h.insert_scalar(Site::new(vec![1], LatticePoint::new(vec![-2]), 1), Complex64::new(2.0, 1.0));
        h.insert_scalar(Site::new(vec![0], LatticePoint::new(vec![0]), 1), Complex64::new(-1.0, 0.0));
        assert_eq!(id.apply(&h), h);
        let z = BlockMatrix::zero(groups.clone(), groups, torus());
        assert!(z.apply(&h).is_zero());
    }

    #[test]
    fn apply_tame_bound() {
        let np = np2();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let groups = window_groups(3);
        for _ in 0..5 {
            let m = random_matrix(&mut rng, &groups, 0.2);
            let mut h = SeqVec::zero(torus());
            for g in &groups {
                if rng.gen::<f64>() < 0.4 {
                    h.insert_scalar(
                        Site::new(g.l.clone(), g.j.clone(), 1),
                        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    );
                }
            }
            let s = 3.0;
            let lhs = m.apply(&h).sobolev_norm(s);
            let c = 2.0;
            let rhs = c * (m.s_norm(np.s0, &np) * h.sobolev_norm(s)
                + m.s_norm(s, &np) * h.sobolev_norm(np.s0));
            assert!(lhs <= rhs * (1.0 + 1e-10));
        }
    }

    #[test]
    fn smoothing_split_examples() {
        let np = np2();
        let groups = window_groups(3);
        // diagonal matrix: far part empty
        let id = BlockMatrix::identity(groups.clone(), torus());
        let (_, far) = id.smoothing_split(2);
        assert!(far.blocks.is_empty());
        // single block at distance 5 with N = 3 goes entirely far
        let mut m = BlockMatrix::zero(groups.clone(), groups.clone(), torus());
        let ri = groups.iter().position(|g| g.l[0] == 3 && g.j.coords[0] == -2).unwrap();
        let ci = groups.iter().position(|g| g.l[0] == -2 && g.j.coords[0] == 0).unwrap();
        m.set_block(ri, ci, DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)));
        let (near, far) = m.smoothing_split(3);
        assert!(near.blocks.is_empty());
        assert_eq!(far.blocks.len(), 1);
        // smoothing inequalities on a random matrix
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mr = random_matrix(&mut rng, &groups, 0.4);
        let (near, far) = mr.smoothing_split(4);
        let (s, sp) = (2.0, 5.0);
        assert!(far.s_norm(s, &np) <= 4f64.powf(-(sp - s)) * far.s_norm(sp, &np) * (1.0 + 1e-12));
        assert!(near.s_norm(sp, &np) <= 4f64.powf(sp - s) * near.s_norm(s, &np) * (1.0 + 1e-12));
        assert!(
            near.s_norm(s, &np)
                <= 4f64.powf(s + np.n as f64) * near.op_norm() * (1.0 + 1e-9)
        );
    }

    #[test]
    fn op_norm_examples() {
        let np = np2();
        let groups = window_groups(2);
        let id = BlockMatrix::identity(groups.clone(), torus());
        assert!((id.op_norm() - 1.0).abs() < 1e-12);
        assert!(1.0 <= np.k1.sqrt());
        // rank-1 with known singular value
        let mut m = BlockMatrix::zero(groups.clone(), groups.clone(), torus());
        m.set_block(0, 1, DMatrix::from_element(1, 1, Complex64::new(3.0, 4.0)));
        assert!((m.op_norm() - 5.0).abs() < 1e-12);
        // ||M||_0 <= |M|_{s0}
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let mr = random_matrix(&mut rng, &groups, 0.5);
            assert!(mr.op_norm() <= mr.s_norm(np.s0, &np) * (1.0 + 1e-10));
        }
    }

    #[test]
    fn decay_along_lines() {
        let np = np2();
        let groups = window_groups(2);
        let id = BlockMatrix::identity(groups.clone(), torus());
        let bound = id.decay_along_lines_bound(1.0, &np);
        assert!(bound >= id.s_norm(1.0, &np) * (1.0 - 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, &groups, 0.4);
            for s in [0.0, 2.0] {
                assert!(m.s_norm(s, &np) <= m.decay_along_lines_bound(s, &np) * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn norm_monotone_in_s() {
        let np = np2();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = random_matrix(&mut rng, &window_groups(2), 0.5);
        let mut prev = m.s_norm(0.0, &np);
        for i in 1..8 {
            let cur = m.s_norm(i as f64 * 0.7, &np);
            assert!(cur >= prev * (1.0 - 1e-12));
            prev = cur;
        }
    }

    #[test]
    fn neumann_left_inverse() {
        let np = np2();
        let groups = window_groups(1);
        let id = BlockMatrix::identity(groups.clone(), torus());
        // P = 0 returns Minv unchanged
        let z = BlockMatrix::zero(groups.clone(), groups.clone(), torus());
        let r = BlockMatrix::perturbed_left_inverse(&id, &z, &np).unwrap();
        assert!((r.to_dense() - id.to_dense()).norm() < 1e-14);
        // M = I, P = 0.1/sqrt(K1) I -> geometric series
        // |I|_{s0} = sqrt(K1) on each factor, so scale by 1/K1 to keep the
        // contraction product below 1/2
        let eps = 0.4 / np.k1;
        let p = id.scale(Complex64::new(eps, 0.0));
        let inv = BlockMatrix::perturbed_left_inverse(&id, &p, &np).unwrap();
        let expect = 1.0 / (1.0 + eps);
        let d = inv.to_dense();
        assert!((d[(0, 0)].re - expect).abs() < 1e-12);
        // random invertible M with small P: residual check
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let mut m = BlockMatrix::identity(groups.clone(), torus());
            for ri in 0..groups.len() {
                for ci in 0..groups.len() {
                    if rng.gen::<f64>() < 0.3 {
                        let cur = m.blocks.get(&(ri, ci)).cloned().unwrap_or_else(|| DMatrix::zeros(1, 1));
                        m.set_block(ri, ci, cur + DMatrix::from_element(1, 1, Complex64::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02))));
                    }
                }
            }
            let minv_dense = m.to_dense().try_inverse().unwrap();
            let minv = BlockMatrix::from_dense(groups.clone(), groups.clone(), torus(), &minv_dense);
            let mut pm = BlockMatrix::zero(groups.clone(), groups.clone(), torus());
            for ri in 0..groups.len() {
                pm.set_block(ri, ri, DMatrix::from_element(1, 1, Complex64::new(rng.gen_range(-0.002..0.002), 0.0)));
            }
            let li = BlockMatrix::perturbed_left_inverse(&minv, &pm, &np).unwrap();
            let total = m.add(&pm).unwrap();
            let resid = (li.multiply(&total).unwrap().to_dense()
                - DMatrix::<Complex64>::identity(minv.scalar_rows(), minv.scalar_rows()))
            .norm();
            assert!(resid < 1e-10, "residual {resid}");
        }
    }

    #[test]
    fn restrict_sites_slices_components() {
        let m = SpectralModel::torus(1, 1, 1.0);
        let w = IndexWindow::origin(1, 1, 1, vec![1, -1]);
        let groups = group_sites(&w.sites(&m));
        let id = BlockMatrix::identity(groups.clone(), m.clone());
        let keep: BTreeSet<Site> = w
            .sites(&m)
            .into_iter()
            .filter(|s| s.a == 1)
            .collect();
        let r = id.restrict_sites(&keep, &keep);
        assert_eq!(r.scalar_rows(), 9);
        assert!((r.to_dense() - DMatrix::<Complex64>::identity(9, 9)).norm() < 1e-15);
    }
}
