//! Dual-source multidimensional orthogonal matching pursuit.
//!
//! Each iteration searches both sources for the composite atom with the
//! largest normalized correlation `||A_j^H R|| / ||A_j||`, using alternating
//! maximization over the three dictionary dimensions, keeps the better source,
//! and refits every coefficient row jointly by least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arrays::{axis_response, resolve_direction_z, Direction, ZSign, C64};
use crate::dictionary::{antenna_weights, BackProjection, MultiDictionary, SensingOperator, Source, TransmitMatrix};
use crate::error::{Error, Result};

const ZERO: C64 = C64::new(0.0, 0.0);
/// Correlations and residuals below this fraction of `||Y||` count as zero.
const NEGLIGIBLE: f64 = 1e-12;

/// Solver limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Total support size across both sources.
    pub max_paths: usize,
    /// Stop once an iteration reduces the residual norm by less than this fraction.
    pub residual_tol: f64,
    /// Full sweeps of the alternating maximization.
    pub sweeps: usize,
    /// Number of dimension-1 seeds, taken in order of aggregated energy.
    pub starts: usize,
    /// Sources with at most this many atoms are searched exhaustively.
    pub exhaustive_limit: usize,
    /// Search the sources one after another instead of jointly: each source
    /// runs until its own stopping rule fires, with `max_paths` counted per
    /// source. The coefficients are always fitted jointly.
    pub sequential: bool,
    /// Off-grid refinement. When positive, every selected atom's parameters
    /// are polished against the residual before it joins the support, and
    /// this many cyclic passes re-polish the whole support at the end.
    pub refine: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_paths: 10,
            residual_tol: 1e-3,
            sweeps: 3,
            starts: 1,
            exhaustive_limit: 4096,
            sequential: false,
            refine: 0,
        }
    }
}

/// One selected atom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SupportEntry {
    pub source: Source,
    pub index: [usize; 3],
}

/// A sensing operator paired with the dictionaries sparsifying it.
#[derive(Debug, Clone, Copy)]
pub struct SourcePair<'a> {
    pub op: &'a SensingOperator,
    pub dict: &'a MultiDictionary,
}

/// Result of a MOMP run. `coefficients` has one row per support entry, in
/// extraction order, and `M_M N_RF,M` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MompOutput {
    pub support: Vec<SupportEntry>,
    pub coefficients: DMatrix<C64>,
    /// `||A_j||` for each support entry.
    pub atom_norms: Vec<f64>,
    /// Residual Frobenius norm before the first and after each iteration.
    pub residual_norms: Vec<f64>,
    /// Normalized correlation of each selected atom at selection time.
    pub scores: Vec<f64>,
    /// `(cos_x, cos_y, relative delay)` of each atom: its grid point, or the
    /// refined point when refinement is on.
    pub params: Vec<[f64; 3]>,
}

impl MompOutput {
    pub fn iterations(&self) -> usize {
        self.support.len()
    }

    pub fn row(&self, k: usize) -> DVector<C64> {
        self.coefficients.row(k).transpose()
    }
}

/// Precomputed per-source quantities.
struct SourceModel<'a> {
    pair: SourcePair<'a>,
    dims: [usize; 3],
    atoms: [usize; 3],
    cols: usize,
    /// `Q_{j3} = sum_n sigma_{j3}[n] sigma_{j3}[n]^H` with
    /// `sigma_{j3}[n] = sum_{i3 <= n} Psi_3[i3, j3] s[n - i3]`.
    gram: Vec<DMatrix<C64>>,
    /// Conjugated dictionaries, `(physical x atoms)`.
    psi_conj: [DMatrix<C64>; 3],
    /// Back-projection of the observation.
    z_obs: BackProjection,
    /// Back-projection of each selected atom (all sources' atoms).
    z_atoms: Vec<BackProjection>,
}

impl<'a> SourceModel<'a> {
    fn new(pair: SourcePair<'a>, y: &DMatrix<C64>) -> Result<Self> {
        let op = pair.op;
        let dict = pair.dict;
        let dims = dict.physical_dims();
        if dims != [op.tx_geom.nx, op.tx_geom.ny, op.taps] {
            return Err(Error::ShapeMismatch(format!(
                "{} dictionaries {dims:?} do not match operator {}x{}x{}",
                op.source, op.tx_geom.nx, op.tx_geom.ny, op.taps
            )));
        }
        if y.nrows() != op.rows() {
            return Err(Error::ShapeMismatch(format!(
                "observation has {} rows, {} operator expects {}",
                y.nrows(),
                op.source,
                op.rows()
            )));
        }
        let gram = dict
            .psi[2]
            .column_iter()
            .map(|psi3| delay_gram(op, psi3.as_slice()))
            .collect();
        Ok(Self {
            pair,
            dims,
            atoms: dict.atom_dims(),
            cols: y.ncols(),
            gram,
            psi_conj: [dict.psi[0].conjugate(), dict.psi[1].conjugate(), dict.psi[2].conjugate()],
            z_obs: op.adjoint(y),
            z_atoms: Vec::new(),
        })
    }

    fn source(&self) -> Source {
        self.pair.op.source
    }

    /// `||A_j||^2 = sum_{m_B} w^T Q_{j3} conj(w)`, `w = Fbar_{m_B}^T (psi_1 kron psi_2)`.
    #[cfg(test)]
    fn atom_norm_sq(&self, j: [usize; 3]) -> f64 {
        let v = antenna_weights(self.pair.dict, j[0], j[1]);
        let q = &self.gram[j[2]];
        self.pair
            .op
            .transmit
            .iter()
            .map(|t| {
                let w = t.transpose_apply(v.as_slice());
                (w.transpose() * q * w.conjugate())[(0, 0)].re
            })
            .sum::<f64>()
            .max(0.0)
    }

    /// `||A_j||^2` for every index along `free`, the others fixed at `j`.
    fn norms_along(&self, free: usize, j: [usize; 3]) -> Vec<f64> {
        let op = self.pair.op;
        let dict = self.pair.dict;
        let rf = op.pilots.nrows();
        if free == 2 {
            // sum_{m_B} w^T Q conj(w) = sum_{k,k'} Q[k,k'] M[k,k'], M = sum w w^H.
            let v = antenna_weights(dict, j[0], j[1]);
            let mut m = DMatrix::<C64>::zeros(rf, rf);
            for t in &op.transmit {
                let w = t.transpose_apply(v.as_slice());
                m.ger(C64::new(1.0, 0.0), &w, &w.conjugate(), C64::new(1.0, 0.0));
            }
            return self
                .gram
                .iter()
                .map(|q| q.component_mul(&m).sum().re.max(0.0))
                .collect();
        }
        let fixed = 1 - free;
        let weights: Vec<C64> = dict.psi[fixed].column(j[fixed]).iter().copied().collect();
        let q = &self.gram[j[2]];
        let mut acc = vec![0.0; self.atoms[free]];
        for t in &op.transmit {
            if let TransmitMatrix::RankOne { left, right } = t {
                // w = (left^T v) right, so ||.||^2 factors into |left^T v|^2 (right^T Q conj(right)).
                let gain = (right.transpose() * q * right.conjugate())[(0, 0)].re;
                let single = TransmitMatrix::RankOne {
                    left: left.clone(),
                    right: DVector::from_element(1, C64::new(1.0, 0.0)),
                };
                let u = dict.psi[free].transpose() * single.contract_axis(fixed, &weights, op.tx_geom);
                for (a, x) in acc.iter_mut().zip(u.iter()) {
                    *a += x.norm_sqr() * gain;
                }
                continue;
            }
            let e = t.contract_axis(fixed, &weights, op.tx_geom);
            // Row `cand` of w holds Fbar^T v for that candidate.
            let w = dict.psi[free].transpose() * e;
            let wq = &w * q;
            for (cand, a) in acc.iter_mut().enumerate() {
                *a += wq.row(cand).iter().zip(w.row(cand).iter()).map(|(x, y)| (x * y.conj()).re).sum::<f64>();
            }
        }
        acc.into_iter().map(|a| a.max(0.0)).collect()
    }

    /// Residual back-projection `Phi^H (Y - A C)`.
    fn residual_projection(&self, coeffs: &DMatrix<C64>) -> BackProjection {
        let mut z = self.z_obs.clone();
        for (k, za) in self.z_atoms.iter().enumerate() {
            let row: Vec<C64> = coeffs.row(k).iter().copied().collect();
            z.subtract_outer(za, &row);
        }
        z
    }

    /// Contracts every dimension except `free` with the given conjugated
    /// dictionary columns; returns `(physical size of free) x cols`.
    fn contract(&self, z: &BackProjection, free: usize, j: [usize; 3]) -> DMatrix<C64> {
        let [nx, ny, d] = self.dims;
        let k = self.cols;
        let weight = |dim: usize, i: usize| -> C64 {
            if dim == free {
                C64::new(1.0, 0.0)
            } else {
                self.psi_conj[dim][(i, j[dim])]
            }
        };
        let mut out = DMatrix::<C64>::zeros(self.dims[free], k);
        for i1 in 0..nx {
            let w1 = weight(0, i1);
            for i2 in 0..ny {
                let w12 = w1 * weight(1, i2);
                for i3 in 0..d {
                    let w = w12 * weight(2, i3);
                    if w == ZERO {
                        continue;
                    }
                    let slot = [i1, i2, i3][free];
                    let src = z.at(i1 * ny + i2, i3);
                    for (c, v) in src.iter().enumerate() {
                        out[(slot, c)] += w * v;
                    }
                }
            }
        }
        out
    }

    /// Best index along `free` given the others, by normalized correlation.
    fn sweep(&self, z: &BackProjection, free: usize, j: [usize; 3]) -> (usize, f64) {
        let partial = self.contract(z, free, j);
        // Row j of psi^H * partial is the correlation with the atom that has index j along `free`.
        let corr = self.pair.dict.psi[free].adjoint() * partial;
        let norms = self.norms_along(free, j);
        let mut best = (j[free], f64::NEG_INFINITY);
        for cand in 0..self.atoms[free] {
            let score = normalized(corr.row(cand).norm(), norms[cand]);
            if score > best.1 {
                best = (cand, score);
            }
        }
        best
    }

    /// Alternating maximization of the normalized correlation, restarted
    /// from the `starts` highest-energy dimension-1 indices.
    fn best_atom(&self, z: &BackProjection, cfg: &SolverConfig) -> ([usize; 3], f64) {
        if self.atoms.iter().product::<usize>() <= cfg.exhaustive_limit {
            return self.exhaustive(z);
        }
        let [nx, ny, d] = self.dims;
        let k = self.cols;
        // Dimension 1 by energy with the other dimensions aggregated.
        // Row energies of psi_1^H Z are the diagonal of psi_1^H (Z Z^H) psi_1.
        let zmat = DMatrix::from_row_slice(nx, ny * d * k, &z.data);
        let gram = &zmat * zmat.adjoint();
        let psi = &self.pair.dict.psi[0];
        let e1: Vec<f64> = (&gram * psi)
            .column_iter()
            .zip(psi.column_iter())
            .map(|(gp, p)| p.dotc(&gp).re)
            .collect();
        let mut order: Vec<usize> = (0..e1.len()).collect();
        order.sort_by(|&a, &b| e1[b].total_cmp(&e1[a]));
        let mut best = ([0; 3], f64::NEG_INFINITY);
        for &j1 in order.iter().take(cfg.starts.max(1)) {
            let found = self.climb(z, j1, cfg.sweeps);
            if found.1 > best.1 {
                best = found;
            }
        }
        best
    }

    /// Normalized correlation of every atom via successive mode products;
    /// first maximum in lexicographic index order.
    fn exhaustive(&self, z: &BackProjection) -> ([usize; 3], f64) {
        let [nx, ny, d] = self.dims;
        let [a1, a2, a3] = self.atoms;
        let k = self.cols;
        let psi = &self.pair.dict.psi;
        let t1 = psi[0].adjoint() * DMatrix::from_row_slice(nx, ny * d * k, &z.data);
        let mut best = ([0; 3], f64::NEG_INFINITY);
        for j1 in 0..a1 {
            let row: Vec<C64> = t1.row(j1).iter().copied().collect();
            let t2 = psi[1].adjoint() * DMatrix::from_row_slice(ny, d * k, &row);
            for j2 in 0..a2 {
                let row: Vec<C64> = t2.row(j2).iter().copied().collect();
                let t3 = psi[2].adjoint() * DMatrix::from_row_slice(d, k, &row);
                let norms = self.norms_along(2, [j1, j2, 0]);
                for j3 in 0..a3 {
                    let j = [j1, j2, j3];
                    let score = normalized(t3.row(j3).norm(), norms[j3]);
                    if score > best.1 {
                        best = (j, score);
                    }
                }
            }
        }
        best
    }

    /// `sum_{m_B} w^T Q conj(w)` with `w = Fbar_{m_B}^T v`.
    fn norm_sq_with(&self, v: &[C64], q: &DMatrix<C64>) -> f64 {
        self.pair
            .op
            .transmit
            .iter()
            .map(|t| {
                let w = t.transpose_apply(v);
                (w.transpose() * q * w.conjugate())[(0, 0)].re
            })
            .sum::<f64>()
            .max(0.0)
    }

    /// Continuous `(cos_x, cos_y, delay)` near `start` maximizing the
    /// normalized correlation with the back-projection `z`, by coordinate-wise
    /// golden-section search within one grid step.
    fn refine(&self, z: &BackProjection, start: [f64; 3]) -> [f64; 3] {
        const CYCLES: usize = 2;
        const EVALS: usize = 10;
        let dict = self.pair.dict;
        let steps = dict.steps();
        let [nx, ny, d] = self.dims;
        let k = self.cols;
        let n_ant = nx * ny;
        let mut p = start;
        let objective = |p: [f64; 3]| -> f64 {
            let [c1, c2, c3] = dict.columns_at(p);
            let v = c1.kronecker(&c2);
            let mut corr = vec![ZERO; k];
            for a in 0..n_ant {
                for i3 in 0..d {
                    let w = (v[a] * c3[i3]).conj();
                    for (c, x) in corr.iter_mut().zip(z.at(a, i3)) {
                        *c += w * x;
                    }
                }
            }
            let corr: f64 = corr.iter().map(|c| c.norm_sqr()).sum();
            let n = self.norm_sq_with(v.as_slice(), &delay_gram(self.pair.op, c3.as_slice()));
            if n > 0.0 {
                corr / n
            } else {
                0.0
            }
        };
        let mut best = objective(p);
        for _ in 0..CYCLES {
            let [_, _, c3] = dict.columns_at(p);
            let q = delay_gram(self.pair.op, c3.as_slice());
            // Delay contracted away: zd[a, col].
            let mut zd = DMatrix::<C64>::zeros(n_ant, k);
            for a in 0..n_ant {
                for i3 in 0..d {
                    let w = c3[i3].conj();
                    if w == ZERO {
                        continue;
                    }
                    for (c, x) in z.at(a, i3).iter().enumerate() {
                        zd[(a, c)] += w * x;
                    }
                }
            }
            for dim in 0..2 {
                let n_axis = [nx, ny][dim];
                let other = axis_response(p[1 - dim], [nx, ny][1 - dim]).conjugate();
                let eval = |x: f64| {
                    let c = axis_response(x, n_axis).conjugate();
                    let v = if dim == 0 { c.kronecker(&other) } else { other.kronecker(&c) };
                    let corr = (zd.transpose() * v.conjugate()).norm_squared();
                    let n = self.norm_sq_with(v.as_slice(), &q);
                    if n > 0.0 {
                        corr / n
                    } else {
                        0.0
                    }
                };
                let (x, fx) = golden_max(eval, (p[dim] - steps[dim]).max(-1.0), (p[dim] + steps[dim]).min(1.0), EVALS);
                if fx > best {
                    best = fx;
                    p[dim] = x;
                }
            }
            // Angles contracted away: za[i3, col], and M = sum w w^H.
            let [c1, c2, _] = dict.columns_at(p);
            let v = c1.kronecker(&c2);
            let mut za = DMatrix::<C64>::zeros(d, k);
            for a in 0..n_ant {
                let w = v[a].conj();
                for i3 in 0..d {
                    for (c, x) in z.at(a, i3).iter().enumerate() {
                        za[(i3, c)] += w * x;
                    }
                }
            }
            let rf = self.pair.op.pilots.nrows();
            let mut m = DMatrix::<C64>::zeros(rf, rf);
            for t in &self.pair.op.transmit {
                let w = t.transpose_apply(v.as_slice());
                m.ger(C64::new(1.0, 0.0), &w, &w.conjugate(), C64::new(1.0, 0.0));
            }
            let eval = |x: f64| {
                let c3 = dict.pulse.delay_vector(x).map(|v| C64::new(v, 0.0));
                let corr = (za.transpose() * c3.conjugate()).norm_squared();
                let n = delay_gram(self.pair.op, c3.as_slice()).component_mul(&m).sum().re;
                if n > 0.0 {
                    corr / n
                } else {
                    0.0
                }
            };
            let (x, fx) = golden_max(eval, p[2] - steps[2], p[2] + steps[2], EVALS);
            if fx > best {
                best = fx;
                p[2] = x;
            }
        }
        debug_assert!(objective(p) >= best * (1.0 - 1e-9));
        p
    }

    fn atom_at(&self, p: [f64; 3]) -> DVector<C64> {
        let [c1, c2, c3] = self.pair.dict.columns_at(p);
        self.pair.op.atom_from_columns(&c1, &c2, &c3)
    }

    fn climb(&self, z: &BackProjection, j1: usize, sweeps: usize) -> ([usize; 3], f64) {
        let [nx, ny, d] = self.dims;
        let k = self.cols;
        // Dimension 2 given j1.
        let mut z1 = vec![ZERO; ny * d * k];
        for i1 in 0..nx {
            let w = self.psi_conj[0][(i1, j1)];
            let src = &z.data[i1 * ny * d * k..(i1 + 1) * ny * d * k];
            for (o, v) in z1.iter_mut().zip(src) {
                *o += w * v;
            }
        }
        let e2 = self.pair.dict.psi[1].adjoint() * DMatrix::from_row_slice(ny, d * k, &z1);
        let j2 = argmax(e2.row_iter().map(|r| r.norm_squared()));
        let (j3, mut score) = self.sweep(z, 2, [j1, j2, 0]);
        let mut j = [j1, j2, j3];
        for _ in 0..sweeps {
            let before = j;
            for dim in 0..3 {
                let (idx, s) = self.sweep(z, dim, j);
                j[dim] = idx;
                score = s;
            }
            if j == before {
                break;
            }
        }
        (j, score)
    }
}

/// `Q = sum_n sigma_n sigma_n^H` with `sigma_n = sum_{i3} psi3[i3] s[n - i3]`.
fn delay_gram(op: &SensingOperator, psi3: &[C64]) -> DMatrix<C64> {
    let rf = op.pilots.nrows();
    let mut q = DMatrix::<C64>::zeros(rf, rf);
    let mut sigma = DVector::<C64>::zeros(rf);
    for n in 0..op.pilot_len() {
        sigma.fill(ZERO);
        for i3 in 0..op.taps.min(n + 1) {
            sigma.axpy(psi3[i3], &op.pilots.column(n - i3), C64::new(1.0, 0.0));
        }
        q.ger(C64::new(1.0, 0.0), &sigma, &sigma.conjugate(), C64::new(1.0, 0.0));
    }
    q
}

/// Maximum of `f` on `[lo, hi]` by golden-section search.
fn golden_max(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, evals: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..evals {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    if fa >= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

fn normalized(corr: f64, norm_sq: f64) -> f64 {
    if norm_sq > 0.0 {
        corr / norm_sq.sqrt()
    } else {
        0.0
    }
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Least-squares fit of `y` on a growing set of columns, kept as a thin QR
/// factorization built by Gram-Schmidt with one reorthogonalization pass.
struct IncrementalLs {
    q: Vec<DVector<C64>>,
    r: DMatrix<C64>,
    /// `Q^H y`, one row per column.
    qty: DMatrix<C64>,
    residual: DMatrix<C64>,
}

impl IncrementalLs {
    fn new(y: &DMatrix<C64>) -> Self {
        Self {
            q: Vec::new(),
            r: DMatrix::zeros(0, 0),
            qty: DMatrix::zeros(0, y.ncols()),
            residual: y.clone(),
        }
    }

    /// Appends a column; returns `false` (leaving the fit unchanged) when it
    /// is numerically dependent on the previous ones.
    fn push(&mut self, a: &DVector<C64>) -> bool {
        let s = self.q.len();
        let mut v = a.clone();
        let mut proj = DVector::<C64>::zeros(s);
        for _ in 0..2 {
            for (i, qi) in self.q.iter().enumerate() {
                let c = qi.dotc(&v);
                v.axpy(-c, qi, C64::new(1.0, 0.0));
                proj[i] += c;
            }
        }
        let norm = v.norm();
        if !(norm > 1e-10 * a.norm()) {
            return false;
        }
        v.unscale_mut(norm);
        let mut r = self.r.clone().resize(s + 1, s + 1, ZERO);
        r.view_mut((0, s), (s, 1)).copy_from(&proj);
        r[(s, s)] = C64::new(norm, 0.0);
        let row = v.adjoint() * &self.residual;
        self.residual.ger(C64::new(-1.0, 0.0), &v, &row.transpose(), C64::new(1.0, 0.0));
        self.qty = self.qty.clone().insert_row(s, ZERO);
        self.qty.row_mut(s).copy_from(&row);
        self.q.push(v);
        self.r = r;
        true
    }

    fn coefficients(&self) -> DMatrix<C64> {
        self.r
            .solve_upper_triangular(&self.qty)
            .expect("diagonal of R is positive")
    }
}

/// Runs MOMP on the observation `y` (`M_B N x M_M N_RF,M`) over the given
/// sources. Sources are searched in the order given; on equal scores the
/// earlier source wins.
pub fn momp_estimate(y: &DMatrix<C64>, sources: &[SourcePair<'_>], cfg: &SolverConfig) -> Result<MompOutput> {
    if sources.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut models = sources
        .iter()
        .map(|p| SourceModel::new(*p, y))
        .collect::<Result<Vec<_>>>()?;
    let y_norm = y.norm();
    let mut out = MompOutput {
        support: Vec::new(),
        coefficients: DMatrix::zeros(0, y.ncols()),
        atom_norms: Vec::new(),
        residual_norms: vec![y_norm],
        scores: Vec::new(),
        params: Vec::new(),
    };
    if y_norm == 0.0 || y.ncols() == 0 {
        return Ok(out);
    }
    let mut ls = IncrementalLs::new(y);
    let mut atoms: Vec<DVector<C64>> = Vec::new();
    let mut residual_norm = y_norm;
    let stages: Vec<Vec<usize>> = if cfg.sequential {
        (0..models.len()).map(|m| vec![m]).collect()
    } else {
        vec![(0..models.len()).collect()]
    };
    'stages: for stage in &stages {
        let mut added = 0;
        while added < cfg.max_paths {
            let mut best: Option<(usize, [usize; 3], f64, BackProjection)> = None;
            for &m in stage {
                let model = &models[m];
                let z = model.residual_projection(&out.coefficients);
                let (j, score) = model.best_atom(&z, cfg);
                if best.as_ref().is_none_or(|b| score > b.2) {
                    best = Some((m, j, score, z));
                }
            }
            let (m, j, score, z) = best.expect("at least one source");
            if score <= NEGLIGIBLE * y_norm {
                break;
            }
            let model = &models[m];
            let (point, atom) = if cfg.refine > 0 {
                let p = model.refine(&z, model.pair.dict.grid_point(j));
                (p, model.atom_at(p))
            } else {
                (model.pair.dict.grid_point(j), model.pair.op.composite_atom(model.pair.dict, j))
            };
            let norm = atom.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::NoProgress);
            }
            let entry = SupportEntry {
                source: model.source(),
                index: j,
            };
            if !ls.push(&atom) {
                log::debug!("atom {entry:?} is dependent on the current support; stopping");
                break;
            }
            let new_norm = ls.residual.norm();
            for model in models.iter_mut() {
                let col = DMatrix::from_column_slice(atom.len(), 1, atom.as_slice());
                model.z_atoms.push(model.pair.op.adjoint(&col));
            }
            out.support.push(entry);
            out.coefficients = ls.coefficients();
            out.atom_norms.push(norm);
            out.scores.push(score);
            out.params.push(point);
            atoms.push(atom);
            out.residual_norms.push(new_norm);
            added += 1;
            log::trace!("momp iter {}: {entry:?} score {score:.3e} residual {new_norm:.3e}", out.support.len());
            if new_norm <= NEGLIGIBLE * y_norm {
                break 'stages;
            }
            let stalled = residual_norm - new_norm < cfg.residual_tol * residual_norm;
            residual_norm = new_norm;
            if stalled {
                break;
            }
        }
    }
    for _ in 0..cfg.refine {
        if out.support.is_empty() {
            break;
        }
        // Every atom is re-polished against the residual with itself added
        // back, then the coefficients are refitted once.
        let base: Vec<BackProjection> = models.iter().map(|m| m.residual_projection(&out.coefficients)).collect();
        let mut points = out.params.clone();
        let mut fresh = atoms.clone();
        for (k, entry) in out.support.iter().enumerate() {
            let m = models.iter().position(|m| m.source() == entry.source).expect("support entries come from the models");
            let mut z = base[m].clone();
            let minus: Vec<C64> = out.coefficients.row(k).iter().map(|c| -c).collect();
            z.subtract_outer(&models[m].z_atoms[k], &minus);
            points[k] = models[m].refine(&z, out.params[k]);
            fresh[k] = models[m].atom_at(points[k]);
        }
        let mut next = IncrementalLs::new(y);
        if !fresh.iter().all(|a| next.push(a)) || next.residual.norm() > ls.residual.norm() {
            break;
        }
        for model in models.iter_mut() {
            model.z_atoms = fresh
                .iter()
                .map(|a| model.pair.op.adjoint(&DMatrix::from_column_slice(a.len(), 1, a.as_slice())))
                .collect();
        }
        out.atom_norms = fresh.iter().map(|a| a.norm()).collect();
        out.params = points;
        out.coefficients = next.coefficients();
        atoms = fresh;
        ls = next;
        if let Some(last) = out.residual_norms.last_mut() {
            *last = ls.residual.norm();
        }
    }
    Ok(out)
}

/// `sum_k A_{j_k} C[k, :]`.
pub fn reconstruct_observation(out: &MompOutput, sources: &[SourcePair<'_>], rows: usize) -> Result<DMatrix<C64>> {
    let mut y = DMatrix::zeros(rows, out.coefficients.ncols());
    for (k, entry) in out.support.iter().enumerate() {
        let pair = sources
            .iter()
            .find(|p| p.op.source == entry.source)
            .ok_or_else(|| Error::ShapeMismatch(format!("no operator for source {}", entry.source)))?;
        let atom = match out.params.get(k) {
            Some(&p) => {
                let [c1, c2, c3] = pair.dict.columns_at(p);
                pair.op.atom_from_columns(&c1, &c2, &c3)
            }
            None => pair.op.composite_atom(pair.dict, entry.index),
        };
        if atom.len() != rows {
            return Err(Error::ShapeMismatch(format!("atom length {} vs {rows} rows", atom.len())));
        }
        y += atom * out.coefficients.row(k);
    }
    Ok(y)
}

/// `||estimate - truth||_F^2 / ||truth||_F^2`.
pub fn nmse(estimate: &DMatrix<C64>, truth: &DMatrix<C64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {:?} vs truth {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(Error::EmptyInput);
    }
    Ok((estimate - truth).norm_squared() / denom)
}

/// Sign priors on the z-component of the departure direction per source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZPriors {
    pub bm: ZSign,
    pub brm: ZSign,
}

impl Default for ZPriors {
    fn default() -> Self {
        Self {
            bm: ZSign::Down,
            brm: ZSign::Down,
        }
    }
}

impl ZPriors {
    pub fn for_source(&self, source: Source) -> ZSign {
        match source {
            Source::Bm => self.bm,
            Source::Brm => self.brm,
        }
    }
}

/// Path parameters read off one support entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEstimate {
    pub source: Source,
    pub index: [usize; 3],
    /// Departure direction from the BS (BM) or the RIS (BRM).
    pub direction: Direction,
    /// Delay minus `t_0`; for BRM the known BS-RIS delay is removed.
    pub rel_delay: f64,
    /// `||C[k, :]||`.
    pub gain: f64,
    /// `||A_j|| ||C[k, :]||`, the path's energy in the observation.
    pub energy: f64,
}

/// Maps support entries to directions, relative delays and gains.
pub fn extract_path_estimates(
    out: &MompOutput,
    dicts: &[&MultiDictionary],
    bs_ris_delay: Option<f64>,
    priors: ZPriors,
) -> Result<Vec<PathEstimate>> {
    out.support
        .iter()
        .enumerate()
        .map(|(k, entry)| {
            let dict = dicts
                .iter()
                .find(|d| d.source == entry.source)
                .ok_or_else(|| Error::ShapeMismatch(format!("no dictionary for source {}", entry.source)))?;
            let [cx, cy, delay] = out.params.get(k).copied().unwrap_or_else(|| dict.grid_point(entry.index));
            let direction = resolve_direction_z(cx, cy, priors.for_source(entry.source))?;
            let mut rel_delay = delay;
            if entry.source == Source::Brm {
                rel_delay -= bs_ris_delay.ok_or_else(|| {
                    Error::Config("cascaded estimates need the BS-RIS delay".into())
                })?;
            }
            let gain = out.coefficients.row(k).norm();
            Ok(PathEstimate {
                source: entry.source,
                index: entry.index,
                direction,
                rel_delay,
                gain,
                energy: gain * out.atom_norms.get(k).copied().unwrap_or(0.0),
            })
        })
        .collect()
}
