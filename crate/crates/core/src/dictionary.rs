//! Per-dimension dictionaries and structured sensing operators.
//!
//! A composite atom for multi-index `j = (j1, j2, j3)` is
//! `sum_i Phi[:, i] Psi_1[i1, j1] Psi_2[i2, j2] Psi_3[i3, j3]`, where the
//! sensing entry `Phi[(m_B, n), (i1, i2, i3)] = [Fbar_{m_B} s[n - i3]]_{i1 n_y + i2}`.
//! Nothing here materializes the Kronecker dictionary; the sensing operator is
//! kept as one transmit matrix per configuration plus the shared pilots.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::arrays::{axis_response, upa_response, PulseShape, UpaGeometry, C64};
use crate::error::{Error, Result};
use crate::scene::{Arrays, PropagationPath};
use crate::sounding::TrainingSet;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Which channel component a dictionary or operator models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Direct BS-MS link.
    #[serde(rename = "BM")]
    Bm,
    /// Cascaded BS-RIS-MS link.
    #[serde(rename = "BRM")]
    Brm,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Bm => "BM",
            Source::Brm => "BRM",
        })
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BM" => Ok(Source::Bm),
            "BRM" => Ok(Source::Brm),
            other => Err(Error::Parse(format!("unknown source {other:?}"))),
        }
    }
}

/// Uniform grid of direction cosines on `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub cosines: Vec<f64>,
    pub physical: usize,
}

impl AngleGrid {
    pub fn uniform(physical: usize, ratio: usize) -> Self {
        let size = physical * ratio;
        let cosines = (0..size)
            .map(|j| -1.0 + 2.0 * j as f64 / size as f64)
            .collect();
        Self { cosines, physical }
    }

    pub fn len(&self) -> usize {
        self.cosines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cosines.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.len() as f64 / self.physical as f64
    }
}

/// Uniform grid of relative delays on `[0, D T_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayGrid {
    pub delays: Vec<f64>,
    pub step: f64,
}

impl DelayGrid {
    pub fn uniform(pulse: &PulseShape, ratio: usize) -> Self {
        let size = pulse.taps * ratio;
        let step = pulse.window() / size as f64;
        Self {
            delays: (0..size).map(|j| j as f64 * step).collect(),
            step,
        }
    }

    pub fn len(&self) -> usize {
        self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }
}

/// Oversampling ratio (dictionary columns over rows) per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRatios {
    pub x: usize,
    pub y: usize,
    pub delay: usize,
}

impl GridRatios {
    pub fn uniform(r: usize) -> Self {
        Self { x: r, y: r, delay: r }
    }
}

impl Default for GridRatios {
    fn default() -> Self {
        Self::uniform(8)
    }
}

/// Three dictionaries: conjugated x-axis and y-axis responses of the transmit
/// side array, and sampled delayed pulses.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDictionary {
    pub source: Source,
    pub x_grid: AngleGrid,
    pub y_grid: AngleGrid,
    pub delay_grid: DelayGrid,
    pub psi: [DMatrix<C64>; 3],
    pub pulse: PulseShape,
}

impl MultiDictionary {
    /// Atom counts `(N^a_1, N^a_2, N^a_3)`.
    pub fn atom_dims(&self) -> [usize; 3] {
        [self.psi[0].ncols(), self.psi[1].ncols(), self.psi[2].ncols()]
    }

    /// Physical sizes `(n_x, n_y, D)`.
    pub fn physical_dims(&self) -> [usize; 3] {
        [self.psi[0].nrows(), self.psi[1].nrows(), self.psi[2].nrows()]
    }

    /// `(cos_x, cos_y, relative delay)` of grid point `j`.
    pub fn grid_point(&self, j: [usize; 3]) -> [f64; 3] {
        [self.x_grid.cosines[j[0]], self.y_grid.cosines[j[1]], self.delay_grid.delays[j[2]]]
    }

    /// Grid spacing per dimension.
    pub fn steps(&self) -> [f64; 3] {
        [
            2.0 / self.x_grid.len() as f64,
            2.0 / self.y_grid.len() as f64,
            self.delay_grid.step,
        ]
    }

    /// Dictionary columns for an arbitrary, possibly off-grid, parameter point.
    pub fn columns_at(&self, p: [f64; 3]) -> [DVector<C64>; 3] {
        let [nx, ny, _] = self.physical_dims();
        [
            axis_response(p[0], nx).conjugate(),
            axis_response(p[1], ny).conjugate(),
            self.pulse.delay_vector(p[2]).map(|v| C64::new(v, 0.0)),
        ]
    }
}

fn build_dictionaries(
    source: Source,
    geom: UpaGeometry,
    pulse: &PulseShape,
    ratios: GridRatios,
) -> Result<MultiDictionary> {
    if ratios.x == 0 || ratios.y == 0 || ratios.delay == 0 {
        return Err(Error::Config(format!("dictionary ratios {ratios:?} must be at least 1")));
    }
    let x_grid = AngleGrid::uniform(geom.nx, ratios.x);
    let y_grid = AngleGrid::uniform(geom.ny, ratios.y);
    let delay_grid = DelayGrid::uniform(pulse, ratios.delay);
    let steering = |grid: &AngleGrid, n: usize| {
        let cols: Vec<_> = grid
            .cosines
            .iter()
            .map(|&c| axis_response(c, n).conjugate())
            .collect();
        DMatrix::from_columns(&cols)
    };
    let delays: Vec<_> = delay_grid
        .delays
        .iter()
        .map(|&t| pulse.delay_vector(t).map(|v| C64::new(v, 0.0)))
        .collect();
    Ok(MultiDictionary {
        source,
        psi: [
            steering(&x_grid, geom.nx),
            steering(&y_grid, geom.ny),
            DMatrix::from_columns(&delays),
        ],
        x_grid,
        y_grid,
        delay_grid,
        pulse: *pulse,
    })
}

/// Dictionaries sparsifying the direct link over the BS angles of departure.
pub fn build_bm_dictionaries(bs: UpaGeometry, pulse: &PulseShape, ratios: GridRatios) -> Result<MultiDictionary> {
    build_dictionaries(Source::Bm, bs, pulse, ratios)
}

/// Dictionaries sparsifying the cascaded link over the RIS angles of departure.
pub fn build_brm_dictionaries(ris: UpaGeometry, pulse: &PulseShape, ratios: GridRatios) -> Result<MultiDictionary> {
    build_dictionaries(Source::Brm, ris, pulse, ratios)
}

/// Effective transmit matrix of one configuration (`N_T x N_RF,B`).
#[derive(Debug, Clone, PartialEq)]
pub enum TransmitMatrix {
    Dense(DMatrix<C64>),
    /// `left * right^T`.
    RankOne { left: DVector<C64>, right: DVector<C64> },
}

impl TransmitMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            TransmitMatrix::Dense(m) => m.nrows(),
            TransmitMatrix::RankOne { left, .. } => left.len(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            TransmitMatrix::Dense(m) => m.ncols(),
            TransmitMatrix::RankOne { right, .. } => right.len(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        match self {
            TransmitMatrix::Dense(m) => m.clone(),
            TransmitMatrix::RankOne { left, right } => left * right.transpose(),
        }
    }

    /// `M^T v`.
    pub fn transpose_apply(&self, v: &[C64]) -> DVector<C64> {
        match self {
            TransmitMatrix::Dense(m) => {
                DVector::from_iterator(m.ncols(), m.column_iter().map(|c| dot_plain(c.as_slice(), v)))
            }
            TransmitMatrix::RankOne { left, right } => right * dot_plain(left.as_slice(), v),
        }
    }

    /// Contracts one antenna axis with plain weights, leaving the other axis:
    /// `axis = 1` gives `E[i_x, k] = sum_{i_y} w[i_y] M[i_x n_y + i_y, k]`,
    /// `axis = 0` gives `E[i_y, k] = sum_{i_x} w[i_x] M[i_x n_y + i_y, k]`.
    pub fn contract_axis(&self, axis: usize, weights: &[C64], geom: UpaGeometry) -> DMatrix<C64> {
        let (nx, ny) = (geom.nx, geom.ny);
        let keep = if axis == 1 { nx } else { ny };
        let index = |kept: usize, summed: usize| if axis == 1 { kept * ny + summed } else { summed * ny + kept };
        let reduce = |col: &[C64]| -> DVector<C64> {
            DVector::from_fn(keep, |r, _| weights.iter().enumerate().map(|(s, w)| w * col[index(r, s)]).sum())
        };
        match self {
            TransmitMatrix::Dense(m) => {
                let cols: Vec<_> = m.column_iter().map(|c| reduce(c.as_slice())).collect();
                DMatrix::from_columns(&cols)
            }
            TransmitMatrix::RankOne { left, right } => reduce(left.as_slice()) * right.transpose(),
        }
    }
}

fn dot_plain(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Structured sensing operator of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingOperator {
    pub source: Source,
    /// Transmit-side array whose AoD the dictionaries grid (BS or RIS).
    pub tx_geom: UpaGeometry,
    /// One effective transmit matrix per configuration `m_B`.
    pub transmit: Vec<TransmitMatrix>,
    /// Pilots `N_RF,B x N`.
    pub pilots: DMatrix<C64>,
    /// Delay taps `D`.
    pub taps: usize,
    /// Known BS-RIS LoS delay for the cascaded source.
    pub bs_ris_delay: Option<f64>,
}

/// Back-projection `Phi^H R`, laid out as `[(a * D + i3) * cols + col]` with
/// `a = i1 n_y + i2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjection {
    pub data: Vec<C64>,
    pub antennas: usize,
    pub taps: usize,
    pub cols: usize,
}

impl BackProjection {
    pub fn zeros(antennas: usize, taps: usize, cols: usize) -> Self {
        Self {
            data: vec![ZERO; antennas * taps * cols],
            antennas,
            taps,
            cols,
        }
    }

    #[inline]
    pub fn at(&self, a: usize, i3: usize) -> &[C64] {
        let start = (a * self.taps + i3) * self.cols;
        &self.data[start..start + self.cols]
    }

    /// `self -= other * row` where `other` has a single column.
    pub fn subtract_outer(&mut self, single: &BackProjection, row: &[C64]) {
        debug_assert_eq!(single.cols, 1);
        for (chunk, &s) in self.data.chunks_mut(self.cols).zip(&single.data) {
            if s == ZERO {
                continue;
            }
            for (dst, &r) in chunk.iter_mut().zip(row) {
                *dst -= s * r;
            }
        }
    }
}

impl SensingOperator {
    pub fn m_b(&self) -> usize {
        self.transmit.len()
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.ncols()
    }

    pub fn rows(&self) -> usize {
        self.m_b() * self.pilot_len()
    }

    /// Number of sensing columns `n_x n_y D`.
    pub fn columns(&self) -> usize {
        self.tx_geom.len() * self.taps
    }

    /// Entry `[Phi]_{m_B N + n, (i1, i2, i3)}` with 0-based indices.
    pub fn entry(&self, row: usize, i: [usize; 3]) -> C64 {
        let n_len = self.pilot_len();
        let (m_b, n) = (row / n_len, row % n_len);
        if n < i[2] {
            return ZERO;
        }
        let a = i[0] * self.tx_geom.ny + i[1];
        let s = self.pilots.column(n - i[2]);
        match &self.transmit[m_b] {
            TransmitMatrix::Dense(m) => m.row(a).transpose().dot(&s),
            TransmitMatrix::RankOne { left, right } => left[a] * right.dot(&s),
        }
    }

    /// Dense `rows x (n_x n_y D)` matrix; columns ordered `(i1 n_y + i2) D + i3`.
    /// Only meant for small instances.
    pub fn to_dense(&self) -> DMatrix<C64> {
        let ny = self.tx_geom.ny;
        DMatrix::from_fn(self.rows(), self.columns(), |r, c| {
            let a = c / self.taps;
            self.entry(r, [a / ny, a % ny, c % self.taps])
        })
    }

    /// `Phi^H R` for an observation-shaped matrix `R` (`rows x cols`).
    pub fn adjoint(&self, r: &DMatrix<C64>) -> BackProjection {
        let n_len = self.pilot_len();
        let d_len = self.taps;
        let cols = r.ncols();
        let rf = self.pilots.nrows();
        let antennas = self.tx_geom.len();
        let mut out = BackProjection::zeros(antennas, d_len, cols);
        let rows = r.nrows();
        let data = r.as_slice();
        // Per configuration: T[k, i3, col] = sum_n conj(s_k[n - i3]) R[(m_B, n), col].
        let mut t = vec![ZERO; rf * d_len * cols];
        for (m_b, transmit) in self.transmit.iter().enumerate() {
            let base = m_b * n_len;
            for k in 0..rf {
                let s: Vec<C64> = self.pilots.row(k).iter().map(|v| v.conj()).collect();
                for i3 in 0..d_len.min(n_len) {
                    for col in 0..cols {
                        let column = &data[col * rows + base..col * rows + base + n_len];
                        let acc: C64 = column[i3..].iter().zip(&s).map(|(y, sc)| sc * y).sum();
                        t[(k * d_len + i3) * cols + col] = acc;
                    }
                }
            }
            match transmit {
                TransmitMatrix::Dense(m) => {
                    for a in 0..antennas {
                        let dst = &mut out.data[a * d_len * cols..(a + 1) * d_len * cols];
                        for k in 0..rf {
                            let f = m[(a, k)].conj();
                            if f == ZERO {
                                continue;
                            }
                            let src = &t[k * d_len * cols..(k + 1) * d_len * cols];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += f * v;
                            }
                        }
                    }
                }
                TransmitMatrix::RankOne { left, right } => {
                    let mut q = vec![ZERO; d_len * cols];
                    for k in 0..rf {
                        let g = right[k].conj();
                        let src = &t[k * d_len * cols..(k + 1) * d_len * cols];
                        for (o, v) in q.iter_mut().zip(src) {
                            *o += g * v;
                        }
                    }
                    for a in 0..antennas {
                        let f = left[a].conj();
                        if f == ZERO {
                            continue;
                        }
                        let dst = &mut out.data[a * d_len * cols..(a + 1) * d_len * cols];
                        for (o, v) in dst.iter_mut().zip(&q) {
                            *o += f * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Per-configuration stream weights `w_{m_B} = Fbar_{m_B}^T v` for an
    /// antenna-domain weight vector `v`.
    pub fn stream_weights(&self, v: &[C64]) -> Vec<DVector<C64>> {
        self.transmit.iter().map(|t| t.transpose_apply(v)).collect()
    }

    /// Column `j` of `Phi (Psi_1 kron Psi_2 kron Psi_3)`, built one dimension at a time.
    pub fn composite_atom(&self, dict: &MultiDictionary, j: [usize; 3]) -> DVector<C64> {
        self.atom_from_columns(
            &dict.psi[0].column(j[0]).into_owned(),
            &dict.psi[1].column(j[1]).into_owned(),
            &dict.psi[2].column(j[2]).into_owned(),
        )
    }

    /// `Phi (psi_1 kron psi_2 kron psi_3)` for arbitrary columns.
    pub fn atom_from_columns(&self, psi1: &DVector<C64>, psi2: &DVector<C64>, delay: &DVector<C64>) -> DVector<C64> {
        let v = psi1.kronecker(psi2);
        let n_len = self.pilot_len();
        let mut atom = DVector::zeros(self.rows());
        for (m_b, w) in self.stream_weights(v.as_slice()).iter().enumerate() {
            // h[n'] = w^T s[n'], then a[n] = sum_{i3 <= n} psi3[i3] h[n - i3].
            let h: Vec<C64> = self.pilots.column_iter().map(|s| w.dot(&s)).collect();
            for n in 0..n_len {
                let mut acc = ZERO;
                for i3 in 0..self.taps.min(n + 1) {
                    acc += delay[i3] * h[n - i3];
                }
                atom[m_b * n_len + n] = acc;
            }
        }
        atom
    }
}

/// `Psi_1[:, j1] kron Psi_2[:, j2]`.
pub fn antenna_weights(dict: &MultiDictionary, j1: usize, j2: usize) -> DVector<C64> {
    dict.psi[0].column(j1).kronecker(&dict.psi[1].column(j2))
}

/// Sensing operator of the direct link: `Fbar_{m_B} = F_{m_B}`.
pub fn build_bm_sensing(ts: &TrainingSet, bs: UpaGeometry, taps: usize) -> Result<SensingOperator> {
    if let Some(f) = ts.precoders.iter().find(|f| f.nrows() != bs.len()) {
        return Err(Error::ShapeMismatch(format!(
            "precoder has {} rows, BS has {} antennas",
            f.nrows(),
            bs.len()
        )));
    }
    Ok(SensingOperator {
        source: Source::Bm,
        tx_geom: bs,
        transmit: ts.precoders.iter().cloned().map(TransmitMatrix::Dense).collect(),
        pilots: ts.pilots.clone(),
        taps,
        bs_ris_delay: None,
    })
}

/// Sensing operator of the cascaded link with a single known BS-RIS LoS path:
/// `Fbar_{m_B} = alpha_BR diag(omega_{m_B}) a_R(theta_BR) a_B(phi_BR)^H F_{m_B}`,
/// stored as a rank-one factorization.
pub fn build_brm_sensing(
    ts: &TrainingSet,
    arrays: &Arrays,
    bs_ris_los: &PropagationPath,
    taps: usize,
) -> Result<SensingOperator> {
    if ts.ris_phases.len() != ts.precoders.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} RIS configurations for {} precoders",
            ts.ris_phases.len(),
            ts.precoders.len()
        )));
    }
    let incident = upa_response(bs_ris_los.arrival, arrays.ris) * bs_ris_los.gain;
    let beam = upa_response(bs_ris_los.departure, arrays.bs);
    let transmit = ts
        .precoders
        .iter()
        .zip(&ts.ris_phases)
        .map(|(f, omega)| {
            crate::scene::check_unit_modulus(omega)?;
            if omega.len() != arrays.ris.len() || f.nrows() != arrays.bs.len() {
                return Err(Error::ShapeMismatch("RIS phases or precoder size".into()));
            }
            Ok(TransmitMatrix::RankOne {
                left: incident.component_mul(omega),
                // (a_B^H F)^T = F^T conj(a_B)
                right: f.transpose() * beam.conjugate(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensingOperator {
        source: Source::Brm,
        tx_geom: arrays.ris,
        transmit,
        pilots: ts.pilots.clone(),
        taps,
        bs_ris_delay: Some(bs_ris_los.delay),
    })
}

/// Sparse coefficient tensor: nonzero rows `C[j, :]`.
pub type SparseCoefficients = Vec<([usize; 3], DVector<C64>)>;

/// `sum_j atom_j C[j, :]`, evaluated per dimension.
pub fn apply_sensing(op: &SensingOperator, dict: &MultiDictionary, coeffs: &SparseCoefficients) -> Result<DMatrix<C64>> {
    let phys = dict.physical_dims();
    if phys != [op.tx_geom.nx, op.tx_geom.ny, op.taps] {
        return Err(Error::ShapeMismatch(format!(
            "dictionary physical dims {phys:?} vs operator {}x{}x{}",
            op.tx_geom.nx, op.tx_geom.ny, op.taps
        )));
    }
    let cols = coeffs.first().map_or(0, |(_, r)| r.len());
    let dims = dict.atom_dims();
    let mut out = DMatrix::zeros(op.rows(), cols);
    for (j, row) in coeffs {
        if row.len() != cols {
            return Err(Error::ShapeMismatch("coefficient rows differ in length".into()));
        }
        if (0..3).any(|k| j[k] >= dims[k]) {
            return Err(Error::ShapeMismatch(format!("index {j:?} outside {dims:?}")));
        }
        let atom = op.composite_atom(dict, *j);
        out += atom * row.transpose();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrays::Direction;
    use crate::scene::PathLabel;
    use crate::sounding::hadamard;
    use nalgebra::Vector3;

    fn pulse(taps: usize) -> PulseShape {
        PulseShape::sinc(1e-8, taps)
    }

    #[test]
    fn zero_cosine_column_is_all_ones() {
        let d = build_bm_dictionaries(UpaGeometry::new(4, 3).unwrap(), &pulse(4), GridRatios::uniform(2)).unwrap();
        let j = d.x_grid.cosines.iter().position(|&c| c == 0.0).unwrap();
        assert!(d.psi[0].column(j).iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
        let j = d.y_grid.cosines.iter().position(|&c| c == 0.0).unwrap();
        assert!(d.psi[1].column(j).iter().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn dictionary_shapes() {
        let d = build_bm_dictionaries(UpaGeometry::new(8, 8).unwrap(), &pulse(32), GridRatios::uniform(128)).unwrap();
        assert_eq!(d.psi[0].shape(), (8, 1024));
        assert_eq!(d.psi[2].shape(), (32, 4096));
        let r = build_brm_dictionaries(UpaGeometry::new(32, 32).unwrap(), &pulse(4), GridRatios::uniform(128)).unwrap();
        assert_eq!(r.psi[0].shape(), (32, 4096));
        assert!(r.psi[0].iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert_eq!(r.source, Source::Brm);
        assert!((r.x_grid.ratio() - 128.0).abs() < 1e-12);
    }

    #[test]
    fn delay_dictionary_on_sample_grid_is_canonical() {
        let p = pulse(6);
        let d = build_bm_dictionaries(UpaGeometry::new(2, 2).unwrap(), &p, GridRatios::uniform(4)).unwrap();
        for k in 0..6 {
            let col = d.psi[2].column(4 * k);
            for (i, v) in col.iter().enumerate() {
                let expected = if i == k { 1.0 } else { 0.0 };
                assert!((v.re - expected).abs() < 1e-12 && v.im == 0.0);
            }
        }
        let g = &d.delay_grid;
        assert!(g.delays.windows(2).all(|w| w[1] > w[0]));
        assert!((g.step - p.window() / g.len() as f64).abs() < 1e-24);
    }

    #[test]
    fn unit_ratio_dictionary_is_scaled_unitary() {
        let d = build_bm_dictionaries(UpaGeometry::new(8, 4).unwrap(), &pulse(4), GridRatios::uniform(1)).unwrap();
        for (k, n) in [(0, 8.0), (1, 4.0)] {
            let gram = d.psi[k].adjoint() * &d.psi[k];
            let expected = DMatrix::<C64>::identity(gram.nrows(), gram.nrows()) * C64::new(n, 0.0);
            assert!((gram - expected).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_ratio_is_rejected() {
        let r = GridRatios { x: 0, y: 1, delay: 1 };
        assert!(build_bm_dictionaries(UpaGeometry::new(2, 2).unwrap(), &pulse(4), r).is_err());
    }

    fn training(n_tx: usize, rf: usize, n: usize, m_b: usize) -> TrainingSet {
        let h = hadamard(n);
        TrainingSet {
            precoders: (0..m_b)
                .map(|m| DMatrix::from_fn(n_tx, rf, |a, k| C64::from_polar(1.0, 0.3 * (a * rf + k + m) as f64)))
                .collect(),
            combiners: vec![DMatrix::identity(2, 2)],
            ris_phases: (0..m_b)
                .map(|m| DVector::from_fn(4, |i, _| C64::from_polar(1.0, 0.9 * (i + m) as f64)))
                .collect(),
            pilots: DMatrix::from_fn(rf, n, |k, t| C64::new(h[(k + 1, t)], 0.0)),
            tx_power: 1.0,
            noise_var: 0.0,
        }
    }

    #[test]
    fn zero_prefix_entries_vanish() {
        let mut ts = training(4, 2, 8, 2);
        ts.precoders = vec![DMatrix::identity(4, 2); 2];
        let op = build_bm_sensing(&ts, UpaGeometry::new(2, 2).unwrap(), 4).unwrap();
        for m_b in 0..2 {
            for n in 0..3 {
                for i3 in (n + 1)..4 {
                    for a in 0..4 {
                        assert_eq!(op.entry(m_b * 8 + n, [a / 2, a % 2, i3]), ZERO);
                    }
                }
            }
        }
    }

    #[test]
    fn single_stream_first_antenna_support() {
        let mut ts = training(4, 1, 8, 1);
        let mut f = DMatrix::zeros(4, 1);
        f[(0, 0)] = C64::new(1.0, 0.0);
        ts.precoders = vec![f];
        let op = build_bm_sensing(&ts, UpaGeometry::new(2, 2).unwrap(), 3).unwrap();
        for row in 0..8 {
            for i3 in 0..3 {
                for a in 1..4 {
                    assert_eq!(op.entry(row, [a / 2, a % 2, i3]), ZERO);
                }
                let expected = if row >= i3 { ts.pilots[(0, row - i3)] } else { ZERO };
                assert_eq!(op.entry(row, [0, 0, i3]), expected);
            }
        }
    }

    #[test]
    fn sensing_is_linear_in_precoders() {
        let ts = training(4, 2, 8, 2);
        let mut doubled = ts.clone();
        for f in &mut doubled.precoders {
            *f *= C64::new(2.0, 0.0);
        }
        let g = UpaGeometry::new(2, 2).unwrap();
        let a = build_bm_sensing(&ts, g, 3).unwrap().to_dense();
        let b = build_bm_sensing(&doubled, g, 3).unwrap().to_dense();
        assert!((a * C64::new(2.0, 0.0) - b).norm() < 1e-12);
    }

    fn bs_ris(gain: C64) -> PropagationPath {
        PropagationPath {
            gain,
            departure: Direction::from_vector(&Vector3::new(-1.0, 0.5, -0.3)).unwrap(),
            arrival: Direction::new(0.0, 0.0, 1.0).unwrap(),
            delay: 4e-8,
            label: PathLabel::LineOfSight,
        }
    }

    fn small_arrays() -> Arrays {
        Arrays {
            bs: UpaGeometry::new(2, 2).unwrap(),
            ris: UpaGeometry::new(2, 2).unwrap(),
            ms: UpaGeometry::new(2, 1).unwrap(),
        }
    }

    #[test]
    fn cascaded_operator_structure() {
        let mut ts = training(4, 2, 8, 2);
        ts.ris_phases = vec![DVector::from_element(4, C64::new(1.0, 0.0)); 2];
        let arrays = small_arrays();
        let path = bs_ris(C64::new(0.5, 0.5));
        let op = build_brm_sensing(&ts, &arrays, &path, 3).unwrap();
        assert_eq!(op.bs_ris_delay, Some(4e-8));
        // Broadside arrival and all-ones phases: every RIS element sees the same
        // scalar alpha a_B^H F s.
        let beam = upa_response(path.departure, arrays.bs);
        for m_b in 0..2 {
            let dense = op.transmit[m_b].to_dense();
            let expected_row = (beam.adjoint() * &ts.precoders[m_b]) * path.gain;
            for a in 0..4 {
                assert!((dense.row(a) - &expected_row).norm() < 1e-12);
            }
        }

        let zero = build_brm_sensing(&ts, &arrays, &bs_ris(ZERO), 3).unwrap();
        assert_eq!(zero.to_dense().norm(), 0.0);

        let doubled = build_brm_sensing(&ts, &arrays, &bs_ris(C64::new(1.0, 1.0)), 3).unwrap();
        assert!((op.to_dense() * C64::new(2.0, 0.0) - doubled.to_dense()).norm() < 1e-12);
    }

    fn kron_dictionary(dict: &MultiDictionary) -> DMatrix<C64> {
        let [n1, n2, n3] = dict.physical_dims();
        let [a1, a2, a3] = dict.atom_dims();
        DMatrix::from_fn(n1 * n2 * n3, a1 * a2 * a3, |r, c| {
            let (i1, i2, i3) = (r / (n2 * n3), (r / n3) % n2, r % n3);
            let (j1, j2, j3) = (c / (a2 * a3), (c / a3) % a2, c % a3);
            dict.psi[0][(i1, j1)] * dict.psi[1][(i2, j2)] * dict.psi[2][(i3, j3)]
        })
    }

    #[test]
    fn apply_sensing_matches_kronecker_product() {
        let ts = training(4, 2, 8, 3);
        let g = UpaGeometry::new(2, 2).unwrap();
        let p = pulse(4);
        let dict = build_bm_dictionaries(g, &p, GridRatios::uniform(2)).unwrap();
        let op = build_bm_sensing(&ts, g, 4).unwrap();
        let full = op.to_dense() * kron_dictionary(&dict);
        let [_, a2, a3] = dict.atom_dims();

        assert_eq!(apply_sensing(&op, &dict, &vec![]).unwrap().ncols(), 0);

        // Single unit coefficient picks out one column of Phi * Psi.
        let j = [3, 1, 5];
        let unit = vec![(j, DVector::from_element(1, C64::new(1.0, 0.0)))];
        let y = apply_sensing(&op, &dict, &unit).unwrap();
        let col = full.column(j[0] * a2 * a3 + j[1] * a3 + j[2]);
        assert!((y.column(0) - col).norm() < 1e-10);

        let c1 = vec![
            ([0, 2, 7], DVector::from_vec(vec![C64::new(1.0, -2.0), C64::new(0.5, 0.0)])),
            ([1, 1, 1], DVector::from_vec(vec![C64::new(0.0, 1.0), C64::new(-1.0, 0.3)])),
        ];
        let y1 = apply_sensing(&op, &dict, &c1).unwrap();
        let mut dense = DMatrix::zeros(full.ncols(), 2);
        for (j, row) in &c1 {
            dense.set_row(j[0] * a2 * a3 + j[1] * a3 + j[2], &row.transpose());
        }
        assert!((&y1 - &full * dense).norm() < 1e-10);

        let scaled: SparseCoefficients = c1.iter().map(|(j, r)| (*j, r * C64::new(0.0, 3.0))).collect();
        let y2 = apply_sensing(&op, &dict, &scaled).unwrap();
        assert!((y1 * C64::new(0.0, 3.0) - y2).norm() < 1e-10);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        let ts = training(4, 2, 8, 2);
        let arrays = small_arrays();
        for op in [
            build_bm_sensing(&ts, arrays.bs, 3).unwrap(),
            build_brm_sensing(&ts, &arrays, &bs_ris(C64::new(0.2, -0.4)), 3).unwrap(),
        ] {
            let r = DMatrix::from_fn(op.rows(), 3, |i, j| C64::new((i * 3 + j) as f64 * 0.1, (i as f64).sin()));
            let expected = op.to_dense().adjoint() * &r;
            let bp = op.adjoint(&r);
            for a in 0..4 {
                for i3 in 0..3 {
                    for col in 0..3 {
                        let v = bp.at(a, i3)[col];
                        assert!((v - expected[(a * 3 + i3, col)]).norm() < 1e-10);
                    }
                }
            }
        }
    }
}
