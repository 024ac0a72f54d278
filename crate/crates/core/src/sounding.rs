//! Training design, received-signal simulation, whitening and observation
//! stacking.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::arrays::{upa_response, C64};
use crate::error::{Error, Result};
use crate::scene::{Arrays, ChannelTaps, PropagationPath};

/// How the training precoder columns are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecoderMode {
    /// Every column random (direct link only).
    Random,
    /// Every column steered at the RIS.
    RisOnly,
    /// The first half (rounded up) steered at the RIS, the rest random.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Number of transmit configurations `M_B`.
    pub m_b: usize,
    /// Number of training combiners `M_M`.
    pub m_m: usize,
    /// Training sequence length `N`.
    pub pilot_len: usize,
    pub rf_bs: usize,
    pub rf_ms: usize,
    /// Transmit power in watts.
    pub tx_power: f64,
    /// Per-antenna noise variance in watts.
    pub noise_var: f64,
    pub precoding: PrecoderMode,
    /// Draw random RIS phase vectors (otherwise the RIS is absent).
    pub use_ris: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `M_B` precoders, each `N_B x N_RF,B`.
    pub precoders: Vec<DMatrix<C64>>,
    /// `M_M` combiners, each `N_M x N_RF,M`.
    pub combiners: Vec<DMatrix<C64>>,
    /// `M_B` RIS phase vectors; empty when the RIS is not used.
    pub ris_phases: Vec<DVector<C64>>,
    /// Pilot matrix `N_RF,B x N`; column `n` is `s[n]` (0-based).
    pub pilots: DMatrix<C64>,
    pub tx_power: f64,
    pub noise_var: f64,
}

impl TrainingSet {
    pub fn m_b(&self) -> usize {
        self.precoders.len()
    }

    pub fn m_m(&self) -> usize {
        self.combiners.len()
    }

    pub fn pilot_len(&self) -> usize {
        self.pilots.ncols()
    }

    pub fn rf_ms(&self) -> usize {
        self.combiners.first().map_or(0, |w| w.ncols())
    }
}

/// Sylvester-type Hadamard matrix of order `n` (a power of two).
pub fn hadamard(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

fn random_phases<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| C64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI)))
}

/// Draws precoders, combiners, RIS phases and pilots. Random entries are
/// unit-modulus phases uniform on `[0, 2 pi)`; baseband stages are identity.
pub fn generate_training_set<R: Rng + ?Sized>(
    cfg: &TrainingConfig,
    arrays: &Arrays,
    bs_ris_los: Option<&PropagationPath>,
    rng: &mut R,
) -> Result<TrainingSet> {
    let n = cfg.pilot_len;
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("pilot length {n} is not a power of two")));
    }
    if cfg.rf_bs == 0 || cfg.rf_bs > n {
        return Err(Error::Config(format!(
            "{} BS RF chains cannot be fed by {n} distinct Hadamard rows",
            cfg.rf_bs
        )));
    }
    if cfg.m_b == 0 || cfg.m_m == 0 || cfg.rf_ms == 0 {
        return Err(Error::Config("training counts must be positive".into()));
    }
    let steered = match cfg.precoding {
        PrecoderMode::Random => 0,
        PrecoderMode::RisOnly => cfg.rf_bs,
        PrecoderMode::Both => cfg.rf_bs.div_ceil(2),
    };
    let beam = if steered > 0 {
        let los = bs_ris_los.ok_or_else(|| {
            Error::Config("steering at the RIS needs the BS-RIS LoS path".into())
        })?;
        Some(upa_response(los.departure, arrays.bs))
    } else {
        None
    };

    // Pilots: distinct Hadamard rows, scaled so (1/N) sum_n s[n] s[n]^H = I / N_s.
    let h = hadamard(n);
    let rows = sample(rng, n, cfg.rf_bs).into_vec();
    let scale = 1.0 / (cfg.rf_bs as f64).sqrt();
    let pilots = DMatrix::from_fn(cfg.rf_bs, n, |k, t| C64::new(h[(rows[k], t)] * scale, 0.0));

    let precoders = (0..cfg.m_b)
        .map(|_| {
            let mut f = random_phases(arrays.bs.len(), cfg.rf_bs, rng);
            if let Some(beam) = &beam {
                for col in 0..steered {
                    f.set_column(col, beam);
                }
            }
            f
        })
        .collect();
    let combiners = (0..cfg.m_m)
        .map(|_| random_phases(arrays.ms.len(), cfg.rf_ms, rng))
        .collect();
    let ris_phases = if cfg.use_ris {
        (0..cfg.m_b)
            .map(|_| random_phases(arrays.ris.len(), 1, rng).column(0).into_owned())
            .collect()
    } else {
        Vec::new()
    };
    Ok(TrainingSet {
        precoders,
        combiners,
        ris_phases,
        pilots,
        tx_power: cfg.tx_power,
        noise_var: cfg.noise_var,
    })
}

/// `X[:, n] = sum_d H_d F s[n - d]` with `s[k] = 0` for `k < 0` (zero prefix).
/// Returns `N_rx x N`.
pub fn precoded_signal(taps: &ChannelTaps, precoder: &DMatrix<C64>, pilots: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let (_, n_rx, n_tx) = taps.shape();
    if precoder.nrows() != n_tx || precoder.ncols() != pilots.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "channel has {n_tx} transmit antennas, precoder is {}x{}, pilots have {} streams",
            precoder.nrows(),
            precoder.ncols(),
            pilots.nrows()
        )));
    }
    let n = pilots.ncols();
    let mut x = DMatrix::zeros(n_rx, n);
    for (d, tap) in taps.taps.iter().enumerate() {
        if d >= n || tap.iter().all(|v| *v == C64::new(0.0, 0.0)) {
            continue;
        }
        let hf = tap * precoder;
        let shifted = pilots.columns(0, n - d);
        let contrib = hf * shifted;
        let mut dst = x.columns_mut(d, n - d);
        dst += contrib;
    }
    Ok(x)
}

/// Received frame split into its noiseless signal and combined noise; both
/// are `N x N_RF,M` with row `n` holding `y[n]^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParts {
    pub signal: DMatrix<C64>,
    pub noise: DMatrix<C64>,
}

impl FrameParts {
    pub fn raw(&self) -> DMatrix<C64> {
        &self.signal + &self.noise
    }
}

/// Circularly-symmetric complex Gaussian matrix with per-entry variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> DMatrix<C64> {
    let sd = (var / 2.0).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re * sd, im * sd)
    })
}

fn combine(
    precoded: &DMatrix<C64>,
    combiner: &DMatrix<C64>,
    tx_power: f64,
    noise_var: f64,
    rng: &mut (impl Rng + ?Sized),
) -> FrameParts {
    let wh = combiner.adjoint();
    let signal = (&wh * precoded * C64::new(tx_power.sqrt(), 0.0)).transpose();
    let noise = if noise_var > 0.0 {
        let v = complex_gaussian(combiner.nrows(), precoded.ncols(), noise_var, rng);
        (wh * v).transpose()
    } else {
        DMatrix::zeros(precoded.ncols(), combiner.ncols())
    };
    FrameParts { signal, noise }
}

/// Simulates `y[n] = sqrt(P_t) W^H sum_d H_d F s[n-d] + W^H v[n]` for one
/// `(m_B, m_M)` pair, with `v[n]` i.i.d. `CN(0, sigma^2)` per receive antenna.
pub fn simulate_received_frame<R: Rng + ?Sized>(
    taps: &ChannelTaps,
    ts: &TrainingSet,
    m_b: usize,
    m_m: usize,
    rng: &mut R,
) -> Result<FrameParts> {
    let (precoder, combiner) = select(ts, m_b, m_m)?;
    let x = precoded_signal(taps, precoder, &ts.pilots)?;
    check_combiner(taps, combiner)?;
    Ok(combine(&x, combiner, ts.tx_power, ts.noise_var, rng))
}

/// All `M_M` frames of one transmit configuration, sharing the precoded
/// signal. Noise is drawn in combiner order.
pub fn simulate_configuration<R: Rng + ?Sized>(
    taps: &ChannelTaps,
    ts: &TrainingSet,
    m_b: usize,
    rng: &mut R,
) -> Result<Vec<FrameParts>> {
    let (precoder, _) = select(ts, m_b, 0)?;
    let x = precoded_signal(taps, precoder, &ts.pilots)?;
    ts.combiners
        .iter()
        .map(|w| {
            check_combiner(taps, w)?;
            Ok(combine(&x, w, ts.tx_power, ts.noise_var, rng))
        })
        .collect()
}

fn select(ts: &TrainingSet, m_b: usize, m_m: usize) -> Result<(&DMatrix<C64>, &DMatrix<C64>)> {
    match (ts.precoders.get(m_b), ts.combiners.get(m_m)) {
        (Some(f), Some(w)) => Ok((f, w)),
        _ => Err(Error::ShapeMismatch(format!(
            "configuration ({m_b}, {m_m}) outside {}x{} training set",
            ts.m_b(),
            ts.m_m()
        ))),
    }
}

fn check_combiner(taps: &ChannelTaps, w: &DMatrix<C64>) -> Result<()> {
    let (_, n_rx, _) = taps.shape();
    if w.nrows() != n_rx {
        return Err(Error::ShapeMismatch(format!(
            "combiner has {} rows, channel has {n_rx} receive antennas",
            w.nrows()
        )));
    }
    Ok(())
}

/// Cholesky whitening factor of one combiner: `L L^H = W^H W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    pub factor: DMatrix<C64>,
    inverse: DMatrix<C64>,
}

impl Whitener {
    pub fn new(combiner: &DMatrix<C64>) -> Result<Self> {
        let gram = combiner.adjoint() * combiner;
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        if !(max > 0.0) || min < 1e-12 * max {
            return Err(Error::SingularCombiner(if max > 0.0 { min / max } else { 0.0 }));
        }
        let chol = gram
            .cholesky()
            .ok_or(Error::SingularCombiner(min / max))?;
        let factor = chol.l();
        let n = factor.nrows();
        let inverse = factor
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(Error::SingularCombiner(min / max))?;
        Ok(Self { factor, inverse })
    }

    /// Applies `L^{-1}` to every received vector of an `N x N_RF,M` block.
    pub fn apply(&self, block: &DMatrix<C64>) -> DMatrix<C64> {
        block * self.inverse.transpose()
    }

    pub fn inverse(&self) -> &DMatrix<C64> {
        &self.inverse
    }
}

/// Whitens a raw block; returns the whitened block and the factor `L`.
pub fn whiten_block(raw: &DMatrix<C64>, combiner: &DMatrix<C64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if raw.ncols() != combiner.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "block has {} columns, combiner has {}",
            raw.ncols(),
            combiner.ncols()
        )));
    }
    let w = Whitener::new(combiner)?;
    Ok((w.apply(raw), w.factor))
}

/// Whitened measurements stacked on an `M_B x M_M` block grid: block
/// `(m_B, m_M)` is `N x N_RF,M` at row `m_B N`, column `m_M N_RF,M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    pub data: DMatrix<C64>,
    pub pilot_len: usize,
    pub rf_ms: usize,
    pub whitening: Vec<DMatrix<C64>>,
}

impl ObservationBlock {
    pub fn m_b(&self) -> usize {
        self.data.nrows() / self.pilot_len
    }

    pub fn m_m(&self) -> usize {
        self.data.ncols() / self.rf_ms
    }

    pub fn block(&self, m_b: usize, m_m: usize) -> DMatrix<C64> {
        self.data
            .view((m_b * self.pilot_len, m_m * self.rf_ms), (self.pilot_len, self.rf_ms))
            .into_owned()
    }
}

/// Stacks `M_B x M_M` whitened blocks into one observation matrix.
pub fn assemble_observation(
    m_b: usize,
    m_m: usize,
    blocks: &BTreeMap<(usize, usize), DMatrix<C64>>,
    whitening: Vec<DMatrix<C64>>,
) -> Result<ObservationBlock> {
    let first = blocks.get(&(0, 0)).ok_or(Error::MissingBlock(0, 0))?;
    let (n, rf) = first.shape();
    let mut data = DMatrix::zeros(m_b * n, m_m * rf);
    for b in 0..m_b {
        for m in 0..m_m {
            let block = blocks.get(&(b, m)).ok_or(Error::MissingBlock(b, m))?;
            if block.shape() != (n, rf) {
                return Err(Error::ShapeMismatch(format!(
                    "block ({b}, {m}) is {:?}, expected {:?}",
                    block.shape(),
                    (n, rf)
                )));
            }
            data.view_mut((b * n, m * rf), (n, rf)).copy_from(block);
        }
    }
    Ok(ObservationBlock {
        data,
        pilot_len: n,
        rf_ms: rf,
        whitening,
    })
}

/// Whitened observation of every `(m_B, m_M)` frame, together with the
/// whitened noiseless signal on the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sounding {
    pub observation: ObservationBlock,
    pub noiseless: DMatrix<C64>,
}

/// Sounds the channel with every training configuration. `taps` holds either
/// one channel shared by all configurations or one per configuration (the
/// cascade changes with the RIS phases). Frames are drawn in `m_B`-major order.
pub fn sound_channel<R: Rng + ?Sized>(taps: &[ChannelTaps], ts: &TrainingSet, rng: &mut R) -> Result<Sounding> {
    if taps.len() != 1 && taps.len() != ts.m_b() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels for {} transmit configurations",
            taps.len(),
            ts.m_b()
        )));
    }
    let whiteners = ts.combiners.iter().map(Whitener::new).collect::<Result<Vec<_>>>()?;
    let mut noisy = BTreeMap::new();
    let mut clean = BTreeMap::new();
    for b in 0..ts.m_b() {
        for (m, parts) in simulate_configuration(&taps[b.min(taps.len() - 1)], ts, b, rng)?.into_iter().enumerate() {
            clean.insert((b, m), whiteners[m].apply(&parts.signal));
            noisy.insert((b, m), whiteners[m].apply(&parts.raw()));
        }
    }
    let factors: Vec<_> = whiteners.iter().map(|w| w.factor.clone()).collect();
    let noiseless = assemble_observation(ts.m_b(), ts.m_m(), &clean, factors.clone())?.data;
    Ok(Sounding {
        observation: assemble_observation(ts.m_b(), ts.m_m(), &noisy, factors)?,
        noiseless,
    })
}
