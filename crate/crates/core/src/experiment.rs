//! Monte-Carlo localization experiment on the synthetic factory scene.
//!
//! Every trial draws, from its own random stream and in this order: the MS
//! position, the BS-MS blockage flag, the clock offset `t_0`, the training
//! set, and the receiver noise. The stream for trial `i` is
//! `ChaCha8Rng::seed_from_u64(seed)` with `set_stream(i)`, so trials can run in
//! any order or in parallel and give the same records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use rayon::prelude::*;

use crate::arrays::{PulseShape, UpaGeometry};
use crate::dictionary::{
    build_bm_dictionaries, build_bm_sensing, build_brm_dictionaries, build_brm_sensing, GridRatios,
    MultiDictionary, SensingOperator, Source,
};
use crate::error::{Error, Result};
use crate::localization::{localize_dual, localize_single, AnchorSet, FixMethod, LocalizationConfig, PositionFix};
use crate::momp::{
    extract_path_estimates, momp_estimate, nmse, reconstruct_observation, MompOutput, PathEstimate, SolverConfig,
    SourcePair, ZPriors,
};
use crate::scene::{
    assemble_bm_taps, assemble_brm_taps, observable_paths, overall_taps, Arrays, ChannelTaps, Link,
    PropagationPath, Scene,
};
use crate::sounding::{generate_training_set, sound_channel, PrecoderMode, Sounding, TrainingConfig, TrainingSet};

/// Which links are present and how the BS trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Direct link only, random precoders, BS-MS LoS blocked with the
    /// configured probability.
    BmOnly,
    /// Cascaded link only; every precoder column points at the RIS.
    RisOnly,
    /// Both links; half of the precoder columns point at the RIS.
    #[default]
    Both,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BmOnly => "bm-only",
            Mode::RisOnly => "ris-only",
            Mode::Both => "both",
        }
    }

    pub fn uses_ris(&self) -> bool {
        *self != Mode::BmOnly
    }

    pub fn has_direct(&self) -> bool {
        *self != Mode::RisOnly
    }

    /// Fixes computed in this mode.
    pub fn methods(&self) -> &'static [FixMethod] {
        match self {
            Mode::BmOnly => &[FixMethod::OneLosBm],
            Mode::RisOnly => &[FixMethod::OneLosRm],
            Mode::Both => &[FixMethod::TwoLos, FixMethod::OneLosBm, FixMethod::OneLosRm],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm-only" => Ok(Mode::BmOnly),
            "ris-only" => Ok(Mode::RisOnly),
            "both" => Ok(Mode::Both),
            other => Err(Error::Config(format!("unknown mode {other:?} (bm-only, ris-only, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub bs: [f64; 3],
    pub ris: [f64; 3],
    pub carrier_ghz: f64,
    /// Reflection coefficient `[re, im]` applied to every surface.
    pub reflection: [f64; 2],
    pub bs_ris_multipath: bool,
    /// Drop rays leaving the ceiling-mounted BS upward.
    pub bs_faces_down: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let s = Scene::indoor_factory();
        Self {
            bs: s.bs,
            ris: s.ris,
            carrier_ghz: s.fc,
            reflection: s.surfaces[0].gamma,
            bs_ris_multipath: false,
            bs_faces_down: s.bs_faces_down,
        }
    }
}

/// MS sampling region: uniform in `x` and `y`, fixed height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Region {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: f64,
}

impl Default for Region {
    fn default() -> Self {
        Self {
            x: [-10.0, 0.0],
            y: [-15.0, -5.0],
            z: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub bs: [usize; 2],
    pub ris: [usize; 2],
    pub ms: [usize; 2],
    pub rf_bs: usize,
    pub rf_ms: usize,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            bs: [8, 8],
            ris: [16, 16],
            ms: [4, 4],
            rf_bs: 8,
            rf_ms: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingCounts {
    /// Transmit configurations; defaults to half the BS antennas (no RIS) or
    /// half the RIS elements.
    pub m_b: Option<usize>,
    /// Combiners; defaults to half the MS antennas.
    pub m_m: Option<usize>,
    /// Upper bound on `M_B` applied after the defaults.
    pub max_m_b: Option<usize>,
    pub pilot_len: usize,
    pub taps: usize,
}

impl Default for TrainingCounts {
    fn default() -> Self {
        Self {
            m_b: None,
            m_m: None,
            max_m_b: None,
            pilot_len: 64,
            taps: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub bandwidth_mhz: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            tx_power_dbm: 20.0,
            noise_dbm: -94.0,
            bandwidth_mhz: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockageConfig {
    /// Probability that the BS-MS LoS is blocked in `bm-only` trials.
    pub bs_ms_probability: f64,
}

impl Default for BlockageConfig {
    fn default() -> Self {
        Self { bs_ms_probability: 0.2 }
    }
}

/// Full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub mode: Mode,
    pub scene: SceneConfig,
    pub region: Region,
    pub arrays: ArrayConfig,
    pub training: TrainingCounts,
    pub radio: RadioConfig,
    pub dictionary: GridRatios,
    pub solver: SolverConfig,
    pub localization: LocalizationConfig,
    pub blockage: BlockageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 100,
            mode: Mode::Both,
            scene: SceneConfig::default(),
            region: Region::default(),
            arrays: ArrayConfig::default(),
            training: TrainingCounts::default(),
            radio: RadioConfig::default(),
            dictionary: GridRatios::default(),
            solver: SolverConfig {
                max_paths: 40,
                residual_tol: 1e-3,
                sweeps: 3,
                starts: 4,
                exhaustive_limit: 4096,
                sequential: true,
                refine: 1,
            },
            localization: LocalizationConfig {
                los_gain_floor: 0.35,
                ..LocalizationConfig::default()
            },
            blockage: BlockageConfig::default(),
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arrays(&self) -> Result<Arrays> {
        let g = |[nx, ny]: [usize; 2]| UpaGeometry::new(nx, ny).map_err(|e| Error::Config(e.to_string()));
        Ok(Arrays {
            bs: g(self.arrays.bs)?,
            ris: g(self.arrays.ris)?,
            ms: g(self.arrays.ms)?,
        })
    }

    pub fn sampling_period(&self) -> f64 {
        1.0 / (self.radio.bandwidth_mhz * 1e6)
    }

    pub fn pulse(&self) -> PulseShape {
        PulseShape::sinc(self.sampling_period(), self.training.taps)
    }

    pub fn scene_template(&self) -> Scene {
        let mut scene = Scene::indoor_factory();
        scene.bs = self.scene.bs;
        scene.ris = self.scene.ris;
        scene.fc = self.scene.carrier_ghz;
        scene.bs_ris_multipath = self.scene.bs_ris_multipath;
        scene.bs_faces_down = self.scene.bs_faces_down;
        for s in &mut scene.surfaces {
            s.gamma = self.scene.reflection;
        }
        scene
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        let arrays = self.arrays()?;
        let default_m_b = if self.mode.uses_ris() { arrays.ris.len() } else { arrays.bs.len() } / 2;
        let mut m_b = self.training.m_b.unwrap_or(default_m_b.max(1));
        if let Some(cap) = self.training.max_m_b {
            m_b = m_b.min(cap);
        }
        Ok(TrainingConfig {
            m_b,
            m_m: self.training.m_m.unwrap_or((arrays.ms.len() / 2).max(1)),
            pilot_len: self.training.pilot_len,
            rf_bs: self.arrays.rf_bs,
            rf_ms: self.arrays.rf_ms,
            tx_power: dbm_to_watts(self.radio.tx_power_dbm),
            noise_var: dbm_to_watts(self.radio.noise_dbm),
            precoding: match self.mode {
                Mode::BmOnly => PrecoderMode::Random,
                Mode::RisOnly => PrecoderMode::RisOnly,
                Mode::Both => PrecoderMode::Both,
            },
            use_ris: self.mode.uses_ris(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        let arrays = self.arrays()?;
        if self.arrays.rf_bs == 0 || self.arrays.rf_ms == 0 {
            return bad("RF chain counts must be positive".into());
        }
        if self.arrays.rf_bs > arrays.bs.len() || self.arrays.rf_ms > arrays.ms.len() {
            return bad("more RF chains than antennas".into());
        }
        if self.training.taps == 0 || self.training.pilot_len == 0 {
            return bad("taps and pilot length must be positive".into());
        }
        if !self.training.pilot_len.is_power_of_two() {
            return bad(format!("pilot length {} is not a power of two", self.training.pilot_len));
        }
        if self.arrays.rf_bs > self.training.pilot_len {
            return bad("more BS RF chains than pilot rows".into());
        }
        if self.training.m_b == Some(0) || self.training.m_m == Some(0) || self.training.max_m_b == Some(0) {
            return bad("training counts must be positive".into());
        }
        let g = self.dictionary;
        if g.x == 0 || g.y == 0 || g.delay == 0 {
            return bad("dictionary ratios must be at least 1".into());
        }
        if !self.radio.tx_power_dbm.is_finite() || self.radio.noise_dbm.is_nan() || self.radio.noise_dbm == f64::INFINITY {
            return bad("transmit power must be finite and noise power below +inf dBm".into());
        }
        if !(self.radio.bandwidth_mhz > 0.0) {
            return bad("bandwidth must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.blockage.bs_ms_probability) {
            return bad("blockage probability must lie in [0, 1]".into());
        }
        if self.solver.max_paths == 0 {
            return bad("max_paths must be positive".into());
        }
        if self.region.x[0] > self.region.x[1] || self.region.y[0] > self.region.y[1] {
            return bad("region bounds are reversed".into());
        }
        let mut scene = self.scene_template();
        for corner in [[self.region.x[0], self.region.y[0]], [self.region.x[1], self.region.y[1]]] {
            scene.ms = [corner[0], corner[1], self.region.z];
            scene.validate()?;
        }
        AnchorSet::new(scene.bs_position(), scene.ris_position()).map_err(|e| Error::Config(e.to_string()))?;
        self.training_config()?;
        Ok(())
    }
}

/// Ground truth and training quantities of one trial, everything except the
/// receiver noise.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub index: usize,
    pub scene: Scene,
    pub t0: f64,
    pub bs_ms: Vec<PropagationPath>,
    pub bs_ris: Option<PropagationPath>,
    pub ris_ms: Vec<PropagationPath>,
    pub training: TrainingSet,
    pub channels: Vec<ChannelTaps>,
}

impl TrialSetup {
    pub fn ms(&self) -> Vector3<f64> {
        self.scene.ms_position()
    }
}

/// Outcome of one localization method in one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum FixOutcome {
    Fixed { fix: PositionFix, error: f64 },
    Failed(String),
}

impl FixOutcome {
    /// Position error, `+inf` on failure.
    pub fn error(&self) -> f64 {
        match self {
            FixOutcome::Fixed { error, .. } => *error,
            FixOutcome::Failed(_) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub ms: Vector3<f64>,
    pub t0: f64,
    pub fixes: BTreeMap<&'static str, FixOutcome>,
    pub nmse: f64,
    pub iterations: usize,
    pub estimates: Vec<PathEstimate>,
    /// Set when the trial aborted before localization.
    pub failure: Option<String>,
    pub elapsed_ms: f64,
}

impl TrialRecord {
    pub fn error(&self, method: FixMethod) -> Option<f64> {
        self.fixes.get(method.as_str()).map(FixOutcome::error)
    }
}

/// Dictionaries shared by all trials of an experiment.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub arrays: Arrays,
    pub pulse: PulseShape,
    pub bm_dict: MultiDictionary,
    pub brm_dict: MultiDictionary,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let arrays = cfg.arrays()?;
        let pulse = cfg.pulse();
        Ok(Self {
            bm_dict: build_bm_dictionaries(arrays.bs, &pulse, cfg.dictionary)?,
            brm_dict: build_brm_dictionaries(arrays.ris, &pulse, cfg.dictionary)?,
            arrays,
            pulse,
            cfg,
        })
    }

    pub fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Paths of the links used by the configured mode.
    #[allow(clippy::type_complexity)]
    pub fn trace(&self, scene: &Scene) -> Result<(Vec<PropagationPath>, Option<PropagationPath>, Vec<PropagationPath>)> {
        let bs_ms = if self.cfg.mode.has_direct() { scene.trace_link(Link::BsMs)? } else { Vec::new() };
        let (bs_ris, ris_ms) = if self.cfg.mode.uses_ris() {
            let los = scene
                .trace_link(Link::BsRis)?
                .into_iter()
                .find(|p| p.label == crate::scene::PathLabel::LineOfSight)
                .ok_or_else(|| Error::Config("BS-RIS LoS is required for the cascaded link".into()))?;
            (Some(los), scene.trace_link(Link::RisMs)?)
        } else {
            (None, Vec::new())
        };
        Ok((bs_ms, bs_ris, ris_ms))
    }

    /// Draws the scene, clock offset and training set of trial `index`; the
    /// returned generator continues with the noise draws.
    pub fn setup(&self, index: usize) -> Result<(TrialSetup, ChaCha8Rng)> {
        let cfg = &self.cfg;
        let mut rng = self.rng(index);
        let mut scene = cfg.scene_template();
        scene.ms = [
            uniform(&mut rng, cfg.region.x),
            uniform(&mut rng, cfg.region.y),
            cfg.region.z,
        ];
        let blocked = rng.gen::<f64>() < cfg.blockage.bs_ms_probability;
        scene.blockage.bs_ms = cfg.mode == Mode::BmOnly && blocked;

        let (bs_ms, bs_ris, ris_ms) = self.trace(&scene)?;
        let bs_ris_delay = bs_ris.as_ref().map_or(0.0, |p| p.delay);
        let earliest = bs_ms
            .iter()
            .map(|p| p.delay)
            .chain(ris_ms.iter().map(|p| p.delay + bs_ris_delay))
            .fold(f64::INFINITY, f64::min);
        let t0_max = (self.pulse.window() / 4.0).min(earliest);
        let t0 = rng.gen::<f64>() * t0_max;
        self.setup_scene(index, scene, t0, rng)
    }

    /// Traces `scene`, draws the training set and assembles the channels seen
    /// with clock offset `t0`.
    pub fn setup_scene(&self, index: usize, scene: Scene, t0: f64, mut rng: ChaCha8Rng) -> Result<(TrialSetup, ChaCha8Rng)> {
        let cfg = &self.cfg;
        let (bs_ms, bs_ris, ris_ms) = self.trace(&scene)?;
        let bs_ris_delay = bs_ris.as_ref().map_or(0.0, |p| p.delay);

        let training = generate_training_set(&cfg.training_config()?, &self.arrays, bs_ris.as_ref(), &mut rng)?;
        let bs_ms = observable_paths(&bs_ms, &self.pulse, t0, 0.0);
        let ris_ms = observable_paths(&ris_ms, &self.pulse, t0, bs_ris_delay);
        let direct = assemble_bm_taps(&bs_ms, self.arrays.bs, self.arrays.ms, &self.pulse, t0);
        let channels = match &bs_ris {
            Some(incident) => training
                .ris_phases
                .iter()
                .map(|omega| {
                    let cascade = assemble_brm_taps(
                        std::slice::from_ref(incident),
                        &ris_ms,
                        omega,
                        &self.arrays,
                        &self.pulse,
                        t0,
                    )?;
                    overall_taps(&direct, &cascade)
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![direct],
        };
        Ok((
            TrialSetup {
                index,
                scene,
                t0,
                bs_ms,
                bs_ris,
                ris_ms,
                training,
                channels,
            },
            rng,
        ))
    }

    /// Noisy sounding of trial `index`.
    pub fn sound(&self, index: usize) -> Result<(TrialSetup, Sounding)> {
        let (setup, mut rng) = self.setup(index)?;
        let sounding = sound_channel(&setup.channels, &setup.training, &mut rng)?;
        Ok((setup, sounding))
    }

    pub fn operators(&self, setup: &TrialSetup) -> Result<Vec<SensingOperator>> {
        let taps = self.cfg.training.taps;
        let mut ops = Vec::new();
        if self.cfg.mode.has_direct() {
            ops.push(build_bm_sensing(&setup.training, self.arrays.bs, taps)?);
        }
        if let Some(los) = &setup.bs_ris {
            ops.push(build_brm_sensing(&setup.training, &self.arrays, los, taps)?);
        }
        Ok(ops)
    }

    pub fn dictionary(&self, source: Source) -> &MultiDictionary {
        match source {
            Source::Bm => &self.bm_dict,
            Source::Brm => &self.brm_dict,
        }
    }

    /// MOMP on an observation of trial `setup`.
    pub fn estimate(&self, setup: &TrialSetup, y: &DMatrix<crate::arrays::C64>) -> Result<(MompOutput, Vec<PathEstimate>, Vec<SensingOperator>)> {
        let ops = self.operators(setup)?;
        let pairs: Vec<SourcePair> = ops
            .iter()
            .map(|op| SourcePair {
                op,
                dict: self.dictionary(op.source),
            })
            .collect();
        let out = momp_estimate(y, &pairs, &self.cfg.solver)?;
        let estimates = self.path_estimates(setup, &out)?;
        Ok((out, estimates, ops))
    }

    /// Support entries mapped to path estimates; grid points outside the
    /// unit disc cannot be a direction and are skipped.
    pub fn path_estimates(&self, setup: &TrialSetup, out: &MompOutput) -> Result<Vec<PathEstimate>> {
        let dicts = [&self.bm_dict, &self.brm_dict];
        let bs_ris_delay = setup.bs_ris.as_ref().map(|p| p.delay);
        let mut kept = Vec::new();
        for k in 0..out.support.len() {
            let single = MompOutput {
                support: vec![out.support[k]],
                coefficients: out.coefficients.rows(k, 1).into_owned(),
                atom_norms: vec![out.atom_norms[k]],
                residual_norms: Vec::new(),
                scores: Vec::new(),
                params: vec![out.params[k]],
            };
            match extract_path_estimates(&single, &dicts, bs_ris_delay, ZPriors::default()) {
                Ok(mut e) => kept.append(&mut e),
                Err(Error::InconsistentDirection(h)) => {
                    log::debug!("trial {}: skipping {:?} (|h|^2 = {h:.4})", setup.index, out.support[k]);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(kept)
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        let scene = self.cfg.scene_template();
        AnchorSet::new(scene.bs_position(), scene.ris_position())
    }

    /// Runs every localization method of the configured mode.
    pub fn localize(&self, estimates: &[PathEstimate], truth: Option<Vector3<f64>>) -> Result<BTreeMap<&'static str, FixOutcome>> {
        localize_all(&self.anchors()?, self.cfg.mode, estimates, &self.cfg.localization, truth)
    }

    pub fn run_trial(&self, index: usize) -> TrialRecord {
        let start = std::time::Instant::now();
        let mut record = TrialRecord {
            trial: index,
            ms: Vector3::zeros(),
            t0: f64::NAN,
            fixes: BTreeMap::new(),
            nmse: f64::NAN,
            iterations: 0,
            estimates: Vec::new(),
            failure: None,
            elapsed_ms: 0.0,
        };
        let result = (|| -> Result<()> {
            let (setup, sounding) = self.sound(index)?;
            record.ms = setup.ms();
            record.t0 = setup.t0;
            let (out, estimates, ops) = self.estimate(&setup, &sounding.observation.data)?;
            let pairs: Vec<SourcePair> = ops
                .iter()
                .map(|op| SourcePair {
                    op,
                    dict: self.dictionary(op.source),
                })
                .collect();
            let yhat = reconstruct_observation(&out, &pairs, sounding.noiseless.nrows())?;
            record.nmse = nmse(&yhat, &sounding.noiseless).unwrap_or(f64::NAN);
            record.iterations = out.iterations();
            record.fixes = self.localize(&estimates, Some(setup.ms()))?;
            record.estimates = estimates;
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("trial {index} failed: {e}");
            record.failure = Some(e.kind().to_string());
            for m in self.cfg.mode.methods() {
                record.fixes.insert(m.as_str(), FixOutcome::Failed(e.kind().to_string()));
            }
        }
        record.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        record
    }

    pub fn run(&self) -> ExperimentResult {
        let records: Vec<TrialRecord> = (0..self.cfg.trials)
            .into_par_iter()
            .map(|i| {
                let r = self.run_trial(i);
                log::info!(
                    "trial {i}: {} ({:.0} ms)",
                    r.fixes
                        .iter()
                        .map(|(m, f)| format!("{m}={:.3}", f.error()))
                        .collect::<Vec<_>>()
                        .join(" "),
                    r.elapsed_ms
                );
                r
            })
            .collect();
        let summary = summarize(self.cfg.mode, &records);
        ExperimentResult { records, summary }
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Runs the mode's localization methods; errors become failure outcomes.
pub fn localize_all(
    anchors: &AnchorSet,
    mode: Mode,
    estimates: &[PathEstimate],
    cfg: &LocalizationConfig,
    truth: Option<Vector3<f64>>,
) -> Result<BTreeMap<&'static str, FixOutcome>> {
    let by_source = |s: Source| estimates.iter().filter(|e| e.source == s).copied().collect::<Vec<_>>();
    let mut fixes = BTreeMap::new();
    for &method in mode.methods() {
        let fix = match method {
            FixMethod::OneLosBm => localize_single(anchors, &by_source(Source::Bm), cfg),
            FixMethod::OneLosRm => localize_single(anchors, &by_source(Source::Brm), cfg),
            FixMethod::TwoLos => localize_dual(anchors, estimates, cfg),
        };
        let outcome = match fix {
            Ok(fix) => FixOutcome::Fixed {
                error: truth.map_or(f64::NAN, |m| (fix.position - m).norm()),
                fix,
            },
            Err(e) => FixOutcome::Failed(e.kind().to_string()),
        };
        fixes.insert(method.as_str(), outcome);
    }
    Ok(fixes)
}

/// Per-method error statistics; failures count as `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: FixMethod,
    pub trials: usize,
    pub failures: usize,
    pub p50: f64,
    pub p80: f64,
    pub p90: f64,
}

pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<MethodSummary>,
}

impl ExperimentResult {
    pub fn errors(&self, method: FixMethod) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.error(method)).collect()
    }
}

pub fn summarize(mode: Mode, records: &[TrialRecord]) -> Vec<MethodSummary> {
    mode.methods()
        .iter()
        .map(|&method| {
            let errors: Vec<f64> = records.iter().filter_map(|r| r.error(method)).collect();
            let pct = |q| percentile(&errors, q).unwrap_or(f64::NAN);
            MethodSummary {
                method,
                trials: errors.len(),
                failures: errors.iter().filter(|e| !e.is_finite()).count(),
                p50: pct(0.5),
                p80: pct(0.8),
                p90: pct(0.9),
            }
        })
        .collect()
}

/// Nearest-rank percentile: the smallest sample with at least a fraction `q`
/// of the samples at or below it. NaNs are ignored; `+inf` sorts last.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

/// Right-continuous empirical CDF: one `(value, P(X <= value))` per distinct value.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(cdf_points(values, values.len()))
}

/// CDF over the finite values with failures (`+inf`) kept in the
/// denominator, so the curve tops out at the success rate. Also returns the
/// number of failures.
pub fn failure_aware_cdf(values: &[f64]) -> Result<(Vec<(f64, f64)>, usize)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(Error::NonFinite);
    }
    Ok((cdf_points(&finite, values.len()), values.len() - finite.len()))
}

fn cdf_points(values: &[f64], total: usize) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let p = (i + 1) as f64 / total as f64;
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 = p,
            _ => out.push((x, p)),
        }
    }
    out
}

/// Convenience wrapper building the shared dictionaries on every call.
pub fn run_trial(cfg: &ExperimentConfig, index: usize) -> Result<TrialRecord> {
    Ok(Experiment::new(cfg.clone())?.run_trial(index))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(Experiment::new(cfg.clone())?.run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_of_three_values() {
        let cdf = empirical_cdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(cdf, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
    }

    #[test]
    fn cdf_of_equal_values_is_one_step() {
        assert_eq!(empirical_cdf(&[0.5; 4]).unwrap(), vec![(0.5, 1.0)]);
    }

    #[test]
    fn cdf_rejects_bad_input() {
        assert!(matches!(empirical_cdf(&[]), Err(Error::EmptyInput)));
        assert!(matches!(empirical_cdf(&[1.0, f64::INFINITY]), Err(Error::NonFinite)));
    }

    #[test]
    fn failure_aware_cdf_stops_below_one() {
        let (cdf, failures) = failure_aware_cdf(&[1.0, f64::INFINITY, 2.0, 2.0]).unwrap();
        assert_eq!(failures, 1);
        assert_eq!(cdf, vec![(1.0, 0.25), (2.0, 0.75)]);
    }

    #[test]
    fn percentile_matches_cdf() {
        let values: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 * 0.1).collect();
        let p80 = percentile(&values, 0.8).unwrap();
        let cdf = empirical_cdf(&values).unwrap();
        let first_at_80 = cdf.iter().find(|(_, p)| *p >= 0.8 - 1e-12).unwrap();
        assert_eq!(first_at_80.0, p80);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(p80, sorted[79]);
        assert_eq!(percentile(&[1.0, f64::INFINITY], 0.9), Some(f64::INFINITY));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        for text in [
            "trials = 0",
            "mode = \"sideways\"",
            "[arrays]\nrf_bs = 100",
            "[training]\npilot_len = 48",
            "[dictionary]\nx = 0\ny = 1\ndelay = 1",
            "[region]\nx = [-100.0, 0.0]",
            "[blockage]\nbs_ms_probability = 1.5",
            "unknown_key = 3",
        ] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert_eq!(err.kind(), "ConfigError", "{text}");
        }
    }

    #[test]
    fn default_frame_counts_follow_element_counts() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.training_config().unwrap().m_b, 128);
        assert_eq!(cfg.training_config().unwrap().m_m, 8);
        cfg.mode = Mode::BmOnly;
        assert_eq!(cfg.training_config().unwrap().m_b, 32);
        cfg.training.max_m_b = Some(16);
        assert_eq!(cfg.training_config().unwrap().m_b, 16);
    }

    #[test]
    fn power_conversion() {
        assert!((dbm_to_watts(20.0) - 0.1).abs() < 1e-15);
        assert!((dbm_to_watts(-94.0) - 3.981e-13).abs() < 1e-15);
    }
}
