//! Synthetic indoor scene and frequency-selective channel assembly.
//!
//! Multipath is generated with a first-order image-source model over
//! axis-aligned planar surfaces, so every NLoS path is either a floor/ceiling
//! or a wall reflection.

use std::fmt;

use log::debug;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::arrays::{upa_response, Direction, PulseShape, UpaGeometry, C64};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Floor,
    Ceiling,
    Wall,
}

fn default_gamma() -> [f64; 2] {
    [-0.7, 0.0]
}

/// Infinite reflecting plane `coordinate[axis] == at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub name: String,
    pub kind: SurfaceKind,
    pub axis: Axis,
    pub at: f64,
    /// Complex reflection coefficient as `[re, im]`.
    #[serde(default = "default_gamma")]
    pub gamma: [f64; 2],
}

impl Surface {
    pub fn reflection(&self) -> C64 {
        C64::new(self.gamma[0], self.gamma[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Room {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - 1e-9 && p[k] <= self.max[k] + 1e-9)
    }
}

/// LoS blockage flags per link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Blockage {
    #[serde(default)]
    pub bs_ms: bool,
    #[serde(default)]
    pub bs_ris: bool,
    #[serde(default)]
    pub ris_ms: bool,
}

fn default_c() -> f64 {
    SPEED_OF_LIGHT
}

/// Scene geometry. Positions are in meters; `fc` is the carrier in GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: Room,
    pub bs: [f64; 3],
    pub ris: [f64; 3],
    pub ms: [f64; 3],
    #[serde(default)]
    pub surfaces: Vec<Surface>,
    #[serde(default)]
    pub blockage: Blockage,
    pub fc: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Also trace reflections on the BS-RIS link (default is LoS only).
    #[serde(default)]
    pub bs_ris_multipath: bool,
    /// The BS array faces the floor: rays leaving it upward are not radiated.
    #[serde(default)]
    pub bs_faces_down: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    BsMs,
    BsRis,
    RisMs,
}

impl Scene {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// 60 x 120 x 10 m factory hall with the origin at the bottom middle of the
    /// north wall; BS on the ceiling, RIS on the north wall.
    pub fn indoor_factory() -> Self {
        let wall = |name: &str, axis: Axis, at: f64| Surface {
            name: name.into(),
            kind: SurfaceKind::Wall,
            axis,
            at,
            gamma: default_gamma(),
        };
        Self {
            room: Room {
                min: [-30.0, -120.0, 0.0],
                max: [30.0, 0.0, 10.0],
            },
            bs: [10.0, -10.0, 9.5],
            ris: [0.0, 0.0, 5.5],
            ms: [-5.0, -10.0, 1.5],
            surfaces: vec![
                Surface {
                    name: "floor".into(),
                    kind: SurfaceKind::Floor,
                    axis: Axis::Z,
                    at: 0.0,
                    gamma: default_gamma(),
                },
                Surface {
                    name: "ceiling".into(),
                    kind: SurfaceKind::Ceiling,
                    axis: Axis::Z,
                    at: 10.0,
                    gamma: default_gamma(),
                },
                wall("wall-north", Axis::Y, 0.0),
                wall("wall-south", Axis::Y, -120.0),
                wall("wall-west", Axis::X, -30.0),
                wall("wall-east", Axis::X, 30.0),
            ],
            blockage: Blockage::default(),
            fc: 60.0,
            c: SPEED_OF_LIGHT,
            bs_ris_multipath: false,
            bs_faces_down: true,
        }
    }

    pub fn bs_position(&self) -> Vector3<f64> {
        Vector3::from(self.bs)
    }

    pub fn ris_position(&self) -> Vector3<f64> {
        Vector3::from(self.ris)
    }

    pub fn ms_position(&self) -> Vector3<f64> {
        Vector3::from(self.ms)
    }

    pub fn carrier_hz(&self) -> f64 {
        self.fc * 1e9
    }

    pub fn wavelength(&self) -> f64 {
        self.c / self.carrier_hz()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fc > 0.0) || !(self.c > 0.0) {
            return Err(Error::Config("carrier and speed of light must be positive".into()));
        }
        for (name, p) in [("bs", self.bs), ("ris", self.ris), ("ms", self.ms)] {
            if !self.room.contains(&Vector3::from(p)) {
                return Err(Error::Config(format!("{name} position {p:?} is outside the room")));
            }
        }
        for s in &self.surfaces {
            let ok = match s.kind {
                SurfaceKind::Floor | SurfaceKind::Ceiling => s.axis == Axis::Z,
                SurfaceKind::Wall => s.axis != Axis::Z,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "surface {} of kind {:?} cannot be normal to {:?}",
                    s.name, s.kind, s.axis
                )));
            }
        }
        Ok(())
    }

    /// Traces one of the three links with its blockage flag applied.
    pub fn trace_link(&self, link: Link) -> Result<Vec<PropagationPath>> {
        let (tx, rx, blocked) = match link {
            Link::BsMs => (self.bs_position(), self.ms_position(), self.blockage.bs_ms),
            Link::BsRis => (self.bs_position(), self.ris_position(), self.blockage.bs_ris),
            Link::RisMs => (self.ris_position(), self.ms_position(), self.blockage.ris_ms),
        };
        let mut paths = trace_paths(self, &tx, &rx, blocked)?;
        if link == Link::BsRis && !self.bs_ris_multipath {
            paths.retain(|p| p.label == PathLabel::LineOfSight);
        }
        if link != Link::RisMs && self.bs_faces_down {
            paths.retain(|p| p.departure.z <= 0.0);
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathLabel {
    LineOfSight,
    Reflection { kind: SurfaceKind, surface: String },
}

impl fmt::Display for PathLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathLabel::LineOfSight => write!(f, "los"),
            PathLabel::Reflection { surface, .. } => write!(f, "{surface}"),
        }
    }
}

/// One geometric ray. `departure` points from the transmitter along the ray;
/// `arrival` points from the receiver back toward the last interaction point.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationPath {
    pub gain: C64,
    pub departure: Direction,
    pub arrival: Direction,
    /// Absolute propagation delay in seconds.
    pub delay: f64,
    pub label: PathLabel,
}

fn free_space_gain(scene: &Scene, length: f64) -> C64 {
    let delay = length / scene.c;
    let amplitude = scene.wavelength() / (4.0 * PI * length);
    C64::from_polar(amplitude, -2.0 * PI * scene.carrier_hz() * delay)
}

/// LoS (unless `los_blocked`) plus one first-order image-source reflection per
/// surface that both endpoints face from the same side. Surfaces on which an
/// endpoint is mounted are skipped.
pub fn trace_paths(
    scene: &Scene,
    tx: &Vector3<f64>,
    rx: &Vector3<f64>,
    los_blocked: bool,
) -> Result<Vec<PropagationPath>> {
    let direct = rx - tx;
    let distance = direct.norm();
    if distance <= 1e-12 {
        return Err(Error::DegenerateGeometry("transmitter and receiver coincide".into()));
    }
    let mut paths = Vec::with_capacity(scene.surfaces.len() + 1);
    if !los_blocked {
        paths.push(PropagationPath {
            gain: free_space_gain(scene, distance),
            departure: Direction::from_vector(&direct)?,
            arrival: Direction::from_vector(&(-direct))?,
            delay: distance / scene.c,
            label: PathLabel::LineOfSight,
        });
    }
    for surface in &scene.surfaces {
        let k = surface.axis.index();
        let tx_side = tx[k] - surface.at;
        let rx_side = rx[k] - surface.at;
        if tx_side.abs() < 1e-9 || rx_side.abs() < 1e-9 || tx_side * rx_side < 0.0 {
            continue;
        }
        let mut image = *rx;
        image[k] = 2.0 * surface.at - rx[k];
        let ray = image - tx;
        let length = ray.norm();
        if length <= 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "zero-length image path via {}",
                surface.name
            )));
        }
        let t = (surface.at - tx[k]) / (image[k] - tx[k]);
        let bounce = tx + ray * t;
        paths.push(PropagationPath {
            gain: surface.reflection() * free_space_gain(scene, length),
            departure: Direction::from_vector(&ray)?,
            arrival: Direction::from_vector(&(bounce - rx))?,
            delay: length / scene.c,
            label: PathLabel::Reflection {
                kind: surface.kind,
                surface: surface.name.clone(),
            },
        });
    }
    Ok(paths)
}

/// Keeps paths whose pulse peak falls inside the tap window; the rest are
/// dropped with a warning. `extra_delay` is added to every path delay (the
/// BS-RIS delay for cascaded paths).
pub fn observable_paths(
    paths: &[PropagationPath],
    pulse: &PulseShape,
    t0: f64,
    extra_delay: f64,
) -> Vec<PropagationPath> {
    paths
        .iter()
        .filter(|p| {
            let rel = p.delay + extra_delay - t0;
            let keep = rel < pulse.window();
            if !keep {
                debug!(
                    "dropping {} path: relative delay {:.3e} s beyond {} taps",
                    p.label, rel, pulse.taps
                );
            }
            keep
        })
        .cloned()
        .collect()
}

/// Frequency-selective MIMO channel: `taps[d]` is `N_rx x N_tx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTaps {
    pub taps: Vec<DMatrix<C64>>,
    pub t0: f64,
}

impl ChannelTaps {
    pub fn zeros(taps: usize, n_rx: usize, n_tx: usize, t0: f64) -> Self {
        Self {
            taps: vec![DMatrix::zeros(n_rx, n_tx); taps],
            t0,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let (r, c) = self.taps.first().map(|m| m.shape()).unwrap_or((0, 0));
        (self.taps.len(), r, c)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.taps.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Array sizes of the three nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrays {
    pub bs: UpaGeometry,
    pub ris: UpaGeometry,
    pub ms: UpaGeometry,
}

/// Direct BS-MS channel:
/// `H_d = sum_l alpha_l a_M(theta_l) a_B(phi_l)^H p(d T_s + t_0 - tau_l)`.
pub fn assemble_bm_taps(
    paths: &[PropagationPath],
    bs: UpaGeometry,
    ms: UpaGeometry,
    pulse: &PulseShape,
    t0: f64,
) -> ChannelTaps {
    let mut out = ChannelTaps::zeros(pulse.taps, ms.len(), bs.len(), t0);
    for path in paths {
        let rx = upa_response(path.arrival, ms) * path.gain;
        let tx = upa_response(path.departure, bs);
        let outer = &rx * tx.adjoint();
        add_delayed(&mut out, &outer, &pulse.delay_vector(path.delay - t0));
    }
    out
}

fn add_delayed(out: &mut ChannelTaps, outer: &DMatrix<C64>, pulse: &DVector<f64>) {
    for (tap, &p) in out.taps.iter_mut().zip(pulse.iter()) {
        if p != 0.0 {
            *tap += outer * C64::new(p, 0.0);
        }
    }
}

/// Checks that every RIS phase has unit modulus within 1e-9.
pub fn check_unit_modulus(phases: &DVector<C64>) -> Result<()> {
    for (index, w) in phases.iter().enumerate() {
        let modulus = w.norm();
        if (modulus - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitModulus { index, modulus });
        }
    }
    Ok(())
}

/// Cascaded BS-RIS-MS channel for one RIS configuration `omega`:
/// each (p, q) pair contributes
/// `alpha_RM,q alpha_BR,p a_M(theta_RM,q) a_R(phi_RM,q)^H diag(omega) a_R(theta_BR,p) a_B(phi_BR,p)^H`
/// at delay `tau_BR,p + tau_RM,q`.
pub fn assemble_brm_taps(
    bs_ris: &[PropagationPath],
    ris_ms: &[PropagationPath],
    omega: &DVector<C64>,
    arrays: &Arrays,
    pulse: &PulseShape,
    t0: f64,
) -> Result<ChannelTaps> {
    if omega.len() != arrays.ris.len() {
        return Err(Error::ShapeMismatch(format!(
            "RIS phase vector has {} entries, RIS has {} elements",
            omega.len(),
            arrays.ris.len()
        )));
    }
    check_unit_modulus(omega)?;
    let mut out = ChannelTaps::zeros(pulse.taps, arrays.ms.len(), arrays.bs.len(), t0);
    for incident in bs_ris {
        let into_ris = upa_response(incident.arrival, arrays.ris).component_mul(omega);
        let from_bs = upa_response(incident.departure, arrays.bs);
        for reflected in ris_ms {
            let out_of_ris = upa_response(reflected.departure, arrays.ris);
            let ris_gain = out_of_ris.dotc(&into_ris);
            let scale = reflected.gain * incident.gain * ris_gain;
            let rx = upa_response(reflected.arrival, arrays.ms) * scale;
            let outer = &rx * from_bs.adjoint();
            let delay = incident.delay + reflected.delay;
            add_delayed(&mut out, &outer, &pulse.delay_vector(delay - t0));
        }
    }
    Ok(out)
}

/// Overall channel seen in one training configuration: direct plus cascaded.
pub fn overall_taps(bm: &ChannelTaps, brm: &ChannelTaps) -> Result<ChannelTaps> {
    if bm.shape() != brm.shape() {
        return Err(Error::ShapeMismatch(format!(
            "tap tensors {:?} and {:?}",
            bm.shape(),
            brm.shape()
        )));
    }
    if bm.t0 != brm.t0 {
        return Err(Error::ShapeMismatch(format!(
            "clock offsets differ: {} vs {}",
            bm.t0, brm.t0
        )));
    }
    Ok(ChannelTaps {
        taps: bm.taps.iter().zip(&brm.taps).map(|(a, b)| a + b).collect(),
        t0: bm.t0,
    })
}
