//! Array and pulse primitives.
//!
//! Planar arrays lie in the local xy-plane with half-wavelength spacing. Their
//! response is the Kronecker product of two axis responses and elements are
//! ordered x-major: element `(i_x, i_y)` sits at flat index `i_x * n_y + i_y`.

use nalgebra::{DVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex64;

const NORM_TOL: f64 = 1e-9;

/// Unit direction vector given by its direction cosines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    /// Builds a direction, rejecting vectors whose norm is not 1 within 1e-9.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::DegenerateGeometry(format!(
                "direction ({x}, {y}, {z}) has norm {norm}"
            )));
        }
        Ok(Self { x, y, z })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn from_vector(v: &Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateGeometry(
                "cannot take direction of a zero vector".into(),
            ));
        }
        Ok(Self {
            x: v.x / norm,
            y: v.y / norm,
            z: v.z / norm,
        })
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Length of the horizontal projection, `sqrt(x^2 + y^2)`.
    pub fn horizontal(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn neg(self) -> Self {
        Self {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Sign prior used to resolve the z-component of a direction recovered from
/// its x and y cosines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZSign {
    Up,
    #[default]
    Down,
}

impl ZSign {
    pub fn factor(self) -> f64 {
        match self {
            ZSign::Up => 1.0,
            ZSign::Down => -1.0,
        }
    }
}

/// Recovers the z-component from the horizontal cosines and a sign prior.
pub fn resolve_direction_z(phi_x: f64, phi_y: f64, sign: ZSign) -> Result<Direction> {
    let horizontal_sq = phi_x * phi_x + phi_y * phi_y;
    if horizontal_sq > 1.0 + NORM_TOL {
        return Err(Error::InconsistentDirection(horizontal_sq));
    }
    let z = sign.factor() * (1.0 - horizontal_sq).max(0.0).sqrt();
    // Renormalize so cosines sitting just outside the unit disc still give a unit vector.
    let norm = (horizontal_sq + z * z).sqrt();
    Ok(Direction {
        x: phi_x / norm,
        y: phi_y / norm,
        z: z / norm,
    })
}

/// Uniform planar array element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpaGeometry {
    pub nx: usize,
    pub ny: usize,
}

impl UpaGeometry {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Config(format!("array size {nx}x{ny} must be positive")));
        }
        Ok(Self { nx, ny })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Response of a half-wavelength uniform linear array along one axis:
/// `[a(c)]_n = exp(-j pi n c)`, `n = 0..len`.
pub fn axis_response(cosine: f64, len: usize) -> DVector<C64> {
    DVector::from_iterator(
        len,
        (0..len).map(|n| C64::from_polar(1.0, -PI * n as f64 * cosine)),
    )
}

/// Full planar-array response `a_x(theta_x) kron a_y(theta_y)`.
pub fn upa_response(direction: Direction, geom: UpaGeometry) -> DVector<C64> {
    let ax = axis_response(direction.x, geom.nx);
    let ay = axis_response(direction.y, geom.ny);
    DVector::from_iterator(
        geom.len(),
        (0..geom.nx).flat_map(|ix| {
            let ax_i = ax[ix];
            ay.iter().map(move |&v| ax_i * v).collect::<Vec<_>>()
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PulseKind {
    /// Ideal `sinc(t / T_s)` with no truncation window.
    #[default]
    Sinc,
    /// Raised-cosine pulse with the given roll-off in `[0, 1]`.
    RaisedCosine { rolloff: f64 },
}

/// Pulse-shaping filter observed through `taps` samples spaced `sampling_period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub kind: PulseKind,
    pub sampling_period: f64,
    pub taps: usize,
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl PulseShape {
    pub fn sinc(sampling_period: f64, taps: usize) -> Self {
        Self {
            kind: PulseKind::Sinc,
            sampling_period,
            taps,
        }
    }

    /// Evaluates `p(t)`, normalized so `p(0) = 1`.
    pub fn eval(&self, t: f64) -> f64 {
        let x = t / self.sampling_period;
        match self.kind {
            PulseKind::Sinc => sinc(x),
            PulseKind::RaisedCosine { rolloff } => {
                let denom = 1.0 - (2.0 * rolloff * x).powi(2);
                if denom.abs() < 1e-10 {
                    PI / 4.0 * sinc(1.0 / (2.0 * rolloff))
                } else {
                    sinc(x) * (PI * rolloff * x).cos() / denom
                }
            }
        }
    }

    /// Samples `p(d T_s - rel_delay)` for `d = 0..taps`, where `rel_delay` is
    /// the path delay minus the clock offset.
    pub fn delay_vector(&self, rel_delay: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.taps,
            (0..self.taps).map(|d| self.eval(d as f64 * self.sampling_period - rel_delay)),
        )
    }

    /// Duration covered by the tap window, `D * T_s`.
    pub fn window(&self) -> f64 {
        self.taps as f64 * self.sampling_period
    }
}
