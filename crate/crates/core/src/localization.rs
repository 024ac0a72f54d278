//! MS positioning from estimated departure directions and relative delays.
//!
//! With a single LoS the clock offset is recovered from first-order NLoS
//! paths: floor and ceiling bounces travel the same horizontal distance as the
//! LoS, wall bounces the same vertical distance. With LoS paths from both the
//! BS and the RIS the offset follows from a linear equation in `t_0`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::dictionary::Source;
use crate::error::{Error, Result};
use crate::momp::PathEstimate;
use crate::scene::SPEED_OF_LIGHT;

/// Known anchor positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSet {
    pub bs: Vector3<f64>,
    pub ris: Vector3<f64>,
    pub c: f64,
}

impl AnchorSet {
    pub fn new(bs: Vector3<f64>, ris: Vector3<f64>) -> Result<Self> {
        if (bs - ris).norm() < 1e-9 {
            return Err(Error::DegenerateGeometry("BS and RIS coincide".into()));
        }
        Ok(Self {
            bs,
            ris,
            c: SPEED_OF_LIGHT,
        })
    }

    pub fn position(&self, source: Source) -> Vector3<f64> {
        match source {
            Source::Bm => self.bs,
            Source::Brm => self.ris,
        }
    }
}

/// Role of a path in clock-offset estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathClass {
    LineOfSight,
    FloorCeiling,
    Wall,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPath {
    pub estimate: PathEstimate,
    pub class: PathClass,
    /// Clock offset implied by this path together with the LoS.
    pub t0_candidate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FixMethod {
    #[serde(rename = "one-los-bm")]
    OneLosBm,
    #[serde(rename = "one-los-rm")]
    OneLosRm,
    #[serde(rename = "two-los")]
    TwoLos,
}

impl FixMethod {
    pub const ALL: [FixMethod; 3] = [FixMethod::OneLosBm, FixMethod::OneLosRm, FixMethod::TwoLos];

    pub fn single(source: Source) -> Self {
        match source {
            Source::Bm => FixMethod::OneLosBm,
            Source::Brm => FixMethod::OneLosRm,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FixMethod::OneLosBm => "one-los-bm",
            FixMethod::OneLosRm => "one-los-rm",
            FixMethod::TwoLos => "two-los",
        }
    }
}

impl fmt::Display for FixMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FixMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FixMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionFix {
    pub position: Vector3<f64>,
    pub t0: f64,
    pub method: FixMethod,
    /// Anchor whose LoS placed the MS.
    pub anchor: Source,
    /// Spread of the clock-offset candidates (s) for one-LoS fixes; norm of
    /// the least-squares misfit (m) for two-LoS fixes.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    /// Floor/ceiling test: normalized horizontal dot product `>= 1 - az_tol`.
    pub az_tol: f64,
    /// Minimum `|a_l - a_1|` for a usable candidate.
    pub denom_eps: f64,
    /// Wall candidates must lie within `max(mad_factor * MAD, wall_floor)` of
    /// the floor/ceiling median (seconds).
    pub mad_factor: f64,
    pub wall_floor: f64,
    /// LoS candidates need at least this fraction of the strongest gain.
    pub los_gain_floor: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            az_tol: 1e-2,
            denom_eps: 1e-6,
            mad_factor: 3.0,
            wall_floor: 5e-9,
            los_gain_floor: 0.0,
        }
    }
}

/// The LoS among one anchor's paths: minimum relative delay, ties to the
/// larger gain.
pub fn select_los(paths: &[PathEstimate], cfg: &LocalizationConfig) -> Result<PathEstimate> {
    let strongest = paths.iter().map(|p| p.gain).fold(0.0, f64::max);
    paths
        .iter()
        .filter(|p| p.gain >= cfg.los_gain_floor * strongest)
        .min_by(|a, b| a.rel_delay.total_cmp(&b.rel_delay).then(b.gain.total_cmp(&a.gain)))
        .copied()
        .ok_or(Error::NoLoSPath)
}

fn same_path(a: &PathEstimate, b: &PathEstimate) -> bool {
    a.source == b.source && a.index == b.index && a.rel_delay == b.rel_delay
}

fn candidate(a1: f64, d1: f64, al: f64, dl: f64, cfg: &LocalizationConfig) -> Option<f64> {
    if (al - a1).abs() < cfg.denom_eps {
        return None;
    }
    let t0 = (a1 * d1 - al * dl) / (al - a1);
    (t0.is_finite() && d1 + t0 > 0.0 && dl + t0 > 0.0).then_some(t0)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

fn mad(values: &[f64], center: f64) -> f64 {
    let dev: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median(&dev).unwrap_or(0.0)
}

/// Labels each path relative to the LoS and attaches its clock-offset candidate.
pub fn classify_nlos_paths(
    paths: &[PathEstimate],
    los: &PathEstimate,
    cfg: &LocalizationConfig,
) -> Result<Vec<LabeledPath>> {
    if !paths.iter().any(|p| same_path(p, los)) {
        return Err(Error::NoLoSPath);
    }
    let h1 = los.direction.horizontal();
    let mut labeled: Vec<LabeledPath> = paths
        .iter()
        .map(|p| {
            if same_path(p, los) {
                return LabeledPath {
                    estimate: *p,
                    class: PathClass::LineOfSight,
                    t0_candidate: None,
                };
            }
            let hl = p.direction.horizontal();
            let dot = p.direction.x * los.direction.x + p.direction.y * los.direction.y;
            if hl > 0.0 && h1 > 0.0 && dot / (hl * h1) >= 1.0 - cfg.az_tol {
                let t0 = candidate(h1, los.rel_delay, hl, p.rel_delay, cfg);
                LabeledPath {
                    estimate: *p,
                    class: if t0.is_some() { PathClass::FloorCeiling } else { PathClass::Discarded },
                    t0_candidate: t0,
                }
            } else {
                LabeledPath {
                    estimate: *p,
                    class: PathClass::Wall,
                    t0_candidate: candidate(los.direction.z, los.rel_delay, p.direction.z, p.rel_delay, cfg),
                }
            }
        })
        .collect();

    let floor: Vec<f64> = labeled
        .iter()
        .filter(|l| l.class == PathClass::FloorCeiling)
        .filter_map(|l| l.t0_candidate)
        .collect();
    let reference = median(&floor).map(|m| (m, (cfg.mad_factor * mad(&floor, m)).max(cfg.wall_floor)));
    for l in labeled.iter_mut().filter(|l| l.class == PathClass::Wall) {
        let consistent = match (l.t0_candidate, reference) {
            (Some(t0), Some((center, tol))) => (t0 - center).abs() <= tol,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if !consistent {
            l.class = PathClass::Discarded;
        }
    }
    Ok(labeled)
}

/// Median of the floor/ceiling and accepted wall candidates.
pub fn estimate_clock_offset_single(labeled: &[LabeledPath]) -> Result<(f64, f64)> {
    let candidates: Vec<f64> = labeled
        .iter()
        .filter(|l| matches!(l.class, PathClass::FloorCeiling | PathClass::Wall))
        .filter_map(|l| l.t0_candidate)
        .collect();
    let t0 = median(&candidates).ok_or(Error::UnderDetermined)?;
    Ok((t0, mad(&candidates, t0)))
}

/// `m = anchor + c (dtau + t_0) phi`.
pub fn locate_single_los(anchor: Vector3<f64>, los: &PathEstimate, t0: f64, c: f64) -> Result<Vector3<f64>> {
    let tau = los.rel_delay + t0;
    if !(tau > 0.0) {
        return Err(Error::NegativeDelay(tau));
    }
    Ok(anchor + los.direction.to_vector() * (c * tau))
}

/// One-LoS fix from a single anchor's path set.
pub fn localize_single(
    anchors: &AnchorSet,
    paths: &[PathEstimate],
    cfg: &LocalizationConfig,
) -> Result<PositionFix> {
    let los = select_los(paths, cfg)?;
    let labeled = classify_nlos_paths(paths, &los, cfg)?;
    let (t0, spread) = estimate_clock_offset_single(&labeled)?;
    Ok(PositionFix {
        position: locate_single_los(anchors.position(los.source), &los, t0, anchors.c)?,
        t0,
        method: FixMethod::single(los.source),
        anchor: los.source,
        residual: spread,
    })
}

/// Two-LoS fix: least-squares `t_0` from
/// `b + c (dtau_BM + t_0) phi_BM = r + c (dtau_RM + t_0) phi_RM`, position
/// from the anchor with the higher gain.
pub fn locate_dual_los(anchors: &AnchorSet, bm_los: &PathEstimate, rm_los: &PathEstimate) -> Result<PositionFix> {
    let c = anchors.c;
    let phi_bm = bm_los.direction.to_vector();
    let phi_rm = rm_los.direction.to_vector();
    if (phi_bm - phi_rm).norm() < 1e-9 {
        return Err(Error::ParallelGeometry);
    }
    let d = anchors.ris - anchors.bs + (phi_rm * rm_los.rel_delay - phi_bm * bm_los.rel_delay) * c;
    let e = (phi_bm - phi_rm) * c;
    let t0 = d.dot(&e) / e.dot(&e);
    if !t0.is_finite() {
        return Err(Error::NonFinite);
    }
    let (anchor, los) = if bm_los.gain >= rm_los.gain {
        (Source::Bm, bm_los)
    } else {
        (Source::Brm, rm_los)
    };
    Ok(PositionFix {
        position: locate_single_los(anchors.position(anchor), los, t0, c)?,
        t0,
        method: FixMethod::TwoLos,
        anchor,
        residual: (e * t0 - d).norm(),
    })
}

/// Two-LoS fix choosing each anchor's LoS from its path set.
pub fn localize_dual(
    anchors: &AnchorSet,
    paths: &[PathEstimate],
    cfg: &LocalizationConfig,
) -> Result<PositionFix> {
    let split = |s: Source| paths.iter().filter(|p| p.source == s).copied().collect::<Vec<_>>();
    let bm = select_los(&split(Source::Bm), cfg)?;
    let rm = select_los(&split(Source::Brm), cfg)?;
    locate_dual_los(anchors, &bm, &rm)
}
