//! Shared fixtures: tiny random instances and a brute-force OMP over the
//! fully materialized Kronecker dictionary.
#![allow(dead_code)]

use momp_ris::arrays::{Direction, PulseShape, UpaGeometry, C64};
use momp_ris::dictionary::{
    build_bm_dictionaries, build_bm_sensing, build_brm_dictionaries, build_brm_sensing, GridRatios,
    MultiDictionary, SensingOperator, Source,
};
use momp_ris::scene::{Arrays, PathLabel, PropagationPath};
use momp_ris::sounding::{generate_training_set, PrecoderMode, TrainingConfig};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Phi * (Psi_1 kron Psi_2 kron Psi_3)` with columns ordered
/// `(j1 * N2 + j2) * N3 + j3`, built from the entry-wise definition.
pub fn dense_atoms(op: &SensingOperator, dict: &MultiDictionary) -> DMatrix<C64> {
    let [n1, n2, n3] = dict.physical_dims();
    let [a1, a2, a3] = dict.atom_dims();
    let mut phi = DMatrix::zeros(op.rows(), n1 * n2 * n3);
    for r in 0..op.rows() {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                for i3 in 0..n3 {
                    phi[(r, (i1 * n2 + i2) * n3 + i3)] = op.entry(r, [i1, i2, i3]);
                }
            }
        }
    }
    let kron = DMatrix::from_fn(n1 * n2 * n3, a1 * a2 * a3, |r, c| {
        let (i1, i2, i3) = (r / (n2 * n3), (r / n3) % n2, r % n3);
        let (j1, j2, j3) = (c / (a2 * a3), (c / a3) % a2, c % a3);
        dict.psi[0][(i1, j1)] * dict.psi[1][(i2, j2)] * dict.psi[2][(i3, j3)]
    });
    phi * kron
}

pub struct OracleSource {
    pub source: Source,
    pub atoms: DMatrix<C64>,
    pub dims: [usize; 3],
}

impl OracleSource {
    pub fn new(op: &SensingOperator, dict: &MultiDictionary) -> Self {
        Self {
            source: op.source,
            atoms: dense_atoms(op, dict),
            dims: dict.atom_dims(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub source: Source,
    pub index: [usize; 3],
    pub score: f64,
    /// Best minus runner-up normalized correlation, relative to the best.
    pub gap: f64,
}

/// Plain OMP with normalized correlations, SVD least squares and the same
/// stopping rules as the solver.
pub fn brute_force_omp(
    y: &DMatrix<C64>,
    sources: &[OracleSource],
    max_paths: usize,
    residual_tol: f64,
) -> Vec<OracleStep> {
    let y_norm = y.norm();
    let mut steps = Vec::new();
    let mut chosen: Vec<DVector<C64>> = Vec::new();
    let mut residual = y.clone();
    let mut prev = y_norm;
    while steps.len() < max_paths && y_norm > 0.0 {
        let mut scores = Vec::new();
        for s in sources {
            for c in 0..s.atoms.ncols() {
                let a = s.atoms.column(c);
                let n = a.norm();
                let score = if n > 0.0 { (a.adjoint() * &residual).norm() / n } else { 0.0 };
                scores.push((score, s.source, c, s.dims));
            }
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if s.0 > scores[best].0 {
                best = i;
            }
        }
        let (score, source, c, dims) = scores[best];
        if score <= 1e-12 * y_norm {
            break;
        }
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, s)| s.0)
            .fold(0.0, f64::max);
        let src = sources.iter().find(|s| s.source == source).unwrap();
        chosen.push(src.atoms.column(c).into_owned());
        let a = DMatrix::from_columns(&chosen);
        let coeffs = a.clone().svd(true, true).solve(y, 1e-14).unwrap();
        residual = y - &a * coeffs;
        let now = residual.norm();
        steps.push(OracleStep {
            source,
            index: [c / (dims[1] * dims[2]), (c / dims[2]) % dims[1], c % dims[2]],
            score,
            gap: (score - runner_up) / score,
        });
        if now <= 1e-12 * y_norm || prev - now < residual_tol * prev {
            break;
        }
        prev = now;
    }
    steps
}

pub struct Tiny {
    pub bm_op: SensingOperator,
    pub brm_op: SensingOperator,
    pub bm_dict: MultiDictionary,
    pub brm_dict: MultiDictionary,
    pub y: DMatrix<C64>,
    pub truth: Vec<(Source, [usize; 3], DVector<C64>)>,
}

fn random_direction(rng: &mut ChaCha8Rng) -> Direction {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..-0.1));
        if v.norm() <= 1.0 {
            return Direction::from_vector(&v).unwrap();
        }
    }
}

/// 2x2 BS and RIS, D = 4, ratio 2, two on-grid paths with random sources,
/// noiseless observation.
pub fn tiny_instance(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = UpaGeometry::new(2, 2).unwrap();
    let arrays = Arrays { bs: g, ris: g, ms: UpaGeometry::new(2, 1).unwrap() };
    let pulse = PulseShape::sinc(1e-8, 4);
    let bs_ris = PropagationPath {
        gain: C64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..std::f64::consts::TAU)),
        departure: random_direction(&mut rng),
        arrival: random_direction(&mut rng).neg(),
        delay: 3e-8,
        label: PathLabel::LineOfSight,
    };
    let cfg = TrainingConfig {
        m_b: 3,
        m_m: 1,
        pilot_len: 8,
        rf_bs: 2,
        rf_ms: 2,
        tx_power: 1.0,
        noise_var: 0.0,
        precoding: PrecoderMode::Random,
        use_ris: true,
    };
    let ts = generate_training_set(&cfg, &arrays, Some(&bs_ris), &mut rng).unwrap();
    let ratios = GridRatios::uniform(2);
    let bm_op = build_bm_sensing(&ts, g, 4).unwrap();
    let brm_op = build_brm_sensing(&ts, &arrays, &bs_ris, 4).unwrap();
    let bm_dict = build_bm_dictionaries(g, &pulse, ratios).unwrap();
    let brm_dict = build_brm_dictionaries(g, &pulse, ratios).unwrap();
    let cols = 2;
    let mut y = DMatrix::zeros(bm_op.rows(), cols);
    let mut truth = Vec::new();
    for _ in 0..2 {
        let source = if rng.gen_bool(0.5) { Source::Bm } else { Source::Brm };
        let (op, dict) = match source {
            Source::Bm => (&bm_op, &bm_dict),
            Source::Brm => (&brm_op, &brm_dict),
        };
        let dims = dict.atom_dims();
        let j = [rng.gen_range(0..dims[0]), rng.gen_range(0..dims[1]), rng.gen_range(0..dims[2])];
        let row = DVector::from_fn(cols, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        y += op.composite_atom(dict, j) * row.transpose();
        truth.push((source, j, row));
    }
    Tiny { bm_op, brm_op, bm_dict, brm_dict, y, truth }
}

/// Outcome of an on-grid, noiseless recovery run.
pub struct RecoveryCheck {
    pub support_ok: bool,
    pub max_row_error: f64,
    pub nmse: f64,
    pub rel_delay_error: f64,
}

/// One on-grid path per requested source through the full channel and
/// sounding pipeline (sigma^2 = 0), then MOMP; compares support, coefficient
/// rows and observation NMSE against the injected truth.
pub fn exact_recovery(seed: u64, with_bm: bool, with_brm: bool, exhaustive_limit: usize) -> RecoveryCheck {
    use momp_ris::arrays::{resolve_direction_z, upa_response, ZSign};
    use momp_ris::momp::{
        extract_path_estimates, momp_estimate, nmse, reconstruct_observation, SolverConfig, SourcePair, ZPriors,
    };
    use momp_ris::scene::{assemble_bm_taps, assemble_brm_taps, overall_taps, ChannelTaps};
    use momp_ris::sounding::sound_channel;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts_period = 1e-8;
    let taps = 8;
    let pulse = PulseShape::sinc(ts_period, taps);
    let arrays = Arrays {
        bs: UpaGeometry::new(4, 4).unwrap(),
        ris: UpaGeometry::new(4, 4).unwrap(),
        ms: UpaGeometry::new(2, 2).unwrap(),
    };
    let ratios = GridRatios::uniform(2);
    let bm_dict = build_bm_dictionaries(arrays.bs, &pulse, ratios).unwrap();
    let brm_dict = build_brm_dictionaries(arrays.ris, &pulse, ratios).unwrap();
    let t0 = rng.gen_range(0.0..2.0 * ts_period);

    // Grid cosines in (-0.75, 0.75) keep the pair inside the unit disc.
    let on_grid = |dict: &MultiDictionary, rng: &mut ChaCha8Rng| {
        let n1 = dict.atom_dims()[0];
        let n2 = dict.atom_dims()[1];
        let j1 = rng.gen_range(n1 / 4 + 1..3 * n1 / 4);
        let j2 = rng.gen_range(n2 / 4 + 1..3 * n2 / 4);
        let j3 = rng.gen_range(0..dict.atom_dims()[2] / 2);
        let dir = resolve_direction_z(dict.x_grid.cosines[j1], dict.y_grid.cosines[j2], ZSign::Down).unwrap();
        ([j1, j2, j3], dir, dict.delay_grid.delays[j3])
    };
    let arrival = random_direction(&mut rng).neg();
    let (bm_j, bm_dir, bm_rel) = on_grid(&bm_dict, &mut rng);
    let bm_path = PropagationPath {
        gain: C64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..std::f64::consts::TAU)),
        departure: bm_dir,
        arrival,
        delay: t0 + bm_rel,
        label: PathLabel::LineOfSight,
    };
    let bs_ris = PropagationPath {
        gain: C64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..std::f64::consts::TAU)),
        departure: random_direction(&mut rng),
        arrival: random_direction(&mut rng).neg(),
        delay: 2.5e-8,
        label: PathLabel::LineOfSight,
    };
    let (brm_j, brm_dir, brm_rel) = on_grid(&brm_dict, &mut rng);
    let ris_ms = PropagationPath {
        gain: C64::from_polar(rng.gen_range(0.5..1.5), rng.gen_range(0.0..std::f64::consts::TAU)),
        departure: brm_dir,
        arrival: random_direction(&mut rng).neg(),
        delay: t0 + brm_rel - bs_ris.delay,
        label: PathLabel::LineOfSight,
    };

    let cfg = TrainingConfig {
        m_b: 8,
        m_m: 2,
        pilot_len: 16,
        rf_bs: 4,
        rf_ms: 2,
        tx_power: 0.5,
        noise_var: 0.0,
        precoding: PrecoderMode::Random,
        use_ris: with_brm,
    };
    let ts = generate_training_set(&cfg, &arrays, Some(&bs_ris), &mut rng).unwrap();
    let bm_taps = if with_bm {
        assemble_bm_taps(std::slice::from_ref(&bm_path), arrays.bs, arrays.ms, &pulse, t0)
    } else {
        ChannelTaps::zeros(taps, arrays.ms.len(), arrays.bs.len(), t0)
    };
    let channels: Vec<ChannelTaps> = if with_brm {
        ts.ris_phases
            .iter()
            .map(|omega| {
                let brm = assemble_brm_taps(
                    std::slice::from_ref(&bs_ris),
                    std::slice::from_ref(&ris_ms),
                    omega,
                    &arrays,
                    &pulse,
                    t0,
                )
                .unwrap();
                overall_taps(&bm_taps, &brm).unwrap()
            })
            .collect()
    } else {
        vec![bm_taps]
    };
    let sounding = sound_channel(&channels, &ts, &mut rng).unwrap();
    let y = &sounding.observation.data;

    let bm_op = build_bm_sensing(&ts, arrays.bs, taps).unwrap();
    let mut pairs = Vec::new();
    let brm_op;
    if with_bm {
        pairs.push(SourcePair { op: &bm_op, dict: &bm_dict });
    }
    if with_brm {
        brm_op = build_brm_sensing(&ts, &arrays, &bs_ris, taps).unwrap();
        pairs.push(SourcePair { op: &brm_op, dict: &brm_dict });
    }
    let solver = SolverConfig { exhaustive_limit, ..SolverConfig::default() };
    let out = momp_estimate(y, &pairs, &solver).unwrap();

    // Expected rows: sqrt(P_t) alpha [L^{-1} W^H a_M(theta)] per combiner.
    let expected_row = |gain: C64, arrival: Direction| {
        let a_m = upa_response(arrival, arrays.ms);
        let mut row = Vec::new();
        for (w, l) in ts.combiners.iter().zip(&sounding.observation.whitening) {
            let v = l.clone().try_inverse().unwrap() * w.adjoint() * &a_m * gain * C64::new(cfg.tx_power.sqrt(), 0.0);
            row.extend(v.iter().copied());
        }
        DVector::from_vec(row)
    };
    let mut truth = Vec::new();
    if with_bm {
        truth.push((Source::Bm, bm_j, expected_row(bm_path.gain, bm_path.arrival), bm_rel));
    }
    if with_brm {
        truth.push((Source::Brm, brm_j, expected_row(ris_ms.gain, ris_ms.arrival), ris_ms.delay - t0));
    }
    let mut support_ok = out.support.len() == truth.len();
    let mut max_row_error: f64 = 0.0;
    let mut rel_delay_error: f64 = 0.0;
    let estimates = extract_path_estimates(&out, &[&bm_dict, &brm_dict], Some(bs_ris.delay), ZPriors::default()).unwrap();
    for (source, j, row, rel) in &truth {
        match out.support.iter().position(|e| e.source == *source && e.index == *j) {
            Some(k) => {
                max_row_error = max_row_error.max((out.row(k) - row).norm() / row.norm().max(1.0));
                rel_delay_error = rel_delay_error.max((estimates[k].rel_delay - rel).abs());
            }
            None => support_ok = false,
        }
    }
    let yhat = reconstruct_observation(&out, &pairs, y.nrows()).unwrap();
    RecoveryCheck {
        support_ok,
        max_row_error,
        nmse: nmse(&yhat, &sounding.noiseless).unwrap(),
        rel_delay_error,
    }
}

/// Compares solver support with the oracle up to the first near-tie.
pub fn oracle_agrees(seed: u64) -> bool {
    use momp_ris::momp::{momp_estimate, SolverConfig, SourcePair};
    let t = tiny_instance(seed);
    let cfg = SolverConfig::default();
    let pairs = [SourcePair { op: &t.bm_op, dict: &t.bm_dict }, SourcePair { op: &t.brm_op, dict: &t.brm_dict }];
    let out = momp_estimate(&t.y, &pairs, &cfg).unwrap();
    let oracle = brute_force_omp(
        &t.y,
        &[OracleSource::new(&t.bm_op, &t.bm_dict), OracleSource::new(&t.brm_op, &t.brm_dict)],
        cfg.max_paths,
        cfg.residual_tol,
    );
    for (k, step) in oracle.iter().enumerate() {
        if step.gap <= 1e-6 {
            return true;
        }
        if out.support.get(k).map(|e| (e.source, e.index)) != Some((step.source, step.index)) {
            return false;
        }
    }
    out.support.len() == oracle.len()
}

/// Factory scene with the MS drawn from the default experiment region and a
/// clock offset in `[0, 10 ns)`.
pub fn random_scene(rng: &mut ChaCha8Rng) -> (momp_ris::scene::Scene, f64) {
    let cfg = momp_ris::experiment::ExperimentConfig::default();
    let mut scene = cfg.scene_template();
    scene.ms = [
        rng.gen_range(cfg.region.x[0]..cfg.region.x[1]),
        rng.gen_range(cfg.region.y[0]..cfg.region.y[1]),
        cfg.region.z,
    ];
    (scene, rng.gen_range(0.0..1e-8))
}

/// Path estimates carrying the true departure directions and relative delays
/// of every traced BS-MS and RIS-MS path.
pub fn exact_estimates(scene: &momp_ris::scene::Scene, t0: f64) -> Vec<momp_ris::momp::PathEstimate> {
    use momp_ris::momp::PathEstimate;
    use momp_ris::scene::Link;
    let mut out = Vec::new();
    for (source, link) in [(Source::Bm, Link::BsMs), (Source::Brm, Link::RisMs)] {
        for (k, p) in scene.trace_link(link).unwrap().iter().enumerate() {
            out.push(PathEstimate {
                source,
                index: [k, 0, 0],
                direction: p.departure,
                rel_delay: p.delay - t0,
                gain: p.gain.norm(),
                energy: p.gain.norm(),
            });
        }
    }
    out
}
