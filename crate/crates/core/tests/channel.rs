use momp_ris::arrays::{PulseShape, UpaGeometry, C64};
use momp_ris::dictionary::{build_bm_dictionaries, GridRatios};
use momp_ris::scene::{
    assemble_bm_taps, assemble_brm_taps, trace_paths, Arrays, ChannelTaps, Link, PropagationPath, Room, Scene,
};
use momp_ris::sounding::{generate_training_set, sound_channel, PrecoderMode, TrainingConfig};
use nalgebra::{DMatrix, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arrays() -> Arrays {
    Arrays {
        bs: UpaGeometry::new(4, 4).unwrap(),
        ris: UpaGeometry::new(4, 4).unwrap(),
        ms: UpaGeometry::new(2, 2).unwrap(),
    }
}

fn pulse() -> PulseShape {
    PulseShape::sinc(1e-8, 16)
}

fn open_space() -> Scene {
    Scene {
        room: Room {
            min: [-1e3; 3],
            max: [1e3; 3],
        },
        surfaces: Vec::new(),
        ..Scene::indoor_factory()
    }
}

fn factory_paths(ms: [f64; 3]) -> (Vec<PropagationPath>, PropagationPath, Vec<PropagationPath>) {
    let scene = Scene { ms, ..Scene::indoor_factory() };
    let bs_ris = scene.trace_link(Link::BsRis).unwrap().remove(0);
    (scene.trace_link(Link::BsMs).unwrap(), bs_ris, scene.trace_link(Link::RisMs).unwrap())
}

fn taps_diff(a: &ChannelTaps, b: &ChannelTaps) -> f64 {
    a.taps.iter().zip(&b.taps).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tap_energy_is_rotation_invariant(
        roll in -3.1..3.1f64, pitch in -1.5..1.5f64, yaw in -3.1..3.1f64,
        tx in prop::array::uniform3(-20.0..20.0f64),
        rx in prop::array::uniform3(-20.0..20.0f64),
    ) {
        let (tx, rx) = (Vector3::from(tx), Vector3::from(rx));
        prop_assume!((tx - rx).norm() > 1.0);
        let scene = open_space();
        let rot = Rotation3::from_euler_angles(roll, pitch, yaw);
        let (a, p) = (arrays(), pulse());
        let t0 = 0.0;
        let before = assemble_bm_taps(&trace_paths(&scene, &tx, &rx, false).unwrap(), a.bs, a.ms, &p, t0);
        let after = assemble_bm_taps(&trace_paths(&scene, &(rot * tx), &(rot * rx), false).unwrap(), a.bs, a.ms, &p, t0);
        let (e0, e1) = (before.frobenius_norm(), after.frobenius_norm());
        prop_assert!(e0 > 0.0);
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0, "{e0} vs {e1}");
    }

    #[test]
    fn clock_offset_shift_moves_every_pulse_argument(
        mx in -10.0..0.0f64, my in -15.0..-5.0f64, t0 in 0.0..2e-8f64, delta in -5e-9..5e-9f64,
    ) {
        let (bm, bs_ris, rm) = factory_paths([mx, my, 1.5]);
        let (a, p) = (arrays(), pulse());
        let shift = |paths: &[PropagationPath]| -> Vec<PropagationPath> {
            paths.iter().cloned().map(|mut q| { q.delay += delta; q }).collect()
        };
        let base = assemble_bm_taps(&bm, a.bs, a.ms, &p, t0);
        let moved = assemble_bm_taps(&shift(&bm), a.bs, a.ms, &p, t0 + delta);
        prop_assert!(taps_diff(&base, &moved) <= 1e-12 * base.frobenius_norm());

        let omega = nalgebra::DVector::from_fn(a.ris.len(), |i, _| C64::from_polar(1.0, 0.7 * i as f64));
        let base = assemble_brm_taps(std::slice::from_ref(&bs_ris), &rm, &omega, &a, &p, t0).unwrap();
        let moved = assemble_brm_taps(std::slice::from_ref(&bs_ris), &shift(&rm), &omega, &a, &p, t0 + delta).unwrap();
        prop_assert!(taps_diff(&base, &moved) <= 1e-12 * base.frobenius_norm());
    }
}

fn training(tx_power: f64) -> TrainingConfig {
    TrainingConfig {
        m_b: 3,
        m_m: 2,
        pilot_len: 16,
        rf_bs: 4,
        rf_ms: 2,
        tx_power,
        noise_var: 0.0,
        precoding: PrecoderMode::Random,
        use_ris: false,
    }
}

fn direct(ms: [f64; 3]) -> ChannelTaps {
    let (bm, _, _) = factory_paths(ms);
    let a = arrays();
    assemble_bm_taps(&bm, a.bs, a.ms, &pulse(), 1e-9)
}

#[test]
fn observations_are_linear_in_the_channel() {
    let ts = generate_training_set(&training(0.1), &arrays(), None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let h1 = direct([-3.0, -8.0, 1.5]);
    let h2 = direct([-7.0, -12.0, 1.5]);
    let sum = ChannelTaps {
        taps: h1.taps.iter().zip(&h2.taps).map(|(a, b)| a + b).collect(),
        t0: h1.t0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y1 = sound_channel(&[h1], &ts, &mut rng).unwrap().observation.data;
    let y2 = sound_channel(&[h2], &ts, &mut rng).unwrap().observation.data;
    let y = sound_channel(&[sum], &ts, &mut rng).unwrap().observation.data;
    let scale = y.norm();
    assert!((y - y1 - y2).norm() <= 1e-10 * scale);
}

#[test]
fn doubling_transmit_power_doubles_signal_power() {
    let h = direct([-4.0, -9.0, 1.5]);
    let sound = |p: f64| -> DMatrix<C64> {
        let ts = generate_training_set(&training(p), &arrays(), None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        sound_channel(std::slice::from_ref(&h), &ts, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap()
            .noiseless
    };
    let (e1, e2) = (sound(0.1).norm_squared(), sound(0.2).norm_squared());
    assert!((e2 / e1 - 2.0).abs() < 1e-12, "energy ratio {}", e2 / e1);
}

fn coherence(psi: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..psi.ncols() {
        for j in i + 1..psi.ncols() {
            let (a, b) = (psi.column(i), psi.column(j));
            worst = worst.max(a.dotc(&b).norm() / (a.norm() * b.norm()));
        }
    }
    worst
}

#[test]
fn coherence_grows_with_oversampling() {
    let geom = UpaGeometry::new(8, 8).unwrap();
    let values: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&r| coherence(&build_bm_dictionaries(geom, &pulse(), GridRatios::uniform(r)).unwrap().psi[0]))
        .collect();
    assert!(values[0] < 1e-12, "ratio 1 should be orthogonal: {}", values[0]);
    assert!(values.windows(2).all(|w| w[0] < w[1]), "{values:?}");
}
