use proptest::prelude::*;

use trajflow_core::flow::{hybrid_interpolant, traj_dropout, ConditionBundle};
use trajflow_core::injection::inject;
use trajflow_core::mask::{build_mask, TrajMask};
use trajflow_core::metrics::audio_envelope;
use trajflow_core::rng::gaussian_noise;
use trajflow_core::trajectory::{to_latent_grid, PooledTrajectory};
use trajflow_core::{Seed, Tensor};

proptest! {
    #[test]
    fn envelope_length_and_timestamps(
        sr in prop::sample::select(vec![8_000u32, 16_000, 22_050, 44_100]),
        hop_ms in 5u32..20,
        extra_ms in 0u32..20,
        samples in 0usize..5_000,
    ) {
        let hop = f64::from(hop_ms) / 1000.0;
        let window = hop + f64::from(extra_ms) / 1000.0;
        let w = (window * f64::from(sr)).round() as usize;
        let h = (hop * f64::from(sr)).round() as usize;
        let len = w + samples;
        let env = audio_envelope(&vec![0.25; len], sr, window, hop).unwrap();
        prop_assert_eq!(env.values.len(), (len - w) / h + 1);
        // Timestamps follow the realized sample geometry.
        let (ws, hs) = (w as f64 / f64::from(sr), h as f64 / f64::from(sr));
        let ts = env.timestamps();
        prop_assert!((ts[0] - ws / 2.0).abs() < 1e-12);
        for p in ts.windows(2) {
            prop_assert!((p[1] - p[0] - hs).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolant_is_linear_in_t(seed in any::<u64>(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let dims = [3, 4, 5, 2];
        let s = Seed(seed);
        let x0 = gaussian_noise(&dims, s.derive(&[0])).unwrap();
        let eps = gaussian_noise(&dims, s.derive(&[1])).unwrap();
        let xtraj = gaussian_noise(&dims, s.derive(&[2])).unwrap();
        let mut mask = TrajMask::empty(3, 4, 5);
        for k in (0..mask.cells()).step_by(3) {
            mask.binary[k] = 1.0;
        }
        let a = hybrid_interpolant(&x0, &eps, &xtraj, &mask, t1).unwrap();
        let b = hybrid_interpolant(&x0, &eps, &xtraj, &mask, t2).unwrap();
        prop_assert!(a.v_target.bit_eq(&b.v_target));
        for k in 0..x0.len() {
            let want = a.x_t.data()[k] + (t2 - t1) * a.v_target.data()[k];
            prop_assert!((b.x_t.data()[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_rate_matches_probability() {
    let bundle = ConditionBundle {
        xtraj: Tensor::filled(&[4, 2, 2, 1], 1.0).unwrap(),
        mask: TrajMask::empty(4, 2, 2),
        dropped: false,
    };
    let dropped = (0..10_000u64)
        .filter(|&i| {
            traj_dropout(bundle.clone(), 0.05, Seed(9).derive(&[i]))
                .unwrap()
                .dropped
        })
        .count();
    // 500 expected; the band is about 3.6 standard deviations wide.
    assert!((420..=580).contains(&dropped), "{dropped} of 10000 dropped");
}

#[test]
fn injection_carries_first_frame_feature_along_the_path() {
    let points: Vec<[f64; 2]> = (0..8)
        .map(|i| [1.0 + 2.0 * i as f64, 3.0 + i as f64])
        .collect();
    let pt = PooledTrajectory {
        frames: 8,
        objects: 1,
        points,
        image_width: 32,
        image_height: 16,
        fps_effective: 8.0,
    };
    let (h, w, c) = (8, 16, 3);
    let lt = to_latent_grid(&pt, 2, h, w).unwrap();
    let mask = build_mask(&lt, 8, h, w, 0.5, Seed(1)).unwrap();
    let z = gaussian_noise(&[h, w, c], Seed(2)).unwrap();
    let x = inject(&z, &lt, &mask).unwrap().data;
    let [p0, q0] = lt.cell(0, 0);
    let feature = &z.data()[(p0 * w + q0) * c..(p0 * w + q0 + 1) * c];
    assert_eq!(&x.data()[..z.len()], z.data());
    for i in 1..8 {
        let frame = &x.data()[i * h * w * c..(i + 1) * h * w * c];
        for cell in 0..h * w {
            let v = &frame[cell * c..(cell + 1) * c];
            if mask.binary[i * h * w + cell] == 1.0 {
                assert_eq!(v, feature, "frame {i} cell {cell}");
            } else {
                assert!(v.iter().all(|&e| e == 0.0), "frame {i} cell {cell}");
            }
        }
        let [p, q] = lt.cell(i, 0);
        assert_eq!(mask.binary[i * h * w + p * w + q], 1.0);
    }
}
