use conrf_core::evaluation::masked_ssim;
use conrf_core::feature_field::{compute_weights, transmittance};
use conrf_core::image::Image;
use conrf_core::selection::{local_transfer, local_transfer_deferred, mask_from_similarity, window_offsets};
use conrf_core::style_core::{transfer_deferred, transfer_per_point, StyleStatistics};
use proptest::prelude::*;

fn stats(c: usize) -> impl Strategy<Value = StyleStatistics> {
    (
        prop::collection::vec(-2.0f32..2.0, c),
        prop::collection::vec(0.0f32..3.0, c),
    )
        .prop_map(|(m, s)| StyleStatistics::new(m, s).unwrap())
}

/// `(rays, samples, channels, weights, features)` with weights summing to at most one per ray.
fn rendered() -> impl Strategy<Value = (usize, usize, usize, Vec<f32>, Vec<f32>)> {
    (1usize..5, 1usize..24, 1usize..8).prop_flat_map(|(b, n, c)| {
        (
            Just(b),
            Just(n),
            Just(c),
            prop::collection::vec(0.0f32..1.0, b * n).prop_map(move |w| w.iter().map(|x| x / n as f32).collect()),
            prop::collection::vec(-3.0f32..3.0, b * n * c),
        )
    })
}

fn composite(weights: &[f32], features: &[f32], n: usize, c: usize) -> (Vec<f32>, Vec<f32>) {
    let b = weights.len() / n;
    let mut out = vec![0.0f32; b * c];
    let mut acc = vec![0.0f32; b];
    for r in 0..b {
        for i in r * n..(r + 1) * n {
            acc[r] += weights[i];
            for k in 0..c {
                out[r * c + k] += weights[i] * features[i * c + k];
            }
        }
    }
    (out, acc)
}

proptest! {
    #[test]
    fn weights_and_transmittance_partition_unity(
        sigma in prop::collection::vec(0.0f32..50.0, 1..96),
        delta in 0.0f32..0.2,
    ) {
        let deltas = vec![delta; sigma.len()];
        let (w, t) = compute_weights(&sigma, &deltas);
        let total: f64 = w.iter().map(|&x| x as f64).sum::<f64>() + t as f64;
        prop_assert!((total - 1.0).abs() <= 1e-6, "sum {total}");
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let trans = transmittance(&sigma, &deltas);
        prop_assert!(trans.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(trans.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn deferred_transfer_matches_per_point(
        ((_, n, c, w, f), s) in rendered().prop_flat_map(|r| { let c = r.2; (Just(r), stats(c)) })
    ) {
        let per_point = transfer_per_point(&w, &f, n, &s).unwrap();
        let (out, acc) = composite(&w, &f, n, c);
        let deferred = transfer_deferred(&out, &acc, &s).unwrap();
        for (a, b) in per_point.iter().zip(&deferred) {
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn binary_mask_selects_exactly_one_style(
        ((b, n, c, w, f), s1, s2, mask) in rendered().prop_flat_map(|r| {
            let (b, c) = (r.0, r.2);
            (Just(r), stats(c), stats(c), prop::collection::vec(any::<bool>(), b))
        })
    ) {
        let m: Vec<f32> = mask.iter().map(|&x| x as u8 as f32).collect();
        let mixed = local_transfer(&w, &f, n, &m, &s1, &s2).unwrap();
        let a = transfer_per_point(&w, &f, n, &s1).unwrap();
        let z = transfer_per_point(&w, &f, n, &s2).unwrap();
        let (out, acc) = composite(&w, &f, n, c);
        let deferred = local_transfer_deferred(&out, &acc, &m, &s1, &s2).unwrap();
        let da = transfer_deferred(&out, &acc, &s1).unwrap();
        let dz = transfer_deferred(&out, &acc, &s2).unwrap();
        for r in 0..b {
            for k in r * c..(r + 1) * c {
                let (pick, dpick) = if mask[r] { (a[k], da[k]) } else { (z[k], dz[k]) };
                prop_assert_eq!(mixed[k].to_bits(), pick.to_bits());
                prop_assert_eq!(deferred[k].to_bits(), dpick.to_bits());
            }
        }
    }

    #[test]
    fn raising_the_threshold_shrinks_the_mask(
        sim in prop::collection::vec(-1.0f32..=1.0, 1..200),
        t1 in -1.0f32..=1.0,
        t2 in -1.0f32..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = mask_from_similarity(&sim, lo).unwrap();
        let b = mask_from_similarity(&sim, hi).unwrap();
        prop_assert!(b.mask.iter().zip(&a.mask).all(|(&hi, &lo)| !hi || lo));
        prop_assert!(b.coverage() <= a.coverage());
        let inverse: Vec<bool> = sim.iter().map(|&z| z < lo).collect();
        prop_assert!(a.mask.iter().zip(&inverse).all(|(x, y)| x != y));
    }

    #[test]
    fn windows_tile_the_axis(len in 1usize..64, size in 1usize..16, stride in 1usize..16) {
        prop_assume!(size <= len);
        let o = window_offsets(len, size, stride).unwrap();
        prop_assert_eq!(o[0], 0);
        prop_assert_eq!(*o.last().unwrap(), len - size);
        prop_assert!(o.windows(2).all(|p| p[0] < p[1] && p[1] - p[0] <= stride));
        if stride <= size {
            for x in 0..len {
                prop_assert!(o.iter().any(|&s| (s..s + size).contains(&x)));
            }
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(
        seed_a in prop::collection::vec(0.0f32..1.0, 3 * 12 * 12),
        seed_b in prop::collection::vec(0.0f32..1.0, 3 * 12 * 12),
        mask in prop::collection::vec(any::<bool>(), 12 * 12),
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let a = Image::new(12, 12, seed_a).unwrap();
        let b = Image::new(12, 12, seed_b).unwrap();
        let ab = masked_ssim(&a, &b, Some(&mask)).unwrap();
        let ba = masked_ssim(&b, &a, Some(&mask)).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        let aa = masked_ssim(&a, &a, Some(&mask)).unwrap();
        prop_assert!((aa - 1.0).abs() <= 1e-9, "self ssim {aa}");
    }
}

#[test]
fn ssim_ignores_pixels_outside_the_mask() {
    let a = Image::from_fn(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.5]);
    let mut b = a.clone();
    let mask: Vec<bool> = (0..256).map(|i| i % 16 < 8).collect();
    for y in 0..16 {
        for x in 8..16 {
            b.set_pixel(x, y, [1.0, 0.0, 1.0]);
        }
    }
    assert!((masked_ssim(&a, &b, Some(&mask)).unwrap() - 1.0).abs() < 1e-12);
    assert!(masked_ssim(&a, &b, None).unwrap() < 0.9);
    assert!(masked_ssim(&a, &b, Some(&[false; 256])).is_err());
}
