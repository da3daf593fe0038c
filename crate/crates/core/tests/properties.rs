//! Randomized invariants across the public API.

use fmdiff_core::attacks::{apply_attack, jpeg_quant_table, mean_filter, AttackSpec};
use fmdiff_core::codecs::{embed, extract, CodecConfig, Scheme, WatermarkBits, WATERMARK_BITS};
use fmdiff_core::diffusion::{q_sample, GridRule, NoiseSchedule, TimestepGrid};
use fmdiff_core::metrics::{ber_slices, psnr, ssim};
use fmdiff_core::sampler::build_grid;
use fmdiff_core::synth::synth_image;
use fmdiff_core::spectral::{decompose, dft2, fwm_fuse, idft2, recompose, FreqMask};
use fmdiff_core::{ImageBuffer, PatchRect, SeededRng};
use proptest::prelude::*;

fn image(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer {
    let mut rng = SeededRng::new(seed);
    ImageBuffer::from_fn(h, w, c, |_, _, _| rng.uniform())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dft_roundtrip_and_parseval(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let img = image(seed, h, w, 1);
        let spec = dft2(img.plane(0), h, w).unwrap();
        let energy: f64 = img.data().iter().map(|v| v * v).sum();
        prop_assert!((spec.energy() - energy).abs() <= 1e-8 * energy.max(1e-300));
        let back = idft2(&recompose(&decompose(&spec))).unwrap();
        for (a, b) in back.iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fwm_zero_mask_returns_forward(seed in any::<u64>(), h in 2usize..20, w in 2usize..20) {
        let f = image(seed, h, w, 3);
        let r = image(seed ^ 1, h, w, 3);
        let out = fwm_fuse(&f, &r, &FreqMask::zeros(h, w)).unwrap();
        prop_assert!(out.max_abs_diff(&f) < 1e-9);
        let fixed = fwm_fuse(&f, &f, &FreqMask::new(h, w, 0.6).unwrap()).unwrap();
        prop_assert!(fixed.max_abs_diff(&f) < 1e-9);
    }

    #[test]
    fn crop_paste_roundtrip(seed in any::<u64>(), h in 4usize..30, w in 4usize..30, frac in 0.0f64..1.0) {
        let img = image(seed, h, w, 3);
        let size = 1 + ((h.min(w) - 1) as f64 * frac) as usize;
        let mut rng = SeededRng::new(seed);
        let r = PatchRect::new(rng.range_inclusive(0, h - size), rng.range_inclusive(0, w - size), size);
        let patch = img.crop(r).unwrap();
        let mut blank = ImageBuffer::zeros(h, w, 3);
        blank.paste(&patch, r).unwrap();
        prop_assert_eq!(blank.crop(r).unwrap(), patch);
        let mut same = img.clone();
        same.paste(&img.crop(r).unwrap(), r).unwrap();
        prop_assert_eq!(same, img);
    }

    #[test]
    fn grid_covers_every_pixel(h in 1usize..200, w in 1usize..200, p in 1usize..64, frac in 0.0f64..1.0) {
        prop_assume!(p <= h && p <= w);
        let r = 1 + ((p - 1) as f64 * frac) as usize;
        let g = build_grid(h, w, p, r).unwrap();
        prop_assert!(g.coverage().iter().all(|&k| k >= 1));
        for rect in &g.rects {
            prop_assert!(rect.check_within(h, w).is_ok());
        }
    }

    #[test]
    fn timestep_grids_descend_to_zero(s in 2usize..60, t_max in 60usize..1200) {
        for rule in [GridRule::Sampling, GridRule::Training] {
            let g = TimestepGrid::new(s, t_max, rule).unwrap();
            let tr = g.transitions();
            prop_assert!(tr.iter().all(|(t, n)| n < t && *t <= t_max));
            prop_assert_eq!(tr.last().unwrap().1, 0);
        }
    }

    #[test]
    fn q_sample_preserves_unit_variance(seed in any::<u64>(), t in 1usize..=1000) {
        let sched = NoiseSchedule::default_linear(1000).unwrap();
        let mut rng = SeededRng::new(seed);
        let x0 = ImageBuffer::gaussian(32, 32, 1, &mut rng);
        let eps = ImageBuffer::gaussian(32, 32, 1, &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let var = xt.data().iter().map(|v| v * v).sum::<f64>() / 1024.0;
        prop_assert!((var - 1.0).abs() < 0.25, "{}", var);
    }

    #[test]
    fn ber_permutation_invariance(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a: Vec<bool> = (0..WATERMARK_BITS).map(|_| rng.coin()).collect();
        let b: Vec<bool> = (0..WATERMARK_BITS).map(|_| rng.coin()).collect();
        let mut idx: Vec<usize> = (0..WATERMARK_BITS).collect();
        rng.shuffle(&mut idx);
        let pa: Vec<bool> = idx.iter().map(|&i| a[i]).collect();
        let pb: Vec<bool> = idx.iter().map(|&i| b[i]).collect();
        prop_assert_eq!(ber_slices(&a, &b).unwrap(), ber_slices(&pa, &pb).unwrap());
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = image(seed, 16, 16, 3);
        let b = image(seed.wrapping_add(1), 16, 16, 3);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(s1, s2);
        prop_assert!(s1 <= 1.0);
    }

    #[test]
    fn attacks_keep_shape_and_range(seed in any::<u64>(), idx in 0usize..6, h in 3usize..20, w in 3usize..20) {
        let spec: AttackSpec = ["gaussian:0.01", "speckle:0.1", "saltpepper:0.2", "meanfilter:3", "jpeg:20", "identity"][idx]
            .parse()
            .unwrap();
        let img = image(seed, h, w, 3);
        let out = apply_attack(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&out, &apply_attack(&img, &spec, &mut SeededRng::new(seed)).unwrap());
    }

    #[test]
    fn mean_filter_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = image(seed, 9, 11, 1);
        let y = image(seed ^ 7, 9, 11, 1);
        let lhs = mean_filter(&x.lincomb(a, &y, b).unwrap(), 3);
        let rhs = mean_filter(&x, 3).lincomb(a, &mean_filter(&y, 3), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn quant_tables_shrink_with_quality(q in 1u32..100) {
        let lo = jpeg_quant_table(q).unwrap();
        let hi = jpeg_quant_table(q + 1).unwrap();
        prop_assert!(lo.iter().zip(&hi).all(|(a, b)| a >= b && *b >= 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codecs_roundtrip_random_marks(seed in any::<u64>(), scheme in 0usize..3, gray in any::<bool>()) {
        let scheme = Scheme::ALL[scheme];
        let c = if gray { 1 } else { 3 };
        let img = synth_image(&mut SeededRng::new(seed), 128, 128, c).quantized();
        let wm = WatermarkBits::random(&mut SeededRng::new(seed));
        let cfg = CodecConfig { key: seed, ..CodecConfig::new(scheme) };
        let marked = embed(&img, &wm, &cfg).unwrap();
        prop_assert_eq!(marked.clone(), marked.quantized());
        prop_assert_eq!(extract(&marked, &cfg).unwrap(), wm);
    }
}
