use ghost_stereo::accounting::{count_macs, count_params, Block};
use ghost_stereo::aggregation::Hourglass;
use ghost_stereo::cost_volume::build_gwc_volume;
use ghost_stereo::data::metrics::d1;
use ghost_stereo::data::pfm::{encode_pfm, parse_pfm};
use ghost_stereo::features::FeatureExtractor;
use ghost_stereo::ghost::{BottleneckSpec, Ghost3DSpec, GhostBottleneck, SqueezeExcite};
use ghost_stereo::model::Prediction;
use ghost_stereo::nn::{Builder, Dims, ParamStore, Session};
use ghost_stereo::regression::{convex_upsample, normalize_logits, topk_disparity};
use ghost_stereo::train::stereo_loss;
use ghost_stereo::{validate_sample, ModelConfig, StereoSample, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnd(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn cheap() -> ProptestConfig {
    ProptestConfig::with_cases(16)
}

proptest! {
    #![proptest_config(cheap())]

    #[test]
    fn config_json_round_trip(seed in any::<u64>(), topk in 1usize..=8, use_se: bool, use_cve: bool, use_cva: bool,
                              w0 in 0.0f64..2.0, w1 in 0.0f64..2.0) {
        let cfg = ModelConfig { seed, topk, use_se, use_cve, use_cva, loss_weights: [w0, w1], ..ModelConfig::desk() };
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn validate_sample_is_idempotent(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let left = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let right = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let mut gt = Tensor::rand_uniform(&[h, w], -5.0, 40.0, &mut rng);
        gt.data_mut()[0] = f64::NAN;
        let cfg = ModelConfig::desk();
        let once = validate_sample(StereoSample::new(left, right).with_gt(gt), &cfg).unwrap();
        let twice = validate_sample(once.clone(), &cfg).unwrap();
        prop_assert_eq!(&once.valid_mask, &twice.valid_mask);
        prop_assert!(!once.valid_mask.as_ref().unwrap()[0]);
    }

    #[test]
    fn gwc_shift_consistency(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4])) {
        let (h, w, levels) = (3, 7, 3);
        let l = rnd(&[1, 8, h, w], seed, -1.0, 1.0);
        let r = rnd(&[1, 8, h, w], seed ^ 1, -1.0, 1.0);
        let shift = |t: &Tensor| Tensor::from_fn(t.shape(), |i| if i[3] == 0 { 0.5 } else { t.get(&[i[0], i[1], i[2], i[3] - 1]) });
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let v = s.value(build_gwc_volume(&s, s.input(l.clone()), s.input(r.clone()), groups, levels).unwrap());
        let vs = s.value(build_gwc_volume(&s, s.input(shift(&l)), s.input(shift(&r)), groups, levels).unwrap());
        for g in 0..groups {
            for d in 0..levels {
                for y in 0..h {
                    // Column x in the shifted volume reads columns x-1 and x-1-d of the
                    // shifted maps, which are interior when x - 1 - d >= 1.
                    for x in (d + 2)..w {
                        prop_assert!((vs.get(&[0, g, d, y, x]) - v.get(&[0, g, d, y, x - 1])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gwc_is_scale_invariant(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4])) {
        // Invariance holds up to eps / |f_g|, so group norms stay well above
        // the normalization epsilon.
        let (h, w) = (4, 6);
        let signed = |seed: u64| rnd(&[1, 8, h, w], seed, 0.25, 1.0).zip_map(&rnd(&[1, 8, h, w], seed ^ 99, -1.0, 1.0), |m, s| m * s.signum());
        let l = signed(seed);
        let r = signed(seed ^ 7);
        let cl = rnd(&[h, w], seed ^ 11, 0.5, 10.0);
        let cr = rnd(&[h, w], seed ^ 13, 0.5, 10.0);
        let scale = |t: &Tensor, c: &Tensor| Tensor::from_fn(t.shape(), |i| t.get(i) * c.get(&[i[2], i[3]]));
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let v = s.value(build_gwc_volume(&s, s.input(l.clone()), s.input(r.clone()), groups, 3).unwrap());
        let vs = s.value(build_gwc_volume(&s, s.input(scale(&l, &cl)), s.input(scale(&r, &cr)), groups, 3).unwrap());
        prop_assert!(v.max_abs_diff(&vs) < 1e-5);
    }

    #[test]
    fn ghost_compresses_dense_conv(c in 8usize..96) {
        let ghost = count_params(&Block::Ghost(Ghost3DSpec { bn: false, relu: false, ..Ghost3DSpec::new(Dims::Three, c, c) }));
        let dense = count_params(&Block::Conv {
            in_channels: c, out_channels: c, kernel: [3, 3, 3], stride: [1, 1, 1], padding: [1, 1, 1], groups: 1, bias: false,
        });
        prop_assert!(4 * ghost < dense);
    }

    #[test]
    fn stride2_bottleneck_halves_extents(seed in any::<u64>(), d in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let (d, h, w) = (2 * d, 2 * h, 2 * w);
        let mut b = Builder::new(seed);
        let spec = BottleneckSpec::new(Dims::Three, 4, 8, 6, 2);
        let blk = GhostBottleneck::new(&mut b, "b", spec).unwrap();
        let store = b.finish();
        let s = Session::eval(&store);
        let y = s.value(blk.forward(&s, s.input(rnd(&[1, 4, d, h, w], seed, -3.0, 3.0))));
        prop_assert_eq!(y.shape(), &[1, 6, d / 2, h / 2, w / 2]);
        prop_assert!(y.all_finite());
        let (_, shape) = count_macs(&blk.block(), [1, 4, d, h, w]).unwrap();
        prop_assert_eq!(shape, [1, 6, d / 2, h / 2, w / 2]);
    }

    #[test]
    fn se_never_amplifies(seed in any::<u64>()) {
        let mut b = Builder::new(seed);
        let se = SqueezeExcite::new(&mut b, "se", Dims::Three, 8, 4).unwrap();
        let store = b.finish();
        let s = Session::eval(&store);
        let x = rnd(&[2, 8, 2, 3, 3], seed ^ 3, -5.0, 5.0);
        let y = s.value(se.forward(&s, s.input(x.clone())));
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn hourglass_preserves_volume_extents(seed in any::<u64>(), d in 1usize..3, h in 1usize..3, w in 1usize..3) {
        let cfg = ModelConfig::desk();
        let (d, h, w) = (8 * d, 8 * h, 8 * w);
        let mut b = Builder::new(seed);
        let hg = Hourglass::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::eval(&store);
        let c = cfg.feature_channels;
        let ctx = [
            s.input(rnd(&[1, c[1], h / 2, w / 2], seed, 0.0, 1.0)),
            s.input(rnd(&[1, c[2], h / 4, w / 4], seed + 1, 0.0, 1.0)),
            s.input(rnd(&[1, c[3], h / 8, w / 8], seed + 2, 0.0, 1.0)),
        ];
        let vol = s.input(rnd(&[1, cfg.num_groups, d, h, w], seed + 3, -1.0, 1.0));
        let out = s.value(hg.forward(&s, vol, &ctx).unwrap());
        prop_assert_eq!(out.shape(), &[1, d, h, w]);
        prop_assert!(out.all_finite());
    }

    #[test]
    fn regression_bounds_shift_and_convexity(seed in any::<u64>(), levels in 2usize..10, k in 1usize..10, offset in -50.0f64..50.0) {
        let k = k.min(levels);
        let (h, w) = (3, 4);
        let store = ParamStore::default();
        let s = Session::eval(&store);
        let vol = rnd(&[1, levels, h, w], seed, -4.0, 4.0);
        let q = s.value(topk_disparity(&s, s.input(vol.clone()), k).unwrap());
        let dmax = (levels - 1) as f64;
        prop_assert!(q.data().iter().all(|&d| (0.0..=dmax).contains(&d)));
        let shifted = vol.map(|v| v + offset);
        let qs = s.value(topk_disparity(&s, s.input(shifted), k).unwrap());
        prop_assert!(q.max_abs_diff(&qs) < 1e-6);

        let weights = normalize_logits(&s, s.input(rnd(&[1, 144, h, w], seed ^ 5, -3.0, 3.0)));
        let full = s.value(convex_upsample(&s, s.input(q.clone()), weights).unwrap());
        prop_assert!(full.data().iter().all(|&d| (0.0..=4.0 * dmax + 1e-9).contains(&d)));
        for y in 0..4 * h {
            for x in 0..4 * w {
                let (cy, cx) = (y / 4, x / 4);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        lo = lo.min(q.get(&[0, ny, nx]));
                        hi = hi.max(q.get(&[0, ny, nx]));
                    }
                }
                let v = full.get(&[0, y, x]);
                prop_assert!(4.0 * lo - 1e-9 <= v && v <= 4.0 * hi + 1e-9);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative_and_ignores_masked_pixels(seed in any::<u64>()) {
        let (h, w) = (8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Tensor::rand_uniform(&[1, h, w], 0.0, 20.0, &mut rng);
        let mask: Vec<bool> = (0..h * w).map(|i| !(i * 7 + seed as usize).is_multiple_of(3)).collect();
        let q = Tensor::rand_uniform(&[1, h / 4, w / 4], 0.0, 5.0, &mut rng);
        let f = Tensor::rand_uniform(&[1, h, w], 0.0, 20.0, &mut rng);
        let run = |gt: &Tensor| {
            let store = ParamStore::default();
            let s = Session::train(&store);
            let p = Prediction { quarter: s.graph.leaf(q.clone(), true), full: s.graph.leaf(f.clone(), true) };
            let l = stereo_loss(&s, &p, gt, &mask, [0.3, 1.0]).unwrap();
            let g = s.graph.backward(l.total);
            (s.value(l.total).item(), g.get(p.quarter).cloned(), g.get(p.full).cloned())
        };
        let (a, gqa, gfa) = run(&gt);
        prop_assert!(a >= 0.0);
        let mut altered = gt.clone();
        for (i, m) in mask.iter().enumerate() {
            if !m {
                altered.data_mut()[i] = 1e6;
            }
        }
        let (b, gqb, gfb) = run(&altered);
        prop_assert_eq!(a, b);
        prop_assert_eq!(gqa, gqb);
        prop_assert_eq!(gfa, gfb);
    }

    #[test]
    fn loss_zero_only_at_ground_truth(seed in any::<u64>(), px in 0usize..64, delta in 0.01f64..5.0) {
        let (h, w) = (8, 8);
        let gt = rnd(&[1, h, w], seed, 0.0, 20.0);
        let mask = vec![true; h * w];
        let q = Tensor::from_fn(&[1, 2, 2], |i| gt.get(&[0, 4 * i[1], 4 * i[2]]) / 4.0);
        let store = ParamStore::default();
        let eval = |f: &Tensor| {
            let s = Session::eval(&store);
            let p = Prediction { quarter: s.input(q.clone()), full: s.input(f.clone()) };
            s.value(stereo_loss(&s, &p, &gt, &mask, [0.3, 1.0]).unwrap().total).item()
        };
        prop_assert!(eval(&gt).abs() < 1e-12);
        let mut off = gt.clone();
        off.data_mut()[px] += delta;
        prop_assert!(eval(&off) > 0.0);
    }

    #[test]
    fn d1_ignores_masked_out_pixels(seed in any::<u64>(), extra in 1usize..20) {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Tensor::rand_uniform(&[n], 1.0, 50.0, &mut rng);
        let pred = Tensor::rand_uniform(&[n], 1.0, 50.0, &mut rng);
        let base = d1(&pred, &gt, &vec![true; n], None).unwrap();
        let junk = Tensor::rand_uniform(&[extra], 0.0, 500.0, &mut rng);
        let cat = |a: &Tensor, b: &Tensor| Tensor::cat(&[a, b], 0);
        let mut mask = vec![true; n];
        mask.extend(std::iter::repeat_n(false, extra));
        let grown = d1(&cat(&pred, &junk), &cat(&gt, &junk.map(|v| v * 3.0 + 1.0)), &mask, None).unwrap();
        prop_assert_eq!(base, grown);
    }

    #[test]
    fn pfm_round_trip_is_bit_exact(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, le: bool) {
        let map = rnd(&[h, w], seed, -1e4, 1e4).map(|v| v as f32 as f64);
        let back = parse_pfm(&encode_pfm(&map, le).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), map.shape());
        prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn features_are_finite_and_siamese(seed in any::<u64>()) {
        let cfg = ModelConfig::desk();
        let mut b = Builder::new(seed);
        let fx = FeatureExtractor::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let l = rnd(&[1, 3, 32, 64], seed, 0.0, 1.0);
        let r = rnd(&[1, 3, 32, 64], seed ^ 9, 0.0, 1.0);
        let run = |a: &Tensor, b: &Tensor| {
            let s = Session::eval(&store);
            let fa = fx.forward(&s, s.input(a.clone())).unwrap();
            let fb = fx.forward(&s, s.input(b.clone())).unwrap();
            (s.value(fa.fused), s.value(fb.fused), s.value(fa.encoder[3]))
        };
        let (fl, fr, deep) = run(&l, &r);
        let (sr, sl, _) = run(&r, &l);
        prop_assert!(fl.all_finite() && fr.all_finite());
        prop_assert_eq!(fl.shape(), &[1, cfg.fused_channels, 8, 16]);
        prop_assert_eq!(deep.shape(), &[1, cfg.feature_channels[3], 1, 2]);
        prop_assert_eq!(fl, sl);
        prop_assert_eq!(fr, sr);
    }
}
