mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metaroute::checkpoint;
use metaroute::complexity::{compare_bottlenecks, count_flops, count_params, describe_bottleneck, BottleneckConfig};
use metaroute::harness::phantom::{generate_cls_phantoms, generate_phantoms, lesion_polarity, ClsPhantomSpec, PhantomSpec, MIN_TUMOR_PIXELS};
use metaroute::ops::{conv_output_extent, masked_softmax};
use metaroute::seg::{dice_score, LabelVolume};
use metaroute::tmax::{tmax_block, TokenGrid};
use metaroute::{attention_flops, build_mask, AttentionMode, ModalityMask, ParamStore, Tape, Tensor, TmaxBlock, TmaxConfig};

fn pattern() -> impl Strategy<Value = [bool; 4]> {
    (1u8..16).prop_map(|b| std::array::from_fn(|m| b >> m & 1 == 1))
}

fn rng_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn grid(q: &Tensor) -> TokenGrid {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    TokenGrid {
        tokens: q.clone(),
        grid_extent: [n, 1, 1],
        positional: Tensor::zeros(&[n, d]),
    }
}

fn block(d: usize, seed: u64) -> (ParamStore, TmaxBlock) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = TmaxBlock::new(&mut store, "b", &TmaxConfig::with_dim(d), &mut rng).unwrap();
    (store, b)
}

fn bottleneck(mode: AttentionMode, n: u64, d: u64, h: u64, layers: u64) -> BottleneckConfig {
    BottleneckConfig {
        mode,
        n_tokens: n,
        embed_dim: d,
        ffn_hidden: h,
        n_layers: layers,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_over_available_columns(
        avail in pattern(), n in 1usize..20, scale in 0.1f64..60.0, seed: u64,
    ) {
        let s = rng_tensor(&[n, 4], -scale, scale, seed);
        let a = masked_softmax(&s, &build_mask(avail, n).unwrap().additive()).unwrap();
        for i in 0..n {
            let row = a.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                if !avail[j] {
                    prop_assert_eq!(row[j].to_bits(), 0u64);
                }
            }
        }
    }

    #[test]
    fn softmax_matches_column_restricted_oracle(avail in pattern(), n in 1usize..12, seed: u64) {
        let s = rng_tensor(&[n, 4], -5.0, 5.0, seed);
        let a = masked_softmax(&s, &build_mask(avail, n).unwrap().additive()).unwrap();
        let cols = common::kept(avail);
        for i in 0..n {
            let sub: Vec<f64> = cols.iter().map(|&j| s.at(&[i, j])).collect();
            for (want, &j) in common::softmax(&sub).iter().zip(&cols) {
                prop_assert!((a.at(&[i, j]) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mask_is_a_pure_function(avail in pattern(), n in 1usize..40) {
        let a = build_mask(avail, n).unwrap().additive();
        let b = build_mask(avail, n).unwrap().additive();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn block_matches_subset_oracle(avail in pattern(), n in 1usize..=16, d in 1usize..=8, seed: u64) {
        let (store, b) = block(d, seed);
        let q = rng_tensor(&[n, d], -2.0, 2.0, seed ^ 1);
        let k = rng_tensor(&[4, d], -2.0, 2.0, seed ^ 2);
        let v = rng_tensor(&[4, d], -2.0, 2.0, seed ^ 3);
        let mask = ModalityMask::new(avail, n).unwrap();
        let got = tmax_block(&store, &b, &grid(&q), &k, &v, &mask).unwrap();
        prop_assert_eq!(got.tokens.shape(), q.shape());
        let want = common::block_on_subset(&store, &b, &q, &k, &v, avail);
        prop_assert!(got.tokens.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn missing_rows_never_reach_the_output(
        avail in pattern().prop_filter("needs a missing modality", |a| a.contains(&false)),
        n in 1usize..10, d in 1usize..8, bump in -1e3f64..1e3, seed: u64,
    ) {
        let (store, b) = block(d, seed);
        let q = rng_tensor(&[n, d], -2.0, 2.0, seed ^ 1);
        let k = rng_tensor(&[4, d], -2.0, 2.0, seed ^ 2);
        let v = rng_tensor(&[4, d], -2.0, 2.0, seed ^ 3);
        let mask = ModalityMask::new(avail, n).unwrap();
        let base = tmax_block(&store, &b, &grid(&q), &k, &v, &mask).unwrap();
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in (0..4).filter(|&j| !avail[j]) {
            k2.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|x| *x += bump);
            v2.data_mut()[j * d..(j + 1) * d].iter_mut().for_each(|x| *x -= 2.0 * bump);
        }
        let pert = tmax_block(&store, &b, &grid(&q), &k2, &v2, &mask).unwrap();
        prop_assert!(base.tokens.bit_eq(&pert.tokens));
    }

    #[test]
    fn conv_extent_matches_placement_count(extent in 1usize..=8, k in 1usize..=5, stride in 1usize..=3, pad in 0usize..=2) {
        let brute = common::placements(extent, k, stride, pad);
        match conv_output_extent(extent, k, stride, pad) {
            Some(o) => prop_assert_eq!(o, brute),
            None => prop_assert_eq!(brute, 0),
        }
    }

    #[test]
    fn dice_is_bounded_and_symmetric(bits in prop::collection::vec((0usize..3, 0usize..3), 1..64), class in 0usize..3) {
        let p = LabelVolume::new([1, 1, bits.len()], bits.iter().map(|b| b.0).collect()).unwrap();
        let t = LabelVolume::new([1, 1, bits.len()], bits.iter().map(|b| b.1).collect()).unwrap();
        let pt = dice_score(&p, &t, class).unwrap();
        let tp = dice_score(&t, &p, class).unwrap();
        prop_assert!((0.0..=1.0).contains(&pt));
        prop_assert_eq!(pt, tp);
    }

    #[test]
    fn soft_dice_meets_hard_dice_at_saturation(pairs in prop::collection::vec((0usize..2, 0usize..2), 2..200)) {
        let n = pairs.len();
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let logits: Vec<f64> = pred.iter().flat_map(|&c| if c == 1 { [-40.0, 40.0] } else { [40.0, -40.0] }).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[n, 2], logits).unwrap());
        let loss = tape.soft_dice_loss(l, &target).unwrap();
        let soft = 1.0 - tape.value(loss).data()[0];
        let hard = dice_score(
            &LabelVolume::new([1, 1, n], pred).unwrap(),
            &LabelVolume::new([1, 1, n], target).unwrap(),
            1,
        ).unwrap();
        prop_assert!((soft - hard).abs() <= 1e-3, "soft {} hard {}", soft, hard);
    }

    #[test]
    fn cross_attention_flops_are_linear_in_tokens(n in 1u64..100_000, d in 1usize..1024) {
        let cfg = TmaxConfig::with_dim(d);
        let one = attention_flops(&cfg, n, AttentionMode::MetadataCross);
        prop_assert_eq!(attention_flops(&cfg, 2 * n, AttentionMode::MetadataCross), 2 * one);
        prop_assert_eq!(attention_flops(&cfg, n, AttentionMode::SelfAttention) * 4, one * n);
    }

    #[test]
    fn counting_is_additive_over_composition(
        n in 1u64..512, d in 1u64..256, h in 1u64..512, la in 1u64..4, lb in 1u64..4,
    ) {
        let a = describe_bottleneck(&bottleneck(AttentionMode::SelfAttention, n, d, h, la)).unwrap();
        let b = describe_bottleneck(&bottleneck(AttentionMode::MetadataCross, n, d, h, lb)).unwrap();
        let both = a.clone().then(b.clone());
        prop_assert_eq!(count_flops(&both), count_flops(&a) + count_flops(&b));
        prop_assert_eq!(count_params(&both), count_params(&a) + count_params(&b));
    }

    #[test]
    fn report_totals_are_row_sums(n in 1u64..512, d in 1u64..256, h in 1u64..512, layers in 1u64..4) {
        let r = compare_bottlenecks(
            &bottleneck(AttentionMode::SelfAttention, n, d, h, layers),
            &bottleneck(AttentionMode::MetadataCross, n, d, h, layers),
        ).unwrap();
        prop_assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        prop_assert_eq!(r.total_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
        let c = r.comparison.unwrap();
        prop_assert_eq!(c.baseline_params, c.baseline.iter().map(|x| x.params).sum::<u64>());
        prop_assert_eq!(c.baseline_flops, c.baseline.iter().map(|x| x.flops).sum::<u64>());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6), seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            let mut t = Tensor::uniform(s, -1e3, 1e3, &mut rng);
            t.data_mut()[0] = if i % 2 == 0 { -0.0 } else { f64::MIN_POSITIVE / 4.0 };
            store.add(format!("p{i}.w"), t);
        }
        let back = checkpoint::decode(&checkpoint::encode(&store)).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert!(t1.bit_eq(t2));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn conv3d_matches_textbook_loops(
        extent in 1usize..=6, k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1,
        ci in 1usize..=2, co in 1usize..=2, seed: u64,
    ) {
        prop_assume!(extent + 2 * pad >= k);
        let x = rng_tensor(&[ci, extent, extent, extent], -1.0, 1.0, seed);
        let w = rng_tensor(&[co, ci, k, k, k], -1.0, 1.0, seed ^ 7);
        let mut tape = Tape::new();
        let xv = tape.constant(x.reshape(&[1, ci, extent, extent, extent]).unwrap());
        let wv = tape.constant(w.clone());
        let y = tape.conv3d(xv, wv, None, stride, pad).unwrap();
        let want = common::conv3d(&x, &w, stride, pad);
        let got = tape.value(y);
        prop_assert_eq!(&got.shape()[1..], want.shape());
        prop_assert!(got.reshape(want.shape()).unwrap().max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn phantom_labels_are_the_sphere(seed: u64, extent in prop::sample::select(vec![16usize, 24, 32])) {
        let spec = PhantomSpec {
            extent,
            n_samples: 2,
            radius_min: 2.0,
            radius_max: extent as f64 / 4.0,
            seed,
            ..PhantomSpec::default()
        };
        for p in generate_phantoms(&spec).unwrap() {
            let mut count = 0;
            for z in 0..extent {
                for y in 0..extent {
                    for x in 0..extent {
                        let d2 = (z as f64 - p.center[0]).powi(2) + (y as f64 - p.center[1]).powi(2) + (x as f64 - p.center[2]).powi(2);
                        let want = (d2 <= p.radius * p.radius) as usize;
                        prop_assert_eq!(p.batch.target.labels[(z * extent + y) * extent + x], want);
                        count += want;
                    }
                }
            }
            prop_assert_eq!(p.batch.target.count(1), count);
            prop_assert!(count > 0);
        }
    }

    #[test]
    fn slice_labels_follow_the_pixel_threshold(seed: u64) {
        // Without noise the lesion is exactly the pixels at the sequence's polarity.
        let spec = ClsPhantomSpec { n_samples: 24, sigma: 0.0, seed, ..ClsPhantomSpec::default() };
        for s in generate_cls_phantoms(&spec).unwrap() {
            let pol = lesion_polarity(s.sequence);
            let lesion = s.image.data().iter().filter(|&&v| v == pol).count();
            prop_assert_eq!(s.label, (lesion >= MIN_TUMOR_PIXELS) as usize);
        }
    }
}
