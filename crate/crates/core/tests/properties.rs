//! Randomized invariants of the routing, fusion, metric and schedule code.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csknet::evaluate::ConfusionMatrix;
use csknet::exchange::{channel_exchange, mixed_exchange, spatial_exchange, ExchangeConfig};
use csknet::gsu::GatedSpectralUnit;
use csknet::labels::LabelMap;
use csknet::optim::poly_lr;
use csknet::param::ParamStore;
use csknet::{Shape, Tape, Tensor};

fn shape() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..7).prop_map(|(n, c, h, w)| Shape::new(n, c, h, w))
}

fn pair(seed: u64, s: Shape) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::uniform(s, -3.0, 3.0, &mut rng), Tensor::uniform(s, -3.0, 3.0, &mut rng))
}

/// Brute-force mean IoU straight from the definition.
fn brute_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let inter = pred.iter().zip(gt).filter(|&(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|&(&p, &g)| p == c || g == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spatial_exchange_is_an_involution_and_keeps_even_columns(s in shape(), seed in any::<u64>()) {
        let (a, b) = pair(seed, s);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (xa, xb) = spatial_exchange(&mut tape, va, vb).unwrap();
        let (ya, yb) = spatial_exchange(&mut tape, xa, xb).unwrap();
        prop_assert_eq!(tape.value(ya), &a);
        prop_assert_eq!(tape.value(yb), &b);
        for n in 0..s.n { for c in 0..s.c { for h in 0..s.h { for w in 0..s.w {
            let (ea, eb) = if w % 2 == 0 { (a.at(n, c, h, w), b.at(n, c, h, w)) } else { (b.at(n, c, h, w), a.at(n, c, h, w)) };
            prop_assert_eq!(tape.value(xa).at(n, c, h, w).to_bits(), ea.to_bits());
            prop_assert_eq!(tape.value(xb).at(n, c, h, w).to_bits(), eb.to_bits());
        }}}}
    }

    #[test]
    fn channel_exchange_takes_values_from_the_partner_exactly_where_gamma_is_small(
        s in shape(),
        seed in any::<u64>(),
        ga in prop::collection::vec(-0.05f64..0.05, 4),
        gb in prop::collection::vec(-0.05f64..0.05, 4),
        threshold in 0.0f64..0.04,
    ) {
        let (a, b) = pair(seed, s);
        let (ga, gb) = (&ga[..s.c], &gb[..s.c]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (xa, xb) = channel_exchange(&mut tape, va, vb, ga, gb, threshold).unwrap();
        for n in 0..s.n { for c in 0..s.c { for h in 0..s.h { for w in 0..s.w {
            let want_a = if ga[c].abs() < threshold { b.at(n, c, h, w) } else { a.at(n, c, h, w) };
            let want_b = if gb[c].abs() < threshold { a.at(n, c, h, w) } else { b.at(n, c, h, w) };
            prop_assert_eq!(tape.value(xa).at(n, c, h, w).to_bits(), want_a.to_bits());
            prop_assert_eq!(tape.value(xb).at(n, c, h, w).to_bits(), want_b.to_bits());
        }}}}
    }

    #[test]
    fn mixed_exchange_only_routes_values(s in shape(), seed in any::<u64>(), stage in 1usize..=5) {
        let (a, b) = pair(seed, s);
        let g: Vec<f64> = (0..s.c).map(|c| if c % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (xa, xb) = mixed_exchange(&mut tape, stage, va, vb, &g, &g, &ExchangeConfig::default()).unwrap();
        for i in 0..s.numel() {
            let (oa, ob) = (tape.value(xa).data()[i], tape.value(xb).data()[i]);
            let (ia, ib) = (a.data()[i], b.data()[i]);
            // Position-wise, the two outputs are a permutation of the two inputs.
            prop_assert!((oa == ia && ob == ib) || (oa == ib && ob == ia) || (oa == ib && ob == ib) || (oa == ia && ob == ia));
        }
    }

    #[test]
    fn gsu_outputs_stay_in_range_and_forced_gates_select(c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>(), k in 0usize..3) {
        let s = Shape::new(1, c, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let unit = GatedSpectralUnit::new(&mut store, &mut rng, "gsu", c).unwrap();
        // Open ranges hold until tanh/sigmoid round to their asymptotes in f64;
        // features of post-BN magnitude stay far from that.
        let (fi, fo) = (Tensor::uniform(s, -4.0, 4.0, &mut rng), Tensor::uniform(s, -4.0, 4.0, &mut rng));
        let mut tape = Tape::new();
        let (vi, vo) = (tape.constant(fi), tape.constant(fo));
        let out = unit.forward(&mut tape, &store, vi, vo).unwrap();
        for z in out.gates {
            prop_assert!(tape.value(z).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for h in out.candidates {
            prop_assert!(tape.value(h).data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
        prop_assert!(tape.value(out.fuse).data().iter().all(|&v| v.abs() < 3.0));

        let (bi, bo) = (tape.constant(Tensor::full(s, 1e6)), tape.constant(Tensor::full(s, -1e6)));
        let extreme = unit.forward(&mut tape, &store, bi, bo).unwrap();
        prop_assert!(tape.value(extreme.fuse).data().iter().all(|&v| v.abs() <= 3.0));

        let forced: [Tensor; 3] = std::array::from_fn(|i| Tensor::full(s, if i == k { 1.0 } else { 0.0 }));
        let out = unit.forward_with_gates(&mut tape, &store, vi, vo, Some(&forced)).unwrap();
        prop_assert_eq!(tape.value(out.fuse), tape.value(out.candidates[k]));
    }

    #[test]
    fn softmax_rows_are_distributions(s in shape(), seed in any::<u64>(), scale in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(s, -scale, scale, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let p = tape.softmax_channel(v).unwrap();
        let p = tape.value(p);
        for n in 0..s.n { for h in 0..s.h { for w in 0..s.w {
            let col: Vec<f64> = (0..s.c).map(|c| p.at(n, c, h, w)).collect();
            prop_assert!(col.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }}}
    }

    #[test]
    fn confusion_miou_is_invariant_under_class_relabelling(
        data in prop::collection::vec((0u8..4, 0u8..4), 1..200),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = data.iter().copied().unzip();
        let n = pred.len();
        let score = |p: &[u8], g: &[u8]| {
            let mut cm = ConfusionMatrix::new(4);
            cm.update(&LabelMap::new(1, 1, n, p.to_vec()).unwrap(), &LabelMap::new(1, 1, n, g.to_vec()).unwrap()).unwrap();
            cm
        };
        let base = score(&pred, &gt);
        let relabel = |v: &[u8]| v.iter().map(|&l| perm[usize::from(l)]).collect::<Vec<u8>>();
        let moved = score(&relabel(&pred), &relabel(&gt));
        for g in 0..4 { for p in 0..4 {
            prop_assert_eq!(base.get(g, p), moved.get(usize::from(perm[g]), usize::from(perm[p])));
        }}
        let mut a = base.iou().into_iter().flatten().collect::<Vec<_>>();
        let mut b = moved.iou().into_iter().flatten().collect::<Vec<_>>();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn poly_schedule_is_monotone_and_bounded(total in 1usize..500, base in 1e-5f64..1.0, power in 0.1f64..3.0) {
        let lrs: Vec<f64> = (0..=total).map(|s| poly_lr(s, total, base, power).unwrap()).collect();
        prop_assert_eq!(lrs[0], base);
        prop_assert_eq!(lrs[total], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0] && w[1] >= 0.0));
        prop_assert!(poly_lr(total + 1, total, base, power).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn miou_matches_brute_force_exactly(
        classes in 2usize..6,
        hw in (1usize..9, 1usize..9),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let (h, w) = hw;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
        let pred: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.update(&LabelMap::new(1, h, w, pred.clone()).unwrap(), &LabelMap::new(1, h, w, gt.clone()).unwrap()).unwrap();
        prop_assert_eq!(cm.miou().to_bits(), brute_miou(&pred, &gt, classes).to_bits());
    }
}
