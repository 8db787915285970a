use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csknet::data::{render_scene, SceneConfig};
use csknet::optim::{draw_flip, hflip, sgd_step, OptimizerState};
use csknet::param::ParamStore;
use csknet::Tensor;

#[test]
fn momentum_matches_a_hand_unrolled_two_steps() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new([1, 1, 1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
    let mut st = OptimizerState::new(&store);
    let (lr, mu, wd) = (0.1, 0.9, 0.01);
    let (g1, g2) = ([0.5, -1.0], [0.25, 2.0]);

    store.get_mut(id).grad = Tensor::new([1, 1, 1, 2], g1.to_vec()).unwrap();
    sgd_step(&mut store, &mut st, lr, mu, wd).unwrap();
    store.get_mut(id).grad = Tensor::new([1, 1, 1, 2], g2.to_vec()).unwrap();
    sgd_step(&mut store, &mut st, lr, mu, wd).unwrap();

    for (i, w0) in [1.0f64, -2.0].into_iter().enumerate() {
        let v1 = g1[i] + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + g2[i] + wd * w1;
        let w2 = w1 - lr * v2;
        assert_eq!(store.value(id).data()[i], w2);
        assert_eq!(st.velocity[0].data()[i], v2);
    }
    assert_eq!(st.step, 2);
}

#[test]
fn zero_gradient_still_coasts_on_momentum() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full([1, 1, 1, 1], 0.0)).unwrap();
    let mut st = OptimizerState::new(&store);
    st.velocity[0] = Tensor::full([1, 1, 1, 1], 1.0);
    sgd_step(&mut store, &mut st, 0.5, 0.9, 0.0).unwrap();
    assert_eq!(st.velocity[0].data(), &[0.9]);
    assert_eq!(store.value(id).data(), &[-0.45]);
}

#[test]
fn flips_are_fair_coins() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let heads = (0..10_000).filter(|_| draw_flip(&mut rng)).count();
    let f = heads as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&f), "{f}");
}

#[test]
fn flipping_twice_is_the_identity_and_keeps_pairs_aligned() {
    let s = render_scene(&SceneConfig::default(), 2).unwrap().to_sample("x");
    let f = hflip(&s);
    assert_ne!(f.label, s.label);
    assert_eq!(hflip(&f), s);
    let w = s.label.w;
    for x in 0..w {
        assert_eq!(f.label.at(0, 5, x), s.label.at(0, 5, w - 1 - x));
        assert_eq!(f.ir.as_ref().unwrap().at(0, 0, 5, x), s.ir.as_ref().unwrap().at(0, 0, 5, w - 1 - x));
    }
}
