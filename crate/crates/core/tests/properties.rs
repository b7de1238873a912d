mod common;

use bmfa::kernels::{concat_channels, split_channels, stats_pool, tanh};
use bmfa::tensor::{Shape, Tensor};
use bmfa::training::am_softmax;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn t64(seed: u64, n: usize, c: usize, t: usize, f: usize) -> Tensor<f64> {
    common::uniform(Shape::new(n, c, t, f), &mut common::rng(seed))
}

fn repeat_time(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n(), s.c(), 2 * s.t(), s.f()), |[n, c, t, f]| x.at(n, c, t % s.t(), f))
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) -> bool {
    common::max_abs_diff(a, b) <= tol
}

#[test]
fn stats_pool_spot_values() {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![0.0, 2.0]).unwrap();
    assert_eq!(stats_pool(&x).data(), &[1.0, 1.0]);
    let c = Tensor::full(Shape::new(1, 2, 5, 3), 0.75);
    let p = stats_pool(&c);
    assert_eq!(p.len(), 12);
    assert!(p.data()[..6].iter().all(|&v| v == 0.75));
    assert!(p.data()[6..].iter().all(|&v: &f64| (v - 1e-5).abs() < 1e-12));
}

proptest! {
    #[test]
    fn stats_pool_ignores_time_order(seed in any::<u64>(), c in 1usize..4, t in 1usize..20, f in 1usize..5) {
        let x = t64(seed, 2, c, t, f);
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut common::rng(seed ^ 1));
        let y = Tensor::from_fn(x.shape(), |[n, c, t, f]| x.at(n, c, order[t], f));
        let (a, b) = (stats_pool(&x), stats_pool(&y));
        prop_assert_eq!(a.len(), 2 * 2 * c * f);
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn stats_pool_is_unchanged_by_repeating_time(seed in any::<u64>(), c in 1usize..4, t in 1usize..20, f in 1usize..5, constant in any::<bool>()) {
        let mut x = t64(seed, 1, c, t, f);
        if constant {
            x = Tensor::from_fn(x.shape(), |[n, c, _, f]| x.at(n, c, 0, f));
        }
        prop_assert!(close(&stats_pool(&x), &stats_pool(&repeat_time(&x)), 1e-12));
    }

    #[test]
    fn concat_then_split_is_exact(seed in any::<u64>(), n in 1usize..3, cx in 1usize..4, cy in 1usize..4, t in 1usize..6, f in 1usize..6) {
        let x = t64(seed, n, cx, t, f);
        let y = t64(seed ^ 7, n, cy, t, f);
        let z = concat_channels(&x, &y).unwrap();
        prop_assert_eq!(z.shape(), Shape::new(n, cx + cy, t, f));
        let (a, b) = split_channels(&z, cx).unwrap();
        prop_assert_eq!(a, x);
        prop_assert_eq!(b, y);
    }

    #[test]
    fn tanh_stays_strictly_inside_unit_interval(v in prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, w in -1e6f32..1e6) {
        let a = tanh(&Tensor::scalar(v));
        prop_assert!(a.data()[0].abs() < 1.0);
        let b = tanh(&Tensor::scalar(w));
        prop_assert!(b.data()[0].abs() < 1.0);
    }

    #[test]
    fn am_softmax_ignores_embedding_scale(seed in any::<u64>(), scale in 1e-3f64..1e3, row in 0usize..4) {
        let mut r = common::rng(seed);
        let e: Tensor<f64> = common::uniform(Shape::vectors(4, 16), &mut r);
        let w: Tensor<f64> = common::uniform(Shape::new(16, 5, 1, 1), &mut r);
        let labels = [0, 3, 4, 1];
        let mut scaled = e.clone();
        for v in &mut scaled.data_mut()[row * 16..(row + 1) * 16] {
            *v *= scale;
        }
        let a = am_softmax::forward(&e, &w, &labels, 0.15, 30.0).unwrap().loss;
        let b = am_softmax::forward(&scaled, &w, &labels, 0.15, 30.0).unwrap().loss;
        prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
    }
}
