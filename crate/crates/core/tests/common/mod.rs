#![allow(dead_code)]

use bmfa::aggregation::{Branches, Fusion, ModelConfig, Strategy};
use bmfa::backbone::BackboneConfig;
use bmfa::params::ParamStore;
use bmfa::tensor::{Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Random BN affine parameters and running statistics everywhere, except
/// for names containing `keep`.
pub fn randomize_bns<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, keep: &[&str]) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        if keep.iter().any(|k| name.contains(k)) {
            continue;
        }
        let range = if name.ends_with(".gamma") {
            0.5..1.5
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            -0.3..0.3
        } else if name.ends_with(".running_var") {
            0.5..2.0
        } else {
            continue;
        };
        for v in store.value_mut(id).data_mut() {
            *v = T::from_f64(rng.random_range(range.clone()));
        }
    }
}

pub fn small_model(strategy: Strategy, fusion: Option<Fusion>, base: usize, emb: usize) -> ModelConfig {
    ModelConfig {
        strategy,
        fusion,
        r: 4,
        embedding_dim: emb,
        backbone: BackboneConfig {
            base_channels: base,
            blocks: [1, 1, 1, 1],
        },
        lowest_stage: 1,
        branches: Branches::Both,
    }
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
