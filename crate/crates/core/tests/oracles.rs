//! Kernel and composite checks against independently written references.

mod common;

use bmfa::afm::AfmParams;
use bmfa::aggregation::{Fusion, ModelConfig, Network, Strategy, TopDownBranch};
use bmfa::backbone::{Backbone, BackboneConfig, BackboneFeatures};
use bmfa::graph::Graph;
use bmfa::kernels::{self, ConvGeometry, Mode, BN_EPS};
use bmfa::params::{ParamKind, ParamStore};
use bmfa::tensor::{Shape, Tensor};
use common::*;
use rand::Rng;

// ---------------------------------------------------------------------------
// conv2d vs direct summation
// ---------------------------------------------------------------------------

/// Straight from the definition: zero padding, cross-correlation.
fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (st, sf) = g.stride;
    let (pt, pf) = g.padding;
    let to = (xs.t() + 2 * pt - ws.t()) / st + 1;
    let fo = (xs.f() + 2 * pf - ws.f()) / sf + 1;
    Tensor::from_fn(Shape::new(xs.n(), ws.n(), to, fo), |[n, co, ot, of]| {
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..xs.c() {
            for kt in 0..ws.t() {
                for kf in 0..ws.f() {
                    let it = (ot * st + kt) as isize - pt as isize;
                    let jf = (of * sf + kf) as isize - pf as isize;
                    if it >= 0 && jf >= 0 && (it as usize) < xs.t() && (jf as usize) < xs.f() {
                        acc += w.at(co, ci, kt, kf) * x.at(n, ci, it as usize, jf as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Gradients of `sum(conv(x) * g)` from the definition.
fn conv_direct_grads(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    geom: ConvGeometry,
    up: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (xs, ws, us) = (x.shape(), w.shape(), up.shape());
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::vectors(1, ws.n()));
    for n in 0..xs.n() {
        for co in 0..ws.n() {
            for ot in 0..us.t() {
                for of in 0..us.f() {
                    let u = up.at(n, co, ot, of);
                    gb.data_mut()[co] += u;
                    for ci in 0..xs.c() {
                        for kt in 0..ws.t() {
                            for kf in 0..ws.f() {
                                let it = (ot * geom.stride.0 + kt) as isize - geom.padding.0 as isize;
                                let jf = (of * geom.stride.1 + kf) as isize - geom.padding.1 as isize;
                                if it < 0 || jf < 0 || it as usize >= xs.t() || jf as usize >= xs.f() {
                                    continue;
                                }
                                let (it, jf) = (it as usize, jf as usize);
                                let i = xs.index(n, ci, it, jf);
                                gx.data_mut()[i] += w.at(co, ci, kt, kf) * u;
                                let j = ws.index(co, ci, kt, kf);
                                gw.data_mut()[j] += x.at(n, ci, it, jf) * u;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[test]
fn conv2d_matches_direct_summation_on_random_cases() {
    let mut r = rng(2024);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    while cases < 150 {
        let (n, cin, cout) = (r.random_range(1..=3), r.random_range(1..=8), r.random_range(1..=8));
        let (t, f) = (r.random_range(1..=8), r.random_range(1..=8));
        let (kt, kf) = (r.random_range(1..=5), r.random_range(1..=5));
        let geom = ConvGeometry::new(
            (r.random_range(1..=2), r.random_range(1..=2)),
            (r.random_range(0..=kt / 2 + 1), r.random_range(0..=kf / 2 + 1)),
        );
        if geom.output_dims(t, f, kt, kf).is_none() {
            continue;
        }
        let x = uniform::<f64>(Shape::new(n, cin, t, f), &mut r);
        let w = uniform::<f64>(Shape::new(cout, cin, kt, kf), &mut r);
        let b = r.random_bool(0.5).then(|| uniform::<f64>(Shape::vectors(1, cout), &mut r));
        let got = kernels::conv2d(&x, &w, b.as_ref(), geom).unwrap();
        let want = conv_direct(&x, &w, b.as_ref(), geom);
        assert_eq!(got.shape(), want.shape());
        let err = max_abs_diff(&got, &want);
        worst = worst.max(err);
        assert!(err < 1e-6, "case {cases}: {:?} {:?} {geom:?}: {err}", x.shape(), w.shape());

        let up = uniform::<f64>(got.shape(), &mut r);
        let grads = kernels::conv2d_backward(&x, &w, true, geom, &up).unwrap();
        let (gx, gw, gb) = conv_direct_grads(&x, &w, geom, &up);
        assert!(max_abs_diff(&grads.grad_x, &gx) < 1e-6, "grad_x case {cases}");
        assert!(max_abs_diff(&grads.grad_weight, &gw) < 1e-6, "grad_w case {cases}");
        assert!(max_abs_diff(grads.grad_bias.as_ref().unwrap(), &gb) < 1e-6, "grad_b case {cases}");
        cases += 1;
    }
    println!("conv oracle: {cases} cases, max abs error {worst:.2e}");
}

#[test]
fn conv2d_f32_tracks_f64_oracle() {
    let mut r = rng(7);
    for _ in 0..50 {
        let x = uniform::<f64>(Shape::new(2, r.random_range(1..=8), 8, 8), &mut r);
        let w = uniform::<f64>(Shape::new(r.random_range(1..=8), x.shape().c(), 3, 3), &mut r);
        let want = conv_direct(&x, &w, None, ConvGeometry::same(3));
        let got = kernels::conv2d(&x.cast::<f32>(), &w.cast::<f32>(), None, ConvGeometry::same(3)).unwrap();
        // f32 rounding over at most 72 products of magnitude < 1
        assert!(max_abs_diff(&got.cast::<f64>(), &want) < 1e-5);
    }
}

// ---------------------------------------------------------------------------
// Parameter counts (golden values from an independent PyTorch layer-by-layer build)
// ---------------------------------------------------------------------------

fn backbone_trainable(config: BackboneConfig) -> usize {
    let mut store = ParamStore::<f32>::new();
    Backbone::new(&mut store, config, 0).unwrap();
    store
        .entries()
        .iter()
        .filter(|e| e.kind == ParamKind::Trainable)
        .map(|e| e.value.len())
        .sum()
}

#[test]
fn backbone_parameter_counts_match_golden() {
    assert_eq!(backbone_trainable(BackboneConfig::default()), 5_325_728);
    assert_eq!(
        backbone_trainable(BackboneConfig {
            base_channels: 8,
            blocks: [1, 1, 1, 1]
        }),
        77_608
    );
}

#[test]
fn backbone_init_is_seed_deterministic() {
    let build = |seed| {
        let mut s = ParamStore::<f32>::new();
        Backbone::new(&mut s, BackboneConfig::default(), seed).unwrap();
        s
    };
    let (a, b, c) = (build(3), build(3), build(4));
    for ((ea, eb), ec) in a.entries().iter().zip(b.entries()).zip(c.entries()) {
        assert_eq!(ea.value, eb.value, "{}", ea.name);
        if ea.name.ends_with(".weight") {
            assert_ne!(ea.value, ec.value, "{}", ea.name);
        }
    }
}

// ---------------------------------------------------------------------------
// Shape contract at full size
// ---------------------------------------------------------------------------

#[test]
fn full_size_shape_trace() {
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(&mut store, ModelConfig::default(), 0).unwrap();
    for t in [200, 256, 400] {
        let mut g = Graph::new(&mut store, Mode::Infer);
        let x = g.input(Tensor::from_fn(Shape::new(1, 1, t, 64), |[_, _, i, j]| ((i * 3 + j) as f32 * 0.1).sin()));
        let tr = net.forward(&mut g, x).unwrap();
        let h = t / 2;
        let stage = [(32, 32), (64, 16), (128, 8), (256, 4)];
        for (i, &(c, f)) in stage.iter().enumerate() {
            assert_eq!(g.shape(tr.features.c[i]), Shape::new(1, c, h, f), "C{} at T={t}", i + 1);
            let td = tr.top_down.unwrap().maps[i].unwrap();
            let bu = tr.bottom_up.unwrap().maps[i].unwrap();
            assert_eq!(g.shape(td), Shape::new(1, c, h, f), "F_tb{} at T={t}", i + 1);
            assert_eq!(g.shape(bu), Shape::new(1, c, h, f), "F_bt{} at T={t}", i + 1);
        }
        // first cases of the two recursions are the backbone maps themselves
        assert_eq!(tr.top_down.unwrap().maps[3], Some(tr.features.c[3]));
        assert_eq!(tr.bottom_up.unwrap().maps[0], Some(tr.features.c[0]));
        assert_eq!(g.shape(tr.top_down.unwrap().pooled), Shape::vectors(1, 2048));
        assert_eq!(g.shape(tr.bottom_up.unwrap().pooled), Shape::vectors(1, 2048));
        assert_eq!(g.shape(tr.pooled), Shape::vectors(1, 4096));
        assert_eq!(g.shape(tr.embedding), Shape::vectors(1, 512));
        assert!(g.value(tr.embedding).all_finite());
    }
}

#[test]
fn backbone_shapes_for_every_even_length() {
    let cfg = BackboneConfig {
        base_channels: 2,
        blocks: [1, 1, 1, 1],
    };
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut store, cfg, 0).unwrap();
    for t in (2..=400).step_by(2) {
        let mut g = Graph::new(&mut store, Mode::Infer);
        let x = g.input(Tensor::full(Shape::new(1, 1, t, 64), 0.5));
        let f = bb.forward(&mut g, x).unwrap();
        for i in 0..4 {
            assert_eq!(g.shape(f.c[i]), Shape::new(1, 2 << i, t / 2, 32 >> i), "T={t}");
        }
    }
    let mut g = Graph::new(&mut store, Mode::Infer);
    let odd = g.input(Tensor::full(Shape::new(1, 1, 7, 64), 0.5));
    assert!(bb.forward(&mut g, odd).is_err());
    let narrow = g.input(Tensor::full(Shape::new(1, 1, 8, 40), 0.5));
    assert!(bb.forward(&mut g, narrow).is_err());
}

// ---------------------------------------------------------------------------
// AFM and aggregation references
// ---------------------------------------------------------------------------

fn pointwise_ref(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n(), w.shape().n(), s.t(), s.f()), |[n, co, t, f]| {
        (0..s.c()).map(|ci| w.at(co, ci, 0, 0) * x.at(n, ci, t, f)).sum()
    })
}

fn bn_ref(x: &Tensor<f64>, store: &ParamStore<f64>, prefix: &str) -> Tensor<f64> {
    let get = |k: &str| store.value(store.find(&format!("{prefix}.{k}")).unwrap()).clone();
    let (g, b, m, v) = (get("gamma"), get("beta"), get("running_mean"), get("running_var"));
    Tensor::from_fn(x.shape(), |[n, c, t, f]| {
        let c_ = c;
        g.data()[c_] * (x.at(n, c, t, f) - m.data()[c_]) / (v.data()[c_] + BN_EPS).sqrt() + b.data()[c_]
    })
}

/// Linear interpolation onto a grid twice as fine, sample centres aligned,
/// edge values held constant.
fn upsample_ref(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let fi = s.f() as f64;
    Tensor::from_fn(Shape::new(s.n(), s.c(), s.t(), 2 * s.f()), |[n, c, t, j]| {
        // output bin j is centred at input coordinate (j + 1/2)/2 - 1/2
        let pos = ((j as f64 - 0.5) / 2.0).clamp(0.0, fi - 1.0);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s.f() - 1);
        let a = pos - lo as f64;
        (1.0 - a) * x.at(n, c, t, lo) + a * x.at(n, c, t, hi)
    })
}

fn weight(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.value(store.find(name).unwrap_or_else(|| panic!("no {name}"))).clone()
}

fn zero_afm_w2(store: &mut ParamStore<f64>) -> usize {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).name.ends_with(".W2.weight")).collect();
    for &id in &ids {
        store.value_mut(id).fill(0.0);
    }
    ids.len()
}

#[test]
fn zeroed_afm_top_down_equals_additive_pyramid_reference() {
    let ch = [4, 8, 16, 32];
    let mut store = ParamStore::<f64>::new();
    let branch = TopDownBranch::new(&mut store, ch, 1, Fusion::Afm, 4, 11).unwrap();
    let mut r = rng(5);
    // random BNs everywhere except the ones right after W2
    randomize_bns(&mut store, &mut r, &["bn2"]);
    assert_eq!(zero_afm_w2(&mut store), 3);

    let c: Vec<Tensor<f64>> = (0..4).map(|i| uniform(Shape::new(2, ch[i], 3, 16 >> i), &mut r)).collect();
    // reference: F4 = C4; F_i = up(BN(Wtb_i * F_{i+1})) + BN(Wlc_i * C_i)
    let mut want = vec![c[3].clone()];
    for i in (1..=3).rev() {
        let upper = want.last().unwrap();
        let red = bn_ref(&pointwise_ref(upper, &weight(&store, &format!("topdown.Wtb{i}.weight"))), &store, &format!("topdown.bn_tb{i}"));
        let lat = bn_ref(&pointwise_ref(&c[i - 1], &weight(&store, &format!("topdown.Wlc{i}.weight"))), &store, &format!("topdown.bn_lc{i}"));
        let up = upsample_ref(&red);
        want.push(Tensor::from_fn(lat.shape(), |[n, cc, t, f]| up.at(n, cc, t, f) + lat.at(n, cc, t, f)));
    }
    want.reverse(); // F1..F4

    let mut g = Graph::new(&mut store, Mode::Infer);
    let vars: Vec<_> = c.iter().map(|t| g.input(t.clone())).collect();
    let bf = BackboneFeatures {
        c: [vars[0], vars[1], vars[2], vars[3]],
    };
    let tr = branch.forward(&mut g, &bf).unwrap();
    for (i, w) in want.iter().enumerate() {
        let got = g.value(tr.maps[i].unwrap());
        let err = max_abs_diff(got, w);
        assert!(err < 1e-12, "F{}: {err}", i + 1);
    }
}

#[test]
fn attention_map_is_the_kernel_composition() {
    let mut store = ParamStore::<f64>::new();
    let afm = AfmParams::new(&mut store, "afm", 8, 4, 3).unwrap();
    let mut r = rng(9);
    randomize_bns(&mut store, &mut r, &[]);
    let x = uniform::<f64>(Shape::new(2, 8, 5, 6), &mut r);
    let y = uniform::<f64>(Shape::new(2, 8, 5, 6), &mut r);

    let bn = |t: &Tensor<f64>, p: &str| {
        let w = |k: &str| weight(&store, &format!("{p}.{k}"));
        kernels::batchnorm_infer(t, &w("gamma"), &w("beta"), &w("running_mean"), &w("running_var"), BN_EPS).unwrap()
    };
    let z = kernels::concat_channels(&x, &y).unwrap();
    let z = kernels::conv2d(&z, &weight(&store, "afm.W1.weight"), None, ConvGeometry::same(1)).unwrap();
    let z = kernels::relu(&bn(&z, "afm.bn1"));
    let z = kernels::conv2d(&z, &weight(&store, "afm.W2.weight"), None, ConvGeometry::same(1)).unwrap();
    let want = kernels::tanh(&bn(&z, "afm.bn2"));

    let mut g = Graph::new(&mut store, Mode::Infer);
    let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
    let s = afm.attention_map(&mut g, xv, yv).unwrap();
    assert_eq!(g.value(s), &want);
    assert!(g.value(s).data().iter().all(|v| v.abs() < 1.0));

    // complementary weights
    let wx = g.scalar_add(1.0, s);
    let wy = g.scalar_sub(1.0, s);
    let total = g.add(wx, wy).unwrap();
    assert!(g.value(total).data().iter().all(|&v| v == 2.0));
    let fused = afm.fuse(&mut g, xv, yv).unwrap();
    let swapped = afm.fuse(&mut g, yv, xv).unwrap();
    assert_eq!(g.shape(fused), x.shape());
    assert!(max_abs_diff(g.value(fused), g.value(swapped)) > 1e-3, "fusion should be ordered");
}

#[test]
fn zeroed_afm_network_equals_additive_network() {
    let base = small_model(Strategy::Bmfa, Some(Fusion::Afm), 8, 32);
    let mut afm_store = ParamStore::<f64>::new();
    let afm_net = Network::new(&mut afm_store, base.clone(), 21).unwrap();
    let mut r = rng(1);
    randomize_bns(&mut afm_store, &mut r, &["bn2"]);
    assert_eq!(zero_afm_w2(&mut afm_store), 6);

    let mut add_store = ParamStore::<f64>::new();
    let add_net = Network::new(&mut add_store, ModelConfig { fusion: Some(Fusion::Add), ..base }, 99).unwrap();
    // every parameter of the additive model exists in the AFM model
    assert_eq!(add_store.copy_matching_from(&afm_store).unwrap(), add_store.len());

    let x = uniform::<f64>(Shape::new(3, 1, 16, 64), &mut r);
    let a = afm_net.embed_batch(&mut afm_store, x.clone()).unwrap();
    let b = add_net.embed_batch(&mut add_store, x).unwrap();
    assert_eq!(a, b, "bit-exact equality expected");
}

#[test]
fn batch_permutation_permutes_embeddings() {
    for (strategy, fusion) in [(Strategy::Bmfa, Some(Fusion::Afm)), (Strategy::MeaFpm, Some(Fusion::Add)), (Strategy::Baseline, None)] {
        let mut store = ParamStore::<f32>::new();
        let net = Network::new(&mut store, small_model(strategy, fusion, 4, 16), 2).unwrap();
        let mut r = rng(3);
        randomize_bns(&mut store, &mut r, &[]);
        let items: Vec<Tensor<f32>> = (0..4).map(|_| uniform(Shape::new(1, 1, 12, 64), &mut r)).collect();
        let perm = [2, 0, 3, 1];
        let a = net.embed_batch(&mut store, Tensor::stack(&items).unwrap()).unwrap();
        let shuffled: Vec<_> = perm.iter().map(|&i| items[i].clone()).collect();
        let b = net.embed_batch(&mut store, Tensor::stack(&shuffled).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.item(k), a.item(i), "{strategy:?}");
        }
    }
}
