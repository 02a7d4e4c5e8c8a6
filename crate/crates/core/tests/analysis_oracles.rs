//! Activation / contribution maps against brute-force and perturbation oracles.

mod common;

use common::{random_dataset, random_model, rng, small_arch};
use critpath_core::analysis::{
    contribution_index_map, layer_activation_std, layer_maps, logit_gradient, mean_abs_activation_map,
    product_score_map, top_filters, AnalysisConfig, FilterClassMap, MapKind,
};
use critpath_core::{ArchSpec, InputShape, LayerKind, LayerParams, Model, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn cfg(cap: usize) -> AnalysisConfig {
    AnalysisConfig { per_class_cap: cap, seed: 0, batch_size: 3 }
}

/// The layers after `conv`'s activation, as a model taking that activation as input.
fn tail_model(model: &Model<f64>, conv: usize, act_shape: &[usize]) -> Model<f64> {
    let p = model.arch().activation_position(conv).unwrap();
    let arch = ArchSpec {
        input: InputShape { channels: act_shape[1], height: act_shape[2], width: act_shape[3] },
        layers: model.arch().layers[p + 1..].to_vec(),
        num_classes: model.num_classes(),
    };
    Model::new(arch, model.params()[p + 1..].to_vec(), "tail").unwrap()
}

/// Whether nudging element `j` of `a` by up to `delta` can change which element
/// wins its 2×2 max-pool window (the network is not differentiable there).
fn near_pool_tie(a: &Tensor<f64>, j: usize, delta: f64) -> bool {
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let (ch, y, x) = (j / (h * w) % c, j / w % h, j % w);
    let (y0, x0) = (y / 2 * 2, x / 2 * 2);
    if y0 + 1 >= h || x0 + 1 >= w {
        return false;
    }
    let at = |yy: usize, xx: usize| a.data()[(ch * h + yy) * w + xx];
    let mut window = [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)];
    window.sort_by(|p, q| q.partial_cmp(p).unwrap());
    let v = a.data()[j];
    (window[0] - window[1]).abs() <= delta || (v < window[0] && window[0] - v <= delta)
}

#[test]
fn contribution_coefficients_predict_logit_perturbations() {
    let delta = 1e-3;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for seed in 0..3u64 {
        let model = random_model(small_arch(1, 8, [3, 4, 5], 3), seed).cast::<f64>();
        let mut r = rng(seed + 100);
        let x = common::uniform(&mut r, &[1, 1, 8, 8], 1.0);
        for conv in 1..=3 {
            let (_, acts) = model.forward_with_activations(&x).unwrap();
            let a = acts.conv(conv).unwrap().post.clone();
            let tail = tail_model(&model, conv, a.shape());
            let pooled = matches!(tail.arch().layers[0], LayerKind::MaxPool2x2);
            let z0 = tail.forward_logits(&a).unwrap();
            for class in 0..3 {
                let coef = logit_gradient(&model, &x, conv, class).unwrap();
                let scale = coef.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
                for j in 0..a.len() {
                    if pooled && near_pool_tie(&a, j, delta) {
                        skipped += 1;
                        continue;
                    }
                    let mut ap = a.clone();
                    ap.data_mut()[j] += delta;
                    let z = tail.forward_logits(&ap).unwrap();
                    let n = (z.sample(0)[class] - z0.sample(0)[class]) / delta;
                    let c = coef.data()[j];
                    assert!((c - n).abs() <= 1e-4 * scale.max(1e-12), "conv {conv} class {class} pos {j}: {c} vs {n}");
                    analytic.push(c);
                    numeric.push(n);
                    checked += 1;
                }
                let err = common::rel_err(&analytic, &numeric);
                assert!(err <= 1e-4, "seed {seed} conv {conv} class {class}: {err:e}");
            }
        }
    }
    assert!(checked > 2 * skipped, "only {checked} positions checked, {skipped} at pool ties");
}

#[test]
fn contribution_map_is_mean_l1_of_coefficients() {
    let model = random_model(small_arch(1, 6, [2, 3, 4], 2), 5);
    let data = random_dataset(InputShape { channels: 1, height: 6, width: 6 }, 2, 4, 9);
    let map = contribution_index_map(&model, &data, 2, &cfg(100)).unwrap();
    assert_eq!(map.kind, MapKind::Contribution);
    for class in 0..2 {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
        let mut want = vec![0.0f64; 3];
        for &i in &idx {
            let g = logit_gradient(&model, &data.batch(&[i]), 2, class).unwrap();
            for (f, plane) in g.data().chunks(g.sample_len() / 3).enumerate() {
                want[f] += plane.iter().map(|v| v.abs() as f64).sum::<f64>() / idx.len() as f64;
            }
        }
        for f in 0..3 {
            assert!((map.get(f, class) - want[f]).abs() <= 1e-5 * (1.0 + want[f]), "{} vs {}", map.get(f, class), want[f]);
        }
    }
}

/// Conv → Flatten → Dense with no nonlinearity: Z = W·A.
fn linear_model(seed: u64) -> Model<f32> {
    let arch = ArchSpec {
        input: InputShape { channels: 1, height: 4, width: 4 },
        layers: vec![
            LayerKind::Conv3x3 { in_channels: 1, out_channels: 2 },
            LayerKind::Flatten,
            LayerKind::Dense { in_features: 32, out_features: 3 },
        ],
        num_classes: 3,
    };
    random_model(arch, seed)
}

#[test]
fn linear_network_contribution_is_weight_l1_for_every_sample() {
    let model = linear_model(4);
    let data = random_dataset(InputShape { channels: 1, height: 4, width: 4 }, 3, 5, 1);
    let dense = model.params()[2].as_ref().unwrap();
    for i in 0..data.len() {
        let batch = data.batch(&[i]);
        for n in 0..3 {
            let g = logit_gradient(&model, &batch, 1, n).unwrap();
            assert_eq!(g.data(), &dense.weight.data()[n * 32..(n + 1) * 32]);
        }
    }
    let map = contribution_index_map(&model, &data, 1, &cfg(100)).unwrap();
    for f in 0..2 {
        for n in 0..3 {
            let row = &dense.weight.data()[n * 32 + f * 16..n * 32 + (f + 1) * 16];
            let want: f64 = row.iter().map(|v| v.abs() as f64).sum();
            assert!((map.get(f, n) - want).abs() < 1e-6, "{} vs {want}", map.get(f, n));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linear_network_contribution_is_sample_independent(seed in any::<u64>()) {
        let model = linear_model(seed);
        let data = random_dataset(InputShape { channels: 1, height: 4, width: 4 }, 3, 6, seed);
        let per_sample: Vec<Tensor<f32>> =
            (0..data.len()).map(|i| logit_gradient(&model, &data.batch(&[i]), 1, 1).unwrap()).collect();
        let n = per_sample.len() as f64;
        for j in 0..per_sample[0].len() {
            let mean = per_sample.iter().map(|g| g.data()[j] as f64).sum::<f64>() / n;
            let var = per_sample.iter().map(|g| (g.data()[j] as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(var <= 1e-6);
        }
    }
}

#[test]
fn activation_map_matches_per_sample_recomputation() {
    let model = random_model(small_arch(1, 6, [3, 3, 4], 2), 8);
    let data = random_dataset(InputShape { channels: 1, height: 6, width: 6 }, 2, 2, 2);
    let map = mean_abs_activation_map(&model, &data, 3, &cfg(10)).unwrap();
    for class in 0..2 {
        let mut want = vec![0.0f64; 4];
        for i in (0..data.len()).filter(|&i| data.labels()[i] == class) {
            let (_, acts) = model.forward_with_activations(&data.batch(&[i])).unwrap();
            let post = &acts.conv(3).unwrap().post;
            for (f, plane) in post.data().chunks(post.sample_len() / 4).enumerate() {
                want[f] += plane.iter().map(|v| v.abs() as f64).sum::<f64>() / plane.len() as f64 / 2.0;
            }
        }
        for f in 0..4 {
            assert!((map.get(f, class) - want[f]).abs() < 1e-6, "{} vs {}", map.get(f, class), want[f]);
        }
    }
    let fused = layer_maps(&model, &data, &[3], &cfg(10)).unwrap();
    assert_eq!(fused[0].activation, map);
}

#[test]
fn dead_network_has_zero_activation_and_unreachable_filter_zero_contribution() {
    let arch = small_arch(1, 6, [2, 3, 4], 2);
    let data = random_dataset(arch.input, 2, 3, 0);
    let (arch, mut params, _) = random_model(arch, 1).into_parts();

    // every conv-1 pre-activation negative: zero weights, negative bias
    let p = params[0].as_mut().unwrap();
    p.weight = Tensor::zeros(p.weight.shape());
    p.bias = Tensor::full(p.bias.shape(), -1.0);
    let dead = Model::new(arch.clone(), params.clone(), "dead").unwrap();
    let act = mean_abs_activation_map(&dead, &data, 1, &cfg(10)).unwrap();
    assert!(act.values.iter().all(|&v| v == 0.0));

    // filter 1 of conv 2 feeds nothing in conv 3
    let (_, mut params, _) = random_model(arch.clone(), 1).into_parts();
    let conv3 = arch.conv_position(3).unwrap();
    let LayerParams { weight, .. } = params[conv3].as_mut().unwrap();
    let (o, c) = (weight.shape()[0], weight.shape()[1]);
    for oc in 0..o {
        let base = (oc * c + 1) * 9;
        weight.data_mut()[base..base + 9].fill(0.0);
    }
    let cut = Model::new(arch, params, "cut").unwrap();
    let contrib = contribution_index_map(&cut, &data, 2, &cfg(10)).unwrap();
    assert!(contrib.row(1).iter().all(|&v| v == 0.0));
    assert!(contrib.row(0).iter().any(|&v| v > 0.0));
}

#[test]
fn maps_are_nonnegative_and_shaped() {
    let model = random_model(small_arch(3, 8, [4, 5, 6], 3), 2);
    let data = random_dataset(model.arch().input, 3, 3, 5);
    for m in layer_maps(&model, &data, &[1, 2, 3], &cfg(2)).unwrap() {
        for map in [&m.activation, &m.contribution, &m.product()] {
            assert_eq!(map.filters, model.arch().conv_filters(map.conv).unwrap());
            assert_eq!(map.classes, 3);
            assert_eq!(map.samples_per_class, vec![2, 2, 2]);
            assert!(map.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
    let std = layer_activation_std(&model, &data, &cfg(3)).unwrap();
    assert_eq!(std.values.len(), 3);
    assert!(std.values.iter().all(|&v| v >= 0.0));
}

#[test]
fn empty_class_and_non_conv_layer_rejected() {
    let model = random_model(small_arch(1, 6, [2, 3, 4], 3), 0);
    let data = random_dataset(model.arch().input, 2, 2, 0); // class 2 missing
    let err = mean_abs_activation_map(&model, &data, 1, &cfg(5)).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    let full = random_dataset(model.arch().input, 3, 2, 0);
    assert!(mean_abs_activation_map(&model, &full, 4, &cfg(5)).is_err());
    assert!(mean_abs_activation_map(&model, &full, 0, &cfg(5)).is_err());
}

fn map_from(values: Vec<f64>, filters: usize, classes: usize, kind: MapKind) -> FilterClassMap {
    FilterClassMap {
        conv: 1,
        kind,
        filters,
        classes,
        values,
        samples_per_class: vec![1; classes],
        per_class_cap: 1,
        seed: 0,
    }
}

fn column_strategy() -> impl Strategy<Value = Vec<f64>> {
    // small integers produce plenty of ties
    prop::collection::vec((0u8..6).prop_map(f64::from), 1..40)
}

proptest! {
    #[test]
    fn top_filters_equals_sort_oracle_and_is_nested(col in column_strategy(), k1 in 1usize..40, k2 in 1usize..40) {
        let n = col.len();
        let map = map_from(col.clone(), n, 1, MapKind::Product);
        let mut oracle: Vec<usize> = (0..n).collect();
        oracle.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap().then(a.cmp(&b)));
        let (k1, k2) = ((k1 - 1) % n + 1, (k2 - 1) % n + 1);
        let (lo, hi) = (k1.min(k2), k1.max(k2));
        let a = top_filters(&map, 0, lo).unwrap();
        let b = top_filters(&map, 0, hi).unwrap();
        prop_assert_eq!(&a[..], &oracle[..lo]);
        prop_assert_eq!(&b[..lo], &a[..]);
        prop_assert!(top_filters(&map, 0, n + 1).is_err());
    }

    #[test]
    fn product_argmax_invariant_under_positive_rescaling(
        seed in any::<u64>(), filters in 1usize..20, s1 in 0.01f64..100.0, s2 in 0.01f64..100.0,
    ) {
        let mut r = rng(seed);
        let act: Vec<f64> = (0..filters * 3).map(|_| r.random_range(0.0..1.0)).collect();
        let con: Vec<f64> = (0..filters * 3).map(|_| r.random_range(0.0..1.0)).collect();
        let base = product_score_map(
            &map_from(act.clone(), filters, 3, MapKind::Activation),
            &map_from(con.clone(), filters, 3, MapKind::Contribution),
        ).unwrap();
        let scaled = product_score_map(
            &map_from(act.iter().map(|v| v * s1).collect(), filters, 3, MapKind::Activation),
            &map_from(con.iter().map(|v| v * s2).collect(), filters, 3, MapKind::Contribution),
        ).unwrap();
        for c in 0..3 {
            // exhaustive argmax of the elementwise product
            let brute = (0..filters).fold(0, |best, f| if act[f * 3 + c] * con[f * 3 + c] > act[best * 3 + c] * con[best * 3 + c] { f } else { best });
            prop_assert_eq!(top_filters(&base, c, 1).unwrap()[0], brute);
            prop_assert_eq!(top_filters(&scaled, c, 1).unwrap()[0], brute);
        }
    }
}
