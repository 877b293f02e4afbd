use fpf::masks::RegionId;
use fpf::nn::{
    analytic_receptive_field, build_model, dependency_support, parameter_count, receptive_field, Aggregation,
    Grouping, ModelConfig, NetworkParams,
};
use fpf::rgb::RgbImage;
mod common;

use common::{random_image, forward as oracle_forward_gated};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config(parts: &[RegionId], extra: usize) -> ModelConfig {
    ModelConfig {
        parts: parts.to_vec(),
        extra_blocks_per_branch: extra,
        aggregation: Aggregation::Mean,
        input_size: 32,
        width_divisor: 8,
    }
}

/// Randomizes every tensor, biases included, so no term of the oracle is trivially zero.
fn randomized(params: &NetworkParams<f64>, seed: u64) -> NetworkParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.with_data(params.as_slice().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect())
}

#[test]
fn forward_matches_layer_by_layer_oracle() {
    for extra in 0..=2 {
        let config = toy_config(&[RegionId::Mouth, RegionId::Chin], extra);
        let (net, params) = build_model::<f64>(&config, 3).unwrap();
        let params = randomized(&params, 4 + extra as u64);
        let image = random_image(32, 5);
        let stack = net.forward(&params, std::slice::from_ref(&image)).unwrap();
        let oracle = oracle_forward_gated(&params, &config, &image, None);
        assert_eq!(stack.resolution, config.map_resolution());
        for (p, o) in oracle.iter().enumerate() {
            let got = stack.map(p, 0);
            assert_eq!(got.len(), o.len());
            for (a, b) in got.iter().zip(o) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "extra={extra} part={p}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let config = ModelConfig::desk(&[RegionId::Eyes], 1, Aggregation::Mean);
    let (net, p64) = build_model::<f64>(&config, 8).unwrap();
    let p32 = p64.cast::<f32>();
    let image = random_image(96, 9);
    let a = net.forward(&p64, std::slice::from_ref(&image)).unwrap();
    let b = net.forward(&p32, std::slice::from_ref(&image)).unwrap();
    for (x, y) in a.maps[0].iter().zip(&b.maps[0]) {
        assert!((x - y).abs() < 1e-3 * (1.0 + x.abs()));
    }
}

#[test]
fn same_seed_builds_identical_params() {
    let config = ModelConfig::desk(&RegionId::ALL, 1, Aggregation::Fc);
    let (_, a) = build_model::<f32>(&config, 17).unwrap();
    let (_, b) = build_model::<f32>(&config, 17).unwrap();
    let (_, c) = build_model::<f32>(&config, 18).unwrap();
    assert_eq!(a.as_slice(), b.as_slice());
    assert_ne!(a.as_slice(), c.as_slice());
}

#[test]
fn identical_images_give_identical_maps_and_forward_is_thread_independent() {
    let config = ModelConfig::desk(&[RegionId::Nose, RegionId::Mouth], 1, Aggregation::Mean);
    let (net, params) = build_model::<f32>(&config, 2).unwrap();
    let img = random_image(96, 1);
    let batch = vec![img.clone(), img.clone(), random_image(96, 2)];
    let stack = net.forward(&params, &batch).unwrap();
    for p in 0..2 {
        assert_eq!(stack.map(p, 0), stack.map(p, 1));
        assert!(stack.map(p, 2).iter().all(|v| v.is_finite()));
    }
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = single.install(|| net.forward(&params, &batch).unwrap());
    assert_eq!(serial, stack);
}

#[test]
fn zero_map_heads_give_zero_maps() {
    let config = ModelConfig::desk(&RegionId::ALL, 0, Aggregation::Mean);
    let (net, mut params) = build_model::<f32>(&config, 11).unwrap();
    for i in 0..params.slots().len() {
        if params.slots()[i].group.starts_with("map_head") {
            params.tensor_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let stack = net.forward(&params, &[random_image(96, 3), random_image(96, 4)]).unwrap();
    assert!(stack.maps.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn wrong_image_size_is_an_input_error() {
    let config = ModelConfig::desk(&[RegionId::Nose], 0, Aggregation::Mean);
    let (net, params) = build_model::<f32>(&config, 1).unwrap();
    assert!(matches!(
        net.forward(&params, &[RgbImage::new(64, 96)]),
        Err(fpf::Error::InvalidInput(_))
    ));
}

#[test]
fn branch_perturbation_leaves_other_maps_bit_identical() {
    let config = ModelConfig::desk(&RegionId::ALL, 1, Aggregation::Mean);
    let (net, params) = build_model::<f32>(&config, 21).unwrap();
    let images = [random_image(96, 5), random_image(96, 6)];
    let base = net.forward(&params, &images).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut perturbed = params.clone();
    for i in 0..perturbed.slots().len() {
        let g = &perturbed.slots()[i].group;
        if g == "branch[nose]" || g == "map_head[nose]" {
            perturbed.tensor_mut(i).iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let after = net.forward(&perturbed, &images).unwrap();
    assert_ne!(base.maps[0], after.maps[0]);
    for p in 1..4 {
        assert_eq!(base.maps[p], after.maps[p], "part {p} changed");
    }
}

#[test]
fn map_resolutions_follow_stride_schedule() {
    for (extra, side) in [(0, 36), (1, 18), (2, 9)] {
        let config = ModelConfig::full(&RegionId::ALL, extra, Aggregation::Mean);
        assert_eq!(config.map_resolution(), (side, side));
        let net = fpf::nn::Network::new(&config).unwrap();
        assert_eq!(net.parts().len(), 4);
    }
    let nose = fpf::nn::Network::new(&ModelConfig::full(&[RegionId::Nose], 0, Aggregation::Mean)).unwrap();
    assert_eq!(nose.config().map_resolution(), (36, 36));
    let heads = nose.slots().iter().filter(|s| s.group.starts_with("map_head")).count();
    assert_eq!(heads, 2, "one weight and one bias tensor");
}

#[test]
fn desk_receptive_fields() {
    let trunk = ModelConfig::desk(&[RegionId::Mouth], 0, Aggregation::Mean);
    let deeper = ModelConfig::desk(&[RegionId::Mouth], 1, Aggregation::Mean);
    let (n0, p0) = build_model::<f64>(&trunk, 1).unwrap();
    let (n1, p1) = build_model::<f64>(&deeper, 1).unwrap();
    let rf0 = receptive_field(&n0, &p0).unwrap();
    let rf1 = receptive_field(&n1, &p1).unwrap();
    assert!(rf0.0 < 96 && rf0.1 < 96, "{rf0:?}");
    assert!(rf1.0 > rf0.0 && rf1.1 > rf0.1, "{rf1:?} vs {rf0:?}");
}

#[test]
fn full_resolution_trunk_field_matches_analytic_extent() {
    let config = ModelConfig {
        width_divisor: 8,
        ..ModelConfig::full(&[RegionId::Eyes], 0, Aggregation::Mean)
    };
    let (net, params) = build_model::<f64>(&config, 1).unwrap();
    let rf = receptive_field(&net, &params).unwrap();
    let analytic = analytic_receptive_field(&net.path_geometry());
    assert_eq!(analytic, 43);
    assert_eq!(rf, (analytic, analytic));
}

#[test]
fn zeroing_outside_support_leaves_cell_unchanged() {
    let config = ModelConfig::desk(&[RegionId::Mouth, RegionId::Eyes], 0, Aggregation::Mean);
    let (net, params) = build_model::<f64>(&config, 4).unwrap();
    let params = randomized(&params, 5);
    let (mh, mw) = config.map_resolution();
    let image = random_image(96, 6);
    let base = net.forward(&params, std::slice::from_ref(&image)).unwrap();
    for (part, cell) in [(0, (6, 6)), (1, (0, 0)), (0, (11, 3)), (1, (5, 11))] {
        let support = dependency_support(&net, &params, part, cell).unwrap().unwrap();
        let mut zeroed = image.clone();
        for r in 0..96 {
            for c in 0..96 {
                if !support.contains(r, c) {
                    zeroed.set_pixel(c, r, [0.0; 3]);
                }
            }
        }
        let after = net.forward(&params, std::slice::from_ref(&zeroed)).unwrap();
        let idx = cell.0 * mw + cell.1;
        assert_eq!(base.map(part, 0)[idx], after.map(part, 0)[idx]);
        let moved = (0..mh * mw).filter(|&i| base.map(part, 0)[i] != after.map(part, 0)[i]).count();
        assert!(moved > 0, "zeroing should affect distant cells");
    }
}

#[test]
fn pointwise_only_head_has_unit_field_under_stem_strides() {
    assert_eq!(analytic_receptive_field(&[(1, 2), (1, 2), (1, 1)]), 1);
}

#[test]
fn parameter_accounting() {
    let single = ModelConfig::full(&[RegionId::Mouth], 1, Aggregation::Mean);
    let (_, sp) = build_model::<f32>(&single, 0).unwrap();
    let (groups, single_total) = parameter_count(&sp, Grouping::Role);
    assert_eq!(groups["classifier"], 2);

    let ensemble = ModelConfig::full(&RegionId::ALL, 1, Aggregation::Ensemble);
    let (_, ep) = build_model::<f32>(&ensemble, 0).unwrap();
    let (_, ensemble_total) = parameter_count(&ep, Grouping::Role);
    assert_eq!(ensemble_total, 4 * single_total);
    assert!(ensemble_total < 20_000_000);
    let ratio = ensemble_total as f64 / 1.6e6;
    assert!((0.75..=1.25).contains(&ratio), "ensemble total {ensemble_total}");

    let combined = ModelConfig::full(&RegionId::ALL, 1, Aggregation::Fc);
    let (_, cp) = build_model::<f32>(&combined, 0).unwrap();
    let (groups, total) = parameter_count(&cp, Grouping::Exact);
    assert!(total < 20_000_000);
    assert_eq!(groups["classifier"], 5);
    assert_eq!(groups["branch[nose]"], groups["branch[chin]"]);
}
