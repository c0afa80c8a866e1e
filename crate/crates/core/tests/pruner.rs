mod common;

use common::{randn, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use ripeloc_core::model::{build_model, HeadKind, Model, ModelConfig, NeckKind};
use ripeloc_core::pruner::{prunable_groups, prune, prune_selected, rank_channels, MIN_CHANNELS};
use ripeloc_core::weights::{read_container, write_container};
use ripeloc_tensor::Tensor;

fn nano() -> Model {
    build_model(&ModelConfig::new(0.25, 2, 640), 0).unwrap()
}

fn small(cfg: ModelConfig) -> Model {
    build_model(&cfg, 4).unwrap()
}

/// Gives every BatchNorm scale a random magnitude, as after training.
fn randomise_gammas(m: &mut Model, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = m.store.ids().filter(|&id| m.store.entry(id).name.ends_with("bn.weight")).collect();
    for id in ids {
        for v in m.store.get_mut(id).data_mut() {
            *v = r.random_range(0.01..1.5) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}

#[test]
fn ranking_orders_by_gamma_magnitude() {
    let mut m = small(ModelConfig::new(0.125, 2, 64));
    let groups = prunable_groups(&m);
    let g0 = &groups[0];
    let n = g0.width;
    assert!(n >= 3);
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.entry(id).name.ends_with("bn.weight") {
            m.store.get_mut(id).data_mut().fill(5.0);
        }
    }
    let g = m.store.get_mut(g0.gamma).data_mut();
    g[0] = 0.5;
    g[1] = -0.01;
    g[2] = 0.3;
    let ranked = rank_channels(&m);
    let first: Vec<usize> = ranked.iter().take(3).map(|r| r.channel).collect();
    assert_eq!(first, vec![1, 2, 0]);
    // Equal magnitudes fall back to (layer, group, channel).
    let rest = &ranked[3..];
    for w in rest.windows(2) {
        if w[0].gamma_abs == w[1].gamma_abs {
            assert!((w[0].layer, w[0].group, w[0].channel) < (w[1].layer, w[1].group, w[1].channel));
        }
    }
}

#[test]
fn ranking_equals_sort_oracle() {
    let mut m = nano();
    randomise_gammas(&mut m, 1);
    let groups = prunable_groups(&m);
    let mut oracle = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for (c, &v) in m.store.get(g.gamma).data().iter().enumerate() {
            oracle.push((v.abs(), g.layer, gi, c));
        }
    }
    oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let got: Vec<_> = rank_channels(&m).iter().map(|r| (r.gamma_abs, r.layer, r.group, r.channel)).collect();
    assert_eq!(got, oracle);
}

/// Pruned forward output equals the original when the removed channels
/// already had γ = β = 0.
fn assert_zeroed_removal_is_exact(cfg: ModelConfig, seed: u64) {
    let mut m = small(cfg);
    randomise_gammas(&mut m, seed);
    let mut r = rng(seed);
    // Non-trivial running statistics.
    let ids: Vec<_> = m.store.ids().collect();
    for &id in &ids {
        let name = m.store.entry(id).name.clone();
        if name.ends_with("running_mean") || name.ends_with("bn.bias") {
            for v in m.store.get_mut(id).data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        } else if name.ends_with("running_var") {
            for v in m.store.get_mut(id).data_mut() {
                *v = r.random_range(0.5..2.0);
            }
        }
    }
    let groups = prunable_groups(&m);
    let mut remove = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let room = g.width.saturating_sub(MIN_CHANNELS);
        let k = r.random_range(0..=room);
        let mut chans: Vec<usize> = (0..g.width).collect();
        chans.shuffle(&mut r);
        for &c in &chans[..k] {
            remove.push((gi, c));
            let beta = m.store.find(&m.store.entry(g.gamma).name.replace("bn.weight", "bn.bias")).unwrap();
            m.store.get_mut(g.gamma).data_mut()[c] = 0.0;
            m.store.get_mut(beta).data_mut()[c] = 0.0;
        }
    }
    assert!(remove.len() > 20);
    let x = randn(&[2, 3, m.config.input_size, m.config.input_size], &mut r);
    let before = m.predict(x.clone()).unwrap();
    let p0 = m.count_params();
    prune_selected(&mut m, &remove).unwrap();
    assert!(m.count_params() < p0);
    let after = m.predict(x).unwrap();
    for (a, b) in before.iter().zip(&after) {
        for (t, u) in [(&a.cls, &b.cls), (&a.reg, &b.reg)] {
            assert_eq!(t.shape(), u.shape());
            let d = t.data().iter().zip(u.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-6, "max deviation {d}");
        }
    }
}

#[test]
fn removing_zeroed_channels_preserves_outputs() {
    assert_zeroed_removal_is_exact(ModelConfig::new(0.125, 2, 64), 2);
    assert_zeroed_removal_is_exact(ModelConfig::new(0.25, 2, 64), 3);
}

#[test]
fn removal_is_exact_for_dense_neck_and_decoupled_head() {
    let cfg = ModelConfig {
        neck: NeckKind::Dense,
        head: HeadKind::Decoupled,
        ..ModelConfig::new(0.125, 2, 64)
    };
    assert_zeroed_removal_is_exact(cfg, 5);
}

#[test]
fn thirty_percent_removes_enough_channels_and_parameters() {
    let mut m = nano();
    randomise_gammas(&mut m, 6);
    let rep = prune(&mut m, 0.30).unwrap();
    assert!(rep.ratio_achieved >= 0.28, "{}", rep.ratio_achieved);
    assert!((rep.ratio_achieved - 0.30).abs() <= 0.02);
    assert!(rep.params_ratio() <= 0.85, "params ratio {}", rep.params_ratio());
    eprintln!("nano 30%: params ratio {:.3}, channels {}/{}", rep.params_ratio(), rep.channels_removed, rep.channels_before);
    assert_eq!(rep.params_after, m.count_params());
    for g in &rep.groups {
        assert!(g.kept.windows(2).all(|w| w[0] < w[1]));
        assert!(g.kept.len() >= MIN_CHANNELS.min(g.width_before));
    }
    m.check_structure().unwrap();
    let js = serde_json::to_string(&rep).unwrap();
    assert!(js.contains("\"ratio_achieved\""));
}

#[test]
fn parameter_count_falls_strictly_with_ratio() {
    let mut base = nano();
    randomise_gammas(&mut base, 7);
    let mut prev = base.count_params();
    for ratio in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let mut m = base.clone();
        let rep = prune(&mut m, ratio).unwrap();
        assert!(rep.params_after < prev, "ratio {ratio}");
        prev = rep.params_after;
    }
}

#[test]
fn floor_is_applied_and_reported() {
    let mut m = small(ModelConfig::new(0.125, 2, 64));
    randomise_gammas(&mut m, 8);
    let rep = prune(&mut m, 0.95).unwrap();
    assert!(!rep.floored.is_empty());
    assert!(rep.ratio_achieved < 0.95);
    assert!(rep.groups.iter().all(|g| g.kept.len() >= MIN_CHANNELS.min(g.width_before)));
    m.check_structure().unwrap();
    let x = Tensor::zeros(&[2, 3, 64, 64]);
    assert!(m.predict(x).unwrap().iter().all(|s| s.cls.data().iter().all(|v| v.is_finite())));
}

#[test]
fn zero_ratio_is_a_no_op_and_bad_ratios_fail() {
    let mut m = small(ModelConfig::new(0.125, 2, 64));
    let p = m.count_params();
    let rep = prune(&mut m, 0.0).unwrap();
    assert_eq!((rep.params_after, rep.channels_removed), (p, 0));
    assert!(prune(&mut m, 1.0).is_err());
    assert!(prune(&mut m, -0.1).is_err());
    let g = prunable_groups(&m);
    let too_many: Vec<(usize, usize)> = (0..g[0].width).map(|c| (0, c)).collect();
    assert!(prune_selected(&mut m, &too_many).is_err());
}

#[test]
fn pruned_model_round_trips_through_weight_file() {
    let mut m = small(ModelConfig::new(0.125, 2, 64));
    randomise_gammas(&mut m, 9);
    prune(&mut m, 0.3).unwrap();
    let mut buf = Vec::new();
    write_container(&mut buf, &m.to_named_tensors().unwrap()).unwrap();
    let mut back = Model::from_named_tensors(&read_container(&mut buf.as_slice()).unwrap()).unwrap();
    assert_eq!(back.count_params(), m.count_params());
    let x = randn(&[2, 3, 64, 64], &mut rng(10));
    let (a, b) = (m.predict(x.clone()).unwrap(), back.predict(x).unwrap());
    for (p, q) in a.iter().zip(&b) {
        let d = p.cls.data().iter().zip(q.cls.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(d < 1e-3);
    }
}
