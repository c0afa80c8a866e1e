mod common;

use common::rng;
use rand::Rng;
use ripeloc_core::augment::{AugConfig, AugStrength};
use ripeloc_core::data::Sample;
use ripeloc_core::params::{ParamKind, ParamStore};
use ripeloc_core::synth::{generate_indexed, SceneSpec};
use ripeloc_core::trainer::{
    baseline_plan, cosine_lr, make_phase_plan, sgd_step, train, OptimState, PhaseConfig, SgdConfig, TrainConfig,
};
use ripeloc_core::{build_model, Model, ModelConfig};
use ripeloc_tensor::Tensor;

#[test]
fn cosine_endpoints_and_midpoint() {
    let (lr0, lrf) = (0.002, 0.00002);
    assert_eq!(cosine_lr(lr0, lrf, 0.0, 50.0), lr0);
    assert_eq!(cosine_lr(lr0, lrf, 50.0, 50.0), lrf);
    assert!((cosine_lr(lr0, lrf, 25.0, 50.0) - (lr0 + lrf) / 2.0).abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for e in 0..=50 {
        let lr = cosine_lr(lr0, lrf, e as f64, 50.0);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn phase_plan_values_and_scaling() {
    let p = make_phase_plan(1.0);
    let summary: Vec<(f64, usize)> = p.iter().map(|c| (c.lr0, c.epochs)).collect();
    assert_eq!(summary, vec![(0.002, 50), (0.001, 80), (0.0003, 120)]);
    assert_eq!(p[0].frozen, (0..10).collect::<Vec<_>>());
    assert_eq!(p[1].frozen, vec![0, 1, 2, 3, 4]);
    assert!(p[2].frozen.is_empty());
    assert_eq!(
        p.iter().map(|c| c.aug).collect::<Vec<_>>(),
        vec![AugStrength::Heavy, AugStrength::Moderate, AugStrength::Light]
    );
    let small: Vec<usize> = make_phase_plan(0.1).iter().map(|c| c.epochs).collect();
    assert_eq!(small, vec![5, 8, 12]);
    assert_eq!(baseline_plan(1.0)[0].lr0, 0.01);
    assert_eq!(baseline_plan(1.0)[0].epochs, 300);
}

#[test]
fn invalid_phases_are_rejected() {
    let mut p = make_phase_plan(1.0)[0].clone();
    p.frozen.push(12);
    assert!(p.validate().is_err());
    let p = PhaseConfig {
        epochs: 0,
        ..make_phase_plan(1.0)[2].clone()
    };
    assert!(p.validate().is_err());
}

fn one_param_store(values: Vec<f64>, layer: usize) -> ParamStore {
    let mut s = ParamStore::new();
    let n = values.len();
    s.add("w".into(), Tensor::new(&[n], values).unwrap(), ParamKind::Weight, layer);
    s
}

#[test]
fn plain_gradient_step_without_momentum_or_decay() {
    let mut r = rng(1);
    let p0: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut s = one_param_store(p0.clone(), 0);
    let id = s.ids().next().unwrap();
    let mut st = OptimState::new(&s);
    let cfg = SgdConfig {
        momentum: 0.0,
        weight_decay: 0.0,
    };
    assert!(sgd_step(&mut s, &[(id, g.clone())], &mut st, 0.05, &cfg, &[false]));
    for k in 0..20 {
        assert_eq!(s.get(id).data()[k], p0[k] - 0.05 * g[k]);
    }
    assert_eq!((st.step, st.lr), (1, 0.05));
}

/// On f(p) = ½‖p‖² the gradient is p, so every coordinate follows the
/// linear recurrence [p, v] ← A·[p, v] with
/// v' = (1 + wd)·p + μ·v and p' = p − lr·v'.
#[test]
fn quadratic_bowl_matches_linear_recurrence() {
    let cfg = SgdConfig::default();
    let lr = 0.1;
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    let a = [[1.0 - lr * (1.0 + wd), -lr * mu], [1.0 + wd, mu]];
    let p0 = vec![1.0, -2.0, 0.5];
    let mut s = one_param_store(p0.clone(), 3);
    let id = s.ids().next().unwrap();
    let mut st = OptimState::new(&s);
    let mut m = [[1.0, 0.0], [0.0, 1.0]];
    for _ in 0..200 {
        let g = s.get(id).data().to_vec();
        sgd_step(&mut s, &[(id, g)], &mut st, lr, &cfg, &[false; 10]);
        m = [
            [a[0][0] * m[0][0] + a[0][1] * m[1][0], a[0][0] * m[0][1] + a[0][1] * m[1][1]],
            [a[1][0] * m[0][0] + a[1][1] * m[1][0], a[1][0] * m[0][1] + a[1][1] * m[1][1]],
        ];
        for k in 0..3 {
            let expect = m[0][0] * p0[k];
            assert!((s.get(id).data()[k] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let mut s = one_param_store(vec![1.0, 2.0], 0);
    let id = s.ids().next().unwrap();
    let mut st = OptimState::new(&s);
    let ok = sgd_step(&mut s, &[(id, vec![0.1, f64::NAN])], &mut st, 0.1, &SgdConfig::default(), &[false]);
    assert!(!ok);
    assert_eq!(s.get(id).data(), &[1.0, 2.0]);
    assert_eq!((st.nan_incidents, st.step), (1, 0));
    assert!(st.velocity[0].is_none());
}

#[test]
fn frozen_and_buffer_tensors_are_untouched() {
    let mut s = ParamStore::new();
    let frozen = s.add("f".into(), Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap(), ParamKind::Weight, 2);
    let live = s.add("l".into(), Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap(), ParamKind::Weight, 12);
    let buf = s.add("b".into(), Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap(), ParamKind::Buffer, 12);
    let mask: Vec<bool> = (0..25).map(|l| l < 10).collect();
    let mut st = OptimState::new(&s);
    let before = s.get(frozen).data().to_vec();
    let mut r = rng(2);
    for _ in 0..100 {
        let g = |r: &mut rand_chacha::ChaCha8Rng| (0..3).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let grads = vec![(frozen, g(&mut r)), (live, g(&mut r)), (buf, g(&mut r))];
        sgd_step(&mut s, &grads, &mut st, 0.01, &SgdConfig::default(), &mask);
    }
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(s.get(frozen).data()), bits(&before));
    assert_eq!(bits(s.get(buf).data()), bits(&before));
    assert_ne!(s.get(live).data(), &before[..]);
    assert!(st.velocity[frozen.index()].is_none());
}

fn tiny_set(n: u64, seed: u64) -> Vec<Sample> {
    let spec = SceneSpec {
        image_size: 64,
        ..SceneSpec::default()
    };
    (0..n).map(|i| generate_indexed(&spec, seed, i).unwrap().sample).collect()
}

fn tiny_model() -> Model {
    build_model(&ModelConfig::new(0.125, 2, 64), 3).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        seed: 5,
        val_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn phases_unfreeze_progressively_and_log_every_epoch() {
    let data = tiny_set(8, 1);
    let refs: Vec<&Sample> = data.iter().collect();
    let mut m = tiny_model();
    let plan: Vec<PhaseConfig> = make_phase_plan(0.02);
    let log = train(&mut m, &refs[..6], &refs[6..], &plan, &tiny_cfg(), None).unwrap();
    assert_eq!(plan.iter().map(|p| p.epochs).collect::<Vec<_>>(), vec![1, 2, 2]);
    let t = &log.trainable;
    assert!(t[0] < t[1] && t[1] < t[2], "{t:?}");
    assert_eq!(t[2], m.count_params());
    assert_eq!(log.rows.len(), 5);
    assert!(log.rows.iter().all(|r| r.val_map50.is_some() && r.box_loss.is_finite()));
    // The learning rate restarts at each phase boundary.
    assert_eq!(log.rows.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 2, 2, 3, 3]);
    let csv = log.to_csv();
    assert!(csv.starts_with("phase,epoch,lr,box_loss,cls_loss,dfl_loss,val_map50,val_map5095\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn frozen_backbone_is_bit_identical_after_training() {
    let data = tiny_set(6, 2);
    let refs: Vec<&Sample> = data.iter().collect();
    let mut m = tiny_model();
    let snap = |m: &Model| -> Vec<(usize, Vec<u64>)> {
        m.store
            .entries()
            .iter()
            .filter(|e| e.layer < 10)
            .map(|e| (e.layer, e.tensor.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    let before = snap(&m);
    let plan = vec![PhaseConfig {
        frozen: (0..10).collect(),
        lr0: 0.01,
        epochs: 2,
        aug: AugStrength::Heavy,
    }];
    let cfg = TrainConfig {
        val_every: 0,
        ..tiny_cfg()
    };
    train(&mut m, &refs, &[], &plan, &cfg, None).unwrap();
    assert_eq!(snap(&m), before);
    let head = m.store.entries().iter().find(|e| e.layer == 24 && e.kind == ParamKind::Weight).unwrap();
    let fresh = tiny_model();
    let orig = fresh.store.entries().iter().find(|e| e.name == head.name).unwrap();
    assert_ne!(head.tensor.data(), orig.tensor.data());
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let data = tiny_set(6, 3);
    let refs: Vec<&Sample> = data.iter().collect();
    let plan = baseline_plan(0.01);
    let cfg = TrainConfig {
        val_every: 0,
        ..tiny_cfg()
    };
    let run = || {
        let mut m = tiny_model();
        let log = train(&mut m, &refs, &[], &plan, &cfg, None).unwrap();
        let bits: Vec<u64> = m.store.entries().iter().flat_map(|e| e.tensor.data().iter().map(|x| x.to_bits())).collect();
        (log, bits)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let other = TrainConfig { seed: 6, ..cfg.clone() };
    let mut m = tiny_model();
    let c = train(&mut m, &refs, &[], &plan, &other, None).unwrap();
    assert_ne!(c.rows[0].box_loss, a.0.rows[0].box_loss);
}

#[test]
fn empty_or_bad_inputs_are_rejected() {
    let mut m = tiny_model();
    let plan = baseline_plan(0.01);
    assert!(train(&mut m, &[], &[], &plan, &tiny_cfg(), None).is_err());
    let data = tiny_set(4, 4);
    let refs: Vec<&Sample> = data.iter().collect();
    let cfg = TrainConfig {
        batch_size: 1,
        ..tiny_cfg()
    };
    assert!(train(&mut m, &refs, &[], &plan, &cfg, None).is_err());
    let cfg = TrainConfig {
        aug: AugConfig {
            flip_p: 2.0,
            ..AugConfig::greenhouse()
        },
        ..tiny_cfg()
    };
    assert!(train(&mut m, &refs, &[], &plan, &cfg, None).is_err());
}
