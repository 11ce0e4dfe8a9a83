use super::*;
use crate::datasets::{make_synthetic, SyntheticConfig};
use crate::model::{Architecture, UnifAISpec};
use crate::nn::ParamStore;

fn synthetic(n: usize, seed: u64) -> LabeledDataset {
    make_synthetic(&SyntheticConfig {
        n,
        signal_dim: 3,
        nuisance_dim: 3,
        num_y_classes: 3,
        num_z_classes: 2,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn model(variant: Variant, seed: u64) -> UnifAIModel {
    let arch = Architecture {
        enc_hidden: vec![5],
        dz_hidden: vec![4],
        ..Architecture::default()
    };
    UnifAIModel::build(UnifAISpec::from_architecture(variant, 6, 2, 3, 3, 2, &arch), seed).unwrap()
}

fn full_weights() -> LossWeights {
    LossWeights {
        alpha: 1.0,
        beta: 0.5,
        gamma: 1.0,
        delta: 0.7,
    }
}

fn snapshot(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn uniform_targets_range_mean_and_determinism() {
    let t = sample_uniform_targets(100, 1000, &mut SeedRng::new(1)).unwrap();
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let mean = t.sum() / t.len() as f64;
    assert!(mean.abs() <= 0.01, "mean {mean}");
    assert_eq!(t, sample_uniform_targets(100, 1000, &mut SeedRng::new(1)).unwrap());
}

#[test]
fn random_z_sampling() {
    let single = EmpiricalZDistribution::from_labels(&[1, 1, 1], 3).unwrap();
    assert!(sample_random_z(&single, 500, &mut SeedRng::new(0)).unwrap().iter().all(|&z| z == 1));

    let half = EmpiricalZDistribution::from_labels(&[0, 1], 2).unwrap();
    let draws = sample_random_z(&half, 100_000, &mut SeedRng::new(5)).unwrap();
    let frac = draws.iter().filter(|&&z| z == 0).count() as f64 / 1e5;
    assert!((frac - 0.5).abs() <= 0.01, "{frac}");
    assert_eq!(draws, sample_random_z(&half, 100_000, &mut SeedRng::new(5)).unwrap());

    let empty = EmpiricalZDistribution {
        counts: vec![],
        probs: vec![],
    };
    assert!(matches!(sample_random_z(&empty, 1, &mut SeedRng::new(0)), Err(Error::Contract(_))));
    assert!(EmpiricalZDistribution::from_labels(&[], 2).is_err());
}

#[test]
fn weight_validation() {
    let w = full_weights();
    assert!(w.validate(Variant::Full).is_ok());
    assert!(w.validate(Variant::NoDz).is_err());
    assert!(w.for_variant(Variant::NoDz).validate(Variant::NoDz).is_ok());
    assert_eq!(w.for_variant(Variant::B0).beta, 0.0);
    let neg = LossWeights { alpha: -1.0, ..w };
    assert!(matches!(neg.validate(Variant::Full), Err(Error::Parameter(_))));
    let nan = LossWeights { beta: f64::NAN, ..w };
    assert!(nan.validate(Variant::Full).is_err());
}

/// Hand-set model whose adversaries recover their targets exactly.
fn oracle_model() -> (UnifAIModel, Batch) {
    let arch = Architecture {
        enc_hidden: vec![],
        dz_hidden: vec![],
        ..Architecture::default()
    };
    let spec = UnifAISpec::from_architecture(Variant::Full, 2, 1, 1, 2, 2, &arch);
    let mut m = UnifAIModel::build(spec, 0).unwrap();
    let set = |m: &mut UnifAIModel, name: &str, v: &[f64]| {
        m.params_mut().by_name_mut(name).unwrap().value.data_mut().copy_from_slice(v)
    };
    set(&mut m, "enc.layer0.weight", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut m, "enc.layer0.bias", &[0.0, 0.0]);
    set(&mut m, "dis1.layer0.weight", &[1.0]);
    set(&mut m, "dis1.layer0.bias", &[0.0]);
    set(&mut m, "dis2.layer0.weight", &[1.0]);
    set(&mut m, "dis2.layer0.bias", &[0.0]);
    set(&mut m, "dz.layer0.weight", &[-80.0, 80.0]);
    set(&mut m, "dz.layer0.bias", &[0.0, 0.0]);
    // equal columns make e1 == e2; z marks the sign of e1
    let xs = [1.0, -1.5, 2.0, -0.8];
    let x = Tensor::matrix(4, 2, xs.iter().flat_map(|&v| [v, v]).collect()).unwrap();
    let z = xs.iter().map(|&v| usize::from(v > 0.0)).collect();
    let batch = Batch {
        x,
        y: vec![0, 1, 0, 1],
        z: Some(z),
    };
    (m, batch)
}

#[test]
fn m2_loss_vanishes_for_perfect_adversaries() {
    let (m, batch) = oracle_model();
    let l = m2_loss(&m, &batch, &full_weights()).unwrap();
    assert_eq!(l.components.dis1, Some(0.0));
    assert_eq!(l.components.dis2, Some(0.0));
    assert!(l.components.z.unwrap() < 1e-20);
    assert!(l.components.pred.is_none() && l.components.dec.is_none());
}

#[test]
fn m2_loss_zero_weights() {
    let (m, batch) = oracle_model();
    let w = LossWeights {
        gamma: 0.0,
        delta: 0.0,
        ..full_weights()
    };
    assert_eq!(m2_loss(&m, &batch, &w).unwrap().total, 0.0);
}

#[test]
fn m2_loss_requires_z_when_delta_positive() {
    let (m, mut batch) = oracle_model();
    batch.z = None;
    assert!(matches!(m2_loss(&m, &batch, &full_weights()), Err(Error::Contract(_))));
    let b0 = model(Variant::B0, 1);
    let d = synthetic(8, 0);
    let b = d.batch(&[0, 1]).unwrap();
    assert!(matches!(m2_loss(&b0, &b, &LossWeights::default()), Err(Error::UnsupportedVariant { .. })));
}

#[test]
fn components_recombine_to_total() {
    let d = synthetic(32, 1);
    let b = d.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    let m = model(Variant::Full, 2);
    let w = full_weights();
    let dist = EmpiricalZDistribution::from_labels(d.z.as_ref().unwrap(), 2).unwrap();
    let l2 = m2_loss(&m, &b, &w).unwrap();
    assert!((l2.total - l2.components.weighted_total(&w)).abs() <= 1e-10);
    let l1 = m1_loss(&m, &b, &w, Some(&dist), &mut SeedRng::new(3)).unwrap();
    assert!((l1.total - l1.components.weighted_total(&w)).abs() <= 1e-10);
    assert!(l1.components.pred.is_some() && l1.components.z.is_some());
}

#[test]
fn m1_loss_for_baselines() {
    let d = synthetic(16, 4);
    let b = d.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let w = LossWeights {
        alpha: 2.0,
        beta: 0.3,
        gamma: 0.0,
        delta: 0.0,
    };

    let b0 = model(Variant::B0, 5);
    let w0 = w.for_variant(Variant::B0);
    let l = m1_loss(&b0, &b, &w0, None, &mut SeedRng::new(0)).unwrap();
    let probs = b0.predict(&b.x).unwrap();
    let ce = crate::nn::cross_entropy(&probs, &b.y).unwrap();
    assert!((l.total - 2.0 * ce).abs() <= 1e-12);
    assert!(l.components.dec.is_none());

    let b1 = model(Variant::B1, 5);
    let l = m1_loss(&b1, &b, &w, None, &mut SeedRng::new(9)).unwrap();
    let ce = crate::nn::cross_entropy(&b1.predict(&b.x).unwrap(), &b.y).unwrap();
    let recon = b1.reconstruct(&b.x, &mut SeedRng::new(9), true).unwrap();
    let mse = crate::nn::mse(&recon, &b.x).unwrap();
    assert!((l.total - (2.0 * ce + 0.3 * mse)).abs() <= 1e-12);
}

#[test]
fn m1_gradients_match_finite_differences_and_skip_m2() {
    let d = synthetic(4, 6);
    let b = d.batch(&[0, 1, 2, 3]).unwrap();
    let mut m = model(Variant::Full, 7);
    let w = full_weights();
    let dist = EmpiricalZDistribution::from_labels(d.z.as_ref().unwrap(), 2).unwrap();
    let loss_at = |m: &UnifAIModel| m1_loss(m, &b, &w, Some(&dist), &mut SeedRng::new(11)).unwrap().total;

    let l = m1_loss(&m, &b, &w, Some(&dist), &mut SeedRng::new(11)).unwrap();
    m.params_mut().zero_grads();
    l.tape.backward(l.loss, m.params_mut()).unwrap();

    let h = 1e-5;
    for id in m.params().ids().collect::<Vec<_>>() {
        let p = m.params().get(id);
        let (name, grad) = (p.name.clone(), p.grad.clone());
        if UnifAIModel::player_of(&name) == Player::M2 {
            assert!(grad.data().iter().all(|&g| g == 0.0), "{name} received a gradient");
            continue;
        }
        for i in 0..grad.len() {
            let orig = m.params().get(id).value.data()[i];
            m.params_mut().get_mut(id).value.data_mut()[i] = orig + h;
            let up = loss_at(&m);
            m.params_mut().get_mut(id).value.data_mut()[i] = orig - h;
            let down = loss_at(&m);
            m.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {analytic}, numeric {numeric}");
        }
    }
}

#[test]
fn m2_gradients_skip_m1() {
    let d = synthetic(8, 6);
    let b = d.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut m = model(Variant::Full, 7);
    let l = m2_loss(&m, &b, &full_weights()).unwrap();
    l.tape.backward(l.loss, m.params_mut()).unwrap();
    for (_, p) in m.params().iter() {
        let any = p.grad.data().iter().any(|&g| g != 0.0);
        assert_eq!(any, UnifAIModel::player_of(&p.name) == Player::M2, "{}", p.name);
    }
}

fn small_schedule(epochs: usize) -> ScheduleConfig {
    ScheduleConfig {
        epochs,
        batch_size: 16,
        ..ScheduleConfig::default()
    }
}

#[test]
fn schedule_ratio_and_freezing() {
    let d = synthetic(100, 8);
    let mut m = model(Variant::Full, 9);
    let w = full_weights();
    let mut last = snapshot(m.params());
    let mut violations = Vec::new();
    let trace = train_observed(&mut m, &d, &w, &small_schedule(2), &mut SeedRng::new(1), &mut |rec, model| {
        let now = snapshot(model.params());
        for (before, after) in last.iter().zip(&now) {
            let other = match rec.phase {
                Phase::M1 => Player::M2,
                Phase::M2 => Player::M1,
            };
            if UnifAIModel::player_of(&before.0) == other && before.1 != after.1 {
                violations.push(format!("{:?} step {} changed {}", rec.phase, rec.step, before.0));
            }
        }
        last = now;
    })
    .unwrap();
    assert!(violations.is_empty(), "{violations:?}");
    for epoch in 0..2 {
        let m1 = trace.records.iter().filter(|r| r.epoch == epoch && r.phase == Phase::M1).count();
        let m2 = trace.records.iter().filter(|r| r.epoch == epoch && r.phase == Phase::M2).count();
        assert_eq!(m1, 7);
        assert_eq!(m2, 5 * m1);
    }
    // each M1 record is preceded by exactly five M2 records
    let phases: Vec<Phase> = trace.records.iter().map(|r| r.phase).collect();
    for chunk in phases.chunks(6) {
        assert_eq!(chunk, [Phase::M2, Phase::M2, Phase::M2, Phase::M2, Phase::M2, Phase::M1]);
    }
    for r in &trace.records {
        assert!((r.total - r.components.weighted_total(&w)).abs() <= 1e-10);
    }
}

#[test]
fn baselines_have_only_m1_records() {
    let d = synthetic(50, 2);
    for v in [Variant::B0, Variant::B1] {
        let mut m = model(v, 3);
        let w = full_weights().for_variant(v);
        let trace = train(&mut m, &d, &w, &small_schedule(1), &mut SeedRng::new(0)).unwrap();
        assert_eq!(trace.count(Phase::M2), 0);
        assert_eq!(trace.count(Phase::M1), 4);
    }
}

#[test]
fn training_is_deterministic() {
    let d = synthetic(64, 3);
    let run = || {
        let mut m = model(Variant::Full, 4);
        let t = train(&mut m, &d, &full_weights(), &small_schedule(2), &mut SeedRng::new(77)).unwrap();
        (snapshot(m.params()), t.to_jsonl())
    };
    assert_eq!(run(), run());
}

#[test]
fn m2_loss_decreases_on_a_fixed_batch() {
    let d = synthetic(64, 5);
    let b = d.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    for variant in [Variant::NoDz, Variant::Full] {
        let mut m = model(variant, 6);
        let w = full_weights().for_variant(variant);
        let ids = m.player_params(Player::M2);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), m.params(), &ids);
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let l = m2_loss(&m, &b, &w).unwrap();
            assert!(l.total <= prev + 1e-12 * prev.abs().max(1.0), "{variant} step {step}: {} > {prev}", l.total);
            prev = l.total;
            l.tape.backward(l.loss, m.params_mut()).unwrap();
            opt.apply(m.params_mut(), &ids).unwrap();
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let d = synthetic(10, 0);
    let mut m = model(Variant::Full, 0);
    let bad = ScheduleConfig {
        k: 0,
        ..ScheduleConfig::default()
    };
    assert!(train(&mut m, &d, &full_weights(), &bad, &mut SeedRng::new(0)).is_err());
    let narrow = d.subset(&[0, 1]).unwrap();
    let mut wide = model(Variant::B0, 0);
    let mut spec = wide.spec().clone();
    spec.input_dim = 7;
    spec.enc.layer_widths[0] = 7;
    wide = UnifAIModel::build(spec, 0).unwrap();
    assert!(matches!(
        train(&mut wide, &narrow, &LossWeights::default().for_variant(Variant::B0), &small_schedule(1), &mut SeedRng::new(0)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn non_finite_loss_is_a_numerical_failure() {
    let mut d = synthetic(10, 0);
    d.features.data_mut()[0] = f64::NAN;
    let mut m = model(Variant::B1, 0);
    let err = train(&mut m, &d, &full_weights().for_variant(Variant::B1), &small_schedule(1), &mut SeedRng::new(0))
        .unwrap_err();
    assert!(matches!(err, Error::NumericalFailure(_)), "{err}");
}

#[test]
fn trace_lines_parse_back() {
    let d = synthetic(20, 0);
    let mut m = model(Variant::NoDz, 0);
    let t = train(&mut m, &d, &full_weights().for_variant(Variant::NoDz), &small_schedule(1), &mut SeedRng::new(0))
        .unwrap();
    let parsed: Vec<TraceRecord> = t
        .to_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, t.records);
}
