use super::*;
use crate::data::tests::toy_dataset;
use crate::data::{Dataset, PatientTrajectory, Provenance};
use crate::numerics::{finite_diff_grad, max_relative_error, RngStream};

fn tiny_config(variant: FactorVariant, dropout: f64) -> FactorModelConfig {
    FactorModelConfig {
        variant,
        d_z: 2,
        hidden_units: 4,
        head_units: 3,
        dropout,
        epochs: 3,
        batch_size: 8,
        seed: 17,
        ..Default::default()
    }
}

fn tiny_model(variant: FactorVariant, dropout: f64, ds: &Dataset) -> FactorModel {
    let (mean, std) = covariate_stats(ds);
    FactorModel::new(tiny_config(variant, dropout), ds.covariate_dim, ds.k, mean, std).unwrap()
}

fn gradient_check(variant: FactorVariant) {
    let ds = toy_dataset(&[2, 3], 2, 5);
    let mut model = tiny_model(variant, 0.3, &ds);
    // Non-zero biases everywhere so no gradient is trivially zero.
    let mut rng = RngStream::new(9);
    let flat: Vec<f64> = model.params.flatten().iter().map(|v| v + rng.normal(0.0, 0.1)).collect();
    model.params.assign_flat(&flat).unwrap();
    let refs: Vec<&PatientTrajectory> = ds.patients.iter().collect();
    let batch = SeqBatch::new(&refs, &model.x_mean, &model.x_std, ds.k);
    let masks = model.draw_masks(&batch, &[101, 202]);
    let (_, grads) = model.loss_and_grad(&model.params, &batch, Some(&masks));
    let numeric = finite_diff_grad(
        |theta| {
            let mut p = model.params.clone();
            p.assign_flat(theta).unwrap();
            model.loss(&p, &batch, Some(&masks))
        },
        &flat,
        1e-5,
    )
    .unwrap();
    let analytic = grads.flatten();
    let mut offset = 0;
    for (name, tensor) in grads.iter() {
        let n = tensor.len();
        let err = max_relative_error(&analytic[offset..offset + n], &numeric[offset..offset + n], 1e-6);
        assert!(err < 1e-5, "{variant:?} {name}: relative error {err}");
        offset += n;
    }
    assert!(analytic[..ds.covariate_dim + ds.k].iter().any(|g| g.abs() > 1e-8), "init gradient vanished");
}

#[test]
fn gradient_check_multitask_rnn() {
    gradient_check(FactorVariant::MultitaskRnn);
}

#[test]
fn gradient_check_plain_rnn() {
    gradient_check(FactorVariant::PlainRnn);
}

#[test]
fn gradient_check_multitask_mlp() {
    gradient_check(FactorVariant::MultitaskMlp);
}

#[test]
fn batching_does_not_mix_sequences() {
    let ds = toy_dataset(&[2, 5, 3], 2, 1);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.0, &ds);
    let whole = model.forward_dataset(&ds.patients, None);
    for (i, p) in ds.patients.iter().enumerate() {
        let single = model.forward_dataset(std::slice::from_ref(p), None);
        for (a, b) in single.probs[0].iter().flatten().zip(whole.probs[i].iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_never_reaches_the_loss() {
    // A short patient batched with a long one: extending the short patient's
    // raw arrays beyond its length must not change anything.
    let ds = toy_dataset(&[2, 4], 2, 3);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.2, &ds);
    let refs: Vec<&PatientTrajectory> = ds.patients.iter().collect();
    let batch = SeqBatch::new(&refs, &model.x_mean, &model.x_std, ds.k);
    let masks = model.draw_masks(&batch, &[1, 2]);
    let (l1, g1) = model.loss_and_grad(&model.params, &batch, Some(&masks));

    let mut padded = ds.patients[0].clone();
    padded.x.push(vec![99.0, -99.0]);
    padded.a.push(vec![1, 1]);
    let mut refs2 = refs.clone();
    refs2[0] = &padded;
    let mut batch2 = SeqBatch::new(&refs2, &model.x_mean, &model.x_std, ds.k);
    // Length is taken from y, so the extra covariates are never active.
    assert_eq!(batch2.lengths, batch.lengths);
    batch2.order = batch.order.clone();
    let (l2, g2) = model.loss_and_grad(&model.params, &batch2, Some(&masks));
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn substitutes_are_causal() {
    let ds = toy_dataset(&[6], 2, 4);
    for variant in [FactorVariant::MultitaskRnn, FactorVariant::MultitaskMlp] {
        let model = tiny_model(variant, 0.3, &ds);
        let base = forward_infer_z(&model, &ds.patients[0], 77).unwrap();
        for t in 0..6 {
            let mut p = ds.patients[0].clone();
            for s in t..6 {
                p.x[s] = vec![5.0, -3.0];
                p.a[s] = vec![1 - p.a[s][0], 1 - p.a[s][1]];
                p.y[s] = 123.0;
            }
            let z = forward_infer_z(&model, &p, 77).unwrap();
            for s in 0..=t {
                assert_eq!(z[s], base[s], "{variant:?}: z_{s} moved after editing steps >= {t}");
            }
        }
    }
}

#[test]
fn mlp_substitute_sees_only_previous_step() {
    let ds = toy_dataset(&[6], 2, 4);
    let model = tiny_model(FactorVariant::MultitaskMlp, 0.0, &ds);
    let base = forward_infer_z(&model, &ds.patients[0], 0).unwrap();
    let mut p = ds.patients[0].clone();
    p.x[2] = vec![4.0, 4.0];
    let z = forward_infer_z(&model, &p, 0).unwrap();
    assert_ne!(z[3], base[3]);
    assert_eq!(z[4], base[4]);
    assert_eq!(z[5], base[5]);
}

#[test]
fn zero_dropout_is_deterministic() {
    let ds = toy_dataset(&[5], 2, 2);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.0, &ds);
    let a = forward_infer_z(&model, &ds.patients[0], 1).unwrap();
    let b = forward_infer_z(&model, &ds.patients[0], 2).unwrap();
    assert_eq!(a, b);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.4, &ds);
    let a = forward_infer_z(&model, &ds.patients[0], 1).unwrap();
    let b = forward_infer_z(&model, &ds.patients[0], 2).unwrap();
    assert_ne!(a, b);
    assert!(forward_infer_z(&model, &toy_dataset(&[0], 2, 0).patients[0], 1).is_err());
}

fn zero_tensor(model: &mut FactorModel, name: &str) {
    let idx = model.params.index_of(name).unwrap();
    model.params.get_mut(idx).fill(0.0);
}

#[test]
fn zeroed_heads_give_half() {
    let ds = toy_dataset(&[4], 3, 2);
    let mut model = tiny_model(FactorVariant::MultitaskRnn, 0.2, &ds);
    for j in 0..3 {
        zero_tensor(&mut model, &format!("head{j}.out.w"));
        zero_tensor(&mut model, &format!("head{j}.out.b"));
    }
    let probs = predict_treatment_probs(&model, &ds.patients[0], 5).unwrap();
    assert!(probs.iter().flatten().all(|&p| p == 0.5));

    let mut joint = tiny_model(FactorVariant::PlainRnn, 0.2, &ds);
    zero_tensor(&mut joint, "joint.out.w");
    zero_tensor(&mut joint, "joint.out.b");
    let probs = predict_treatment_probs(&joint, &ds.patients[0], 5).unwrap();
    assert!(probs.iter().flatten().all(|&p| p == 0.5));
}

#[test]
fn heads_do_not_share_parameters() {
    let ds = toy_dataset(&[5], 3, 2);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.2, &ds);
    let base = predict_treatment_probs(&model, &ds.patients[0], 3).unwrap();
    let mut perturbed = model.clone();
    let idx = perturbed.params.index_of("head1.hidden.w").unwrap();
    perturbed.params.get_mut(idx).values_mut().iter_mut().for_each(|v| *v += 0.5);
    let moved = predict_treatment_probs(&perturbed, &ds.patients[0], 3).unwrap();
    for (b, m) in base.iter().zip(&moved) {
        assert_eq!(b[0].to_bits(), m[0].to_bits());
        assert_eq!(b[2].to_bits(), m[2].to_bits());
        assert_ne!(b[1], m[1]);
    }

    let joint = tiny_model(FactorVariant::PlainRnn, 0.2, &ds);
    let base = predict_treatment_probs(&joint, &ds.patients[0], 3).unwrap();
    let mut perturbed = joint.clone();
    let idx = perturbed.params.index_of("joint.hidden.w").unwrap();
    perturbed.params.get_mut(idx).values_mut().iter_mut().for_each(|v| *v += 0.5);
    let moved = predict_treatment_probs(&perturbed, &ds.patients[0], 3).unwrap();
    for (b, m) in base.iter().zip(&moved) {
        assert!((0..3).all(|j| b[j] != m[j]));
    }
}

#[test]
fn mc_mean_stabilises() {
    let ds = toy_dataset(&[5], 2, 6);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.3, &ds);
    let draws: Vec<f64> = (0..100)
        .map(|s| forward_infer_z(&model, &ds.patients[0], s).unwrap()[4][0])
        .collect();
    let half = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var / v.len() as f64)
    };
    let (m1, se1) = half(&draws[..50]);
    let (m2, se2) = half(&draws[50..]);
    assert!((m1 - m2).abs() < 3.0 * (se1 + se2).sqrt());
}

#[test]
fn forced_probabilities_give_all_ones() {
    let ds = toy_dataset(&[3, 4], 2, 1);
    let mut model = tiny_model(FactorVariant::MultitaskRnn, 0.0, &ds);
    for j in 0..2 {
        zero_tensor(&mut model, &format!("head{j}.out.w"));
        let idx = model.params.index_of(&format!("head{j}.out.b")).unwrap();
        model.params.get_mut(idx).fill(60.0);
    }
    let reps = sample_treatment_replicas(&model, &ds, 1, 0).unwrap();
    assert!(reps[0].iter().flatten().flatten().all(|&a| a == 1));
}

#[test]
fn replica_frequencies_match_probabilities() {
    let ds = toy_dataset(&[4, 4], 2, 8);
    let model = tiny_model(FactorVariant::MultitaskRnn, 0.0, &ds);
    let m = 500;
    let probs = model.forward_dataset(&ds.patients, None).probs;
    let reps = sample_treatment_replicas(&model, &ds, m, 3).unwrap();
    for i in 0..2 {
        for t in 0..4 {
            for j in 0..2 {
                let p = probs[i][t][j];
                let freq = reps.iter().map(|r| f64::from(r[i][t][j])).sum::<f64>() / m as f64;
                let se = (p * (1.0 - p) / m as f64).sqrt();
                assert!((freq - p).abs() < 3.0 * se + 1e-9, "p={p} freq={freq}");
            }
        }
    }
}

#[test]
fn replicas_factorise_given_fixed_masks() {
    let probs = vec![vec![vec![0.3, 0.6]]];
    let mut rng = RngStream::new(4);
    let n = 40_000;
    let mut joint = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for _ in 0..n {
        let r = infer::sample_from_probs(&probs, &mut rng);
        let (a, b) = (f64::from(r[0][0][0]), f64::from(r[0][0][1]));
        joint += a * b;
        m1 += a;
        m2 += b;
    }
    let (joint, m1, m2) = (joint / n as f64, m1 / n as f64, m2 / n as f64);
    let se = (0.18 * 0.82 / n as f64).sqrt();
    assert!((joint - m1 * m2).abs() < 4.0 * se);
}

fn fixture(n: usize, seed: u64, rule: impl Fn(&[f64], &mut RngStream) -> Vec<u8>) -> Dataset {
    let mut rng = RngStream::new(seed);
    let patients = (0..n)
        .map(|_| {
            let t_len = 6;
            let x: Vec<Vec<f64>> = (0..t_len).map(|_| vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]).collect();
            let a = x.iter().map(|row| rule(row, &mut rng)).collect();
            PatientTrajectory {
                y: vec![0.0; t_len],
                x,
                a,
                z: None,
                group: None,
            }
        })
        .collect();
    Dataset::new(patients, 2, 2, Provenance::default()).unwrap()
}

fn fit_config() -> FactorModelConfig {
    FactorModelConfig {
        d_z: 1,
        hidden_units: 8,
        head_units: 8,
        dropout: 0.1,
        epochs: 30,
        batch_size: 32,
        learning_rate: 0.01,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn coin_flip_treatments_reach_entropy() {
    let coin = |_: &[f64], rng: &mut RngStream| vec![u8::from(rng.bernoulli(0.5)), u8::from(rng.bernoulli(0.5))];
    let train = fixture(400, 1, coin);
    let val = fixture(200, 2, coin);
    let (_, log) = train_factor_model(&train, &val, &fit_config()).unwrap();
    assert!((log.best_val_loss - std::f64::consts::LN_2).abs() < 0.02, "{}", log.best_val_loss);
}

#[test]
fn deterministic_rule_is_learned() {
    let rule = |x: &[f64], rng: &mut RngStream| vec![u8::from(x[0] > 0.0), u8::from(rng.bernoulli(0.5))];
    let train = fixture(400, 3, rule);
    let val = fixture(200, 4, rule);
    let (model, _) = train_factor_model(&train, &val, &FactorModelConfig { epochs: 60, ..fit_config() }).unwrap();
    let probs = model.forward_dataset(&val.patients, None).probs;
    let mut bce = 0.0;
    let mut n = 0.0;
    for (p, traj) in probs.iter().zip(&val.patients) {
        for (pt, at) in p.iter().zip(&traj.a) {
            let q = pt[0].clamp(1e-12, 1.0 - 1e-12);
            bce -= if at[0] == 1 { q.ln() } else { (1.0 - q).ln() };
            n += 1.0;
        }
    }
    assert!(bce / n < 0.05, "head-1 BCE {}", bce / n);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let ds = toy_dataset(&[5; 30], 2, 7);
    let val = toy_dataset(&[5; 10], 2, 8);
    let cfg = tiny_config(FactorVariant::MultitaskRnn, 0.2);
    let (m1, log1) = train_factor_model(&ds, &val, &cfg).unwrap();
    let (m2, log2) = train_factor_model(&ds, &val, &cfg).unwrap();
    assert_eq!(m1.params, m2.params);
    assert_eq!(log1, log2);
    assert_eq!(log1.epochs.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.json");
    save_checkpoint(&m1, &log1, &path).unwrap();
    let (m3, log3) = load_checkpoint(&path).unwrap();
    assert_eq!(m3.params, m1.params);
    assert_eq!(log3, log1);
    assert_eq!(
        forward_infer_z(&m3, &ds.patients[0], 4).unwrap(),
        forward_infer_z(&m1, &ds.patients[0], 4).unwrap()
    );
}

#[test]
fn search_over_single_point_space() {
    let ds = toy_dataset(&[4; 20], 2, 7);
    let val = toy_dataset(&[4; 10], 2, 8);
    let space = SearchSpace {
        learning_rate: vec![0.01],
        batch_size: vec![8],
        hidden_units: vec![4],
        head_units: vec![3],
        dropout: vec![0.1],
        max_grad_norm: vec![],
    };
    let base = tiny_config(FactorVariant::MultitaskRnn, 0.1);
    let r1 = random_search(&ds, &val, &base, &space, 30, 5).unwrap();
    assert_eq!(r1.trials.len(), 1);
    let r2 = random_search(&ds, &val, &base, &space, 30, 5).unwrap();
    assert_eq!(r1.best, r2.best);
    assert_eq!(r1.model.params, r2.model.params);
}

#[test]
fn sampled_configs_are_distinct() {
    let space = SearchSpace::for_variant(FactorVariant::PlainRnn);
    let configs = sample_configs(&FactorModelConfig::default(), &space, 30, 1).unwrap();
    assert_eq!(configs.len(), 30);
    let keys: std::collections::HashSet<String> =
        configs.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
    assert_eq!(keys.len(), 30);
    assert!(configs.iter().all(|c| c.max_grad_norm.is_some()));
    assert_eq!(sample_configs(&FactorModelConfig::default(), &space, 30, 1).unwrap(), configs);
}
