mod common;

use std::collections::HashMap;

use cceplus::data::Bag;
use cceplus::evaluation::{evaluate_accuracy, predict_instances};
use cceplus::losses::LossKind;
use cceplus::models::{Checkpoint, CnnArch, CnnModel, Parameterized, VaeArch, VaeModel};
use cceplus::training::{
    examples_from_bags, train_classifier, train_classifier_session, train_vae, train_vae_session,
    OptimizerConfig, Session, TrainRunSpec,
};
use cceplus::Error;

/// Bags whose label is the true label of every member.
fn clean_bags(n: usize, bag_size: usize) -> Vec<Bag> {
    let ids: Vec<usize> = (0..n).collect();
    let mut bags = Vec::new();
    for class in 0..10 {
        let members: Vec<usize> = ids.iter().copied().filter(|i| i % 10 == class).collect();
        for chunk in members.chunks(bag_size) {
            bags.push(Bag {
                instance_ids: chunk.to_vec(),
                bag_label: class,
                matching_count: chunk.len(),
            });
        }
    }
    bags
}

fn adam_spec(epochs: usize, batch: usize, seed: u64) -> TrainRunSpec {
    TrainRunSpec::new(epochs, batch, seed, OptimizerConfig::adam())
}

#[test]
fn classifier_memorizes_a_clean_toy_set() {
    let pool = common::glyph_pool(20, 1);
    let bags = clean_bags(20, 2);
    let model = CnnModel::new(CnnArch::mnist_half(), 3).unwrap();
    let (model, history) =
        train_classifier(&pool, &bags, None, None, model, &adam_spec(50, 4, 5)).unwrap();
    assert_eq!(history.len(), 50);
    let acc = evaluate_accuracy(&model, &pool.instances).unwrap();
    assert_eq!(acc, 1.0, "final loss {}", history.last().unwrap().train_loss);
}

#[test]
fn vae_overfits_ten_images() {
    let pool = common::glyph_pool(10, 2);
    let model = VaeModel::new(VaeArch::mnist_half(), 4).unwrap();
    let (model, history) = train_vae(&pool, model, &adam_spec(200, 2, 6)).unwrap();
    let x = pool.batch(&(0..10).collect::<Vec<_>>()).unwrap();
    let codes = model.encode(&x, 0, false).unwrap();
    let recon = model.decode(&codes).unwrap();
    let mae = recon.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
    assert!(mae < 0.1, "reconstruction MAE {mae}");
    assert!(history.last().unwrap().total < history[0].total);
}

#[test]
fn vae_training_improves_and_is_deterministic() {
    let pool = common::glyph_pool(40, 3);
    let spec = adam_spec(4, 8, 7);
    let run = || train_vae(&pool, VaeModel::new(VaeArch::mnist_half(), 1).unwrap(), &spec).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert!(ha.last().unwrap().total <= ha[0].total * 1.01);
    let strip = |h: &[cceplus::training::VaeEpoch]| -> Vec<(f64, f64, f64, f64)> {
        h.iter().map(|e| (e.total, e.reconstruction, e.kl, e.lr_eff)).collect()
    };
    assert_eq!(strip(&ha), strip(&hb));
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_is_rejected() {
    let pool = common::glyph_pool(10, 4);
    let err = train_vae(&pool, VaeModel::new(VaeArch::mnist_half(), 1).unwrap(), &adam_spec(0, 2, 1)).unwrap_err();
    assert!(matches!(err, Error::Parameter(_)));
}

#[test]
fn resume_continues_where_it_stopped() {
    let pool = common::glyph_pool(30, 5);
    let bags = clean_bags(30, 3);
    let mut spec = TrainRunSpec::new(3, 8, 9, OptimizerConfig::sgd_exp_decay());
    spec.optimizer.learning_rate = 0.05;
    let examples = examples_from_bags(&bags, None, LossKind::Cce).unwrap();
    let fresh = || Session::new(CnnModel::new(CnnArch::mnist_half(), 2).unwrap(), &spec, examples.len()).unwrap();

    let mut straight = fresh();
    let full = train_classifier_session(&pool, &examples, None, &mut straight, &spec, &mut |_, _| Ok(())).unwrap();

    let mut first = fresh();
    let two = TrainRunSpec { epochs: 2, ..spec.clone() };
    train_classifier_session(&pool, &examples, None, &mut first, &two, &mut |_, _| Ok(())).unwrap();
    let mut bytes = Vec::new();
    first.checkpoint("h").write_to(&mut bytes).unwrap();
    let restored = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let mut resumed = Session::<CnnModel>::resume(&restored).unwrap();
    assert_eq!(resumed.epochs_done, 2);
    assert_eq!(resumed.optimizer.step_count, first.optimizer.step_count);
    let tail = train_classifier_session(&pool, &examples, None, &mut resumed, &spec, &mut |_, _| Ok(())).unwrap();

    assert_eq!(tail.len(), 1);
    assert_eq!(tail[0].metrics(), full[2].metrics());
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.optimizer.step_count, 3 * 4);
}

#[test]
fn vae_resume_matches_uninterrupted_training() {
    let pool = common::glyph_pool(12, 6);
    let spec = adam_spec(2, 4, 3);
    let fresh = || Session::new(VaeModel::new(VaeArch::mnist_half(), 8).unwrap(), &spec, pool.len()).unwrap();
    let mut straight = fresh();
    train_vae_session(&pool, &mut straight, &spec, &mut |_, _| Ok(())).unwrap();

    let mut first = fresh();
    train_vae_session(&pool, &mut first, &TrainRunSpec { epochs: 1, ..spec.clone() }, &mut |_, _| Ok(())).unwrap();
    let mut resumed = Session::<VaeModel>::resume(&first.checkpoint("h")).unwrap();
    train_vae_session(&pool, &mut resumed, &spec, &mut |_, _| Ok(())).unwrap();
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn divergence_restores_the_last_good_state() {
    let pool = common::glyph_pool(20, 7);
    let bags = clean_bags(20, 5);
    let mut spec = TrainRunSpec::new(3, 5, 1, OptimizerConfig::sgd_exp_decay());
    spec.optimizer.learning_rate = 1e300;
    spec.clip_norm = None;
    let examples = examples_from_bags(&bags, None, LossKind::Cce).unwrap();
    let mut session = Session::new(CnnModel::new(CnnArch::mnist_half(), 2).unwrap(), &spec, examples.len()).unwrap();
    let before = session.clone();
    let err = train_classifier_session(&pool, &examples, None, &mut session, &spec, &mut |_, _| Ok(())).unwrap_err();
    match err {
        Error::Diverged { epoch, .. } => assert_eq!(epoch, session.epochs_done + 1),
        other => panic!("expected divergence, got {other}"),
    }
    if session.epochs_done == 0 {
        assert_eq!(session.model, before.model);
        assert_eq!(session.optimizer, before.optimizer);
    }
    assert!(session.model.param_views().iter().all(|p| p.values.iter().all(|v| v.is_finite())));
}

#[test]
fn cce_plus_requires_cluster_classes() {
    let pool = common::glyph_pool(20, 8);
    let bags = clean_bags(20, 5);
    let model = CnnModel::new(CnnArch::mnist_half(), 2).unwrap();
    let mut spec = adam_spec(1, 5, 1);
    spec.loss = LossKind::CcePlus { alpha: 0.5 };
    let err = train_classifier(&pool, &bags, None, None, model.clone(), &spec).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let partial: HashMap<usize, usize> = (0..10).map(|i| (i, i % 10)).collect();
    let err = train_classifier(&pool, &bags, Some(&partial), None, model, &spec).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn log_records_both_components_and_alpha_zero_ignores_weak_labels() {
    let pool = common::glyph_pool(20, 9);
    let bags = clean_bags(20, 5);
    // Cluster-classes shifted by one so the two terms differ.
    let yh: HashMap<usize, usize> = (0..20).map(|i| (i, (i + 1) % 10)).collect();
    let model = CnnModel::new(CnnArch::mnist_half(), 2).unwrap();
    for alpha in [0.5, 0.0] {
        let mut spec = adam_spec(2, 5, 1);
        spec.loss = LossKind::CcePlus { alpha };
        let (_, history) =
            train_classifier(&pool, &bags, Some(&yh), Some(&pool.instances), model.clone(), &spec).unwrap();
        for e in &history {
            let cluster = e.cluster_component.expect("cluster component logged");
            assert!(e.cce_component > 0.0);
            assert!((e.train_loss - (alpha * e.cce_component + (1.0 - alpha) * cluster)).abs() < 1e-9);
            assert!(e.test_accuracy.is_some());
            let line = e.log_line();
            assert_eq!(line.split('\t').count(), 7);
            assert!(!line.contains("nan"));
        }
    }
    let (_, history) = train_classifier(&pool, &bags, None, None, model, &adam_spec(1, 5, 1)).unwrap();
    let fields: Vec<String> = history[0].log_line().split('\t').map(str::to_owned).collect();
    assert_eq!(fields[3], "nan");
    assert_eq!(fields[4], "nan");
}

#[test]
fn untrained_model_is_at_chance() {
    let test = common::glyphs(1000, 10);
    let mut total = 0.0;
    let seeds = 0..8u64;
    for seed in seeds.clone() {
        let model = CnnModel::new(CnnArch::mnist_half(), seed).unwrap();
        total += evaluate_accuracy(&model, &test).unwrap();
    }
    let mean = total / seeds.count() as f64;
    assert!((mean - 0.1).abs() <= 0.03, "mean untrained accuracy {mean}");
}

#[test]
fn classifier_training_is_deterministic() {
    let pool = common::glyph_pool(30, 11);
    let bags = clean_bags(30, 5);
    let run = || {
        train_classifier(&pool, &bags, None, None, CnnModel::new(CnnArch::mnist_half(), 4).unwrap(), &adam_spec(2, 4, 13))
            .unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha.iter().map(|e| e.metrics()).collect::<Vec<_>>(), hb.iter().map(|e| e.metrics()).collect::<Vec<_>>());
    let (pa, _) = predict_instances(&a, &pool.instances).unwrap();
    let (pb, _) = predict_instances(&b, &pool.instances).unwrap();
    assert_eq!(pa, pb);
}
