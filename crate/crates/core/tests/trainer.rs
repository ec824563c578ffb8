use vegn::autodiff::ParamStore;
use vegn::model::{Backbone, Model, ModelConfig};
use vegn::nbody::{build_dataset, Dataset, DatasetConfig, SamplePair};
use vegn::trainer::*;
use vegn::{Error, Tensor};

fn tiny_dataset(seed: u64) -> Dataset {
    build_dataset(&DatasetConfig {
        train: 8,
        val: 4,
        test: 4,
        particles: 5,
        input_frame: 3,
        delta_t: 2,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn tiny_model(backbone: Backbone, channels: usize, drop_rate: f64) -> ModelConfig {
    ModelConfig {
        backbone,
        layers: 2,
        hidden: 8,
        virtual_channels: channels,
        drop_rate,
        ..ModelConfig::default()
    }
}

fn tiny_train(epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        patience,
        batch_size: 3,
        seed: 11,
        adam: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn scalar_store(v: f64, g: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::scalar(v));
    s.set_flat_grads(&[g]).unwrap();
    s
}

#[test]
fn first_step_moves_by_about_the_learning_rate() {
    let lr = 5e-4;
    let mut s = scalar_store(0.3, 1.0);
    let cfg = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut st = AdamState::new(&s, cfg).unwrap();
    adam_step(&mut s, &mut st).unwrap();
    let delta = (s.flat_values()[0] - 0.3).abs();
    assert!(delta >= 0.99 * lr && delta <= lr, "{delta}");
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut s = scalar_store(-1.7, 0.0);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut st = AdamState::new(&s, cfg).unwrap();
    for _ in 0..5 {
        assert_eq!(adam_step(&mut s, &mut st).unwrap(), StepOutcome::Applied);
    }
    assert_eq!(s.flat_values(), vec![-1.7]);
}

#[test]
fn ten_steps_on_a_parabola_match_hand_iteration() {
    let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
    let cfg = AdamConfig {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    };
    let mut s = scalar_store(2.0, 0.0);
    let mut st = AdamState::new(&s, cfg).unwrap();

    let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let step = (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        theta = theta - lr * step - lr * wd * theta;

        let current = s.flat_values()[0];
        s.set_flat_grads(&[2.0 * current]).unwrap();
        adam_step(&mut s, &mut st).unwrap();
        assert!((s.flat_values()[0] - theta).abs() < 1e-12, "step {t}");
    }
    assert_eq!(st.steps(), 10);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = tiny_dataset(0);
    let model = tiny_model(Backbone::FastEgnn, 2, 0.0);
    let bad = TrainConfig {
        patience: 5,
        ..tiny_train(3, 0)
    };
    assert!(train(&ds.train, &ds.val, &model, &bad, &mut |_| Ok(())).is_err());
    let no_val: Vec<SamplePair> = Vec::new();
    assert!(train(&ds.train, &no_val, &model, &tiny_train(2, 0), &mut |_| Ok(())).is_err());
    assert!(AdamState::new(&ParamStore::new(), AdamConfig { lr: -1.0, ..AdamConfig::default() }).is_err());
}

#[test]
fn zero_patience_runs_one_epoch() {
    let ds = tiny_dataset(1);
    let mut lines = Vec::new();
    let out = train(
        &ds.train,
        &ds.val,
        &tiny_model(Backbone::FastEgnn, 2, 0.0),
        &tiny_train(20, 0),
        &mut |m| {
            lines.push(m.clone());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(lines.len(), 1);
    assert!(out.stopped_early);
}

#[test]
fn runs_are_deterministic() {
    let ds = tiny_dataset(2);
    let model = tiny_model(Backbone::FastEgnn, 3, 0.5);
    let a = train(&ds.train, &ds.val, &model, &tiny_train(4, 4), &mut |_| Ok(())).unwrap();
    let b = train(&ds.train, &ds.val, &model, &tiny_train(4, 4), &mut |_| Ok(())).unwrap();
    assert_eq!(a.history.len(), b.history.len());
    assert!(a.history.iter().zip(&b.history).all(|(x, y)| x.same_run(y)));
    assert_eq!(a.params, b.params);
}

#[test]
fn best_checkpoint_is_returned() {
    let ds = tiny_dataset(3);
    let model_cfg = tiny_model(Backbone::FastEgnn, 2, 0.0);
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
        ..tiny_train(12, 12)
    };
    let out = train(&ds.train, &ds.val, &model_cfg, &cfg, &mut |_| Ok(())).unwrap();
    let min = out
        .history
        .iter()
        .filter_map(|m| m.val_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_mse, min);
    assert_eq!(out.history[out.best_epoch - 1].val_mse, Some(min));

    let model = Model::new(model_cfg).unwrap();
    let report = evaluate(
        &model,
        &out.params,
        &ds.val,
        &EvalConfig {
            rotations: 0,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    assert!((report.mse - min).abs() < 1e-12 * min);
}

#[test]
fn divergence_aborts() {
    let mut ds = tiny_dataset(4);
    for p in ds.train.iter_mut() {
        p.target = p.target.map(|v| v + 1e4);
    }
    let err = train(&ds.train, &ds.val, &tiny_model(Backbone::FastEgnn, 2, 0.0), &tiny_train(3, 3), &mut |_| Ok(()))
        .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn sink_errors_stop_training() {
    let ds = tiny_dataset(5);
    let res = train(
        &ds.train,
        &ds.val,
        &tiny_model(Backbone::FastEgnn, 1, 0.0),
        &tiny_train(3, 3),
        &mut |_| Err(Error::InvalidArgument("disk full".into())),
    );
    assert!(res.is_err());
}

#[test]
fn rotated_evaluation_matches_plain_evaluation() {
    let ds = tiny_dataset(6);
    for backbone in [Backbone::FastEgnn, Backbone::FastRf, Backbone::FastSchnet, Backbone::Egnn] {
        let channels = if backbone == Backbone::Egnn { 0 } else { 3 };
        let model = Model::new(tiny_model(backbone, channels, 0.25)).unwrap();
        let store = model.init_params(1);
        let before = store.clone();
        let plain = evaluate(&model, &store, &ds.test, &EvalConfig { rotations: 0, ..EvalConfig::default() }).unwrap();
        let rotated = evaluate(
            &model,
            &store,
            &ds.test,
            &EvalConfig {
                rotations: 3,
                seed: 9,
                reflections: true,
                translation: 5.0,
            },
        )
        .unwrap();
        assert!((rotated.mse - plain.mse).abs() <= 1e-6 * plain.mse, "{backbone}");
        assert_eq!(rotated.forwards, 12);
        assert!(rotated.seconds > 0.0);
        assert_eq!(store, before);
    }
}

#[test]
fn identity_model_on_zero_horizon_pairs_scores_zero() {
    let mut ds = tiny_dataset(7);
    for p in ds.test.iter_mut() {
        p.target = p.input.positions.clone();
    }
    let cfg = ModelConfig {
        layers: 0,
        ..tiny_model(Backbone::FastEgnn, 2, 0.0)
    };
    let model = Model::new(cfg).unwrap();
    let report = evaluate(&model, &model.init_params(0), &ds.test, &EvalConfig::default()).unwrap();
    assert_eq!(report.mse, 0.0);
}

#[test]
fn one_step_rollout_is_single_step_prediction() {
    let ds = tiny_dataset(8);
    let model = Model::new(tiny_model(Backbone::FastEgnn, 2, 0.5)).unwrap();
    let store = model.init_params(2);
    let pair = &ds.test[0];
    let frames = rollout(&model, &store, pair, 1, 0.02).unwrap();
    let dropped = vegn::geometry::drop_longest_edges(&pair.input, 0.5).unwrap();
    assert_eq!(frames, vec![model.predict(&store, &dropped).unwrap().positions]);
    let frames = rollout(&model, &store, pair, 4, 0.02).unwrap();
    assert_eq!(frames.len(), 4);
    assert!(frames.iter().all(|f| f.shape() == [5, 3]));
}

#[test]
fn one_device_distributed_training_is_plain_training() {
    let ds = tiny_dataset(9);
    let model = tiny_model(Backbone::FastEgnn, 2, 0.5);
    let cfg = tiny_train(3, 3);
    let plain = train(&ds.train, &ds.val, &model, &cfg, &mut |_| Ok(())).unwrap();
    let dist = dist_train(&ds.train, &ds.val, &model, &cfg, &DistConfig::default(), &mut |_| Ok(())).unwrap();
    assert!(plain.history.iter().zip(&dist.output.history).all(|(a, b)| a.same_run(b)));
    assert_eq!(plain.params, dist.output.params);
}

#[test]
fn replicas_stay_identical() {
    let ds = tiny_dataset(10);
    let model = tiny_model(Backbone::FastEgnn, 3, 0.0);
    let cfg = tiny_train(2, 2);
    for transport in [vegn::dist::Transport::Inproc, vegn::dist::Transport::Socket] {
        let dist = DistConfig {
            devices: 2,
            transport,
            ..DistConfig::default()
        };
        let mut lines = 0;
        let out = dist_train(&ds.train, &ds.val, &model, &cfg, &dist, &mut |m| {
            assert!(m.transport.as_ref().unwrap().sync_rounds > 0);
            lines += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(lines, out.output.history.len());
        assert_eq!(out.replicas[0], out.replicas[1]);
        let (a, b) = (out.virtual_sets[0].as_ref().unwrap(), out.virtual_sets[1].as_ref().unwrap());
        assert_eq!(a.z.data(), b.z.data());
        assert_eq!(a.s.data(), b.s.data());
        // Three steps per epoch with batch 3 over 8 samples.
        assert_eq!(out.counters[0].sync_rounds, 6);
    }
}

#[test]
fn device_samples_split_nodes_without_overlap() {
    let ds = tiny_dataset(11);
    for (mode, radius) in [(RadiusMode::Fixed, None), (RadiusMode::Fixed, Some(2.0)), (RadiusMode::Dynamic, Some(1.0))] {
        let dist = DistConfig {
            devices: 2,
            radius_mode: mode,
            radius,
            ..DistConfig::default()
        };
        let views: Vec<_> = (0..2)
            .map(|d| device_sample(&ds.train[0], 0.0, &dist, 3, d).unwrap())
            .collect();
        let mut all: Vec<usize> = views.iter().flat_map(|v| v.view.global_index.clone()).collect();
        all.sort();
        assert_eq!(all, (0..5).collect::<Vec<_>>());
    }
    let bad = DistConfig {
        devices: 2,
        radius_mode: RadiusMode::Dynamic,
        ..DistConfig::default()
    };
    assert!(device_sample(&ds.train[0], 0.0, &bad, 0, 0).is_err());
}
