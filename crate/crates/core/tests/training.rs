use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::training::{
    checkpoint_name, fit, load_checkpoint, save_checkpoint, train_step, FitOptions, StepRecord,
    TrainState,
};
use mtcr_vc::{Error, FeatureBundle, FrozenModels, ModelConfig};

fn corpus(cfg: &ModelConfig, speakers: usize, utts: usize) -> Vec<FeatureBundle> {
    synth_corpus(&CorpusSpec::new(cfg, speakers, utts, 21).lengths(10, 30))
        .unwrap()
        .utterances
}

fn steps(n: u64) -> FitOptions {
    FitOptions {
        max_steps: Some(n),
        ..Default::default()
    }
}

#[test]
fn first_ten_steps_are_bitwise_reproducible() {
    let cfg = ModelConfig::tiny();
    let data = corpus(&cfg, 3, 2);
    let frozen = FrozenModels::new(&cfg);
    let run = || {
        let mut s = TrainState::new(cfg.clone()).unwrap();
        fit(&mut s, &frozen, &data, &steps(10)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        for (k, v) in &x.terms {
            assert_eq!(v.to_bits(), y.terms[k].to_bits(), "{k} at step {}", x.step);
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = ModelConfig {
        batch_size: 2,
        ..ModelConfig::tiny()
    };
    let data = corpus(&cfg, 3, 3);
    let frozen = FrozenModels::new(&cfg);
    let dir = tempfile::tempdir().unwrap();

    let mut whole = TrainState::new(cfg.clone()).unwrap();
    let full = fit(&mut whole, &frozen, &data, &steps(12)).unwrap();

    let mut first = TrainState::new(cfg.clone()).unwrap();
    fit(&mut first, &frozen, &data, &steps(7)).unwrap();
    let path = dir.path().join("mid.mtcr");
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    let tail = fit(&mut resumed, &frozen, &data, &steps(12)).unwrap();

    assert_eq!(tail.len(), 5);
    assert_eq!(&full[7..], &tail[..]);
    assert_eq!(
        resumed.model.store.fingerprint(),
        whole.model.store.fingerprint()
    );
    assert_eq!(resumed.adam_m, whole.adam_m);
    assert_eq!(resumed.adam_v, whole.adam_v);
    assert_eq!((resumed.epoch, resumed.cursor), (whole.epoch, whole.cursor));
}

#[test]
fn frozen_models_never_change() {
    let cfg = ModelConfig::tiny();
    let data = corpus(&cfg, 2, 2);
    let frozen = FrozenModels::new(&cfg);
    let before = frozen.fingerprint();
    let mut s = TrainState::new(cfg.clone()).unwrap();
    let trainable = s.model.store.fingerprint();
    fit(&mut s, &frozen, &data, &steps(5)).unwrap();
    assert_eq!(frozen.fingerprint(), before);
    assert_eq!(FrozenModels::new(&cfg).fingerprint(), before);
    assert_ne!(s.model.store.fingerprint(), trainable);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let cfg = ModelConfig::tiny();
    let data = corpus(&cfg, 2, 2);
    let frozen = FrozenModels::new(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainState::new(cfg.clone()).unwrap();
    let fp = s.model.store.fingerprint();
    let opts = FitOptions {
        epochs: Some(0),
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    assert!(fit(&mut s, &frozen, &data, &opts).unwrap().is_empty());
    let ck = load_checkpoint(dir.path().join(checkpoint_name(0))).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.model.store.fingerprint(), fp);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("loss.ndjson")).unwrap(),
        ""
    );
}

#[test]
fn loss_log_and_periodic_checkpoints() {
    let cfg = ModelConfig {
        checkpoint_every: 3,
        ..ModelConfig::tiny()
    };
    let data = corpus(&cfg, 2, 3);
    let frozen = FrozenModels::new(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut s = TrainState::new(cfg.clone()).unwrap();
    let opts = FitOptions {
        max_steps: Some(7),
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let recs = fit(&mut s, &frozen, &data, &opts).unwrap();
    let text = std::fs::read_to_string(dir.path().join("loss.ndjson")).unwrap();
    let logged: Vec<StepRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(logged, recs);
    assert_eq!(
        logged.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=7).collect::<Vec<_>>()
    );
    for step in [0, 3, 6] {
        assert!(
            dir.path().join(checkpoint_name(step)).exists(),
            "step {step}"
        );
    }
    assert_eq!(
        load_checkpoint(dir.path().join("latest.mtcr"))
            .unwrap()
            .step,
        7
    );
}

#[test]
fn non_finite_loss_names_the_term() {
    let cfg = ModelConfig::tiny();
    let data = corpus(&cfg, 2, 1);
    let frozen = FrozenModels::new(&cfg);
    let mut s = TrainState::new(cfg).unwrap();
    let mut x = data[0].clone();
    x.mel[[0, 0]] = f64::NAN;
    match train_step(&mut s, &frozen, &x, &data[1]) {
        Err(Error::NonFiniteLoss { term, step }) => {
            assert_eq!(step, 0);
            assert!(term.contains('.'), "{term}");
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    assert_eq!(s.step, 0);
}

#[test]
fn cycle_training_needs_two_speakers() {
    let cfg = ModelConfig::tiny();
    let data = corpus(&cfg, 1, 3);
    let frozen = FrozenModels::new(&cfg);
    let mut s = TrainState::new(cfg.clone()).unwrap();
    assert!(matches!(
        fit(&mut s, &frozen, &data, &steps(1)),
        Err(Error::CorpusTooSmall(_))
    ));

    let solo = ModelConfig {
        ablation: mtcr_vc::Ablation {
            disable_cycle: true,
            ..cfg.ablation.clone()
        },
        ..cfg
    };
    let mut s = TrainState::new(solo).unwrap();
    let recs = fit(&mut s, &frozen, &data, &steps(2)).unwrap();
    assert!(recs
        .iter()
        .all(|r| r.terms.keys().all(|k| k.starts_with("pair."))));
}

#[test]
fn cycle_path_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let r = mtcr_vc::training::finite_difference_check_terms(&cfg, 1e-5, 1e-3, |n| {
        n.starts_with("unpair.")
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3);
    assert!(r
        .coordinates
        .iter()
        .any(|c| c.group.starts_with("tcr.") && c.analytic.abs() > 1e-8));
}
