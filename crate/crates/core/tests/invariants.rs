use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::datakit::metrics::speaker_accuracy;
use mtcr_vc::perceptual::{content_loss, mel_loss, speaker_loss, style_loss, total_loss};
use mtcr_vc::training::lr_schedule;
use mtcr_vc::{FeatureBundle, FrozenModels, ModelConfig, MtcrVc};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

type Edit = fn(&mut ModelConfig);

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=3,
        prop::sample::select(vec![1usize, 2, 4]),
        prop::sample::select(vec![1usize, 2]),
        0u64..1000,
    )
        .prop_flat_map(|(n, gt, gc, seed)| {
            (
                Just((n, gt, gc, seed)),
                prop::collection::vec(prop::sample::select(vec![1usize, 2, 4]), n),
                1usize..=2,
            )
        })
        .prop_map(|((n, gt, gc, seed), gtr, widen)| ModelConfig {
            n_tcr_blocks: n,
            gamma_t: gt,
            gamma_c: gc,
            gamma_tr: gtr,
            prenet_channels: gc.pow(n as u32) * 2 * widen,
            pitch_downsample: 2,
            seed,
            ..ModelConfig::tiny()
        })
}

fn utt(cfg: &ModelConfig, len: usize, seed: u64, speaker: usize) -> FeatureBundle {
    let spec = CorpusSpec::new(cfg, speaker + 1, 1, seed).lengths(len, len);
    synth_corpus(&spec).unwrap().utterances.swap_remove(speaker)
}

fn assert_fibers(sums: impl Iterator<Item = f64>) {
    for s in sums {
        assert!((s - 1.0).abs() < 1e-6, "fiber sums to {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_chain_and_fibers(cfg in small_config(), extra in 0usize..3, cut in 0usize..4) {
        let model = MtcrVc::new(cfg.clone()).unwrap();
        let m = cfg.required_multiple();
        let len = (m * (1 + extra)).saturating_sub(cut).max(1);
        let u = utt(&cfg, len, cfg.seed, 0);
        let padded = len.div_ceil(m) * m;
        let r = model.retrieve(&u).unwrap();
        prop_assert_eq!(r.z0.dim(), (padded, cfg.prenet_channels));
        let (mut t, mut c) = r.z0.dim();
        for (l, level) in r.levels.iter().enumerate() {
            let gtr = cfg.gamma_tr[l];
            prop_assert_eq!(level.a_t.dim(), (t / cfg.gamma_t, 1, cfg.gamma_t));
            t /= cfg.gamma_t;
            prop_assert_eq!(level.a_c.dim(), (t / gtr, c / cfg.gamma_c, 1, cfg.gamma_c));
            c /= cfg.gamma_c;
            prop_assert_eq!(level.z.dim(), (t, c));
            prop_assert!(level.a_t.iter().chain(level.a_c.iter()).all(|&w| w >= 0.0));
            assert_fibers(level.a_t.sum_axis(Axis(2)).into_iter());
            assert_fibers(level.a_c.sum_axis(Axis(3)).into_iter());
        }
    }

    #[test]
    fn output_length_is_the_padded_source_length(cfg in small_config(), src_len in 1usize..70, tgt_len in 1usize..70) {
        let model = MtcrVc::new(cfg.clone()).unwrap();
        let m = cfg.required_multiple();
        let s = utt(&cfg, src_len, 1, 0);
        let t = utt(&cfg, tgt_len, 2, 1);
        let out = model.convert(&s, &t).unwrap();
        let padded = src_len.div_ceil(m) * m;
        prop_assert_eq!(out.mel.dim(), (padded, cfg.mel_dim));
        prop_assert_eq!(out.true_length, src_len);
        prop_assert_eq!(out.source_rep.content.nrows(), padded);
        prop_assert_eq!(out.source_rep.pitch.nrows(), padded);
        prop_assert_eq!(out.source_rep.rhythm.nrows(), 1);
        for a in &out.cross_attn {
            prop_assert!(a.iter().all(|&w| w >= 0.0));
            assert_fibers(a.sum_axis(Axis(1)).into_iter());
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_identical_inputs(seed in 0u64..500, len in 8usize..40) {
        let cfg = ModelConfig::tiny();
        let frozen = FrozenModels::new(&cfg);
        let model = MtcrVc::new(cfg.clone()).unwrap();
        let a = utt(&cfg, len, seed, 0);
        let b = utt(&cfg, len, seed, 1);
        let (ma, mb) = (&a.mel, &b.mel);
        for v in [mel_loss(ma, mb).unwrap(), style_loss(ma, mb, &frozen).unwrap(), content_loss(ma, mb, &frozen).unwrap()] {
            prop_assert!(v >= 0.0);
        }
        prop_assert_eq!(mel_loss(ma, ma).unwrap(), 0.0);
        prop_assert_eq!(style_loss(ma, ma, &frozen).unwrap(), 0.0);
        prop_assert_eq!(content_loss(ma, ma, &frozen).unwrap(), 0.0);
        let ra = model.retrieve(&a).unwrap();
        let rb = model.retrieve(&b).unwrap();
        prop_assert!(speaker_loss(&ra, &rb).unwrap() >= 0.0);
        prop_assert_eq!(speaker_loss(&ra, &ra).unwrap(), 0.0);
    }

    #[test]
    fn lr_schedule_is_piecewise_constant(step in 0u64..10_000_000, d in 1u64..100_000) {
        let cfg = ModelConfig { lr_decay_steps: d, ..ModelConfig::default() };
        let lr = lr_schedule(step, &cfg);
        prop_assert_eq!(lr, lr_schedule(step / d * d, &cfg));
        prop_assert!(lr_schedule(step + 1, &cfg) <= lr);
        if (step + 1) % d == 0 {
            prop_assert!(lr_schedule(step + 1, &cfg) < lr || lr == 0.0);
        }
    }

    #[test]
    fn speaker_accuracy_is_monotone_in_threshold(seed in 0u64..300, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        let cfg = ModelConfig::desk();
        let frozen = FrozenModels::new(&cfg);
        let c = synth_corpus(&CorpusSpec::new(&cfg, 3, 2, seed).lengths(20, 40)).unwrap();
        let mels: Vec<Array2<f64>> = c.utterances.iter().map(|u| u.mel.clone()).collect();
        let mut targets = mels.clone();
        targets.rotate_left(1);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a_lo = speaker_accuracy(&mels, &targets, &frozen, lo).unwrap();
        let a_hi = speaker_accuracy(&mels, &targets, &frozen, hi).unwrap();
        prop_assert!(a_hi <= a_lo);
    }
}

#[test]
fn doubling_a_weight_doubles_only_its_terms() {
    let cfg = ModelConfig::tiny();
    let frozen = FrozenModels::new(&cfg);
    let x = utt(&cfg, 8, 3, 0);
    let y = utt(&cfg, 8, 3, 1);
    let base = total_loss(&MtcrVc::new(cfg.clone()).unwrap(), &frozen, &x, &y)
        .unwrap()
        .1;
    let edits: [(&str, Edit); 4] = [
        ("mel", |c| c.loss_weights.lambda_mel *= 2.0),
        ("sty", |c| c.loss_weights.lambda_sty *= 2.0),
        ("con", |c| c.loss_weights.lambda_con *= 2.0),
        ("spk", |c| c.loss_weights.lambda_spk *= 2.0),
    ];
    for (which, edit) in edits {
        let mut c = cfg.clone();
        edit(&mut c);
        let bd = total_loss(&MtcrVc::new(c).unwrap(), &frozen, &x, &y)
            .unwrap()
            .1;
        for (name, t) in &bd.terms {
            let b = &base.terms[name];
            assert_eq!(t.value, b.value, "{name}");
            let scaled = name.starts_with("unpair.mel") && which == "mel"
                || name.split('.').nth(1) == Some(which) && name != "pair.mel";
            let want = if scaled {
                2.0 * b.weighted()
            } else {
                b.weighted()
            };
            assert_eq!(t.weighted(), want, "{name} after doubling lambda_{which}");
        }
    }
}

#[test]
fn published_granularity_is_constant() {
    let cfg = ModelConfig::default();
    for l in 1..=3 {
        assert_eq!(cfg.gamma_t.pow(l as u32) * cfg.gamma_tr[l - 1], 64);
        assert_eq!(cfg.frames_per_range(l), 64);
    }
    assert_eq!(64.0 * cfg.frame_shift_ms, 640.0);
}
