//! Overfit the desk model on two speakers and watch the loss terms fall.
//!
//! `cargo run --release --example overfit -- 500`

use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::training::{fit, FitOptions, TrainState};
use mtcr_vc::{FrozenModels, ModelConfig};

fn main() -> mtcr_vc::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let cfg = ModelConfig::desk();
    let corpus = synth_corpus(&CorpusSpec::new(&cfg, 2, 4, 7))?;
    let frozen = FrozenModels::new(&cfg);
    let mut state = TrainState::new(cfg)?;
    let opts = FitOptions {
        max_steps: Some(steps),
        ..Default::default()
    };
    let log = fit(&mut state, &frozen, &corpus.utterances, &opts)?;
    for r in log.iter().filter(|r| r.step == 1 || r.step % 25 == 0) {
        println!(
            "step {:4}  lr {:.1e}  total {:8.4}  pair.mel {:.4}  unpair.mel {:.4}",
            r.step, r.lr, r.total, r.terms["pair.mel"], r.terms["unpair.mel"]
        );
    }
    Ok(())
}
