//! Objective metrics on a synthetic corpus: SV-stub EER, lf0 correlation and
//! speaker accuracy for an untrained model.

use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::datakit::metrics::{eer_threshold, evaluate_conversions, pearson_lf0, trial_scores};
use mtcr_vc::{FrozenModels, ModelConfig, MtcrVc};

fn main() -> mtcr_vc::Result<()> {
    println!(
        "pearson_lf0([1,2,3,4], [1,2,3,5]) = {:.4}",
        pearson_lf0(&[1., 2., 3., 4.], &[1., 2., 3., 5.])?
    );
    let toy = [
        (0.9, true),
        (0.8, true),
        (0.7, false),
        (0.6, false),
        (0.75, true),
        (0.85, false),
    ];
    let p = eer_threshold(&toy)?;
    println!(
        "toy trials: eer {:.4} at threshold {:.4}",
        p.eer, p.threshold
    );

    let cfg = ModelConfig::desk();
    let frozen = FrozenModels::new(&cfg);
    let corpus = synth_corpus(&CorpusSpec::new(&cfg, 6, 3, 1))?;
    let p = eer_threshold(&trial_scores(&corpus.utterances, &frozen))?;
    println!(
        "SV stub on ground truth: eer {:.4} at threshold {:.4}",
        p.eer, p.threshold
    );

    let model = MtcrVc::new(cfg)?;
    let r = evaluate_conversions(&model, &frozen, &corpus.utterances)?;
    println!("untrained model: {}", serde_json::to_string_pretty(&r)?);
    Ok(())
}
