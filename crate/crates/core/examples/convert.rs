//! Train briefly, then convert one utterance towards another speaker and
//! save the result as a container.

use mtcr_vc::datakit::container::{read_container, write_container};
use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::training::{fit, FitOptions, TrainState};
use mtcr_vc::{FrozenModels, ModelConfig};

fn main() -> mtcr_vc::Result<()> {
    let cfg = ModelConfig::desk();
    let corpus = synth_corpus(&CorpusSpec::new(&cfg, 3, 3, 5).lengths(90, 130))?;
    let frozen = FrozenModels::new(&cfg);
    let mut state = TrainState::new(cfg)?;
    fit(
        &mut state,
        &frozen,
        &corpus.utterances,
        &FitOptions {
            max_steps: Some(100),
            ..Default::default()
        },
    )?;

    let source = &corpus.utterances[0];
    let target = &corpus.utterances[4];
    let out = state.model.convert(source, target)?;
    println!(
        "{} -> {}: source {} frames, converted mel {:?}",
        source.speaker_id,
        target.speaker_id,
        source.true_length,
        out.mel.dim()
    );
    for (l, a) in out.cross_attn.iter().enumerate() {
        println!("fusion level {} cross-attention {:?}", l + 1, a.dim());
    }

    let path = std::env::temp_dir().join("mtcr-converted.mtcr");
    write_container(
        &path,
        &out.named_arrays(),
        &serde_json::json!({"true_length": out.true_length}),
    )?;
    let back = read_container(&path)?;
    println!(
        "wrote {} ({:?})",
        path.display(),
        back.names().collect::<Vec<_>>()
    );
    Ok(())
}
