//! Generate a small synthetic corpus, save it and read it back.

use mtcr_vc::datakit::corpus::{load_corpus, save_corpus, synth_corpus, CorpusSpec};
use mtcr_vc::datakit::metrics::cosine;
use mtcr_vc::ModelConfig;

fn main() -> mtcr_vc::Result<()> {
    let cfg = ModelConfig::desk();
    let corpus = synth_corpus(&CorpusSpec::new(&cfg, 4, 3, 42))?;
    for spk in &corpus.speakers {
        let utts = corpus.by_speaker(&spk.id);
        let lens: Vec<usize> = utts.iter().map(|u| u.true_length).collect();
        println!(
            "{}  pitch register ({:+.2}, {:.2})  lengths {:?}",
            spk.id, spk.pitch_register.0, spk.pitch_register.1, lens
        );
    }
    println!("anchor cosines against spk00:");
    for spk in &corpus.speakers[1..] {
        println!(
            "  {}  {:+.3}",
            spk.id,
            cosine(&corpus.speakers[0].xvec_anchor, &spk.xvec_anchor)
        );
    }

    let dir = std::env::temp_dir().join("mtcr-synth-example");
    save_corpus(&corpus, &dir)?;
    let back = load_corpus(&dir)?;
    println!(
        "saved {} utterances to {}; reloaded {}",
        corpus.utterances.len(),
        dir.display(),
        back.len()
    );
    Ok(())
}
