//! Print the temporal attention maps of every level for one utterance.

use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::{ModelConfig, MtcrVc};

fn main() -> mtcr_vc::Result<()> {
    let cfg = ModelConfig::desk();
    let model = MtcrVc::new(cfg.clone())?;
    let utt = synth_corpus(&CorpusSpec::new(&cfg, 1, 1, 9).lengths(128, 128))?
        .utterances
        .remove(0);
    let out = model.retrieve(&utt)?;
    for (l, level) in out.levels.iter().enumerate() {
        println!("level {} temporal weights (segment x position):", l + 1);
        for seg in level.a_t.outer_iter().take(6) {
            let row: Vec<String> = seg.iter().map(|w| format!("{w:.3}")).collect();
            println!("  {}", row.join(" "));
        }
        let (n, c, _, g) = level.a_c.dim();
        println!(
            "  channel weights: {n} ranges x {c} strips x {g}; first strip {:?}",
            level.a_c.slice(ndarray::s![0, 0, 0, ..]).to_vec()
        );
    }
    Ok(())
}
