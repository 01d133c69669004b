//! Retrieval shapes for the published configuration on a 128-frame input.

use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::{ModelConfig, MtcrVc};

fn main() -> mtcr_vc::Result<()> {
    let cfg = ModelConfig::default();
    let model = MtcrVc::new(cfg.clone())?;
    println!("parameters: {}", model.num_parameters());
    println!("required length multiple: {}", cfg.required_multiple());

    let utt = synth_corpus(&CorpusSpec::new(&cfg, 1, 1, 0).lengths(128, 128))?
        .utterances
        .remove(0);
    let out = model.retrieve(&utt)?;
    println!("z0 {:?}", out.z0.dim());
    for (l, level) in out.levels.iter().enumerate() {
        println!(
            "level {}: z {:?}  a_t {:?}  a_c {:?}",
            l + 1,
            level.z.dim(),
            level.a_t.dim(),
            level.a_c.dim()
        );
    }
    Ok(())
}
