//! Loss terms present under each ablation setup.

use mtcr_vc::datakit::corpus::{synth_corpus, CorpusSpec};
use mtcr_vc::perceptual::total_loss;
use mtcr_vc::{FrozenModels, ModelConfig, MtcrVc};

fn main() -> mtcr_vc::Result<()> {
    let base = ModelConfig::desk();
    let corpus = synth_corpus(&CorpusSpec::new(&base, 2, 1, 3).lengths(64, 64))?;
    let (x, y) = (&corpus.utterances[0], &corpus.utterances[1]);

    let mut setups: Vec<(String, ModelConfig)> = vec![("full".into(), base.clone())];
    for (name, edit) in [
        (
            "w/o cycle",
            (|c: &mut ModelConfig| c.ablation.disable_cycle = true) as fn(&mut ModelConfig),
        ),
        ("w/o style loss", |c| c.ablation.disable_style_loss = true),
        ("w/o content loss", |c| {
            c.ablation.disable_content_loss = true
        }),
        ("w/o speaker loss", |c| {
            c.ablation.disable_speaker_loss = true
        }),
        ("1 block", |c| c.ablation.active_blocks = 1),
        ("2 blocks", |c| c.ablation.active_blocks = 2),
        ("uniform temporal", |c| {
            c.ablation.uniform_temporal_attn = vec![true; 3]
        }),
        ("uniform channel", |c| {
            c.ablation.uniform_channel_attn = vec![true; 3]
        }),
    ] {
        let mut c = base.clone();
        edit(&mut c);
        setups.push((name.into(), c));
    }

    for (name, cfg) in setups {
        let model = MtcrVc::new(cfg.clone())?;
        let frozen = FrozenModels::new(&cfg);
        let (total, bd) = total_loss(&model, &frozen, x, y)?;
        let names: Vec<&str> = bd.terms.keys().map(|s| s.as_str()).collect();
        println!("{name:<18} total {total:.10}  {}", names.join(" "));
    }
    Ok(())
}
