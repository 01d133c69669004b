//! The `mtcr` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{ArrayD, Dimension};

use super::container::write_container;
use super::corpus::{load_corpus, read_bundle, save_corpus, synth_corpus, CorpusSpec};
use super::metrics::evaluate_conversions;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::perceptual::FrozenModels;
use crate::training::{finite_difference_check, fit, load_checkpoint, FitOptions, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "mtcr",
    version,
    about = "Multi-level temporal-channel retrieval voice conversion on synthetic features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    Desk,
    Default,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Default => ModelConfig::default(),
        }
    }
}

/// `--config FILE` (TOML) or `--preset NAME`; desk when neither is given.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML model configuration.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match (&self.config, self.preset) {
            (Some(p), _) => ModelConfig::from_path(p),
            (None, Some(p)) => Ok(p.config()),
            (None, None) => Ok(ModelConfig::desk()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as one container per utterance.
    SynthData {
        #[arg(long)]
        speakers: usize,
        #[arg(long)]
        utts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        min_len: usize,
        #[arg(long, default_value_t = 160)]
        max_len: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a corpus directory; writes checkpoints and loss.ndjson.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Stop at this global step.
        #[arg(long)]
        steps: Option<u64>,
        /// Stop after this many epochs (1 when neither limit is given).
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from OUT/latest.mtcr.
        #[arg(long)]
        resume: bool,
    },
    /// Convert SOURCE towards the speaker of TARGET.
    Convert {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        source: PathBuf,
        #[arg(long, value_name = "FILE")]
        target: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// P_lf0, speaker accuracy and EER threshold over a corpus.
    Eval {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
    },
    /// Dump retrieval outputs (z, a_t, a_c) of one utterance.
    InspectAttn {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        utt: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write one tab-separated table per array here.
        #[arg(long, value_name = "DIR")]
        tables: Option<PathBuf>,
    },
    /// Finite-difference check of all gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            speakers,
            utts,
            seed,
            out,
            min_len,
            max_len,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let spec = CorpusSpec::new(&cfg, speakers, utts, seed).lengths(min_len, max_len);
            let corpus = synth_corpus(&spec)?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} utterances from {} speakers to {}",
                corpus.utterances.len(),
                speakers,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out,
            steps,
            epochs,
            resume,
        } => {
            let latest = out.join("latest.mtcr");
            let mut state = if resume && latest.exists() {
                load_checkpoint(&latest)?
            } else {
                TrainState::new(cfg.resolve()?)?
            };
            let corpus = load_corpus(&data)?;
            let frozen = FrozenModels::new(state.cfg());
            let opts = FitOptions {
                epochs: epochs.or(if steps.is_none() { Some(1) } else { None }),
                max_steps: steps,
                out_dir: Some(out.clone()),
            };
            let start = state.step;
            let recs = fit(&mut state, &frozen, &corpus, &opts)?;
            match recs.last() {
                Some(r) => println!(
                    "steps {}..{}: total {:.6}, pair.mel {:.6}",
                    start,
                    state.step,
                    r.total,
                    r.terms.get("pair.mel").copied().unwrap_or(f64::NAN)
                ),
                None => println!("no steps run; checkpoint at step {}", state.step),
            }
            Ok(())
        }
        Command::Convert {
            ckpt,
            source,
            target,
            out,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let src = read_bundle(&source)?;
            let tgt = read_bundle(&target)?;
            let res = state.model.convert(&src, &tgt)?;
            let meta = serde_json::json!({
                "source": src.speaker_id,
                "target": tgt.speaker_id,
                "true_length": res.true_length,
                "step": state.step,
            });
            write_container(&out, &res.named_arrays(), &meta)?;
            println!("mel {:?} (true length {})", res.mel.dim(), res.true_length);
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let state = load_checkpoint(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let frozen = FrozenModels::new(state.cfg());
            let r = evaluate_conversions(&state.model, &frozen, &corpus)?;
            fs::write(&report, serde_json::to_string_pretty(&r)? + "\n")?;
            println!(
                "P_lf0 {:.4}  speaker accuracy {:.4}  EER {:.4} at threshold {:.4}",
                r.p_lf0, r.speaker_accuracy, r.eer, r.eer_threshold
            );
            Ok(())
        }
        Command::InspectAttn {
            ckpt,
            utt,
            out,
            tables,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let u = read_bundle(&utt)?;
            let r = state.model.retrieve(&u)?;
            let arrays = r.named_arrays();
            write_container(
                &out,
                &arrays,
                &serde_json::json!({"speaker_id": u.speaker_id}),
            )?;
            if let Some(dir) = tables {
                fs::create_dir_all(&dir)?;
                for (name, a) in &arrays {
                    write_table(&dir.join(format!("{name}.tsv")), a)?;
                }
            }
            for (name, a) in &arrays {
                println!("{name} {:?}", a.shape());
            }
            Ok(())
        }
        Command::Gradcheck { cfg, eps, tol } => {
            let cfg = cfg.resolve()?;
            let r = finite_difference_check(&cfg, eps, tol)?;
            for (g, e) in &r.group_max {
                println!("{g:<32} {e:.3e}");
            }
            println!(
                "max relative error {:.3e} over {} coordinates ({} parameters)",
                r.max_rel_error,
                r.coordinates.len(),
                r.num_parameters
            );
            Ok(())
        }
    }
}

/// One line per index tuple: the indices, then the value.
fn write_table(path: &Path, a: &ArrayD<f64>) -> Result<()> {
    let mut text = String::new();
    for (idx, v) in a.indexed_iter() {
        for k in 0..idx.ndim() {
            text.push_str(&idx[k].to_string());
            text.push('\t');
        }
        text.push_str(&format!("{v}\n"));
    }
    fs::write(path, text).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["mtcr", "bogus"]), 2);
        assert_eq!(run(["mtcr", "synth-data", "--speakers", "x"]), 2);
        assert_eq!(
            run(["mtcr", "gradcheck", "--config", "a", "--preset", "tiny"]),
            2
        );
    }

    #[test]
    fn runtime_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.mtcr");
        let m = missing.to_str().unwrap();
        assert_eq!(
            run(["mtcr", "convert", "--ckpt", m, "--source", m, "--target", m, "--out", m]),
            1
        );
    }
}
