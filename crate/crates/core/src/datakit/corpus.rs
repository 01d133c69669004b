//! Synthetic speaker corpus.
//!
//! Each utterance follows a piecewise-smooth content trajectory drawn from a
//! shared phone inventory. BNF depend on content only; mel depends on
//! content through a per-speaker timbre basis, on a speaker offset and on
//! the raw log-F0 trace.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Container};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::FeatureBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub mel_dim: usize,
    pub bnf_dim: usize,
    pub xvec_dim: usize,
    /// Width `k` of the content trajectory.
    pub content_dim: usize,
    pub n_phones: usize,
    /// Standard deviation of the additive mel and bnf noise.
    pub noise: f64,
    /// Standard deviation of x-vector noise around the unit-norm anchor.
    pub xvec_noise: f64,
    /// Per-element RMS of the log-F0 trace direction in mel.
    pub pitch_gain: f64,
}

impl CorpusSpec {
    pub fn new(cfg: &ModelConfig, n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            utts_per_speaker,
            min_len: 96,
            max_len: 160,
            seed,
            mel_dim: cfg.mel_dim,
            bnf_dim: cfg.bnf_dim,
            xvec_dim: cfg.xvec_dim,
            content_dim: 6,
            n_phones: 12,
            noise: 0.05,
            xvec_noise: 0.05,
            pitch_gain: 1.25,
        }
    }

    pub fn lengths(mut self, min_len: usize, max_len: usize) -> Self {
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_speakers == 0 {
            errs.push("n_speakers must be >= 1".to_string());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            errs.push(format!(
                "length range ({}, {}) is empty",
                self.min_len, self.max_len
            ));
        }
        for (n, v) in [
            ("mel_dim", self.mel_dim),
            ("bnf_dim", self.bnf_dim),
            ("xvec_dim", self.xvec_dim),
            ("content_dim", self.content_dim),
            ("n_phones", self.n_phones),
        ] {
            if v == 0 {
                errs.push(format!("{n} must be >= 1"));
            }
        }
        if !(self.noise >= 0.0 && self.xvec_noise >= 0.0 && self.pitch_gain >= 0.0) {
            errs.push("noise levels and pitch_gain must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::BadRange(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// `k × mel_dim`.
    pub timbre_basis: Array2<f64>,
    pub offset: Array1<f64>,
    /// Mean and spread of the raw log-F0 trace.
    pub pitch_register: (f64, f64),
    pub xvec_anchor: Array1<f64>,
}

/// Quantities shared by every speaker of one corpus.
#[derive(Debug, Clone, PartialEq)]
struct Shared {
    phones: Array2<f64>,
    bnf_map: Array2<f64>,
    bnf_bias: Array1<f64>,
    pitch_profile: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<FeatureBundle>,
}

impl Corpus {
    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.id.clone()).collect()
    }

    pub fn by_speaker(&self, id: &str) -> Vec<&FeatureBundle> {
        self.utterances
            .iter()
            .filter(|u| u.speaker_id == id)
            .collect()
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined stream identifiers.
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt()).max(1e-12)
}

fn shared(spec: &CorpusSpec) -> Shared {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0, 0));
    let k = spec.content_dim;
    let mut profile = normal_vec(&mut rng, spec.mel_dim, 1.0);
    profile *= spec.pitch_gain * (spec.mel_dim as f64).sqrt() / profile.dot(&profile).sqrt();
    Shared {
        phones: normal(&mut rng, spec.n_phones, k, 1.0),
        bnf_map: normal(&mut rng, k, spec.bnf_dim, 1.0 / (k as f64).sqrt()),
        bnf_bias: normal_vec(&mut rng, spec.bnf_dim, 0.1),
        pitch_profile: profile,
    }
}

fn anchor_candidates(spec: &CorpusSpec, index: usize) -> impl Iterator<Item = Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64 + 1, u64::MAX));
    let d = spec.xvec_dim;
    std::iter::repeat_with(move || {
        let v = normal_vec(&mut rng, d, 1.0);
        let n = v.dot(&v).sqrt().max(1e-12);
        v / n
    })
}

/// Anchors are drawn in speaker order; each is redrawn until its cosine to
/// every earlier anchor is below 0.9, so speaker `i` depends only on the
/// seed and the indices `0..=i`.
fn anchors(spec: &CorpusSpec, upto: usize) -> Vec<Array1<f64>> {
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(upto + 1);
    for i in 0..=upto {
        let mut best = None;
        let mut best_cos = f64::INFINITY;
        for cand in anchor_candidates(spec, i).take(1000) {
            let worst = out
                .iter()
                .map(|a| cosine(a, &cand))
                .fold(f64::NEG_INFINITY, f64::max);
            if worst < 0.9 {
                best = Some(cand);
                break;
            }
            if worst < best_cos {
                best_cos = worst;
                best = Some(cand);
            }
        }
        out.push(best.unwrap());
    }
    out
}

/// Regenerates speaker `index` of the corpus described by `spec`.
pub fn synth_speaker(spec: &CorpusSpec, index: usize) -> SyntheticSpeaker {
    speaker(spec, index, anchors(spec, index).pop().unwrap())
}

fn speaker(spec: &CorpusSpec, index: usize, xvec_anchor: Array1<f64>) -> SyntheticSpeaker {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64 + 1, 0));
    let k = spec.content_dim;
    SyntheticSpeaker {
        id: format!("spk{index:02}"),
        timbre_basis: normal(&mut rng, k, spec.mel_dim, 1.0 / (k as f64).sqrt()),
        offset: normal_vec(&mut rng, spec.mel_dim, 1.0),
        pitch_register: (rng.random_range(-0.5..0.5), rng.random_range(0.6..1.0)),
        xvec_anchor,
    }
}

fn smooth(x: &Array2<f64>) -> Array2<f64> {
    let t = x.nrows();
    Array2::from_shape_fn(x.dim(), |(i, j)| {
        let a = x[[i.saturating_sub(1), j]];
        let c = x[[(i + 1).min(t - 1), j]];
        0.25 * a + 0.5 * x[[i, j]] + 0.25 * c
    })
}

fn utterance(
    spec: &CorpusSpec,
    shared: &Shared,
    spk: &SyntheticSpeaker,
    index: usize,
    j: usize,
) -> Result<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64 + 1, j as u64 + 1));
    let t = rng.random_range(spec.min_len..=spec.max_len);
    let k = spec.content_dim;

    let mut content = Array2::zeros((t, k));
    let mut pos = 0;
    while pos < t {
        let dur = rng.random_range(3..=10);
        let p = rng.random_range(0..spec.n_phones);
        for r in pos..(pos + dur).min(t) {
            content.row_mut(r).assign(&shared.phones.row(p));
        }
        pos += dur;
    }
    let content = smooth(&smooth(&content));

    let mut walk = Vec::with_capacity(t);
    let mut x: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
    for _ in 0..t {
        x = 0.97 * x + 0.25 * rng.sample::<f64, _>(StandardNormal);
        walk.push(x.clamp(-2.5, 2.5));
    }
    let walk = smooth(&smooth(&Array2::from_shape_vec((t, 1), walk).unwrap()));
    let mut voiced = vec![true; t];
    if t >= 24 {
        for _ in 0..rng.random_range(1..=2) {
            let len = rng.random_range(3..=6);
            let start = rng.random_range(0..t - len);
            voiced[start..start + len]
                .iter_mut()
                .for_each(|v| *v = false);
        }
    }
    let (mean, spread) = spk.pitch_register;
    let lf0: Vec<f64> = walk.column(0).iter().map(|w| mean + spread * w).collect();
    let (lo, hi) = lf0
        .iter()
        .zip(&voiced)
        .filter(|(_, &v)| v)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&f, _)| {
            (lo.min(f), hi.max(f))
        });
    let range = (hi - lo).max(1e-9);
    let pitch = Array2::from_shape_fn((t, 1), |(i, _)| {
        if voiced[i] {
            (lf0[i] - lo) / range
        } else {
            0.0
        }
    });

    let mut mel = content.dot(&spk.timbre_basis) + &spk.offset;
    for i in 0..t {
        if voiced[i] {
            mel.row_mut(i).scaled_add(lf0[i], &shared.pitch_profile);
        }
    }
    mel += &normal(&mut rng, t, spec.mel_dim, spec.noise);
    let bnf = content.dot(&shared.bnf_map)
        + &shared.bnf_bias
        + normal(&mut rng, t, spec.bnf_dim, spec.noise);
    let xvec = &spk.xvec_anchor + &normal_vec(&mut rng, spec.xvec_dim, spec.xvec_noise);
    FeatureBundle::new(mel, bnf, pitch, xvec, spk.id.clone())
}

/// Generates `n_speakers × utts_per_speaker` utterances. Identical specs give
/// bitwise-identical corpora.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let shared = shared(spec);
    let all_anchors = anchors(spec, spec.n_speakers - 1);
    let mut speakers = Vec::with_capacity(spec.n_speakers);
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for (i, anchor) in all_anchors.into_iter().enumerate() {
        let spk = speaker(spec, i, anchor);
        for j in 0..spec.utts_per_speaker {
            utterances.push(utterance(spec, &shared, &spk, i, j)?);
        }
        speakers.push(spk);
    }
    Ok(Corpus {
        spec: spec.clone(),
        speakers,
        utterances,
    })
}

/// Arrays of one bundle: `mel`, `bnf`, `pitch`, `xvec`, truncated to the
/// real frames.
pub fn bundle_arrays(b: &FeatureBundle) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let n = b.true_length;
    let cut = |a: &Array2<f64>| a.slice(ndarray::s![..n, ..]).to_owned().into_dyn();
    vec![
        ("mel".into(), cut(&b.mel)),
        ("bnf".into(), cut(&b.bnf)),
        ("pitch".into(), cut(&b.pitch)),
        ("xvec".into(), b.xvec.clone().into_dyn()),
    ]
}

pub fn write_bundle(path: impl AsRef<Path>, b: &FeatureBundle) -> Result<()> {
    write_container(
        path,
        &bundle_arrays(b),
        &serde_json::json!({ "speaker_id": b.speaker_id }),
    )
}

fn matrix(c: &Container, name: &str) -> Result<Array2<f64>> {
    c.require(name)?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::dims(format!("`{name}` must be a matrix")))
}

pub fn bundle_from_container(c: &Container) -> Result<FeatureBundle> {
    let xvec: Array1<f64> = c
        .require("xvec")?
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::dims("`xvec` must be a vector"))?;
    let id = c
        .meta
        .get("speaker_id")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown");
    FeatureBundle::new(
        matrix(c, "mel")?,
        matrix(c, "bnf")?,
        matrix(c, "pitch")?,
        xvec,
        id,
    )
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    bundle_from_container(&read_container(path)?)
}

/// Writes one container per utterance plus `corpus.json` with the spec.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut counts = std::collections::HashMap::new();
    for u in &corpus.utterances {
        let j = counts.entry(u.speaker_id.clone()).or_insert(0usize);
        write_bundle(dir.join(format!("{}_{:03}.mtcr", u.speaker_id, j)), u)?;
        *j += 1;
    }
    std::fs::write(
        dir.join("corpus.json"),
        serde_json::to_string_pretty(&corpus.spec)?,
    )?;
    Ok(())
}

/// Reads every `*.mtcr` utterance in `dir`, in file-name order.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<FeatureBundle>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io_at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mtcr"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::CorpusTooSmall(format!(
            "no .mtcr utterances in {}",
            dir.display()
        )));
    }
    paths.iter().map(read_bundle).collect()
}
