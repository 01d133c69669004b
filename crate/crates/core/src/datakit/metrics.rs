//! Objective metrics: lf0 correlation, EER threshold, speaker accuracy,
//! plus a linear pitch probe and a pluggable WER evaluator.

use std::path::PathBuf;
use std::process::Command;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::model::MtcrVc;
use crate::perceptual::FrozenModels;

/// Pearson correlation over frames where both contours are voiced (nonzero).
pub fn pearson_lf0(src: &[f64], conv: &[f64]) -> Result<f64> {
    if src.len() != conv.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} frames",
            src.len(),
            conv.len()
        )));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateInput("need at least two frames".into()));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = src
        .iter()
        .zip(conv)
        .filter(|(x, y)| **x != 0.0 && **y != 0.0)
        .map(|(x, y)| (*x, *y))
        .unzip();
    if a.len() < 2 {
        return Err(Error::DegenerateInput(
            "fewer than two voiced frames".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateInput(
            "contour is constant on the voiced frames".into(),
        ));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
}

fn rates(scores: &[(f64, bool)], threshold: f64) -> (f64, f64) {
    let pos = scores.iter().filter(|s| s.1).count() as f64;
    let neg = scores.len() as f64 - pos;
    let fa = scores.iter().filter(|s| !s.1 && s.0 >= threshold).count() as f64;
    let fr = scores.iter().filter(|s| s.1 && s.0 < threshold).count() as f64;
    (fa / neg, fr / pos)
}

/// False-accept and false-reject rates when trials scoring `>= threshold`
/// are accepted.
pub fn far_frr(scores: &[(f64, bool)], threshold: f64) -> (f64, f64) {
    rates(scores, threshold)
}

/// Threshold where FAR equals FRR, interpolating linearly between adjacent
/// operating points. When the two rates coincide over an interval, the
/// threshold is the middle of it.
pub fn eer_threshold(scores: &[(f64, bool)]) -> Result<EerPoint> {
    let pos = scores.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scores.len() {
        return Err(Error::OneClassOnly);
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::DegenerateInput("non-finite score".into()));
    }
    let mut th: Vec<f64> = scores.iter().map(|s| s.0).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    let top = *th.last().unwrap();
    th.push(top + 1e-6 * (1.0 + top.abs()));
    let pts: Vec<(f64, f64, f64)> = th
        .iter()
        .map(|&t| {
            let (fa, fr) = rates(scores, t);
            (t, fa, fr)
        })
        .collect();
    // FAR - FRR starts at 1 and ends at -1, non-increasing in between.
    let i = pts.iter().position(|p| p.1 - p.2 <= 0.0).unwrap();
    let (t1, fa1, fr1) = pts[i];
    let (t0, fa0, fr0) = pts[i - 1];
    if fa1 == fr1 {
        let mut k = i;
        while k + 1 < pts.len() && pts[k + 1].1 == pts[k + 1].2 {
            k += 1;
        }
        return Ok(EerPoint {
            threshold: 0.5 * (t0 + pts[k].0),
            eer: fa1,
        });
    }
    let d0 = fa0 - fr0;
    let d1 = fa1 - fr1;
    let f = d0 / (d0 - d1);
    Ok(EerPoint {
        threshold: t0 + f * (t1 - t0),
        eer: fa0 + f * (fa1 - fa0),
    })
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let n = (a.dot(a) * b.dot(b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        a.dot(b) / n
    }
}

/// Fraction of pairs whose SV-stub embeddings have cosine `>= threshold`.
pub fn speaker_accuracy(
    converted: &[Array2<f64>],
    targets: &[Array2<f64>],
    frozen: &FrozenModels,
    threshold: f64,
) -> Result<f64> {
    if converted.is_empty() {
        return Err(Error::EmptySet);
    }
    if converted.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} converted vs {} targets",
            converted.len(),
            targets.len()
        )));
    }
    let hits = converted
        .iter()
        .zip(targets)
        .filter(|(c, t)| cosine(&frozen.embed(c), &frozen.embed(t)) >= threshold)
        .count();
    Ok(hits as f64 / converted.len() as f64)
}

/// Every cross pair of utterances scored by SV-stub cosine.
pub fn trial_scores(utts: &[FeatureBundle], frozen: &FrozenModels) -> Vec<(f64, bool)> {
    let emb: Vec<_> = utts.iter().map(|u| frozen.embed(&real(u))).collect();
    let mut out = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            out.push((
                cosine(&emb[i], &emb[j]),
                utts[i].speaker_id == utts[j].speaker_id,
            ));
        }
    }
    out
}

pub(crate) fn real(u: &FeatureBundle) -> Array2<f64> {
    u.mel.slice(ndarray::s![..u.true_length, ..]).to_owned()
}

/// Ridge regression from mel frames to lf0, fitted on voiced frames. Reads
/// a pitch contour off converted mels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PitchProbe {
    pub fn fit(utts: &[FeatureBundle], ridge: f64) -> Result<Self> {
        let rows: Vec<(Vec<f64>, f64)> = utts
            .iter()
            .flat_map(|u| {
                (0..u.true_length)
                    .filter(|&t| u.pitch[[t, 0]] != 0.0)
                    .map(move |t| (u.mel.row(t).to_vec(), u.pitch[[t, 0]]))
            })
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptySet);
        }
        let d = rows[0].0.len();
        let x = DMatrix::from_fn(
            rows.len(),
            d + 1,
            |r, c| if c == d { 1.0 } else { rows[r].0[c] },
        );
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let rhs = x.transpose() * y;
        let sol = gram
            .cholesky()
            .ok_or_else(|| Error::DegenerateInput("pitch probe system is singular".into()))?
            .solve(&rhs);
        Ok(Self {
            weights: sol.iter().take(d).copied().collect(),
            bias: sol[d],
        })
    }

    pub fn predict(&self, mel: &Array2<f64>) -> Vec<f64> {
        mel.rows()
            .into_iter()
            .map(|r| r.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
            .collect()
    }

    /// lf0 correlation between `source` pitch and the contour read off
    /// `converted`, over the source's voiced real frames.
    pub fn correlation(&self, source: &FeatureBundle, converted: &Array2<f64>) -> Result<f64> {
        let n = source.true_length;
        let src: Vec<f64> = (0..n).map(|t| source.pitch[[t, 0]]).collect();
        let pred = self.predict(&converted.slice(ndarray::s![..n, ..]).to_owned());
        let conv: Vec<f64> = pred
            .iter()
            .zip(&src)
            .map(|(p, s)| {
                if *s == 0.0 {
                    0.0
                } else if *p == 0.0 {
                    f64::MIN_POSITIVE
                } else {
                    *p
                }
            })
            .collect();
        pearson_lf0(&src, &conv)
    }
}

/// Cross-speaker conversion pairs over a corpus: utterance `j` of the `i`-th
/// speaker (in first-seen order) converted towards utterance `j` (wrapping)
/// of speaker `i + 1` (wrapping).
pub fn conversion_pairs(utts: &[FeatureBundle]) -> Result<Vec<(usize, usize)>> {
    let mut ids: Vec<&str> = Vec::new();
    for u in utts {
        if !ids.contains(&u.speaker_id.as_str()) {
            ids.push(&u.speaker_id);
        }
    }
    if ids.len() < 2 {
        return Err(Error::CorpusTooSmall(format!(
            "conversion pairs need at least 2 speakers, found {}",
            ids.len()
        )));
    }
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            (0..utts.len())
                .filter(|&k| utts[k].speaker_id == *id)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for (i, src) in members.iter().enumerate() {
        let tgt = &members[(i + 1) % members.len()];
        for (j, &s) in src.iter().enumerate() {
            out.push((s, tgt[j % tgt.len()]));
        }
    }
    Ok(out)
}

/// Objective scores of one model over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub pairs: usize,
    /// Mean lf0 correlation between source pitch and the probe read of the
    /// converted mel.
    pub p_lf0: f64,
    pub speaker_accuracy: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    /// lf0 correlation of the probe on the ground-truth mels.
    pub probe_ceiling: f64,
}

/// Converts every pair from [`conversion_pairs`] and scores the outputs.
/// The EER threshold and the pitch probe both come from `utts` themselves.
pub fn evaluate_conversions(
    model: &MtcrVc,
    frozen: &FrozenModels,
    utts: &[FeatureBundle],
) -> Result<ConversionReport> {
    let pairs = conversion_pairs(utts)?;
    let eer = eer_threshold(&trial_scores(utts, frozen))?;
    let probe = PitchProbe::fit(utts, 1e-3)?;
    let mut converted = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut p = 0.0;
    for &(s, t) in &pairs {
        let out = model.convert(&utts[s], &utts[t])?;
        p += probe.correlation(&utts[s], &out.mel)?;
        converted.push(
            out.mel
                .slice(ndarray::s![..utts[s].true_length, ..])
                .to_owned(),
        );
        targets.push(real(&utts[t]));
    }
    let ceiling = utts
        .iter()
        .map(|u| probe.correlation(u, &u.mel))
        .sum::<Result<f64>>()?
        / utts.len() as f64;
    Ok(ConversionReport {
        pairs: pairs.len(),
        p_lf0: p / pairs.len() as f64,
        speaker_accuracy: speaker_accuracy(&converted, &targets, frozen, eer.threshold)?,
        eer: eer.eer,
        eer_threshold: eer.threshold,
        probe_ceiling: ceiling,
    })
}

/// Word error rate of converted features, from some external recognizer.
pub trait WerEvaluator {
    fn wer(&self, converted: &[Array2<f64>], transcripts: &[String]) -> Result<f64>;
}

/// Runs `program args… <features.mtcr> <transcripts.txt>` and parses a
/// single rate from its stdout.
#[derive(Debug, Clone)]
pub struct ExternalCommandEvaluator {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl WerEvaluator for ExternalCommandEvaluator {
    fn wer(&self, converted: &[Array2<f64>], transcripts: &[String]) -> Result<f64> {
        let dir = std::env::temp_dir().join(format!("mtcr-wer-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let feats = dir.join("features.mtcr");
        let arrays: Vec<_> = converted
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("utt{i:04}"), m.clone().into_dyn()))
            .collect();
        super::container::write_container(&feats, &arrays, &serde_json::Value::Null)?;
        let tr = dir.join("transcripts.txt");
        std::fs::write(&tr, transcripts.join("\n"))?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&feats)
            .arg(&tr)
            .output()?;
        let _ = std::fs::remove_dir_all(&dir);
        if !out.status.success() {
            return Err(Error::Evaluator(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse()
            .map_err(|_| Error::Evaluator(format!("expected a number, got `{}`", text.trim())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_lf0(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| 5.0 - x).collect();
        assert!((pearson_lf0(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Textbook formula by hand: means 2.5 and 2.75, sxy 6.5, sxx 5, syy 8.75.
        let oracle = 6.5 / (5.0f64 * 8.75).sqrt();
        let r = pearson_lf0(&a, &[1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 0.9827).abs() < 5e-5);
        assert!(matches!(
            pearson_lf0(&a, &[2.0; 4]),
            Err(Error::DegenerateInput(_))
        ));
        // Unvoiced frames drop out.
        assert!(
            (pearson_lf0(&[1.0, 0.0, 2.0, 3.0], &[2.0, 9.0, 4.0, 6.0]).unwrap() - 1.0).abs()
                < 1e-12
        );
    }

    fn brute_force(scores: &[(f64, bool)]) -> f64 {
        // Smallest achievable max(FAR, FRR) over a fine threshold grid.
        let lo = scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min) - 0.01;
        let hi = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max) + 0.01;
        (0..=20000)
            .map(|i| {
                let t = lo + (hi - lo) * i as f64 / 20000.0;
                let (fa, fr) = rates(scores, t);
                fa.max(fr)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn eer_examples() {
        let sep = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        let p = eer_threshold(&sep).unwrap();
        assert_eq!(p.eer, 0.0);
        assert!(p.threshold > 0.2 && p.threshold < 0.8);

        let same = [(0.5, true), (0.5, false)];
        assert!((eer_threshold(&same).unwrap().eer - 0.5).abs() < 1e-12);

        let mixed = [
            (0.9, true),
            (0.8, true),
            (0.7, false),
            (0.6, false),
            (0.75, true),
            (0.85, false),
        ];
        let p = eer_threshold(&mixed).unwrap();
        assert!((p.eer - 1.0 / 3.0).abs() < 1e-12);
        assert!(p.threshold > 0.75 && p.threshold <= 0.8);
        assert!((p.eer - brute_force(&mixed)).abs() < 1e-12);
        let (fa, fr) = rates(&mixed, p.threshold);
        assert_eq!(fa, fr);

        assert!(matches!(
            eer_threshold(&[(0.1, true)]),
            Err(Error::OneClassOnly)
        ));
    }

    #[test]
    fn accuracy_bounds() {
        let cfg = ModelConfig::tiny();
        let fm = FrozenModels::new(&cfg);
        let m = Array2::from_shape_fn((10, cfg.mel_dim), |(i, j)| ((i * 3 + j) as f64).sin());
        let other = Array2::from_shape_fn((10, cfg.mel_dim), |(i, j)| ((i + 7 * j) as f64).cos());
        assert_eq!(
            speaker_accuracy(
                std::slice::from_ref(&m),
                std::slice::from_ref(&m),
                &fm,
                1.0 - 1e-12
            )
            .unwrap(),
            1.0
        );
        assert_eq!(
            speaker_accuracy(std::slice::from_ref(&m), &[other], &fm, 1.0 + 1e-9).unwrap(),
            0.0
        );
        assert!(matches!(
            speaker_accuracy(&[], &[], &fm, 0.5),
            Err(Error::EmptySet)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn eer_matches_sweep(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..30)) {
            prop_assume!(raw.iter().any(|s| s.1) && raw.iter().any(|s| !s.1));
            let p = eer_threshold(&raw).unwrap();
            prop_assert!((0.0..=1.0).contains(&p.eer));
            // The interpolated rate never beats the best achievable operating point.
            prop_assert!(p.eer <= brute_force(&raw) + 1e-9);
            // At the threshold the two rates differ by at most one interpolation step.
            let (fa, fr) = rates(&raw, p.threshold);
            let below = raw.iter().map(|s| s.0).filter(|&x| x < p.threshold).fold(f64::NEG_INFINITY, f64::max);
            if below.is_finite() {
                let (fa0, fr0) = rates(&raw, below);
                prop_assert!((fa - fr).abs() <= ((fa0 - fr0) - (fa - fr)).abs() + 1e-12);
            }
        }

        #[test]
        fn pearson_is_symmetric_and_affine_invariant(
            a in prop::collection::vec(0.1f64..1.0, 3..20),
            noise in prop::collection::vec(-0.5f64..0.5, 20),
            k in 0.1f64..5.0,
            c in 0.0f64..3.0,
        ) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| x + n).map(|v| if v == 0.0 { 0.01 } else { v }).collect();
            let (Ok(r1), Ok(r2)) = (pearson_lf0(&a, &b), pearson_lf0(&b, &a)) else { return Ok(()); };
            prop_assert!((r1 - r2).abs() < 1e-12);
            let bs: Vec<f64> = b.iter().map(|x| k * x + c + 10.0).collect();
            let r3 = pearson_lf0(&a, &bs).unwrap();
            prop_assert!((r1 - r3).abs() < 1e-9);
        }
    }
}
