//! Per-utterance feature bundles and replication padding.

use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2};

/// One utterance's aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Log-mel magnitudes, `T × mel_dim`.
    pub mel: Array2<f64>,
    /// Bottleneck features, `T × bnf_dim`.
    pub bnf: Array2<f64>,
    /// Utterance min-max normalized log-F0, `T × 1`; unvoiced frames are 0.
    pub pitch: Array2<f64>,
    /// Speaker embedding used as the retrieval query.
    pub xvec: Array1<f64>,
    pub speaker_id: String,
    /// Number of real frames before padding.
    pub true_length: usize,
}

impl FeatureBundle {
    pub fn new(
        mel: Array2<f64>,
        bnf: Array2<f64>,
        pitch: Array2<f64>,
        xvec: Array1<f64>,
        speaker_id: impl Into<String>,
    ) -> Result<Self> {
        let t = mel.nrows();
        if bnf.nrows() != t || pitch.nrows() != t {
            return Err(Error::LengthMismatch(format!(
                "mel has {t} frames, bnf {}, pitch {}",
                bnf.nrows(),
                pitch.nrows()
            )));
        }
        if pitch.ncols() != 1 {
            return Err(Error::dims(format!(
                "pitch must be T x 1, got {:?}",
                pitch.dim()
            )));
        }
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(Self {
            mel,
            bnf,
            pitch,
            xvec,
            speaker_id: speaker_id.into(),
            true_length: t,
        })
    }

    /// Current (possibly padded) frame count.
    pub fn len(&self) -> usize {
        self.mel.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mel.nrows() == 0
    }

    /// Pads every stream to the next multiple of `multiple` by replicating
    /// the last real frame. Already-padded frames are re-derived from the
    /// real frames, so padding is idempotent.
    pub fn padded(&self, multiple: usize) -> Result<Self> {
        let n = self.true_length;
        let trunc = |a: &Array2<f64>| a.slice(s![..n, ..]).to_owned();
        let (mel, _) = pad_to_multiple(&trunc(&self.mel), multiple)?;
        let (bnf, _) = pad_to_multiple(&trunc(&self.bnf), multiple)?;
        let (pitch, _) = pad_to_multiple(&trunc(&self.pitch), multiple)?;
        Ok(Self {
            mel,
            bnf,
            pitch,
            xvec: self.xvec.clone(),
            speaker_id: self.speaker_id.clone(),
            true_length: n,
        })
    }
}

/// Pads `seq` along time to `ceil(T / multiple) * multiple` rows, the new
/// rows repeating row `T - 1`. Returns the padded matrix and the original `T`.
pub fn pad_to_multiple(seq: &Array2<f64>, multiple: usize) -> Result<(Array2<f64>, usize)> {
    let t = seq.nrows();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if multiple == 0 {
        return Err(Error::BadRange("padding multiple must be >= 1".into()));
    }
    let target = t.div_ceil(multiple) * multiple;
    let mut out = Array2::zeros((target, seq.ncols()));
    out.slice_mut(s![..t, ..]).assign(seq);
    let last = seq.row(t - 1);
    for r in t..target {
        out.row_mut(r).assign(&last);
    }
    Ok((out, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| (i * d + j) as f64)
    }

    #[test]
    fn pads_up_to_next_multiple() {
        let (p, n) = pad_to_multiple(&ramp(100, 3), 64).unwrap();
        assert_eq!(n, 100);
        assert_eq!(p.nrows(), 128);
        for r in 100..128 {
            assert_eq!(p.row(r), p.row(99));
        }
    }

    #[test]
    fn exact_multiple_is_unchanged() {
        let x = ramp(64, 2);
        let (p, n) = pad_to_multiple(&x, 64).unwrap();
        assert_eq!(n, 64);
        assert_eq!(p, x);
    }

    #[test]
    fn single_frame_replicates() {
        let (p, _) = pad_to_multiple(&ramp(1, 3), 4).unwrap();
        assert_eq!(p.nrows(), 4);
        for r in 0..4 {
            assert_eq!(p.row(r), p.row(0));
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(matches!(
            pad_to_multiple(&Array2::zeros((0, 3)), 4),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn bundle_rejects_mismatched_streams() {
        let err = FeatureBundle::new(
            ramp(4, 2),
            ramp(5, 2),
            Array2::zeros((4, 1)),
            Array1::zeros(3),
            "a",
        );
        assert!(matches!(err, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn bundle_padding_is_idempotent() {
        let b = FeatureBundle::new(
            ramp(5, 2),
            ramp(5, 3),
            Array2::zeros((5, 1)),
            Array1::zeros(3),
            "a",
        )
        .unwrap();
        let p = b.padded(4).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.true_length, 5);
        assert_eq!(p.padded(4).unwrap(), p);
    }

    proptest! {
        #[test]
        fn pad_then_truncate_is_identity(t in 1usize..40, d in 1usize..5, m in 1usize..17) {
            let x = ramp(t, d);
            let (p, n) = pad_to_multiple(&x, m).unwrap();
            prop_assert_eq!(p.nrows() % m, 0);
            prop_assert!(p.nrows() >= t && p.nrows() < t + m);
            prop_assert_eq!(p.slice(s![..n, ..]).to_owned(), x);
        }
    }
}
