//! Scaled dot-product attention, shared by every attention site.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Output of attending one query over `n` candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// Weighted sum of value rows, width `e`.
    pub output: Array1<f64>,
    /// Softmax weights over the `n` candidates.
    pub weights: Array1<f64>,
}

/// `weights = softmax(query · keysᵀ / scale)`, `output = weights · values`.
pub fn attend(
    query: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    scale: f64,
) -> Result<AttentionResult> {
    if keys.nrows() == 0 {
        return Err(Error::dims("attention needs at least one key"));
    }
    if query.len() != keys.ncols() {
        return Err(Error::dims(format!(
            "query width {} vs key width {}",
            query.len(),
            keys.ncols()
        )));
    }
    if keys.nrows() != values.nrows() {
        return Err(Error::dims(format!(
            "{} keys vs {} values",
            keys.nrows(),
            values.nrows()
        )));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(scale > 0.0) {
        return Err(Error::BadRange(format!(
            "attention scale must be positive, got {scale}"
        )));
    }
    let logits = keys.dot(&query) / scale;
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut weights = logits.mapv(|x| (x - max).exp());
    weights /= weights.sum();
    let output = values.t().dot(&weights);
    Ok(AttentionResult { output, weights })
}

/// Graph form for a batch of queries: `softmax(Q Kᵀ / scale) V`.
/// Returns `(output, weights)` with one weight row per query.
pub fn attend_rows(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> (Var, Var) {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / scale);
    let weights = g.softmax_rows(logits);
    let out = g.matmul(weights, v);
    (out, weights)
}

/// Plain-array convenience over [`attend_rows`].
pub fn attend_matrix(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut g = Graph::new();
    let (q, k, v) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let (out, w) = attend_rows(&mut g, q, k, v, scale);
    (g.value(out).clone(), g.value(w).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    /// Independent scalar softmax used as the oracle for the worked examples.
    fn scalar_softmax(logits: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let r = attend(
            array![0.0, 0.0].view(),
            array![[3.0, -1.0], [0.5, 2.0]].view(),
            array![[5.0], [7.0]].view(),
            2f64.sqrt(),
        )
        .unwrap();
        assert_eq!(r.weights, array![0.5, 0.5]);
        assert!((r.output[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn worked_example_matches_scalar_softmax() {
        let keys = array![[2.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let values = Array2::from_shape_fn((4, 1), |(i, _)| i as f64);
        let r = attend(
            array![1.0, 0.0].view(),
            keys.view(),
            values.view(),
            2f64.sqrt(),
        )
        .unwrap();
        let oracle = scalar_softmax(&[2.0 / 2f64.sqrt(), 0.0, 0.0, 0.0]);
        for (w, o) in r.weights.iter().zip(&oracle) {
            assert!((w - o).abs() < 1e-12);
        }
        // Frozen digits, confirmed by the oracle above.
        let expected = [0.5783, 0.1406, 0.1406, 0.1406];
        for (w, e) in r.weights.iter().zip(expected) {
            assert!((w - e).abs() < 5e-5, "{w} vs {e}");
        }
    }

    #[test]
    fn single_candidate() {
        let r = attend(
            array![0.3, -2.0].view(),
            array![[1.0, 4.0]].view(),
            array![[9.0, -1.0, 2.0]].view(),
            1.0,
        )
        .unwrap();
        assert_eq!(r.weights, array![1.0]);
        assert_eq!(r.output, array![9.0, -1.0, 2.0]);
    }

    #[test]
    fn dimension_errors() {
        let q = array![1.0, 2.0];
        let k3 = array![[1.0, 2.0, 3.0]];
        let v = array![[1.0]];
        assert!(matches!(
            attend(q.view(), k3.view(), v.view(), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        let k = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(
            attend(q.view(), k.view(), v.view(), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn graph_form_agrees_with_plain_form() {
        let q = array![[0.2, -0.4], [1.0, 0.5]];
        let k = array![[1.0, 2.0], [0.0, -1.0], [0.5, 0.5]];
        let v = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let (out, w) = attend_matrix(&q, &k, &v, 1.3);
        for r in 0..2 {
            let plain = attend(q.row(r), k.view(), v.view(), 1.3).unwrap();
            for c in 0..3 {
                assert!((w[[r, c]] - plain.weights[c]).abs() < 1e-14);
            }
            for c in 0..2 {
                assert!((out[[r, c]] - plain.output[c]).abs() < 1e-14);
            }
        }
    }

    fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, usize, f64)> {
        (1usize..8, 1usize..5).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(-5.0..5.0f64, d),
                prop::collection::vec(-5.0..5.0f64, n * d),
                prop::collection::vec(-5.0..5.0f64, n * 2),
                Just(n),
                0.1..4.0f64,
            )
        })
    }

    proptest! {
        #[test]
        fn weights_normalized_and_output_in_hull((q, k, v, n, scale) in inputs()) {
            let d = q.len();
            let keys = Array2::from_shape_vec((n, d), k).unwrap();
            let values = Array2::from_shape_vec((n, 2), v).unwrap();
            let r = attend(Array1::from(q).view(), keys.view(), values.view(), scale).unwrap();
            prop_assert!((r.weights.sum() - 1.0).abs() < 1e-6);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            for c in 0..2 {
                let col = values.column(c);
                let lo = col.fold(f64::INFINITY, |m, &x| m.min(x));
                let hi = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                prop_assert!(r.output[c] >= lo - 1e-9 && r.output[c] <= hi + 1e-9);
            }
        }

        #[test]
        fn permutation_equivariance((q, k, v, n, scale) in inputs(), shift in 0usize..8) {
            let d = q.len();
            let keys = Array2::from_shape_vec((n, d), k).unwrap();
            let values = Array2::from_shape_vec((n, 2), v).unwrap();
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let pk = keys.select(ndarray::Axis(0), &perm);
            let pv = values.select(ndarray::Axis(0), &perm);
            let query = Array1::from(q);
            let a = attend(query.view(), keys.view(), values.view(), scale).unwrap();
            let b = attend(query.view(), pk.view(), pv.view(), scale).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((b.weights[i] - a.weights[p]).abs() < 1e-12);
            }
            for c in 0..2 {
                prop_assert!((a.output[c] - b.output[c]).abs() < 1e-9);
            }
        }
    }
}
