//! Frozen perceptual networks and the training losses built on them.
//!
//! Every loss is a mean squared error computed over the real frames of an
//! utterance; replication-padded frames never contribute.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::graph::{Graph, Var};
use crate::model::{row, MtcrVc};
use crate::nn::{Affine, TimeConv};
use crate::params::{ParamId, ParamStore};
use crate::tcr::{RetrievalVars, SpeakerRetrievalOutput};

/// Activations of the frozen style model.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleFeatures {
    pub h_l: Array2<f64>,
    pub h_m: Array2<f64>,
    pub h_h: Array1<f64>,
}

/// Reference-encoder-like conv stack followed by three affine layers.
#[derive(Debug, Clone)]
pub struct StyleModel {
    pub conv1: TimeConv,
    pub conv2: TimeConv,
    pub fc: [Affine; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub h_l: Var,
    pub h_m: Var,
    pub h_h: Var,
}

impl StyleModel {
    fn new(store: &mut ParamStore, mel: usize, d: usize) -> Self {
        Self {
            conv1: TimeConv::new(store, "style.conv1", mel, d, 3, 2),
            conv2: TimeConv::new(store, "style.conv2", d, d, 3, 2),
            fc: [
                Affine::new(store, "style.fc1", d, d),
                Affine::new(store, "style.fc2", d, d),
                Affine::new(store, "style.fc3", d, d),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> StyleVars {
        let h = self.conv1.forward(g, store, mel);
        let h_l = g.tanh(h);
        let h = self.conv2.forward(g, store, h_l);
        let h_m = g.tanh(h);
        let mut h = g.mean_rows(h_m);
        for (i, fc) in self.fc.iter().enumerate() {
            h = fc.forward(g, store, h);
            if i < 2 {
                h = g.tanh(h);
            }
        }
        StyleVars { h_l, h_m, h_h: h }
    }
}

/// Conv bank, projection with residual, highway layer and a bidirectional
/// recurrence, predicting BNF from mel.
#[derive(Debug, Clone)]
pub struct ContentModel {
    pub bank: Vec<TimeConv>,
    pub proj: Affine,
    pub gate: Affine,
    pub transform: Affine,
    pub rnn_fwd: [ParamId; 3],
    pub rnn_bwd: [ParamId; 3],
    pub out: Affine,
}

impl ContentModel {
    fn new(store: &mut ParamStore, mel: usize, d: usize, bnf: usize) -> Self {
        let bank = [1, 3, 5]
            .iter()
            .map(|&k| TimeConv::new(store, &format!("content.bank{k}"), mel, d, k, 1))
            .collect();
        let hidden = (d / 2).max(1);
        let mut rnn = |dir: &str| {
            [
                store.uniform(format!("content.rnn_{dir}.w_in"), mel, hidden, mel),
                store.uniform(format!("content.rnn_{dir}.w_rec"), hidden, hidden, hidden),
                store.zeros(format!("content.rnn_{dir}.bias"), 1, hidden),
            ]
        };
        let rnn_fwd = rnn("fwd");
        let rnn_bwd = rnn("bwd");
        Self {
            bank,
            proj: Affine::new(store, "content.proj", 3 * d, mel),
            gate: Affine::new(store, "content.highway_gate", mel, mel),
            transform: Affine::new(store, "content.highway_transform", mel, mel),
            rnn_fwd,
            rnn_bwd,
            out: Affine::new(store, "content.out", 2 * hidden, bnf),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Var {
        let parts: Vec<Var> = self.bank.iter().map(|c| c.forward(g, store, mel)).collect();
        let bank = g.concat_cols(&parts);
        let bank = g.tanh(bank);
        let p = self.proj.forward(g, store, bank);
        let x = g.add(p, mel);
        // Highway: x + gate * (transform - x).
        let gate = self.gate.forward(g, store, x);
        let gate = g.sigmoid(gate);
        let tr = self.transform.forward(g, store, x);
        let tr = g.tanh(tr);
        let delta = g.sub(tr, x);
        let gd = g.mul(gate, delta);
        let x = g.add(x, gd);
        let rnn = |g: &mut Graph, ids: &[ParamId; 3], x: Var| {
            let w = g.param(store, ids[0]);
            let u = g.param(store, ids[1]);
            let b = g.param(store, ids[2]);
            g.rnn_tanh(x, w, u, b)
        };
        let fwd = rnn(g, &self.rnn_fwd, x);
        let t = g.shape(x).0;
        let rev: Vec<usize> = (0..t).rev().collect();
        let xr = g.select_rows(x, &rev);
        let bwd = rnn(g, &self.rnn_bwd, xr);
        let bwd = g.select_rows(bwd, &rev);
        let h = g.concat_cols(&[fwd, bwd]);
        self.out.forward(g, store, h)
    }
}

/// Pooling network standing in for a speaker-verification model. Used by
/// the metrics only.
#[derive(Debug, Clone)]
pub struct SvStub {
    pub hidden: Affine,
    pub out: Affine,
}

impl SvStub {
    fn new(store: &mut ParamStore, mel: usize, d: usize, xvec: usize) -> Self {
        Self {
            hidden: Affine::new(store, "sv.hidden", mel, d),
            out: Affine::new(store, "sv.out", 2 * d, xvec),
        }
    }
}

/// The frozen networks, all built from `cfg.frozen_seed`.
#[derive(Debug, Clone)]
pub struct FrozenModels {
    pub store: ParamStore,
    pub style: StyleModel,
    pub content: ContentModel,
    pub sv: SvStub,
}

impl FrozenModels {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut store = ParamStore::new(cfg.frozen_seed);
        let d = cfg.model_dim;
        let style = StyleModel::new(&mut store, cfg.mel_dim, d);
        let content = ContentModel::new(&mut store, cfg.mel_dim, d, cfg.bnf_dim);
        let sv = SvStub::new(&mut store, cfg.mel_dim, d, cfg.xvec_dim);
        Self {
            store: store.frozen(),
            style,
            content,
            sv,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.store.fingerprint()
    }

    pub fn style_features(&self, mel: &Array2<f64>) -> StyleFeatures {
        let mut g = Graph::new();
        let m = g.constant(mel.clone());
        let v = self.style.forward(&mut g, &self.store, m);
        StyleFeatures {
            h_l: g.value(v.h_l).clone(),
            h_m: g.value(v.h_m).clone(),
            h_h: g.value(v.h_h).row(0).to_owned(),
        }
    }

    pub fn predict_bnf(&self, mel: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let m = g.constant(mel.clone());
        let v = self.content.forward(&mut g, &self.store, m);
        g.value(v).clone()
    }

    /// Utterance embedding from the SV stub: frame-wise tanh layer, mean and
    /// standard-deviation pooling, then a linear map.
    pub fn embed(&self, mel: &Array2<f64>) -> Array1<f64> {
        let w1 = self.store.value(self.sv.hidden.weight);
        let b1 = self.store.value(self.sv.hidden.bias);
        let h = (mel.dot(w1) + b1).mapv(f64::tanh);
        let mean = h.mean_axis(Axis(0)).unwrap();
        let std = h.std_axis(Axis(0), 0.0);
        let stats = ndarray::concatenate![Axis(0), mean, std];
        let w2 = self.store.value(self.sv.out.weight);
        let b2 = self.store.value(self.sv.out.bias);
        stats.dot(w2) + b2.row(0)
    }

    /// Returns the summed style loss and the three per-level terms.
    pub fn style_loss_vars(&self, g: &mut Graph, pred: Var, reference: Var) -> (Var, [Var; 3]) {
        let a = self.style.forward(g, &self.store, reference);
        let b = self.style.forward(g, &self.store, pred);
        let l = mse(g, a.h_l, b.h_l);
        let m = mse(g, a.h_m, b.h_m);
        let h = mse(g, a.h_h, b.h_h);
        let s = g.add(l, m);
        (g.add(s, h), [l, m, h])
    }

    pub fn content_loss_vars(&self, g: &mut Graph, pred: Var, reference: Var) -> Var {
        let a = self.content.forward(g, &self.store, reference);
        let b = self.content.forward(g, &self.store, pred);
        mse(g, a, b)
    }
}

/// Mean squared error node.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mel_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_same(pred, target)?;
    if pred.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok((pred - target).mapv(|x| x * x).mean().unwrap())
}

/// Sum over the low, mid and high style levels of their MSE.
pub fn style_loss(
    pred: &Array2<f64>,
    reference: &Array2<f64>,
    frozen: &FrozenModels,
) -> Result<f64> {
    check_same(pred, reference)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let r = g.constant(reference.clone());
    let (s, _) = frozen.style_loss_vars(&mut g, p, r);
    Ok(g.scalar(s))
}

pub fn content_loss(
    pred: &Array2<f64>,
    reference: &Array2<f64>,
    frozen: &FrozenModels,
) -> Result<f64> {
    check_same(pred, reference)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let r = g.constant(reference.clone());
    let c = frozen.content_loss_vars(&mut g, p, r);
    Ok(g.scalar(c))
}

/// Sum over levels of the MSE between time-averaged speaker representations.
pub fn speaker_loss(
    reference: &SpeakerRetrievalOutput,
    pred: &SpeakerRetrievalOutput,
) -> Result<f64> {
    if reference.levels.len() != pred.levels.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} vs {} retrieval levels",
            reference.levels.len(),
            pred.levels.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in reference.levels.iter().zip(&pred.levels) {
        let ma = a.z.mean_axis(Axis(0)).unwrap();
        let mb = b.z.mean_axis(Axis(0)).unwrap();
        if ma.len() != mb.len() {
            return Err(Error::dims(format!(
                "level widths {} vs {}",
                ma.len(),
                mb.len()
            )));
        }
        total += (&ma - &mb).mapv(|x| x * x).mean().unwrap();
    }
    Ok(total)
}

pub fn speaker_loss_vars(
    g: &mut Graph,
    reference: &RetrievalVars,
    pred: &RetrievalVars,
) -> Result<Var> {
    if reference.levels.len() != pred.levels.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} vs {} retrieval levels",
            reference.levels.len(),
            pred.levels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (a, b) in reference.levels.iter().zip(&pred.levels) {
        let ma = g.mean_rows(a.z);
        let mb = g.mean_rows(b.z);
        let l = mse(g, ma, mb);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Array2::zeros((1, 1)))))
}

/// One named loss term and the weight it enters the total with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub value: f64,
    pub weight: f64,
}

impl Term {
    pub fn weighted(&self) -> f64 {
        self.value * self.weight
    }
}

/// Every weighted loss term by name, plus unweighted diagnostics such as
/// the per-level style terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: BTreeMap<String, Term>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossBreakdown {
    /// Sum of weighted terms in name order.
    pub fn total(&self) -> f64 {
        self.terms.values().map(Term::weighted).sum()
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.terms.get(name).map(|t| t.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.terms.contains_key(name)
    }

    pub fn merge(&mut self, other: LossBreakdown) {
        self.terms.extend(other.terms);
        self.diagnostics.extend(other.diagnostics);
    }
}

/// Collects loss terms on a graph.
#[derive(Debug, Default)]
pub struct LossTerms {
    terms: Vec<(String, Var, f64)>,
    diagnostics: Vec<(String, Var)>,
}

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Var, weight: f64) {
        self.terms.push((name.into(), value, weight));
    }

    pub fn diagnostic(&mut self, name: impl Into<String>, value: Var) {
        self.diagnostics.push((name.into(), value));
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Term names and nodes, in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var, f64)> {
        self.terms.iter().map(|(n, v, w)| (n.as_str(), *v, *w))
    }

    /// Builds the total node and the breakdown. Terms are summed in name
    /// order so the node agrees with [`LossBreakdown::total`].
    pub fn finish(&self, g: &mut Graph) -> (Var, LossBreakdown) {
        let mut bd = LossBreakdown::default();
        for (n, v, w) in &self.terms {
            bd.terms.insert(
                n.clone(),
                Term {
                    value: g.scalar(*v),
                    weight: *w,
                },
            );
        }
        for (n, v) in &self.diagnostics {
            bd.diagnostics.insert(n.clone(), g.scalar(*v));
        }
        let mut sorted: Vec<_> = self.terms.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut total: Option<Var> = None;
        for (_, v, w) in sorted {
            let t = g.scale(*v, *w);
            total = Some(match total {
                Some(acc) => g.add(acc, t),
                None => t,
            });
        }
        let total = total.unwrap_or_else(|| g.constant(Array2::zeros((1, 1))));
        (total, bd)
    }
}

/// A padded utterance placed on the graph as constants.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceVars {
    pub mel: Var,
    pub bnf: Var,
    pub pitch: Var,
    pub xvec: Var,
    pub true_length: usize,
}

impl UtteranceVars {
    pub fn new(g: &mut Graph, model: &MtcrVc, bundle: &FeatureBundle) -> Result<Self> {
        let b = model.pad(bundle)?;
        Ok(Self {
            mel: g.constant(b.mel),
            bnf: g.constant(b.bnf),
            pitch: g.constant(b.pitch),
            xvec: g.constant(row(&b.xvec)),
            true_length: b.true_length,
        })
    }
}

/// First `n` rows.
pub fn truncate(g: &mut Graph, v: Var, n: usize) -> Var {
    g.slice_rows(v, 0, n)
}

/// Keeps the first `n` rows and replicates row `n - 1` to the old length.
pub fn repad(g: &mut Graph, v: Var, n: usize) -> Var {
    let t = g.shape(v).0;
    let rows: Vec<usize> = (0..t).map(|i| i.min(n - 1)).collect();
    g.select_rows(v, &rows)
}

/// Perceptual terms comparing `pred` with `reference`, both over `n` real
/// frames, pushed as `{prefix}.sty` and `{prefix}.con` (plus `suffix`).
#[allow(clippy::too_many_arguments)]
fn perceptual_terms(
    g: &mut Graph,
    cfg: &ModelConfig,
    frozen: &FrozenModels,
    pred: Var,
    reference: Var,
    n: usize,
    prefix: &str,
    suffix: &str,
    out: &mut LossTerms,
) {
    let w = &cfg.loss_weights;
    if !cfg.ablation.disable_style_loss {
        let p = truncate(g, pred, n);
        let r = truncate(g, reference, n);
        let (s, levels) = frozen.style_loss_vars(g, p, r);
        out.push(format!("{prefix}.sty{suffix}"), s, w.lambda_sty);
        for (lv, v) in ["l", "m", "h"].iter().zip(levels) {
            out.diagnostic(format!("{prefix}.sty{suffix}.{lv}"), v);
        }
    }
    if !cfg.ablation.disable_content_loss {
        let p = truncate(g, pred, n);
        let r = truncate(g, reference, n);
        let c = frozen.content_loss_vars(g, p, r);
        out.push(format!("{prefix}.con{suffix}"), c, w.lambda_con);
    }
}

/// Paired-path terms for a given reconstruction `pred` of `x`:
/// `pair.mel` (weight 1), `pair.spk`, `pair.sty`, `pair.con`.
pub fn paired_terms(
    g: &mut Graph,
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &UtteranceVars,
    x_retrieval: &RetrievalVars,
    pred: Var,
    out: &mut LossTerms,
) -> Result<()> {
    let cfg = &model.cfg;
    let n = x.true_length;
    if g.shape(pred) != g.shape(x.mel) {
        return Err(Error::dims(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            g.shape(x.mel)
        )));
    }
    let p = truncate(g, pred, n);
    let r = truncate(g, x.mel, n);
    let mel = mse(g, p, r);
    out.push("pair.mel", mel, 1.0);
    if !cfg.ablation.disable_speaker_loss {
        let rp = repad(g, pred, n);
        let ret = model.retrieve_vars(g, rp, x.xvec)?;
        let spk = speaker_loss_vars(g, x_retrieval, &ret)?;
        out.push("pair.spk", spk, cfg.loss_weights.lambda_spk);
    }
    perceptual_terms(g, cfg, frozen, pred, x.mel, n, "pair", "", out);
    Ok(())
}

/// Mels produced along the unpaired path.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleMels {
    /// Y's content in X's voice, over Y's padded length.
    pub y_x: Array2<f64>,
    /// X re-converted with the timbre of `y_x`, over X's padded length.
    pub x_hat: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CycleVars {
    pub y_x: Var,
    pub x_hat: Var,
}

/// Unpaired-path terms: `unpair.mel`, `unpair.spk`, `unpair.sty.{yx,xhat}`
/// and `unpair.con.{yx,xhat}`. Returns nothing when the cycle is disabled.
pub fn unpaired_terms(
    g: &mut Graph,
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &UtteranceVars,
    x_retrieval: &RetrievalVars,
    y: &UtteranceVars,
    out: &mut LossTerms,
) -> Result<Option<CycleVars>> {
    let cfg = &model.cfg;
    if cfg.ablation.disable_cycle {
        return Ok(None);
    }
    let w = &cfg.loss_weights;
    let yx = model.convert_with_retrieval(g, y.bnf, y.pitch, x.bnf, x_retrieval.clone())?;
    let yx_mel = yx.decoded.mel;
    let yx_rep = repad(g, yx_mel, y.true_length);
    let yx_ret = model.retrieve_vars(g, yx_rep, x.xvec)?;
    if !cfg.ablation.disable_speaker_loss {
        let spk = speaker_loss_vars(g, x_retrieval, &yx_ret)?;
        out.push("unpair.spk", spk, w.lambda_spk);
    }
    perceptual_terms(
        g,
        cfg,
        frozen,
        yx_mel,
        y.mel,
        y.true_length,
        "unpair",
        ".yx",
        out,
    );

    let xh = model.convert_with_retrieval(g, x.bnf, x.pitch, y.bnf, yx_ret)?;
    let xh_mel = xh.decoded.mel;
    let p = truncate(g, xh_mel, x.true_length);
    let r = truncate(g, x.mel, x.true_length);
    let mel = mse(g, p, r);
    out.push("unpair.mel", mel, w.lambda_mel);
    perceptual_terms(
        g,
        cfg,
        frozen,
        xh_mel,
        x.mel,
        x.true_length,
        "unpair",
        ".xhat",
        out,
    );
    Ok(Some(CycleVars {
        y_x: yx_mel,
        x_hat: xh_mel,
    }))
}

/// The paired and unpaired paths for one (X, Y) pair on a graph.
pub struct LossGraph {
    pub terms: LossTerms,
    pub reconstruction: Var,
    pub cycle: Option<CycleVars>,
}

/// Builds every enabled loss term for (X, Y). `y = None` skips the cycle.
pub fn build_losses(
    g: &mut Graph,
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &FeatureBundle,
    y: Option<&FeatureBundle>,
) -> Result<LossGraph> {
    let xv = UtteranceVars::new(g, model, x)?;
    let x_ret = model.retrieve_vars(g, xv.mel, xv.xvec)?;
    let rec = model.convert_with_retrieval(g, xv.bnf, xv.pitch, xv.bnf, x_ret.clone())?;
    let mut terms = LossTerms::new();
    paired_terms(g, model, frozen, &xv, &x_ret, rec.decoded.mel, &mut terms)?;
    let cycle = match y {
        Some(y) => {
            let yv = UtteranceVars::new(g, model, y)?;
            unpaired_terms(g, model, frozen, &xv, &x_ret, &yv, &mut terms)?
        }
        None => None,
    };
    Ok(LossGraph {
        terms,
        reconstruction: rec.decoded.mel,
        cycle,
    })
}

/// Paired loss of reconstructing `x` from itself.
pub fn paired_loss(
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &FeatureBundle,
) -> Result<(f64, LossBreakdown)> {
    let mut g = Graph::new();
    let lg = build_losses(&mut g, model, frozen, x, None)?;
    let (t, bd) = lg.terms.finish(&mut g);
    Ok((g.scalar(t), bd))
}

/// Unpaired (cycle) loss alone, with the intermediate mels.
pub fn unpaired_loss(
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &FeatureBundle,
    y: &FeatureBundle,
) -> Result<(f64, LossBreakdown, Option<CycleMels>)> {
    let mut g = Graph::new();
    let xv = UtteranceVars::new(&mut g, model, x)?;
    let yv = UtteranceVars::new(&mut g, model, y)?;
    let x_ret = model.retrieve_vars(&mut g, xv.mel, xv.xvec)?;
    let mut terms = LossTerms::new();
    let cycle = unpaired_terms(&mut g, model, frozen, &xv, &x_ret, &yv, &mut terms)?;
    let (t, bd) = terms.finish(&mut g);
    let mels = cycle.map(|c| CycleMels {
        y_x: g.value(c.y_x).clone(),
        x_hat: g.value(c.x_hat).clone(),
    });
    Ok((g.scalar(t), bd, mels))
}

/// Paired plus unpaired loss.
pub fn total_loss(
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &FeatureBundle,
    y: &FeatureBundle,
) -> Result<(f64, LossBreakdown)> {
    let mut g = Graph::new();
    let lg = build_losses(&mut g, model, frozen, x, Some(y))?;
    let (t, bd) = lg.terms.finish(&mut g);
    Ok((g.scalar(t), bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Elementwise-loop MSE used as an independent oracle.
    fn loop_mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                s += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        s / a.len() as f64
    }

    #[test]
    fn mel_loss_examples() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        let t = array![[0.0, 2.0], [3.0, 2.0]];
        assert_eq!(mel_loss(&p, &t).unwrap(), 1.25);
        assert_eq!(loop_mse(&p, &t), 1.25);
        assert_eq!(mel_loss(&p, &p).unwrap(), 0.0);
        let shifted = &p + 0.5;
        assert!((mel_loss(&shifted, &p).unwrap() - 0.25).abs() < 1e-15);
        assert!(mel_loss(&p, &array![[1.0]]).is_err());
    }

    #[test]
    fn style_loss_matches_loop_oracle() {
        let cfg = ModelConfig::tiny();
        let fm = FrozenModels::new(&cfg);
        let a = random(1, 64, cfg.mel_dim);
        let b = &a + &(random(2, 64, cfg.mel_dim) * 0.1);
        let s = style_loss(&b, &a, &fm).unwrap();
        let (fa, fb) = (fm.style_features(&a), fm.style_features(&b));
        let oracle = loop_mse(&fa.h_l, &fb.h_l)
            + loop_mse(&fa.h_m, &fb.h_m)
            + loop_mse(
                &fa.h_h.clone().insert_axis(Axis(0)),
                &fb.h_h.clone().insert_axis(Axis(0)),
            );
        assert!(s > 0.0);
        assert!((s - oracle).abs() < 1e-12);
        assert_eq!(style_loss(&a, &a, &fm).unwrap(), 0.0);
        assert_eq!(s, style_loss(&a, &b, &fm).unwrap());
    }

    #[test]
    fn content_loss_matches_loop_oracle() {
        let cfg = ModelConfig::tiny();
        let fm = FrozenModels::new(&cfg);
        let a = random(3, 64, cfg.mel_dim);
        let b = random(4, 64, cfg.mel_dim);
        let c = content_loss(&a, &b, &fm).unwrap();
        assert!(c.is_finite() && c > 0.0);
        assert!((c - loop_mse(&fm.predict_bnf(&a), &fm.predict_bnf(&b))).abs() < 1e-12);
        assert_eq!(c, content_loss(&b, &a, &fm).unwrap());
        assert_eq!(content_loss(&a, &a, &fm).unwrap(), 0.0);
    }

    #[test]
    fn frozen_models_are_reproducible() {
        let cfg = ModelConfig::tiny();
        let (a, b) = (FrozenModels::new(&cfg), FrozenModels::new(&cfg));
        assert_eq!(a.fingerprint(), b.fingerprint());
        let m = random(5, 12, cfg.mel_dim);
        assert_eq!(a.predict_bnf(&m), a.predict_bnf(&m));
        assert_eq!(a.embed(&m), b.embed(&m));
        assert!(a.store.is_frozen());
    }

    #[test]
    fn loss_breakdown_totals() {
        let mut g = Graph::new();
        let a = g.constant(array![[2.0]]);
        let b = g.constant(array![[3.0]]);
        let mut t = LossTerms::new();
        t.push("b", b, 0.5);
        t.push("a", a, 4.0);
        let (total, bd) = t.finish(&mut g);
        assert_eq!(g.scalar(total), 9.5);
        assert_eq!(bd.total(), 9.5);
    }

    #[test]
    fn repad_ignores_padding() {
        let mut g = Graph::new();
        let v = g.constant(array![[1.0], [2.0], [7.0], [9.0]]);
        let r = repad(&mut g, v, 2);
        assert_eq!(g.value(r), &array![[1.0], [2.0], [2.0], [2.0]]);
    }
}
