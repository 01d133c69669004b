//! Multi-level temporal-channel retrieval (MTCR) speaker module.
//!
//! A prenet lifts the target mel spectrogram to `C` channels. Each TCR block
//! then runs two retrievals guided by the speaker embedding:
//!
//! * temporal: the conv output is cut into segments of `gamma_t` frames and
//!   each segment is collapsed to one frame by attention over its frames;
//! * channel: channels are cut into groups of `gamma_c`, time into ranges of
//!   `gamma_tr` frames, and each group collapses to one channel by attention
//!   over its channels, compared as `gamma_tr`-long strips.
//!
//! Every block divides time by `gamma_t` and channels by `gamma_c`.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Affine, PlaneConv};
use crate::params::ParamStore;

/// Parameters of one TCR block.
#[derive(Debug, Clone)]
pub struct TcrBlockParams {
    /// Produces `H_t` from the block input and the keys from `H_t`.
    pub conv: PlaneConv,
    /// Speaker embedding to a temporal query of the block's input width.
    pub temporal_query: Affine,
    /// Speaker embedding to a channel query of width `gamma_tr`.
    pub channel_query: Affine,
}

impl TcrBlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        xvec_dim: usize,
        channels: usize,
        gamma_tr: usize,
    ) -> Self {
        Self {
            conv: PlaneConv::new(store, &format!("{name}.conv")),
            temporal_query: Affine::new(
                store,
                &format!("{name}.temporal_query"),
                xvec_dim,
                channels,
            ),
            channel_query: Affine::new(store, &format!("{name}.channel_query"), xvec_dim, gamma_tr),
        }
    }

    fn check(
        &self,
        store: &ParamStore,
        channels: usize,
        xvec: usize,
        gamma_tr: usize,
    ) -> Result<()> {
        let tq = store.value(self.temporal_query.weight);
        let cq = store.value(self.channel_query.weight);
        if tq.dim() != (xvec, channels) {
            return Err(Error::dims(format!(
                "temporal query maps {:?} but the block sees {xvec}-dim embeddings and {channels} channels",
                tq.dim()
            )));
        }
        if cq.dim() != (xvec, gamma_tr) {
            return Err(Error::dims(format!(
                "channel query maps {:?} but gamma_tr={gamma_tr}",
                cq.dim()
            )));
        }
        Ok(())
    }

    /// Plain-array temporal retrieval. Returns `H_c` and the attention map
    /// shaped `(T/gamma_t) × 1 × gamma_t`.
    pub fn temporal_retrieval(
        &self,
        store: &ParamStore,
        z_prev: &Array2<f64>,
        xvec: &Array1<f64>,
        gamma_t: usize,
        uniform: bool,
    ) -> Result<(Array2<f64>, Array3<f64>)> {
        let mut g = Graph::new();
        let z = g.constant(z_prev.clone());
        let q = g.constant(xvec.clone().insert_axis(ndarray::Axis(0)));
        let (h, a) = temporal_retrieval(&mut g, store, z, q, self, gamma_t, uniform)?;
        Ok((g.value(h).clone(), temporal_map(g.value(a))))
    }

    /// Plain-array channel retrieval. Returns `Z_s` and the attention map
    /// shaped `(T'/gamma_tr) × (C/gamma_c) × 1 × gamma_c`.
    pub fn channel_retrieval(
        &self,
        store: &ParamStore,
        h_c: &Array2<f64>,
        xvec: &Array1<f64>,
        gamma_c: usize,
        gamma_tr: usize,
        uniform: bool,
    ) -> Result<(Array2<f64>, Array4<f64>)> {
        let mut g = Graph::new();
        let h = g.constant(h_c.clone());
        let q = g.constant(xvec.clone().insert_axis(ndarray::Axis(0)));
        let (z, a) = channel_retrieval(&mut g, store, h, q, self, gamma_c, gamma_tr, uniform)?;
        let (t, c) = h_c.dim();
        Ok((
            g.value(z).clone(),
            channel_map(g.value(a), t / gamma_tr, c / gamma_c),
        ))
    }
}

/// Reshapes `T × C` into `(T/gamma_t) × gamma_t × C` segments.
pub fn temporal_segmentation(h: &Array2<f64>, gamma_t: usize) -> Result<Array3<f64>> {
    let (t, c) = h.dim();
    if gamma_t == 0 || t % gamma_t != 0 {
        return Err(Error::divisibility(
            "temporal segmentation of T",
            t,
            gamma_t,
        ));
    }
    Ok(Array3::from_shape_fn(
        (t / gamma_t, gamma_t, c),
        |(s, j, ch)| h[[s * gamma_t + j, ch]],
    ))
}

/// Reshapes `T' × C` into `(T'/gamma_tr) × (C/gamma_c) × gamma_c × gamma_tr`;
/// element `(a, b, i, j)` is `h[a·gamma_tr + j, b·gamma_c + i]`.
pub fn channel_segmentation(
    h: &Array2<f64>,
    gamma_c: usize,
    gamma_tr: usize,
) -> Result<Array4<f64>> {
    let (t, c) = h.dim();
    if gamma_tr == 0 || t % gamma_tr != 0 {
        return Err(Error::divisibility(
            "channel segmentation of T'",
            t,
            gamma_tr,
        ));
    }
    if gamma_c == 0 || c % gamma_c != 0 {
        return Err(Error::divisibility("channel segmentation of C", c, gamma_c));
    }
    Ok(Array4::from_shape_fn(
        (t / gamma_tr, c / gamma_c, gamma_c, gamma_tr),
        |(a, b, i, j)| h[[a * gamma_tr + j, b * gamma_c + i]],
    ))
}

/// Temporal retrieval on the graph. `xvec` is `1 × D`. Returns `H_c`
/// (`(T/gamma_t) × C`) and the attention weights, one row per segment.
pub fn temporal_retrieval(
    g: &mut Graph,
    store: &ParamStore,
    z_prev: Var,
    xvec: Var,
    params: &TcrBlockParams,
    gamma_t: usize,
    uniform: bool,
) -> Result<(Var, Var)> {
    let (t, c) = g.shape(z_prev);
    if gamma_t == 0 || t % gamma_t != 0 {
        return Err(Error::divisibility(
            "temporal retrieval input length",
            t,
            gamma_t,
        ));
    }
    params.check(
        store,
        c,
        g.shape(xvec).1,
        store.value(params.channel_query.weight).ncols(),
    )?;
    let segments = t / gamma_t;
    let h = params.conv.forward(g, store, z_prev);
    let weights = if uniform {
        g.constant(Array2::from_elem((segments, gamma_t), 1.0 / gamma_t as f64))
    } else {
        // Keys: the same conv applied to H_t over the whole sequence.
        let k = params.conv.forward(g, store, h);
        let q = params.temporal_query.forward(g, store, xvec);
        let qt = g.transpose(q);
        let logits = g.matmul(k, qt);
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
        let logits = g.reshape(logits, segments, gamma_t);
        g.softmax_rows(logits)
    };
    let col = g.reshape(weights, t, 1);
    let weighted = g.mul_col(h, col);
    let h_c = g.group_sum_rows(weighted, gamma_t);
    Ok((h_c, weights))
}

/// Channel retrieval on the graph. Returns `Z_s` (`T' × C/gamma_c`) and the
/// attention weights with one row per (temporal range, channel group).
#[allow(clippy::too_many_arguments)]
pub fn channel_retrieval(
    g: &mut Graph,
    store: &ParamStore,
    h_c: Var,
    xvec: Var,
    params: &TcrBlockParams,
    gamma_c: usize,
    gamma_tr: usize,
    uniform: bool,
) -> Result<(Var, Var)> {
    let (t, c) = g.shape(h_c);
    if gamma_tr == 0 || t % gamma_tr != 0 {
        return Err(Error::divisibility(
            "channel retrieval input length",
            t,
            gamma_tr,
        ));
    }
    if gamma_c == 0 || c % gamma_c != 0 {
        return Err(Error::divisibility(
            "channel retrieval input width",
            c,
            gamma_c,
        ));
    }
    params.check(
        store,
        store.value(params.temporal_query.weight).ncols(),
        g.shape(xvec).1,
        gamma_tr,
    )?;
    let ranges = t / gamma_tr;
    let groups = c / gamma_c;
    // One row per (range, group, channel): that channel's gamma_tr-long strip.
    let mut idx = Vec::with_capacity(t * c);
    for a in 0..ranges {
        for b in 0..groups {
            for i in 0..gamma_c {
                for j in 0..gamma_tr {
                    idx.push((a * gamma_tr + j) * c + b * gamma_c + i);
                }
            }
        }
    }
    let strips = g.gather(h_c, ranges * groups * gamma_c, gamma_tr, idx);
    let weights = if uniform {
        g.constant(Array2::from_elem(
            (ranges * groups, gamma_c),
            1.0 / gamma_c as f64,
        ))
    } else {
        let q = params.channel_query.forward(g, store, xvec);
        let qt = g.transpose(q);
        let logits = g.matmul(strips, qt);
        let logits = g.scale(logits, 1.0 / (gamma_tr as f64).sqrt());
        let logits = g.reshape(logits, ranges * groups, gamma_c);
        g.softmax_rows(logits)
    };
    let col = g.reshape(weights, ranges * groups * gamma_c, 1);
    let weighted = g.mul_col(strips, col);
    let pooled = g.group_sum_rows(weighted, gamma_c);
    // Lay each pooled strip back along time.
    let mut idx = Vec::with_capacity(t * groups);
    for tt in 0..t {
        let (a, j) = (tt / gamma_tr, tt % gamma_tr);
        for b in 0..groups {
            idx.push((a * groups + b) * gamma_tr + j);
        }
    }
    let z = g.gather(pooled, t, groups, idx);
    Ok((z, weights))
}

/// One TCR level on the graph: temporal then channel retrieval.
pub fn tcr_block_forward(
    g: &mut Graph,
    store: &ParamStore,
    z_prev: Var,
    xvec: Var,
    params: &TcrBlockParams,
    cfg: &ModelConfig,
    level: usize,
) -> Result<LevelVars> {
    let (h_c, a_t) = temporal_retrieval(
        g,
        store,
        z_prev,
        xvec,
        params,
        cfg.gamma_t,
        cfg.uniform_temporal(level),
    )?;
    let (z, a_c) = channel_retrieval(
        g,
        store,
        h_c,
        xvec,
        params,
        cfg.gamma_c,
        cfg.gamma_tr[level - 1],
        cfg.uniform_channel(level),
    )?;
    Ok(LevelVars { z, a_t, a_c })
}

/// Prenet: one plane convolution on the mel followed by an affine channel lift.
#[derive(Debug, Clone)]
pub struct Prenet {
    pub conv: PlaneConv,
    pub lift: Affine,
}

#[derive(Debug, Clone)]
pub struct MtcrModule {
    pub prenet: Prenet,
    pub blocks: Vec<TcrBlockParams>,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub z: Var,
    pub a_t: Var,
    pub a_c: Var,
}

#[derive(Debug, Clone)]
pub struct RetrievalVars {
    pub z0: Var,
    pub levels: Vec<LevelVars>,
}

/// Materialized speaker-retrieval diagnostics for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRetrievalOutput {
    /// Prenet output, `T × C`.
    pub z0: Array2<f64>,
    pub levels: Vec<LevelOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    /// `(T/gamma_t^l) × (C/gamma_c^l)`.
    pub z: Array2<f64>,
    /// `(T_{l-1}/gamma_t) × 1 × gamma_t`.
    pub a_t: Array3<f64>,
    /// `(T_l/gamma_tr) × (C_{l-1}/gamma_c) × 1 × gamma_c`.
    pub a_c: Array4<f64>,
}

impl SpeakerRetrievalOutput {
    /// Arrays under their canonical export names: `z0`, `z1`…, `a_t1`…, `a_c1`….
    pub fn named_arrays(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = vec![("z0".to_string(), self.z0.clone().into_dyn())];
        for (i, l) in self.levels.iter().enumerate() {
            out.push((format!("z{}", i + 1), l.z.clone().into_dyn()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            out.push((format!("a_t{}", i + 1), l.a_t.clone().into_dyn()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            out.push((format!("a_c{}", i + 1), l.a_c.clone().into_dyn()));
        }
        out
    }
}

pub(crate) fn temporal_map(weights: &Array2<f64>) -> Array3<f64> {
    let (s, gt) = weights.dim();
    Array3::from_shape_fn((s, 1, gt), |(a, _, j)| weights[[a, j]])
}

pub(crate) fn channel_map(weights: &Array2<f64>, ranges: usize, groups: usize) -> Array4<f64> {
    let gc = weights.ncols();
    Array4::from_shape_fn((ranges, groups, 1, gc), |(a, b, _, i)| {
        weights[[a * groups + b, i]]
    })
}

impl MtcrModule {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let prenet = Prenet {
            conv: PlaneConv::new(store, "tcr.prenet.conv"),
            lift: Affine::new(store, "tcr.prenet.lift", cfg.mel_dim, cfg.prenet_channels),
        };
        let blocks = (1..=cfg.n_tcr_blocks)
            .map(|l| {
                TcrBlockParams::new(
                    store,
                    &format!("tcr.block{l}"),
                    cfg.xvec_dim,
                    cfg.channels_at(l - 1),
                    cfg.gamma_tr[l - 1],
                )
            })
            .collect();
        Self { prenet, blocks }
    }

    /// Runs the prenet and the first `cfg.active_blocks()` TCR blocks.
    /// `mel` must span a multiple of the configured temporal multiple.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mel: Var,
        xvec: Var,
        cfg: &ModelConfig,
    ) -> Result<RetrievalVars> {
        let (t, m) = g.shape(mel);
        let multiple = cfg.speaker_multiple();
        if t % multiple != 0 {
            return Err(Error::Divisibility {
                what: format!("speaker-module input length (pad to a multiple of M_T={multiple})"),
                size: t,
                factor: multiple,
            });
        }
        if m != cfg.mel_dim {
            return Err(Error::dims(format!(
                "mel width {m} vs configured {}",
                cfg.mel_dim
            )));
        }
        if g.shape(xvec) != (1, cfg.xvec_dim) {
            return Err(Error::dims(format!(
                "x-vector shape {:?} vs configured 1x{}",
                g.shape(xvec),
                cfg.xvec_dim
            )));
        }
        if cfg.active_blocks() > self.blocks.len() {
            return Err(Error::ConfigMismatch(format!(
                "{} active blocks requested, {} built",
                cfg.active_blocks(),
                self.blocks.len()
            )));
        }
        let h = self.prenet.conv.forward(g, store, mel);
        let z0 = self.prenet.lift.forward(g, store, h);
        let mut levels = Vec::with_capacity(cfg.active_blocks());
        let mut z = z0;
        for (i, block) in self.blocks.iter().take(cfg.active_blocks()).enumerate() {
            let lv = tcr_block_forward(g, store, z, xvec, block, cfg, i + 1)?;
            z = lv.z;
            levels.push(lv);
        }
        Ok(RetrievalVars { z0, levels })
    }

    /// Plain-array entry point: pads nothing, so callers pad first.
    pub fn retrieve(
        &self,
        store: &ParamStore,
        mel: &Array2<f64>,
        xvec: &Array1<f64>,
        cfg: &ModelConfig,
    ) -> Result<SpeakerRetrievalOutput> {
        let mut g = Graph::new();
        let m = g.constant(mel.clone());
        let x = g.constant(xvec.clone().insert_axis(ndarray::Axis(0)));
        let vars = self.forward(&mut g, store, m, x, cfg)?;
        Ok(materialize(&g, &vars, cfg))
    }
}

pub(crate) fn materialize(
    g: &Graph,
    vars: &RetrievalVars,
    cfg: &ModelConfig,
) -> SpeakerRetrievalOutput {
    let levels = vars
        .levels
        .iter()
        .enumerate()
        .map(|(i, lv)| {
            let level = i + 1;
            let (t, c) = g.shape(lv.z);
            let ranges = t / cfg.gamma_tr[i];
            let groups = c;
            let _ = level;
            LevelOutput {
                z: g.value(lv.z).clone(),
                a_t: temporal_map(g.value(lv.a_t)),
                a_c: channel_map(g.value(lv.a_c), ranges, groups),
            }
        })
        .collect();
    SpeakerRetrievalOutput {
        z0: g.value(vars.z0).clone(),
        levels,
    }
}
