//! Source-side encoders: content, pitch and rhythm, summed into `Z_add`.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{positional_encoding, Affine, SelfAttentionBlock, TimeConv};
use crate::params::ParamStore;

/// Source representations, all `d_model` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRepresentation {
    pub content: Array2<f64>,
    pub pitch: Array2<f64>,
    /// Utterance-level, `1 × d_model`.
    pub rhythm: Array2<f64>,
    pub z_add: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SourceVars {
    pub content: Var,
    pub pitch: Var,
    pub rhythm: Var,
    pub z_add: Var,
}

impl SourceVars {
    pub fn materialize(&self, g: &Graph) -> SourceRepresentation {
        SourceRepresentation {
            content: g.value(self.content).clone(),
            pitch: g.value(self.pitch).clone(),
            rhythm: g.value(self.rhythm).clone(),
            z_add: g.value(self.z_add).clone(),
        }
    }
}

/// Input projection with sinusoidal positions, then self-attention blocks.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    pub input: Affine,
    pub blocks: Vec<SelfAttentionBlock>,
}

impl ContentEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        Self {
            input: Affine::new(store, "enc.content.input", cfg.bnf_dim, cfg.model_dim),
            blocks: (0..cfg.content_layers)
                .map(|i| {
                    SelfAttentionBlock::new(store, &format!("enc.content.layer{i}"), cfg.model_dim)
                })
                .collect(),
        }
    }

    /// The input projection plus positions, before any block.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, bnf: Var) -> Result<Var> {
        let (t, w) = g.shape(bnf);
        let expected = store.value(self.input.weight).nrows();
        if w != expected {
            return Err(Error::dims(format!(
                "bnf width {w} vs content encoder input {expected}"
            )));
        }
        let x = self.input.forward(g, store, bnf);
        let pe = g.constant(positional_encoding(t, self.input.output_dim(store)));
        Ok(g.add(x, pe))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bnf: Var) -> Result<Var> {
        let mut x = self.project(g, store, bnf)?;
        for b in &self.blocks {
            x = b.forward(g, store, x);
        }
        Ok(x)
    }
}

/// Per-frame lift, average pooling over `downsample` frames, then
/// nearest-neighbour repeat back to full length.
#[derive(Debug, Clone)]
pub struct PitchEncoder {
    pub lift: Affine,
    pub downsample: usize,
}

impl PitchEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        Self {
            lift: Affine::new(store, "enc.pitch.lift", cfg.pitch_dim, cfg.model_dim),
            downsample: cfg.pitch_downsample,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pitch: Var) -> Result<Var> {
        let (t, w) = g.shape(pitch);
        let expected = store.value(self.lift.weight).nrows();
        if w != expected {
            return Err(Error::dims(format!("pitch width {w} vs {expected}")));
        }
        if t % self.downsample != 0 {
            return Err(Error::divisibility("pitch length", t, self.downsample));
        }
        let h = self.lift.forward(g, store, pitch);
        let h = g.silu(h);
        let pooled = g.group_sum_rows(h, self.downsample);
        let pooled = g.scale(pooled, 1.0 / self.downsample as f64);
        let rows: Vec<usize> = (0..t).map(|i| i / self.downsample).collect();
        Ok(g.select_rows(pooled, &rows))
    }
}

/// Two stride-2 convolutions, mean pooling and an affine head.
#[derive(Debug, Clone)]
pub struct RhythmEncoder {
    pub conv1: TimeConv,
    pub conv2: TimeConv,
    pub head: Affine,
}

impl RhythmEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            conv1: TimeConv::new(store, "enc.rhythm.conv1", cfg.bnf_dim, d, 3, 2),
            conv2: TimeConv::new(store, "enc.rhythm.conv2", d, d, 3, 2),
            head: Affine::new(store, "enc.rhythm.head", d, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, bnf: Var) -> Result<Var> {
        let (t, w) = g.shape(bnf);
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        if w != self.conv1.input {
            return Err(Error::dims(format!(
                "bnf width {w} vs rhythm encoder input {}",
                self.conv1.input
            )));
        }
        let h = self.conv1.forward(g, store, bnf);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let h = g.silu(h);
        let h = g.mean_rows(h);
        Ok(self.head.forward(g, store, h))
    }
}

#[derive(Debug, Clone)]
pub struct Encoders {
    pub content: ContentEncoder,
    pub pitch: PitchEncoder,
    pub rhythm: RhythmEncoder,
}

impl Encoders {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        Self {
            content: ContentEncoder::new(store, cfg),
            pitch: PitchEncoder::new(store, cfg),
            rhythm: RhythmEncoder::new(store, cfg),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bnf: Var,
        pitch: Var,
    ) -> Result<SourceVars> {
        if g.shape(bnf).0 != g.shape(pitch).0 {
            return Err(Error::LengthMismatch(format!(
                "bnf has {} frames, pitch {}",
                g.shape(bnf).0,
                g.shape(pitch).0
            )));
        }
        let content = self.content.forward(g, store, bnf)?;
        let pitch = self.pitch.forward(g, store, pitch)?;
        let rhythm = self.rhythm.forward(g, store, bnf)?;
        let z_add = combine_vars(g, content, pitch, rhythm)?;
        Ok(SourceVars {
            content,
            pitch,
            rhythm,
            z_add,
        })
    }
}

pub fn combine_vars(g: &mut Graph, content: Var, pitch: Var, rhythm: Var) -> Result<Var> {
    let (c, p, r) = (g.shape(content), g.shape(pitch), g.shape(rhythm));
    if c != p || r != (1, c.1) {
        return Err(Error::dims(format!(
            "content {c:?}, pitch {p:?}, rhythm {r:?}"
        )));
    }
    let s = g.add(content, pitch);
    Ok(g.add_row(s, rhythm))
}

/// `z_add = content + pitch + rhythm`, the rhythm row broadcast over time.
pub fn combine(
    content: Array2<f64>,
    pitch: Array2<f64>,
    rhythm: Array2<f64>,
) -> Result<SourceRepresentation> {
    if content.dim() != pitch.dim() || rhythm.dim() != (1, content.ncols()) {
        return Err(Error::dims(format!(
            "content {:?}, pitch {:?}, rhythm {:?}",
            content.dim(),
            pitch.dim(),
            rhythm.dim()
        )));
    }
    let z_add = &content + &pitch + &rhythm;
    Ok(SourceRepresentation {
        content,
        pitch,
        rhythm,
        z_add,
    })
}

/// Plain-array helpers around the graph encoders.
pub fn content_encode(
    enc: &ContentEncoder,
    store: &ParamStore,
    bnf: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let x = g.constant(bnf.clone());
    let y = enc.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

pub fn pitch_encode(
    enc: &PitchEncoder,
    store: &ParamStore,
    pitch: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let x = g.constant(pitch.clone());
    let y = enc.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

pub fn rhythm_encode(
    enc: &RhythmEncoder,
    store: &ParamStore,
    bnf: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let x = g.constant(bnf.clone());
    let y = enc.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}
