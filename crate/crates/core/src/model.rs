//! The full trainable converter: encoders, MTCR speaker module and decoder.

use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::config::{validate_config, ModelConfig};
use crate::decoder::{DecodeVars, Decoder};
use crate::encoders::{Encoders, SourceRepresentation, SourceVars};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tcr::{materialize, MtcrModule, RetrievalVars, SpeakerRetrievalOutput};

#[derive(Debug, Clone)]
pub struct MtcrVc {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub tcr: MtcrModule,
    pub decoder: Decoder,
}

/// Graph nodes for the inputs of one conversion.
#[derive(Debug, Clone, Copy)]
pub struct ConversionInputs {
    pub bnf_src: Var,
    pub pitch_src: Var,
    pub mel_spk: Var,
    /// `1 × D`.
    pub xvec_spk: Var,
    pub bnf_spk: Var,
}

#[derive(Debug, Clone)]
pub struct ConversionVars {
    pub source: SourceVars,
    pub retrieval: RetrievalVars,
    pub decoded: DecodeVars,
}

/// Predicted mel plus every diagnostic of one conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    /// `T_src × mel_dim` over the padded source length.
    pub mel: Array2<f64>,
    pub mel_pre: Array2<f64>,
    /// `T_src × (T_spk/γ_t^l)`, index `l - 1`.
    pub cross_attn: Vec<Array2<f64>>,
    pub retrieval: SpeakerRetrievalOutput,
    pub source_rep: SourceRepresentation,
    /// Real frames of the source.
    pub true_length: usize,
}

impl ConversionResult {
    /// `mel`, `mel_pre` and `xattn_l1`….
    pub fn named_arrays(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = vec![
            ("mel".to_string(), self.mel.clone().into_dyn()),
            ("mel_pre".to_string(), self.mel_pre.clone().into_dyn()),
        ];
        for (i, a) in self.cross_attn.iter().enumerate() {
            out.push((format!("xattn_l{}", i + 1), a.clone().into_dyn()));
        }
        out
    }
}

pub(crate) fn row(x: &Array1<f64>) -> Array2<f64> {
    x.clone().insert_axis(Axis(0))
}

impl MtcrVc {
    /// Builds a model with parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let cfg = validate_config(cfg)?;
        let mut store = ParamStore::new(cfg.seed);
        let encoders = Encoders::new(&mut store, &cfg);
        let tcr = MtcrModule::new(&mut store, &cfg);
        let decoder = Decoder::new(&mut store, &cfg);
        Ok(Self {
            cfg,
            store,
            encoders,
            tcr,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Pads a bundle to the model's required temporal multiple.
    pub fn pad(&self, bundle: &FeatureBundle) -> Result<FeatureBundle> {
        self.check_bundle(bundle)?;
        bundle.padded(self.cfg.required_multiple())
    }

    fn check_bundle(&self, b: &FeatureBundle) -> Result<()> {
        let c = &self.cfg;
        if b.mel.ncols() != c.mel_dim || b.bnf.ncols() != c.bnf_dim || b.xvec.len() != c.xvec_dim {
            return Err(Error::dims(format!(
                "bundle widths mel {} bnf {} xvec {} vs configured {} {} {}",
                b.mel.ncols(),
                b.bnf.ncols(),
                b.xvec.len(),
                c.mel_dim,
                c.bnf_dim,
                c.xvec_dim
            )));
        }
        Ok(())
    }

    /// Runs the speaker module on the graph.
    pub fn retrieve_vars(&self, g: &mut Graph, mel: Var, xvec: Var) -> Result<RetrievalVars> {
        self.tcr.forward(g, &self.store, mel, xvec, &self.cfg)
    }

    /// Builds one conversion on the graph. Inputs must already be padded.
    pub fn convert_vars(&self, g: &mut Graph, inputs: ConversionInputs) -> Result<ConversionVars> {
        let retrieval = self.retrieve_vars(g, inputs.mel_spk, inputs.xvec_spk)?;
        self.convert_with_retrieval(
            g,
            inputs.bnf_src,
            inputs.pitch_src,
            inputs.bnf_spk,
            retrieval,
        )
    }

    /// Conversion reusing an already computed speaker retrieval.
    pub fn convert_with_retrieval(
        &self,
        g: &mut Graph,
        bnf_src: Var,
        pitch_src: Var,
        bnf_spk: Var,
        retrieval: RetrievalVars,
    ) -> Result<ConversionVars> {
        if g.shape(bnf_spk).0 != g.shape(retrieval.z0).0 {
            return Err(Error::LengthMismatch(format!(
                "speaker bnf has {} frames, speaker mel {}",
                g.shape(bnf_spk).0,
                g.shape(retrieval.z0).0
            )));
        }
        let source = self.encoders.forward(g, &self.store, bnf_src, pitch_src)?;
        let decoded = self.decoder.forward(
            g,
            &self.store,
            &source,
            bnf_src,
            bnf_spk,
            &retrieval,
            &self.cfg,
        )?;
        Ok(ConversionVars {
            source,
            retrieval,
            decoded,
        })
    }

    /// Converts `source` to the voice of `target`. Both are padded here.
    pub fn convert(
        &self,
        source: &FeatureBundle,
        target: &FeatureBundle,
    ) -> Result<ConversionResult> {
        let src = self.pad(source)?;
        let tgt = self.pad(target)?;
        let mut g = Graph::new();
        let inputs = ConversionInputs {
            bnf_src: g.constant(src.bnf.clone()),
            pitch_src: g.constant(src.pitch.clone()),
            mel_spk: g.constant(tgt.mel.clone()),
            xvec_spk: g.constant(row(&tgt.xvec)),
            bnf_spk: g.constant(tgt.bnf.clone()),
        };
        let v = self.convert_vars(&mut g, inputs)?;
        Ok(ConversionResult {
            mel: g.value(v.decoded.mel).clone(),
            mel_pre: g.value(v.decoded.mel_pre).clone(),
            cross_attn: v
                .decoded
                .cross_attn
                .iter()
                .map(|&a| g.value(a).clone())
                .collect(),
            retrieval: materialize(&g, &v.retrieval, &self.cfg),
            source_rep: v.source.materialize(&g),
            true_length: src.true_length,
        })
    }

    /// Speaker retrieval diagnostics for one (padded here) utterance.
    pub fn retrieve(&self, utt: &FeatureBundle) -> Result<SpeakerRetrievalOutput> {
        let u = self.pad(utt)?;
        self.tcr.retrieve(&self.store, &u.mel, &u.xvec, &self.cfg)
    }
}
