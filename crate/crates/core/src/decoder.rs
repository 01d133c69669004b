//! Speech decoder: multi-level fusion blocks, smoother and postnet.

use ndarray::{Array2, Array3};

use crate::attention::attend_rows;
use crate::config::ModelConfig;
use crate::encoders::SourceVars;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Affine, PlaneConv, SelfAttentionBlock, TimeConv};
use crate::params::ParamStore;
use crate::tcr::RetrievalVars;

/// Pools the target speaker's BNF with its own temporal attention maps so
/// the keys line up with `Z_{s_level}`.
pub fn align_speaker_keys(
    bnf_spk: &Array2<f64>,
    a_t_maps: &[Array3<f64>],
    level: usize,
) -> Result<Array2<f64>> {
    if level > a_t_maps.len() {
        return Err(Error::ConfigMismatch(format!(
            "level {level} requested but only {} maps given",
            a_t_maps.len()
        )));
    }
    let mut g = Graph::new();
    let b = g.constant(bnf_spk.clone());
    let maps: Vec<Var> = a_t_maps[..level]
        .iter()
        .map(|m| {
            let (s, _, gt) = m.dim();
            g.constant(m.to_shape((s, gt)).unwrap().to_owned())
        })
        .collect();
    let keys = align_keys(&mut g, b, &maps)?;
    Ok(g.value(*keys.last().unwrap_or(&b)).clone())
}

/// Graph form; `maps[l]` holds one weight row per segment. Returns the
/// pooled keys after each level.
pub fn align_keys(g: &mut Graph, bnf_spk: Var, maps: &[Var]) -> Result<Vec<Var>> {
    let mut cur = bnf_spk;
    let mut out = Vec::with_capacity(maps.len());
    for (l, &m) in maps.iter().enumerate() {
        let (s, gt) = g.shape(m);
        let t = g.shape(cur).0;
        if s * gt != t {
            return Err(Error::LengthMismatch(format!(
                "level {} keys have {t} frames but the attention map covers {}",
                l + 1,
                s * gt
            )));
        }
        let col = g.reshape(m, t, 1);
        let w = g.mul_col(cur, col);
        cur = g.group_sum_rows(w, gt);
        out.push(cur);
    }
    Ok(out)
}

/// BNF-keyed cross-attention into one speaker level, then a conv residual.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub proj_s: Affine,
    pub proj_q: Affine,
    pub proj_k: Affine,
    pub proj_v: Affine,
    pub conv: PlaneConv,
    pub post: Affine,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bnf_dim: usize,
        d: usize,
        speaker_width: usize,
    ) -> Self {
        Self {
            proj_s: Affine::new(store, &format!("{name}.proj_s"), bnf_dim, d),
            proj_q: Affine::new(store, &format!("{name}.proj_q"), d, d),
            proj_k: Affine::new(store, &format!("{name}.proj_k"), bnf_dim, d),
            proj_v: Affine::new(store, &format!("{name}.proj_v"), speaker_width, d),
            conv: PlaneConv::new(store, &format!("{name}.conv")),
            post: Affine::new(store, &format!("{name}.post"), d, d),
        }
    }

    /// Returns the new state and the `T_src × n_l` alignment.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Var,
        bnf_src: Var,
        spk_keys: Var,
        z_s: Var,
    ) -> Result<(Var, Var)> {
        let (n_k, _) = g.shape(spk_keys);
        let (n_z, c) = g.shape(z_s);
        if n_k != n_z {
            return Err(Error::dims(format!(
                "{n_k} speaker keys vs {n_z} speaker frames"
            )));
        }
        let expected = store.value(self.proj_v.weight).nrows();
        if c != expected {
            return Err(Error::dims(format!(
                "speaker width {c} vs fusion value input {expected}"
            )));
        }
        if g.shape(state).0 != g.shape(bnf_src).0 {
            return Err(Error::dims("state and source bnf lengths differ"));
        }
        let d = g.shape(state).1;
        let s = self.proj_s.forward(g, store, bnf_src);
        let q_in = g.add(state, s);
        let q = self.proj_q.forward(g, store, q_in);
        let k = self.proj_k.forward(g, store, spk_keys);
        let v = self.proj_v.forward(g, store, z_s);
        let (o, attn) = attend_rows(g, q, k, v, (d as f64).sqrt());
        let state = g.add(state, o);
        let h = self.conv.forward(g, store, state);
        let h = g.silu(h);
        let h = self.post.forward(g, store, h);
        Ok((g.add(state, h), attn))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Indexed by level - 1.
    pub fusion: Vec<FusionBlock>,
    pub smoother: Vec<SelfAttentionBlock>,
    pub out: Affine,
    pub postnet: Vec<TimeConv>,
}

#[derive(Debug, Clone)]
pub struct DecodeVars {
    /// Final mel, after the postnet.
    pub mel: Var,
    /// Mel before the postnet.
    pub mel_pre: Var,
    /// Cross-attention per level, index `l - 1`.
    pub cross_attn: Vec<Var>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let d = cfg.model_dim;
        let fusion = (1..=cfg.n_tcr_blocks)
            .map(|l| {
                FusionBlock::new(
                    store,
                    &format!("dec.fusion{l}"),
                    cfg.bnf_dim,
                    d,
                    cfg.channels_at(l),
                )
            })
            .collect();
        let smoother = (0..cfg.smoother_layers)
            .map(|i| SelfAttentionBlock::new(store, &format!("dec.smoother{i}"), d))
            .collect();
        Self {
            fusion,
            smoother,
            out: Affine::new(store, "dec.out", d, cfg.mel_dim),
            postnet: vec![
                TimeConv::new(store, "dec.postnet0", cfg.mel_dim, d, 5, 1),
                TimeConv::new(store, "dec.postnet1", d, d, 5, 1),
                TimeConv::new(store, "dec.postnet2", d, cfg.mel_dim, 5, 1),
            ],
        }
    }

    /// Fuses the speaker levels coarse-to-fine into `Z_add` and renders the mel.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source: &SourceVars,
        bnf_src: Var,
        bnf_spk: Var,
        retrieval: &RetrievalVars,
        cfg: &ModelConfig,
    ) -> Result<DecodeVars> {
        let levels = retrieval.levels.len();
        if levels != cfg.active_blocks() {
            return Err(Error::ConfigMismatch(format!(
                "retrieval has {levels} levels, config expects {}",
                cfg.active_blocks()
            )));
        }
        if levels > self.fusion.len() {
            return Err(Error::ConfigMismatch(format!(
                "{levels} levels but {} fusion blocks",
                self.fusion.len()
            )));
        }
        let maps: Vec<Var> = retrieval.levels.iter().map(|l| l.a_t).collect();
        let keys = align_keys(g, bnf_spk, &maps)?;
        let mut state = source.z_add;
        let mut cross_attn = vec![None; levels];
        for l in (0..levels).rev() {
            let (s, a) =
                self.fusion[l].forward(g, store, state, bnf_src, keys[l], retrieval.levels[l].z)?;
            state = s;
            cross_attn[l] = Some(a);
        }
        for b in &self.smoother {
            state = b.forward(g, store, state);
        }
        let mel_pre = self.out.forward(g, store, state);
        let mut h = mel_pre;
        for (i, conv) in self.postnet.iter().enumerate() {
            h = conv.forward(g, store, h);
            if i + 1 < self.postnet.len() {
                h = g.tanh(h);
            }
        }
        let mel = g.add(mel_pre, h);
        Ok(DecodeVars {
            mel,
            mel_pre,
            cross_attn: cross_attn.into_iter().map(Option::unwrap).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn uniform_map_is_mean_pooling() {
        let b = random(1, 8, 3);
        let map = Array3::from_elem((2, 1, 4), 0.25);
        let k = align_speaker_keys(&b, &[map], 1).unwrap();
        assert_eq!(k.dim(), (2, 3));
        for s in 0..2 {
            for c in 0..3 {
                let mean = (0..4).map(|j| b[[s * 4 + j, c]]).sum::<f64>() / 4.0;
                assert!((k[[s, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_map_selects_frames() {
        let b = random(2, 8, 2);
        let mut map = Array3::zeros((2, 1, 4));
        map[[0, 0, 3]] = 1.0;
        map[[1, 0, 1]] = 1.0;
        let k = align_speaker_keys(&b, &[map], 1).unwrap();
        assert_eq!(k.row(0), b.row(3));
        assert_eq!(k.row(1), b.row(5));
    }

    #[test]
    fn two_levels_shrink_by_sixteen() {
        let b = random(3, 128, 2);
        let maps = [
            Array3::from_elem((32, 1, 4), 0.25),
            Array3::from_elem((8, 1, 4), 0.25),
        ];
        assert_eq!(align_speaker_keys(&b, &maps, 2).unwrap().dim(), (8, 2));
        assert!(matches!(
            align_speaker_keys(&random(3, 64, 2), &maps, 1),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn single_key_broadcasts_value() {
        let mut store = ParamStore::new(7);
        let fb = FusionBlock::new(&mut store, "f", 3, 4, 2);
        let mut g = Graph::new();
        let state = g.constant(random(4, 6, 4));
        let bnf = g.constant(random(5, 6, 3));
        let keys = g.constant(random(6, 1, 3));
        let z = g.constant(array![[0.3, -0.7]]);
        let (_, attn) = fb.forward(&mut g, &store, state, bnf, keys, z).unwrap();
        assert!(g.value(attn).iter().all(|&w| w == 1.0));
        assert_eq!(g.shape(attn), (6, 1));
    }

    #[test]
    fn zero_value_path_severs_speaker() {
        let mut store = ParamStore::new(8);
        let fb = FusionBlock::new(&mut store, "f", 3, 4, 2);
        store.value_mut(fb.proj_v.weight).fill(0.0);
        let run = |z: Array2<f64>, keys: Array2<f64>| {
            let mut g = Graph::new();
            let state = g.constant(random(4, 6, 4));
            let bnf = g.constant(random(5, 6, 3));
            let k = g.constant(keys);
            let zv = g.constant(z);
            let (s, a) = fb.forward(&mut g, &store, state, bnf, k, zv).unwrap();
            for row in g.value(a).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            g.value(s).clone()
        };
        assert_eq!(
            run(random(9, 5, 2), random(10, 5, 3)),
            run(random(11, 5, 2), random(12, 5, 3))
        );
    }
}
