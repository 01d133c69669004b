//! Cycle-based training: Adam updates on the total loss, per-epoch X/Y
//! pairing, checkpoints, loss logs and the finite-difference gradient check.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::datakit::container::{read_container, write_container};
use crate::datakit::corpus::{synth_corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::graph::{Gradients, Graph};
use crate::model::MtcrVc;
use crate::params::{ParamId, ParamStore};
use crate::perceptual::{build_losses, FrozenModels, LossBreakdown};

/// `lr · decay^floor(step / decay_steps)`.
pub fn lr_schedule(step: u64, cfg: &ModelConfig) -> f64 {
    let k = step / cfg.lr_decay_steps.max(1);
    cfg.lr * cfg.lr_decay.powi(k.min(i32::MAX as u64) as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Trainable parameters plus optimizer moments and loop position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: MtcrVc,
    pub adam_m: Vec<Array2<f64>>,
    pub adam_v: Vec<Array2<f64>>,
    pub step: u64,
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub cursor: usize,
}

impl TrainState {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let model = MtcrVc::new(cfg)?;
        let zeros: Vec<_> = model
            .store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.dim()))
            .collect();
        Ok(Self {
            model,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            epoch: 0,
            cursor: 0,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    /// One Adam update at `lr_schedule(step)`; increments `step`.
    pub fn apply(&mut self, grads: &Gradients) {
        let lr = lr_schedule(self.step, &self.model.cfg);
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for id in grads.ids().collect::<Vec<_>>() {
            let g = grads.get(id).unwrap();
            let m = &mut self.adam_m[id.0];
            let v = &mut self.adam_v[id.0];
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let p = self.model.store.value_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                });
        }
        self.step += 1;
    }
}

/// Loss breakdown and parameter gradients of the total loss for one pair.
pub fn loss_and_gradients(
    model: &MtcrVc,
    frozen: &FrozenModels,
    x: &FeatureBundle,
    y: Option<&FeatureBundle>,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new();
    let lg = build_losses(&mut g, model, frozen, x, y)?;
    let (total, bd) = lg.terms.finish(&mut g);
    Ok((bd, g.backward(total)))
}

fn check_finite(bd: &LossBreakdown, step: u64) -> Result<()> {
    for (name, t) in &bd.terms {
        if !t.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: name.clone(),
                step,
            });
        }
    }
    Ok(())
}

/// Averages per-term values of several breakdowns.
pub fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    let n = parts.len() as f64;
    for p in parts {
        for (k, t) in &p.terms {
            let e = out
                .terms
                .entry(k.clone())
                .or_insert(crate::perceptual::Term {
                    value: 0.0,
                    weight: t.weight,
                });
            e.value += t.value / n;
        }
        for (k, v) in &p.diagnostics {
            *out.diagnostics.entry(k.clone()).or_insert(0.0) += v / n;
        }
    }
    out
}

/// One update on a batch of `(X, Y)` pairs; gradients are averaged in batch
/// order. `Y = None` trains the paired path only.
pub fn train_batch(
    state: &mut TrainState,
    frozen: &FrozenModels,
    batch: &[(&FeatureBundle, Option<&FeatureBundle>)],
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut total = Gradients::default();
    let mut parts = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let y = if state.model.cfg.ablation.disable_cycle {
            None
        } else {
            *y
        };
        let (bd, grads) = loss_and_gradients(&state.model, frozen, x, y)?;
        check_finite(&bd, state.step)?;
        total.accumulate(&grads, scale);
        parts.push(bd);
    }
    state.apply(&total);
    Ok(mean_breakdown(&parts))
}

/// A single-pair step.
pub fn train_step(
    state: &mut TrainState,
    frozen: &FrozenModels,
    x: &FeatureBundle,
    y: &FeatureBundle,
) -> Result<LossBreakdown> {
    if x.speaker_id == y.speaker_id && !state.model.cfg.ablation.disable_cycle {
        return Err(Error::BadRange(format!(
            "cycle pair needs two speakers, both are `{}`",
            x.speaker_id
        )));
    }
    train_batch(state, frozen, &[(x, Some(y))])
}

fn mix(seed: u64, epoch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(x index, y index)` pairs of one batch; `y` is `None` without the cycle.
pub type Batch = Vec<(usize, Option<usize>)>;

/// Batches of `(x index, y index)` for one epoch: shuffled X order, Y drawn
/// uniformly from other speakers, then bucketed by padded length.
pub fn epoch_plan(corpus: &[FeatureBundle], cfg: &ModelConfig, epoch: u64) -> Result<Vec<Batch>> {
    let speakers: BTreeSet<&str> = corpus.iter().map(|u| u.speaker_id.as_str()).collect();
    if corpus.is_empty() {
        return Err(Error::CorpusTooSmall("no utterances".into()));
    }
    let cycle = !cfg.ablation.disable_cycle;
    if cycle && speakers.len() < 2 {
        return Err(Error::CorpusTooSmall(format!(
            "cycle training needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut pairs: Vec<(usize, Option<usize>)> = order
        .into_iter()
        .map(|x| {
            let y = cycle.then(|| {
                let others: Vec<usize> = (0..corpus.len())
                    .filter(|&j| corpus[j].speaker_id != corpus[x].speaker_id)
                    .collect();
                others[rng.random_range(0..others.len())]
            });
            (x, y)
        })
        .collect();
    let m = cfg.required_multiple();
    pairs.sort_by_key(|&(x, _)| corpus[x].true_length.div_ceil(m));
    let mut batches: Vec<Vec<_>> = pairs
        .chunks(cfg.batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl StepRecord {
    fn new(step: u64, epoch: u64, lr: f64, bd: &LossBreakdown) -> Self {
        Self {
            step,
            epoch,
            lr,
            total: bd.total(),
            terms: bd.terms.iter().map(|(k, t)| (k.clone(), t.value)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Stop after this many epochs (counted from epoch 0).
    pub epochs: Option<u64>,
    /// Stop once `state.step` reaches this value.
    pub max_steps: Option<u64>,
    /// Checkpoints and `loss.ndjson` go here when set.
    pub out_dir: Option<PathBuf>,
}

/// Trains until `epochs` or `max_steps` is reached, whichever is first.
/// Returns the records of the steps run by this call.
pub fn fit(
    state: &mut TrainState,
    frozen: &FrozenModels,
    corpus: &[FeatureBundle],
    opts: &FitOptions,
) -> Result<Vec<StepRecord>> {
    if opts.epochs.is_none() && opts.max_steps.is_none() {
        return Err(Error::BadRange("fit needs an epoch or step limit".into()));
    }
    epoch_plan(corpus, state.cfg(), 0)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        if state.step == 0 {
            save_checkpoint(state, dir.join(checkpoint_name(0)))?;
            save_checkpoint(state, dir.join("latest.mtcr"))?;
        }
    }
    let mut log = match &opts.out_dir {
        Some(dir) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("loss.ndjson"))?,
        ),
        None => None,
    };
    let mut records = Vec::new();
    let done = |s: &TrainState| {
        opts.epochs.is_some_and(|e| s.epoch >= e) || opts.max_steps.is_some_and(|m| s.step >= m)
    };
    while !done(state) {
        let plan = epoch_plan(corpus, state.cfg(), state.epoch)?;
        while state.cursor < plan.len() && !done(state) {
            let batch: Vec<_> = plan[state.cursor]
                .iter()
                .map(|&(x, y)| (&corpus[x], y.map(|y| &corpus[y])))
                .collect();
            let lr = lr_schedule(state.step, state.cfg());
            let bd = train_batch(state, frozen, &batch)?;
            state.cursor += 1;
            let rec = StepRecord::new(state.step, state.epoch, lr, &bd);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
            if let Some(dir) = &opts.out_dir {
                let every = state.cfg().checkpoint_every;
                if every > 0 && state.step.is_multiple_of(every) {
                    save_checkpoint(state, dir.join(checkpoint_name(state.step)))?;
                    save_checkpoint(state, dir.join("latest.mtcr"))?;
                }
            }
        }
        if state.cursor >= plan.len() {
            state.epoch += 1;
            state.cursor = 0;
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(state, dir.join("latest.mtcr"))?;
    }
    Ok(records)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.mtcr")
}

/// Parameters, Adam moments, step counters and the config echo.
pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let store = &state.model.store;
    let mut arrays = Vec::with_capacity(3 * store.len() + 1);
    for (id, p) in store.iter() {
        arrays.push((format!("param/{}", p.name), p.value.clone().into_dyn()));
        arrays.push((
            format!("adam_m/{}", p.name),
            state.adam_m[id.0].clone().into_dyn(),
        ));
        arrays.push((
            format!("adam_v/{}", p.name),
            state.adam_v[id.0].clone().into_dyn(),
        ));
    }
    arrays.push((
        "train/step".into(),
        ArrayD::from_shape_vec(IxDyn(&[1]), vec![state.step as f64]).unwrap(),
    ));
    let meta = serde_json::json!({
        "config": state.model.cfg,
        "step": state.step,
        "epoch": state.epoch,
        "cursor": state.cursor,
    });
    write_container(path, &arrays, &meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let c = read_container(path.as_ref())?;
    let corrupt = |reason: &str| Error::CorruptContainer {
        path: path.as_ref().to_path_buf(),
        reason: reason.to_string(),
    };
    let cfg: ModelConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| corrupt("no config echo"))?,
    )?;
    let mut state = TrainState::new(cfg)?;
    let int = |k: &str| {
        c.meta
            .get(k)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt(&format!("no `{k}`")))
    };
    state.step = int("step")?;
    state.epoch = int("epoch")?;
    state.cursor = int("cursor")? as usize;
    let ids: Vec<(ParamId, String)> = state
        .model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in ids {
        let load = |prefix: &str| -> Result<Array2<f64>> {
            let a = c.require(&format!("{prefix}/{name}"))?;
            a.clone()
                .into_dimensionality()
                .map_err(|_| Error::dims(format!("{prefix}/{name} is not a matrix")))
        };
        let (p, m, v) = (load("param")?, load("adam_m")?, load("adam_v")?);
        if p.dim() != state.model.store.value(id).dim() {
            return Err(Error::dims(format!(
                "checkpoint `{name}` has shape {:?}, model expects {:?}",
                p.dim(),
                state.model.store.value(id).dim()
            )));
        }
        *state.model.store.value_mut(id) = p;
        state.adam_m[id.0] = m;
        state.adam_v[id.0] = v;
    }
    Ok(state)
}

/// One checked coordinate of the finite-difference harness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckedCoordinate {
    pub param: String,
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub coordinates: Vec<CheckedCoordinate>,
    /// Largest relative error per parameter group.
    pub group_max: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub worst: CheckedCoordinate,
    pub num_parameters: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Two short utterances from different synthetic speakers, sized for `cfg`.
/// The odd length exercises padding.
pub fn gradcheck_pair(cfg: &ModelConfig) -> Result<(FeatureBundle, FeatureBundle)> {
    let spec = CorpusSpec::new(cfg, 2, 1, cfg.seed ^ 0x5eed).lengths(7, 7);
    let c = synth_corpus(&spec)?;
    Ok((c.utterances[0].clone(), c.utterances[1].clone()))
}

/// Central-difference check of the total loss (both paths) against the
/// analytic gradients on a sampled set of coordinates covering every group.
pub fn finite_difference_check(
    cfg: &ModelConfig,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    finite_difference_check_with(cfg, eps, tolerance, |_, _| {})
}

/// As [`finite_difference_check`], letting `hook` edit the analytic
/// gradients before comparison.
pub fn finite_difference_check_with(
    cfg: &ModelConfig,
    eps: f64,
    tolerance: f64,
    hook: impl Fn(&mut Gradients, &ParamStore),
) -> Result<GradCheckReport> {
    check(cfg, eps, tolerance, &|_| true, &hook)
}

/// As [`finite_difference_check`] on the weighted sum of the terms whose
/// names pass `select`, e.g. only the `unpair.*` terms.
pub fn finite_difference_check_terms(
    cfg: &ModelConfig,
    eps: f64,
    tolerance: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    check(cfg, eps, tolerance, &select, &|_, _| {})
}

fn selected_loss(
    g: &mut Graph,
    terms: &crate::perceptual::LossTerms,
    select: &dyn Fn(&str) -> bool,
) -> Result<crate::graph::Var> {
    let mut total = None;
    for (_, v, w) in terms.iter().filter(|(n, _, _)| select(n)) {
        let t = g.scale(v, w);
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    total.ok_or_else(|| Error::BadRange("no loss term selected".into()))
}

fn check(
    cfg: &ModelConfig,
    eps: f64,
    tolerance: f64,
    select: &dyn Fn(&str) -> bool,
    hook: &dyn Fn(&mut Gradients, &ParamStore),
) -> Result<GradCheckReport> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(eps > 0.0) {
        return Err(Error::BadRange(format!("eps must be positive, got {eps}")));
    }
    let mut model = MtcrVc::new(cfg.clone())?;
    let frozen = FrozenModels::new(cfg);
    let (x, y) = gradcheck_pair(cfg)?;
    let y = (!cfg.ablation.disable_cycle).then_some(&y);
    let eval = |m: &MtcrVc| -> Result<(Graph, crate::graph::Var)> {
        let mut g = Graph::new();
        let lg = build_losses(&mut g, m, &frozen, &x, y)?;
        let t = selected_loss(&mut g, &lg.terms, select)?;
        Ok((g, t))
    };
    let mut grads = {
        let (g, t) = eval(&model)?;
        g.backward(t)
    };
    hook(&mut grads, &model.store);
    let eval = |m: &MtcrVc| -> Result<f64> {
        let (g, t) = eval(m)?;
        Ok(g.scalar(t))
    };

    let total = model.store.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9c);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut coords = Vec::new();
    for id in ids {
        let p = model.store.get(id);
        let (name, group, size) = (p.name.clone(), p.group().to_string(), p.value.len());
        let want = (200 * size).div_ceil(total).clamp(1, size);
        let mut idx: Vec<usize> = (0..size).collect();
        idx.shuffle(&mut rng);
        idx.truncate(want);
        idx.sort_unstable();
        for i in idx {
            let cols = model.store.value(id).ncols();
            let (r, c) = (i / cols, i % cols);
            let orig = model.store.value(id)[[r, c]];
            model.store.value_mut(id)[[r, c]] = orig + eps;
            let up = eval(&model)?;
            model.store.value_mut(id)[[r, c]] = orig - eps;
            let down = eval(&model)?;
            model.store.value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
            coords.push(CheckedCoordinate {
                param: name.clone(),
                group: group.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let mut group_max = BTreeMap::new();
    for c in &coords {
        let e = group_max.entry(c.group.clone()).or_insert(0.0f64);
        *e = e.max(c.rel_error);
    }
    let worst = coords
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned()
        .ok_or(Error::EmptySet)?;
    if worst.rel_error > tolerance || !worst.rel_error.is_finite() {
        return Err(Error::ToleranceExceeded {
            group: worst.group,
            param: worst.param,
            index: worst.index,
            rel_error: worst.rel_error,
            tolerance,
        });
    }
    Ok(GradCheckReport {
        eps,
        max_rel_error: worst.rel_error,
        worst,
        coordinates: coords,
        group_max,
        num_parameters: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-5);
        assert!((lr_schedule(50_000, &cfg) - 5e-6).abs() < 1e-20);
        assert!((lr_schedule(149_999, &cfg) - 2.5e-6).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for s in (0..300_000).step_by(997) {
            let lr = lr_schedule(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(lr_schedule(49_999, &cfg), lr_schedule(0, &cfg));
        assert!(lr_schedule(50_000, &cfg) < lr_schedule(49_999, &cfg));
    }

    #[test]
    fn tiny_config_is_small() {
        let m = MtcrVc::new(ModelConfig::tiny()).unwrap();
        assert!(m.num_parameters() < 10_000, "{}", m.num_parameters());
    }

    #[test]
    fn epoch_plan_pairs_other_speakers() {
        let cfg = ModelConfig::desk();
        let c = synth_corpus(&CorpusSpec::new(&cfg, 3, 3, 1).lengths(20, 90)).unwrap();
        let plan = epoch_plan(&c.utterances, &cfg, 0).unwrap();
        let mut seen = Vec::new();
        for b in &plan {
            assert!(b.len() <= cfg.batch_size);
            for &(x, y) in b {
                assert_ne!(
                    c.utterances[x].speaker_id,
                    c.utterances[y.unwrap()].speaker_id
                );
                seen.push(x);
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
        assert_eq!(plan, epoch_plan(&c.utterances, &cfg, 0).unwrap());
        assert_ne!(plan, epoch_plan(&c.utterances, &cfg, 1).unwrap());
        let one = synth_corpus(&CorpusSpec::new(&cfg, 1, 2, 1)).unwrap();
        assert!(matches!(
            epoch_plan(&one.utterances, &cfg, 0),
            Err(Error::CorpusTooSmall(_))
        ));
    }

    #[test]
    fn planted_fault_is_localized() {
        let cfg = ModelConfig::tiny();
        let err = finite_difference_check_with(&cfg, 1e-5, 1e-3, |g, store| {
            let id = store.find("dec.fusion1.proj_q.weight").unwrap();
            if let Some(x) = g.get_mut(id) {
                x.mapv_inplace(|v| 2.0 * v);
            }
        })
        .unwrap_err();
        match err {
            Error::ToleranceExceeded { group, .. } => assert_eq!(group, "dec.fusion1.proj_q"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrainState::new(ModelConfig::tiny()).unwrap();
        let frozen = FrozenModels::new(s.cfg());
        let (x, y) = gradcheck_pair(s.cfg()).unwrap();
        train_step(&mut s, &frozen, &x, &y).unwrap();
        let p = dir.path().join("c.mtcr");
        save_checkpoint(&s, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.model.store.fingerprint(), s.model.store.fingerprint());
        assert_eq!(back.adam_m, s.adam_m);
        assert_eq!(back.adam_v, s.adam_v);
    }
}
