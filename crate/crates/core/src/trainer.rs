//! AdamW, the training loop and a whole-model gradient check.
//!
//! The backbone is frozen, so its token grids and the text features of every
//! sample are computed once before the first step. Each step then runs only
//! the branch on a fresh tube mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, TubeMask};
use crate::backbone::TokenGrid;
use crate::config::{ModelConfig, OptimizerConfig};
use crate::data::{self, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::BtModel;
use crate::objectives::{self, LossReport};
use crate::params::{Binder, Group, ParamStore};
use crate::rng;
use crate::tensor::{grad_check, Tape, Tensor};

/// Optimiser state. Moments exist only for trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub seed: u64,
    pub lr: f64,
}

impl TrainState {
    pub fn new(params: &ParamStore, seed: u64, lr: f64) -> Self {
        let mut m = BTreeMap::new();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable()) {
            m.insert(name.clone(), vec![0.0; p.tensor.numel()]);
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
            seed,
            lr,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p ← p − lr·wd·p − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut TrainState,
    opt: &OptimizerConfig,
) -> Result<()> {
    for name in grads.keys() {
        if !params.get(name)?.trainable() {
            return Err(Error::FreezeLeak(name.clone()));
        }
    }
    let trainable = params.trainable_names();
    if let Some(missing) = trainable.iter().find(|n| !grads.contains_key(*n)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let lr = state.lr;
    for name in trainable {
        let g = grads[&name].data();
        let m = state.m.entry(name.clone()).or_default();
        let v = state.v.entry(name.clone()).or_default();
        let p = params.tensor_mut(&name)?;
        m.resize(g.len(), 0.0);
        v.resize(g.len(), 0.0);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * opt.weight_decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Loss on one batch of cached inputs, with gradients when asked.
pub fn batch_loss(
    params: &ParamStore,
    cfg: &ModelConfig,
    grids: &[&[TokenGrid]],
    texts: &Tensor,
    mask: &TubeMask,
    want_grads: bool,
) -> Result<(LossReport, Option<BTreeMap<String, Tensor>>)> {
    let tape = Tape::new();
    let b = if want_grads {
        Binder::new(&tape, params)
    } else {
        Binder::frozen(&tape, params)
    };
    let fwd = adapter::forward_videos(&b, cfg, grids, mask)?;
    let t = tape.constant(texts.clone());
    let (total, report) = objectives::total_loss(&b, cfg, &fwd, t)?;
    if !want_grads {
        return Ok((report, None));
    }
    let grads = tape.backward(total)?;
    Ok((report, Some(b.collect_grads(&grads))))
}

/// Backbone grids and text features for every sample, in corpus order.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub grids: Vec<Vec<TokenGrid>>,
    /// `[samples, E]`.
    pub texts: Tensor,
}

impl FeatureCache {
    pub fn build(model: &BtModel, corpus: &Corpus) -> Result<Self> {
        let mut grids = Vec::with_capacity(corpus.samples.len());
        for chunk in corpus.samples.chunks(16) {
            let videos: Vec<&Tensor> = chunk.iter().map(|s| &s.video).collect();
            grids.extend(model.encode_frames_batch(&videos)?);
        }
        let captions: Vec<&[u32]> = corpus.samples.iter().map(|s| s.caption.as_slice()).collect();
        Ok(Self {
            grids,
            texts: model.encode_texts(&captions)?,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Vec<&[TokenGrid]>, Tensor)> {
        let grids = indices.iter().map(|&i| self.grids[i].as_slice()).collect();
        Ok((grids, self.texts.select(0, indices)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    /// Seeds batch order and tube masks.
    pub seed: u64,
    pub checkpoint_every: Option<u64>,
}

/// Called after each step and at each checkpoint interval.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _model: &BtModel, _step: u64) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl TrainObserver for Vec<StepRecord> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.push(*record);
        Ok(())
    }
}

pub fn step_mask(cfg: &ModelConfig, seed: u64, step: u64) -> Result<TubeMask> {
    adapter::make_tube_mask(cfg.patches, cfg.mask_ratio, rng::derive_index(seed, "mask", step))
}

/// Trains on the corpus's training split. Fails if any backbone byte changes.
pub fn train<O: TrainObserver>(
    model: &mut BtModel,
    corpus: &Corpus,
    opts: &TrainOptions,
    observer: &mut O,
) -> Result<TrainState> {
    let cache = FeatureCache::build(model, corpus)?;
    train_cached(model, corpus, &cache, opts, observer)
}

pub fn train_cached<O: TrainObserver>(
    model: &mut BtModel,
    corpus: &Corpus,
    cache: &FeatureCache,
    opts: &TrainOptions,
    observer: &mut O,
) -> Result<TrainState> {
    let cfg = model.config().clone();
    corpus.check_model(&cfg)?;
    let backbone_before = model.group_hash(Group::Backbone);
    let train_idx = corpus.split_indices(Split::Train);
    let mut state = TrainState::new(model.params(), opts.seed, cfg.optimizer.lr);
    let mut epoch = 0u64;
    let mut batches = data::batch_iter(corpus, &train_idx, cfg.batch_size, opts.seed, epoch)?;
    let mut cursor = 0usize;
    for step in 1..=opts.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = data::batch_iter(corpus, &train_idx, cfg.batch_size, opts.seed, epoch)?;
            cursor = 0;
        }
        let (grids, texts) = cache.batch(&batches[cursor])?;
        cursor += 1;
        let mask = step_mask(&cfg, opts.seed, step)?;
        let (report, grads) = batch_loss(model.params(), &cfg, &grids, &texts, &mask, true)?;
        if ![report.total, report.vtc, report.mbta, report.mbca]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                step,
                total: report.total,
                vtc: report.vtc,
                mbta: report.mbta,
                mbca: report.mbca,
            });
        }
        let grads = grads.expect("gradients requested");
        adamw_step(model.params_mut(), &grads, &mut state, &cfg.optimizer)?;
        observer.on_step(&StepRecord { step, loss: report })?;
        if let Some(every) = opts.checkpoint_every {
            if every > 0 && step % every == 0 {
                observer.on_checkpoint(model, step)?;
            }
        }
    }
    if model.group_hash(Group::Backbone) != backbone_before {
        return Err(Error::Invariant("backbone parameters changed during training".into()));
    }
    Ok(state)
}

/// Random tiny batch for gradient checks: `(videos [T,N,P], captions)`.
pub fn probe_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<(Tensor, Vec<u32>)> {
    let mut r = rng::rng(rng::derive(seed, "probe"));
    (0..batch)
        .map(|i| {
            let n = cfg.frames * cfg.patches * cfg.patch_dim;
            let video = Tensor::new(
                vec![cfg.frames, cfg.patches, cfg.patch_dim],
                rng::normal_vec(&mut r, n, 1.0),
            )
            .expect("shape matches");
            let len = cfg.text_len.min(3 + i);
            let caption = (0..len)
                .map(|j| ((i * 7 + j * 3) % cfg.vocab_size) as u32)
                .collect();
            (video, caption)
        })
        .collect()
}

/// Result of a finite-difference check over every trainable parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameters: usize,
    pub entries: usize,
    pub worst_param: String,
}

/// Compares analytic gradients of the total loss with central differences.
///
/// The model's trainable parameters are perturbed away from their init so
/// that zero-initialised projections and gates do not hide paths.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, batch: usize, h: f64) -> Result<GradCheckReport> {
    let mut model = BtModel::new(cfg.clone(), seed)?;
    let mut r = rng::rng(rng::derive(seed, "gradcheck-perturb"));
    for name in model.params().trainable_names() {
        let t = model.params_mut().tensor_mut(&name)?;
        let noise = rng::normal_vec(&mut r, t.numel(), 0.05);
        for (w, n) in t.data_mut().iter_mut().zip(noise) {
            *w += n;
        }
    }
    let probe = probe_batch(cfg, batch, seed);
    let videos: Vec<&Tensor> = probe.iter().map(|(v, _)| v).collect();
    let grids = model.encode_frames_batch(&videos)?;
    let grid_refs: Vec<&[TokenGrid]> = grids.iter().map(|g| g.as_slice()).collect();
    let captions: Vec<&[u32]> = probe.iter().map(|(_, c)| c.as_slice()).collect();
    let texts = model.encode_texts(&captions)?;
    let mask = adapter::make_tube_mask(cfg.patches, cfg.mask_ratio, rng::derive(seed, "gradcheck-mask"))?;

    let (_, grads) = batch_loss(model.params(), cfg, &grid_refs, &texts, &mask, true)?;
    let grads = grads.expect("gradients requested");
    let names: Vec<String> = grads.keys().cloned().collect();
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut entries = 0;
    for name in &names {
        let base = model.params().tensor(name)?.clone();
        entries += base.numel();
        let mut store = model.params().clone();
        let err = grad_check(
            |p: &[Tensor]| {
                *store.tensor_mut(name).map_err(|e| crate::tensor::TensorError::InvalidArgument(e.to_string()))? =
                    p[0].clone();
                let (report, _) = batch_loss(&store, cfg, &grid_refs, &texts, &mask, false)
                    .map_err(|e| crate::tensor::TensorError::InvalidArgument(e.to_string()))?;
                Ok(report.total)
            },
            std::slice::from_ref(&base),
            std::slice::from_ref(&grads[name]),
            h,
        )?;
        if err > worst || worst_param.is_empty() {
            worst = worst.max(err);
            worst_param = name.clone();
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        parameters: names.len(),
        entries,
        worst_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w]), Group::Branch, trainable);
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vec![g]))])
    }

    fn opt(wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: wd,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = one_param(0.7, true);
        let mut st = TrainState::new(&s, 0, 0.1);
        adamw_step(&mut s, &grads(0.0), &mut st, &opt(0.0)).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let mut s = one_param(2.0, true);
        let mut st = TrainState::new(&s, 0, 0.1);
        adamw_step(&mut s, &grads(0.0), &mut st, &opt(0.05)).unwrap();
        assert_eq!(s.tensor("w").unwrap().data()[0], 2.0 - 0.1 * 0.05 * 2.0);
    }

    #[test]
    fn first_step_on_square_matches_straight_line_adam() {
        let mut s = one_param(1.0, true);
        let mut st = TrainState::new(&s, 0, 0.1);
        let o = opt(0.0);
        adamw_step(&mut s, &grads(2.0), &mut st, &o).unwrap();
        let g = 2.0f64;
        let m = (1.0 - o.beta1) * g;
        let v = (1.0 - o.beta2) * g * g;
        let mhat = m / (1.0 - o.beta1);
        let vhat = v / (1.0 - o.beta2);
        let expected = 1.0 - 0.1 * mhat / (vhat.sqrt() + o.eps);
        let got = s.tensor("w").unwrap().data()[0];
        assert!((got - expected).abs() <= 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn frozen_gradient_is_rejected() {
        let mut s = one_param(1.0, false);
        let mut st = TrainState::new(&s, 0, 0.1);
        assert!(matches!(
            adamw_step(&mut s, &grads(1.0), &mut st, &opt(0.0)),
            Err(Error::FreezeLeak(_))
        ));
        assert!(st.m.is_empty());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = one_param(1.0, true);
        let mut st = TrainState::new(&s, 0, 0.1);
        assert!(matches!(
            adamw_step(&mut s, &BTreeMap::new(), &mut st, &opt(0.0)),
            Err(Error::MissingGradient(_))
        ));
    }
}
