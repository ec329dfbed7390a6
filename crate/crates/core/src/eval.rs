//! Retrieval metrics, twin-order evaluation, zero-shot classification and
//! temporal-strategy accounting.

use serde::Serialize;

use crate::backbone;
use crate::config::ModelConfig;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::BtModel;
use crate::nn::Init;
use crate::params::{Group, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

const RANGE_TOL: f64 = 1e-9;

/// Query × gallery cosine similarities with one ground-truth item per query.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, truth: Vec<usize>) -> Result<Self> {
        let sh = values.shape();
        if sh.len() != 2 {
            return Err(Error::Eval(format!("similarity must be 2-D, got {sh:?}")));
        }
        if truth.len() != sh[0] {
            return Err(Error::Eval(format!(
                "{} ground-truth entries for {} queries",
                truth.len(),
                sh[0]
            )));
        }
        if let Some(&g) = truth.iter().find(|&&g| g >= sh[1]) {
            return Err(Error::Eval(format!("ground truth {g} outside gallery of {}", sh[1])));
        }
        if let Some(v) = values.data().iter().find(|v| v.is_nan() || v.abs() > 1.0 + RANGE_TOL) {
            return Err(Error::Eval(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(Self { values, truth })
    }

    /// Cosine matrix between unit-row query `[Q, E]` and gallery `[G, E]` embeddings.
    pub fn from_embeddings(queries: &Tensor, gallery: &Tensor, truth: Vec<usize>) -> Result<Self> {
        let (q, e) = (queries.shape()[0], queries.shape()[1]);
        let g = gallery.shape()[0];
        if gallery.shape()[1] != e {
            return Err(Error::Eval("query and gallery widths differ".into()));
        }
        let mut out = Vec::with_capacity(q * g);
        for i in 0..q {
            for j in 0..g {
                out.push(
                    queries
                        .row(i)
                        .iter()
                        .zip(gallery.row(j))
                        .map(|(a, b)| a * b)
                        .sum(),
                );
            }
        }
        Self::new(Tensor::new(vec![q, g], out)?, truth)
    }

    pub fn queries(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn gallery(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values.data()[q * self.gallery() + g]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }

    /// 0-based rank of the ground truth: items scoring strictly higher, plus
    /// tied items with a smaller gallery index.
    pub fn rank(&self, q: usize) -> usize {
        let gt = self.truth[q];
        let target = self.get(q, gt);
        (0..self.gallery())
            .filter(|&g| {
                let s = self.get(q, g);
                s > target || (s == target && g < gt)
            })
            .count()
    }

    /// Sub-matrix over chosen queries and gallery items; truth is remapped.
    pub fn restrict(&self, queries: &[usize], gallery: &[usize]) -> Result<Self> {
        let mut vals = Vec::with_capacity(queries.len() * gallery.len());
        let mut truth = Vec::with_capacity(queries.len());
        for &q in queries {
            for &g in gallery {
                vals.push(self.get(q, g));
            }
            let gt = gallery
                .iter()
                .position(|&g| g == self.truth[q])
                .ok_or_else(|| Error::Eval(format!("query {q} loses its ground truth")))?;
            truth.push(gt);
        }
        Self::new(Tensor::new(vec![queries.len(), gallery.len()], vals)?, truth)
    }
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > sim.gallery() {
        return Err(Error::Eval(format!("k={k} invalid for gallery of {}", sim.gallery())));
    }
    if sim.queries() == 0 {
        return Err(Error::Eval("no queries".into()));
    }
    let hits = (0..sim.queries()).filter(|&q| sim.rank(q) < k).count();
    Ok(hits as f64 / sim.queries() as f64)
}

/// Unit embeddings of every sample in a split: `(videos, texts, sample indices)`.
pub fn embed_split(model: &BtModel, corpus: &Corpus, split: Split) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Eval(format!("split {} is empty", split.name())));
    }
    let videos: Vec<&Tensor> = idx.iter().map(|&i| &corpus.samples[i].video).collect();
    let captions: Vec<&[u32]> = idx.iter().map(|&i| corpus.samples[i].caption.as_slice()).collect();
    Ok((model.encode_videos(&videos)?, model.encode_texts(&captions)?, idx))
}

/// Text-to-video similarities over a split; caption `i` belongs to video `i`.
pub fn retrieve(model: &BtModel, corpus: &Corpus, split: Split) -> Result<SimilarityMatrix> {
    let (v, t, idx) = embed_split(model, corpus, split)?;
    SimilarityMatrix::from_embeddings(&t, &v, (0..idx.len()).collect())
}

/// R@1 averaged over per-pair 2×2 galleries (each caption against its own
/// video and that video's reversed twin).
pub fn twin_recall(sim: &SimilarityMatrix, sample_idx: &[usize], corpus: &Corpus) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (a, b) in corpus.twin_pairs(corpus.samples[sample_idx[0]].split) {
        let pa = sample_idx.iter().position(|&i| i == a);
        let pb = sample_idx.iter().position(|&i| i == b);
        let (Some(pa), Some(pb)) = (pa, pb) else {
            continue;
        };
        let sub = sim.restrict(&[pa, pb], &[pa, pb])?;
        hits += (0..2).filter(|&q| sub.rank(q) == 0).count();
        total += 2;
    }
    if total == 0 {
        return Err(Error::Eval("no twin pairs in split".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Nearest-caption classification accuracy at `k`.
pub fn classify_zero_shot(
    model: &BtModel,
    videos: &[&Tensor],
    class_captions: &[&[u32]],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    for i in 0..class_captions.len() {
        if class_captions[..i].contains(&class_captions[i]) {
            return Err(Error::Eval(format!("duplicate caption for class {i}")));
        }
    }
    if videos.len() != labels.len() {
        return Err(Error::Eval("one label per video required".into()));
    }
    let v = model.encode_videos(videos)?;
    let t = model.encode_texts(class_captions)?;
    let sim = SimilarityMatrix::from_embeddings(&v, &t, labels.to_vec())?;
    recall_at_k(&sim, k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub metric: String,
    pub split: String,
    pub k: usize,
    pub value: f64,
    pub seed: u64,
    pub checkpoint_hash: String,
}

/// Metrics for both splits: text-to-video R@{1,5}, twin R@1 and twin
/// zero-shot A@1 (captions of the pair as the two classes).
pub fn evaluate(model: &BtModel, corpus: &Corpus, seed: u64, checkpoint_hash: &str) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for split in [Split::Train, Split::HeldOut] {
        let (v, t, idx) = embed_split(model, corpus, split)?;
        let sim = SimilarityMatrix::from_embeddings(&t, &v, (0..idx.len()).collect())?;
        let mut push = |metric: &str, k: usize, value: f64| {
            rows.push(EvalRow {
                metric: metric.to_string(),
                split: split.name().to_string(),
                k,
                value,
                seed,
                checkpoint_hash: checkpoint_hash.to_string(),
            })
        };
        for k in [1, 5] {
            if k <= sim.gallery() {
                push("t2v_recall", k, recall_at_k(&sim, k)?);
            }
        }
        push("twin_recall", 1, twin_recall(&sim, &idx, corpus)?);
        let vt = SimilarityMatrix::from_embeddings(&v, &t, (0..idx.len()).collect())?;
        push("twin_accuracy", 1, twin_recall(&vt, &idx, corpus)?);
    }
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("metric,split,k,value,seed,checkpoint_hash\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric, r.split, r.k, r.value, r.seed, r.checkpoint_hash
        ));
    }
    out
}

/// Held-out twin R@1 straight from a model.
pub fn held_out_twin_recall(model: &BtModel, corpus: &Corpus) -> Result<f64> {
    let (v, t, idx) = embed_split(model, corpus, Split::HeldOut)?;
    let sim = SimilarityMatrix::from_embeddings(&t, &v, (0..idx.len()).collect())?;
    twin_recall(&sim, &idx, corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    StPooling,
    JointSt,
    SeparateSt,
    BtAdapter,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::StPooling,
        Strategy::JointSt,
        Strategy::SeparateSt,
        Strategy::BtAdapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::StPooling => "st-pooling",
            Strategy::JointSt => "joint-st",
            Strategy::SeparateSt => "separate-st",
            Strategy::BtAdapter => "bt-adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    /// Tokens handed to downstream consumers.
    pub tokens: usize,
    /// Trainable parameters in the strategy's usual setting.
    pub trainable: usize,
    /// Trainable parameters with the image backbone frozen, where that is an option.
    pub trainable_frozen: Option<usize>,
    /// `Some(flag)` when fixed by the strategy, `None` when configurable.
    pub backbone_frozen: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyReport {
    pub rows: Vec<StrategyRow>,
}

impl StrategyReport {
    pub fn row(&self, s: Strategy) -> &StrategyRow {
        self.rows.iter().find(|r| r.strategy == s).expect("all strategies present")
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("strategy,tokens,trainable_params,trainable_params_frozen_backbone,backbone_frozen\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.strategy.name(),
                r.tokens,
                r.trainable,
                r.trainable_frozen.map(|v| v.to_string()).unwrap_or_default(),
                match r.backbone_frozen {
                    Some(true) => "true",
                    Some(false) => "false",
                    None => "configurable",
                }
            ));
        }
        out
    }
}

fn visual_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("visual."))
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

/// Token counts from closed forms; trainable counts from constructed
/// parameter sets of each strategy at this config.
pub fn strategy_accounting(cfg: &ModelConfig) -> Result<StrategyReport> {
    cfg.validate()?;
    let (t, n, d, e) = (cfg.frames, cfg.patches, cfg.width, cfg.embed_dim);
    let bt = BtModel::new(cfg.clone(), 0)?;
    let visual = visual_count(bt.params());

    // Extra modules each strategy adds on top of the image backbone.
    let mut r = rng::rng(0);
    let mut extra = ParamStore::new();
    let mut init = Init {
        store: &mut extra,
        rng: &mut r,
        std: cfg.init_std,
        group: Group::Heads,
        trainable: true,
    };
    init.normal("pool.proj", &[d, e]);
    init.constant("joint.temporal_pos", &[t, d], 0.0);
    for l in 1..=cfg.layers {
        let p = format!("separate.layers.{l}.temporal");
        init.layer_norm(&format!("{p}.ln"), d);
        init.attention(&format!("{p}.attn"), d);
        init.constant(&format!("{p}.proj"), &[d, d], 0.0);
    }
    let count = |prefix: &str| -> usize {
        extra
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    };
    let pool = count("pool.");
    let joint_pos = count("joint.");
    let separate = count("separate.") + joint_pos;

    let rows = vec![
        StrategyRow {
            strategy: Strategy::StPooling,
            tokens: t + n,
            trainable: pool,
            trainable_frozen: Some(pool),
            backbone_frozen: Some(true),
        },
        StrategyRow {
            strategy: Strategy::JointSt,
            tokens: t * n,
            trainable: visual + joint_pos,
            trainable_frozen: None,
            backbone_frozen: Some(false),
        },
        StrategyRow {
            strategy: Strategy::SeparateSt,
            tokens: t * n,
            trainable: visual + separate,
            trainable_frozen: Some(separate),
            backbone_frozen: None,
        },
        StrategyRow {
            strategy: Strategy::BtAdapter,
            tokens: n,
            trainable: bt.trainable_count(),
            trainable_frozen: Some(bt.trainable_count()),
            backbone_frozen: Some(true),
        },
    ];
    Ok(StrategyReport { rows })
}

/// Cosine similarity between the embeddings of two videos.
pub fn pair_cosine(model: &BtModel, a: &Tensor, b: &Tensor) -> Result<f64> {
    let va = model.encode_video(a, None)?;
    let vb = model.encode_video(b, None)?;
    Ok(crate::data::cosine(va.data(), vb.data()))
}

/// Frame-CLS mean embedding with the branch bypassed entirely, an
/// order-invariant reference encoder.
pub fn frame_mean_embedding(model: &BtModel, video: &Tensor) -> Result<Tensor> {
    let cfg = model.config();
    let grids = model.encode_frames(video)?;
    let mean = backbone::mean_frame_cls(&grids[cfg.branch_layers].tokens);
    let tape = crate::tensor::Tape::new();
    let b = crate::params::Binder::frozen(&tape, model.params());
    let x = tape.constant(Tensor::new(vec![1, cfg.width], mean)?);
    let y = backbone::project_visual(&b, cfg, x, backbone::Projection::Frozen)?;
    let y = tape.l2_normalize(y)?;
    Ok(tape.value(y).reshape(&[cfg.embed_dim])?)
}
