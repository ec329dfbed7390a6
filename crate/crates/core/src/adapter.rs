//! The trainable temporal branch: tube masking, branch input, divided
//! space-time layers, gated mixing with the backbone and the final
//! combination into a video embedding.

use rand::seq::index::sample;

use crate::backbone::{self, Projection, TokenGrid};
use crate::config::{masked_count, ModelConfig, TemporalInit};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::params::{Binder, Group, ParamStore};
use crate::rng;
use crate::tensor::{Tensor, Var};

pub const VIDEO_CLS: &str = "branch.video_cls";
/// Temporal position table P^t, `[T, D]`.
pub const TEMPORAL_POS: &str = "branch.temporal_pos";
pub const FINAL_GATE: &str = "branch.final_gate";
/// Fresh projection W'_vproj used by token alignment, `[D, E]`.
pub const TOKEN_PROJ: &str = "heads.token_proj";

pub fn layer_prefix(l: usize) -> String {
    format!("branch.layers.{l}")
}

pub fn temporal_prefix(l: usize) -> String {
    format!("branch.layers.{l}.temporal")
}

pub fn spatial_prefix(l: usize) -> String {
    format!("branch.layers.{l}.spatial")
}

/// W_t of branch layer `l`.
pub fn temporal_proj_name(l: usize) -> String {
    format!("branch.layers.{l}.temporal.proj")
}

/// Gate mixing the branch into layer `l` (2..=K).
pub fn layer_gate_name(l: usize) -> String {
    format!("branch.layers.{l}.gate")
}

/// All K gate names, layer gates first.
pub fn gate_names(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (2..=cfg.branch_layers).map(layer_gate_name).collect();
    out.push(FINAL_GATE.to_string());
    out
}

/// Adds branch and head parameters. Spatial blocks copy backbone layers
/// `L − K + 1 ..= L`, so the backbone must already be in `store`.
pub fn init_branch(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let k = cfg.branch_layers;
    let d = cfg.width;
    let mut copies = Vec::new();
    for l in 1..=k {
        let src = backbone::visual_layer_prefix(cfg.branch_source_layer() + l);
        for suffix in nn::block_param_suffixes() {
            let t = store.tensor(&format!("{src}.{suffix}"))?.clone();
            copies.push((format!("{}.{suffix}", spatial_prefix(l)), t));
        }
    }

    let mut rng = rng::rng(rng::derive(seed, "branch"));
    let mut init = Init {
        store,
        rng: &mut rng,
        std: cfg.init_std,
        group: Group::Branch,
        trainable: true,
    };
    init.normal(VIDEO_CLS, &[d]);
    init.constant(TEMPORAL_POS, &[cfg.frames, d], 0.0);
    for l in 1..=k {
        let p = temporal_prefix(l);
        init.layer_norm(&format!("{p}.ln"), d);
        init.attention(&format!("{p}.attn"), d);
        match cfg.temporal_init {
            TemporalInit::Zero => init.constant(&temporal_proj_name(l), &[d, d], 0.0),
            TemporalInit::Random => init.normal(&temporal_proj_name(l), &[d, d]),
        }
    }
    for l in 2..=k {
        init.constant(&layer_gate_name(l), &[1], 0.0);
    }
    init.constant(FINAL_GATE, &[1], 0.0);
    for (name, t) in copies {
        init.store.insert(name, t, Group::Branch, true);
    }
    if cfg.freeze_temporal_proj {
        for l in 1..=k {
            init.store
                .insert(temporal_proj_name(l), Tensor::zeros(&[d, d]), Group::Branch, false);
        }
    }

    let mut rng = rng::rng(rng::derive(seed, "heads"));
    let mut init = Init {
        store,
        rng: &mut rng,
        std: cfg.init_std,
        group: Group::Heads,
        trainable: true,
    };
    init.normal(TOKEN_PROJ, &[d, cfg.embed_dim]);
    Ok(())
}

/// Spatial positions removed from every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeMask {
    masked: Vec<usize>,
    patches: usize,
    seed: u64,
}

impl TubeMask {
    /// The empty mask used in evaluation.
    pub fn none(patches: usize) -> Self {
        Self {
            masked: Vec::new(),
            patches,
            seed: 0,
        }
    }

    /// Sorted masked positions, each in `1..=N`.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rho_effective(&self) -> f64 {
        self.masked.len() as f64 / self.patches as f64
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.masked.binary_search(&j).is_ok()
    }

    /// Surviving grid columns in order, starting with the frame `[CLS]` column 0.
    pub fn kept_columns(&self) -> Vec<usize> {
        (0..=self.patches).filter(|&j| !self.is_masked(j)).collect()
    }

    /// Surviving patch columns (excluding column 0).
    pub fn kept_patches(&self) -> Vec<usize> {
        (1..=self.patches).filter(|&j| !self.is_masked(j)).collect()
    }
}

/// Samples `round(rho · N)` tube positions uniformly without replacement.
pub fn make_tube_mask(patches: usize, rho: f64, seed: u64) -> Result<TubeMask> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Mask(format!("ratio {rho} outside [0, 1)")));
    }
    let m = masked_count(patches, rho);
    if m >= patches {
        return Err(Error::Mask(format!(
            "ratio {rho} masks {m} of {patches} positions, none left"
        )));
    }
    let mut rng = rng::rng(rng::derive(seed, "tube-mask"));
    let mut masked: Vec<usize> = sample(&mut rng, patches, m).into_iter().map(|j| j + 1).collect();
    masked.sort_unstable();
    Ok(TubeMask {
        masked,
        patches,
        seed,
    })
}

/// Branch activations for a batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchTokens {
    /// `[B, T, S', D]` where `S'` counts surviving columns including column 0.
    pub frames: Var,
    /// `[B, 1, D]`.
    pub video_cls: Var,
}

impl BranchTokens {
    /// Total token count per video: `T · S' + 1`.
    pub fn token_count(&self, b: &Binder) -> usize {
        let s = b.tape().shape(self.frames);
        s[1] * s[2] + 1
    }
}

/// Stacks one grid per video and keeps the surviving columns: `[B, T, S', D]`.
pub fn restrict(grids: &[&TokenGrid], mask: &TubeMask) -> Result<Tensor> {
    let tokens: Vec<&Tensor> = grids.iter().map(|g| &g.tokens).collect();
    Ok(Tensor::stack(&tokens)?.select(2, &mask.kept_columns())?)
}

fn check_layer(grids: &[&TokenGrid], expected: usize, what: &str) -> Result<()> {
    if grids.is_empty() {
        return Err(Error::Config(format!("{what}: empty batch")));
    }
    if let Some(g) = grids.iter().find(|g| g.layer_index != expected) {
        return Err(Error::Config(format!(
            "{what}: grid from layer {}, expected layer {expected}",
            g.layer_index
        )));
    }
    Ok(())
}

/// Eq. 3 style input: surviving tokens of the layer `L − K` grid plus P^t
/// by frame and P^s by original column, with the video `[CLS]` alongside.
pub fn branch_input(
    b: &Binder,
    cfg: &ModelConfig,
    grids: &[&TokenGrid],
    mask: &TubeMask,
) -> Result<BranchTokens> {
    check_layer(grids, cfg.branch_source_layer(), "branch input")?;
    let tape = b.tape();
    let kept = mask.kept_columns();
    let (bsz, t, s, d) = (grids.len(), cfg.frames, kept.len(), cfg.width);
    let x = tape.constant(restrict(grids, mask)?);
    let frame_idx: Vec<usize> = (0..t).flat_map(|i| std::iter::repeat_n(i, s)).collect();
    let pt = tape.gather(b.get(TEMPORAL_POS)?, 0, &frame_idx)?;
    let pt = tape.reshape(pt, &[t, s, d])?;
    let ps = tape.gather(b.get(backbone::SPATIAL_POS)?, 0, &kept)?;
    let x = tape.add(x, pt)?;
    let frames = tape.add(x, ps)?;
    Ok(BranchTokens {
        frames,
        video_cls: expand_video_cls(b, cfg, bsz)?,
    })
}

/// The learnable video `[CLS]` repeated over the batch: `[B, 1, D]`.
pub fn expand_video_cls(b: &Binder, cfg: &ModelConfig, batch: usize) -> Result<Var> {
    let tape = b.tape();
    let cls = tape.reshape(b.get(VIDEO_CLS)?, &[1, cfg.width])?;
    let cls = tape.gather(cls, 0, &vec![0; batch])?;
    Ok(tape.reshape(cls, &[batch, 1, cfg.width])?)
}

/// `W_t · attn(LN(x)) + x` over sequences `[n, S, D]`.
pub fn temporal_block(b: &Binder, cfg: &ModelConfig, l: usize, x: Var) -> Result<Var> {
    let p = temporal_prefix(l);
    let h = nn::layer_norm(b, x, &format!("{p}.ln"), cfg.ln_eps)?;
    let a = nn::attention(b, &format!("{p}.attn"), h, cfg.heads, false)?;
    let y = b.tape().matmul(a, b.get(&temporal_proj_name(l))?)?;
    Ok(b.tape().add(y, x)?)
}

/// Temporal attention within each spatial-position group across frames.
/// The video `[CLS]` joins the column-0 group.
pub fn temporal_sublayer(
    b: &Binder,
    cfg: &ModelConfig,
    l: usize,
    tokens: BranchTokens,
) -> Result<BranchTokens> {
    let tape = b.tape();
    let sh = tape.shape(tokens.frames);
    let (bsz, t, s, d) = (sh[0], sh[1], sh[2], sh[3]);

    let col0 = tape.slice(tokens.frames, 2, 0..1)?;
    let col0 = tape.reshape(col0, &[bsz, t, d])?;
    let group0 = tape.concat(&[tokens.video_cls, col0], 1)?;
    let group0 = temporal_block(b, cfg, l, group0)?;
    let video_cls = tape.slice(group0, 1, 0..1)?;
    let col0 = tape.slice(group0, 1, 1..t + 1)?;
    let col0 = tape.reshape(col0, &[bsz, t, 1, d])?;

    let frames = if s > 1 {
        let rest = tape.slice(tokens.frames, 2, 1..s)?;
        let rest = tape.permute(rest, &[0, 2, 1, 3])?;
        let rest = tape.reshape(rest, &[bsz * (s - 1), t, d])?;
        let rest = temporal_block(b, cfg, l, rest)?;
        let rest = tape.reshape(rest, &[bsz, s - 1, t, d])?;
        let rest = tape.permute(rest, &[0, 2, 1, 3])?;
        tape.concat(&[col0, rest], 2)?
    } else {
        col0
    };
    Ok(BranchTokens { frames, video_cls })
}

/// The copied CLIP block applied per frame; the video `[CLS]` runs alone.
pub fn spatial_sublayer(
    b: &Binder,
    cfg: &ModelConfig,
    l: usize,
    tokens: BranchTokens,
) -> Result<BranchTokens> {
    let tape = b.tape();
    let sh = tape.shape(tokens.frames);
    let (bsz, t, s, d) = (sh[0], sh[1], sh[2], sh[3]);
    let p = spatial_prefix(l);
    let x = tape.reshape(tokens.frames, &[bsz * t, s, d])?;
    let x = nn::transformer_block(b, &p, x, cfg.heads, cfg.ln_eps, false)?;
    let frames = tape.reshape(x, &[bsz, t, s, d])?;
    let video_cls = nn::transformer_block(b, &p, tokens.video_cls, cfg.heads, cfg.ln_eps, false)?;
    Ok(BranchTokens { frames, video_cls })
}

pub fn branch_layer(
    b: &Binder,
    cfg: &ModelConfig,
    l: usize,
    tokens: BranchTokens,
) -> Result<BranchTokens> {
    if l == 0 || l > cfg.branch_layers {
        return Err(Error::Config(format!(
            "branch layer {l} outside 1..={}",
            cfg.branch_layers
        )));
    }
    let tokens = temporal_sublayer(b, cfg, l, tokens)?;
    spatial_sublayer(b, cfg, l, tokens)
}

/// `clip + σ(w) · (branch − clip)`; exact when both sides agree.
pub fn gate_mix(b: &Binder, gate: &str, branch: Var, clip: Var) -> Result<Var> {
    let tape = b.tape();
    let sigma = tape.sigmoid(b.get(gate)?);
    let diff = tape.sub(branch, clip)?;
    let scaled = tape.scale_by(diff, sigma)?;
    Ok(tape.add(clip, scaled)?)
}

/// Mixes the branch frames with the restricted backbone grid before branch
/// layer `l` (2..=K). The video `[CLS]` passes through.
pub fn interact(
    b: &Binder,
    l: usize,
    tokens: BranchTokens,
    clip_restricted: &Tensor,
) -> Result<BranchTokens> {
    let tape = b.tape();
    let sh = tape.shape(tokens.frames);
    if sh != clip_restricted.shape() {
        return Err(Error::Config(format!(
            "branch tokens {sh:?} and restricted grid {:?} differ",
            clip_restricted.shape()
        )));
    }
    let clip = tape.constant(clip_restricted.clone());
    let frames = gate_mix(b, &layer_gate_name(l), tokens.frames, clip)?;
    Ok(BranchTokens {
        frames,
        video_cls: tokens.video_cls,
    })
}

/// Pre-LN final mix of the branch `[CLS]` `[B, 1, D]` with the mean frame
/// `[CLS]` rows `[B, D]`.
pub fn combine_final_pre(b: &Binder, video_cls: Var, mean_cls: &Tensor) -> Result<Var> {
    let tape = b.tape();
    let sh = tape.shape(video_cls);
    let cls = tape.reshape(video_cls, &[sh[0], sh[2]])?;
    let clip = tape.constant(mean_cls.clone());
    gate_mix(b, FINAL_GATE, cls, clip)
}

/// Unit-norm video embeddings `[B, E]`.
pub fn combine_final(
    b: &Binder,
    cfg: &ModelConfig,
    video_cls: Var,
    final_grids: &[&TokenGrid],
) -> Result<Var> {
    check_layer(final_grids, cfg.layers, "final combination")?;
    let rows: Vec<Vec<f64>> = final_grids
        .iter()
        .map(|g| backbone::mean_frame_cls(&g.tokens))
        .collect();
    let mean_cls = Tensor::from_rows(&rows)?;
    let mixed = combine_final_pre(b, video_cls, &mean_cls)?;
    let v = backbone::project_visual(b, cfg, mixed, Projection::Frozen)?;
    Ok(b.tape().l2_normalize(v)?)
}

/// Outputs of a batched branch pass.
#[derive(Clone, Debug)]
pub struct VideoForward {
    /// `[B, E]`, unit rows.
    pub v: Var,
    /// Branch tokens after layer K.
    pub branch: BranchTokens,
    /// Final backbone grids restricted to the surviving columns, `[B, T, S', D]`.
    pub clip_final: Tensor,
}

/// Full branch pipeline over cached backbone grids (`K + 1` per video).
pub fn forward_videos(
    b: &Binder,
    cfg: &ModelConfig,
    grids: &[&[TokenGrid]],
    mask: &TubeMask,
) -> Result<VideoForward> {
    let k = cfg.branch_layers;
    if let Some(g) = grids.iter().find(|g| g.len() != k + 1) {
        return Err(Error::Config(format!(
            "expected {} grids per video, got {}",
            k + 1,
            g.len()
        )));
    }
    if mask.patches() != cfg.patches {
        return Err(Error::Mask(format!(
            "mask over {} patches, config has {}",
            mask.patches(),
            cfg.patches
        )));
    }
    let layer = |i: usize| -> Vec<&TokenGrid> { grids.iter().map(|g| &g[i]).collect() };
    let mut tokens = branch_input(b, cfg, &layer(0), mask)?;
    for l in 1..=k {
        if l >= 2 {
            let clip = restrict(&layer(l - 1), mask)?;
            tokens = interact(b, l, tokens, &clip)?;
        }
        tokens = branch_layer(b, cfg, l, tokens)?;
    }
    let finals = layer(k);
    let v = combine_final(b, cfg, tokens.video_cls, &finals)?;
    Ok(VideoForward {
        v,
        branch: tokens,
        clip_final: restrict(&finals, mask)?,
    })
}

/// Scalar multiplications in one branch forward pass for one video,
/// counting matrix products, attention, layer norms, GELU and gating.
pub fn branch_multiply_count(cfg: &ModelConfig, rho: f64) -> Result<u64> {
    let m = masked_count(cfg.patches, rho);
    if !(0.0..1.0).contains(&rho) || m >= cfg.patches {
        return Err(Error::Mask(format!("ratio {rho} leaves no unmasked patch")));
    }
    let s = (cfg.patches - m + 1) as u64;
    let (t, d, h, e) = (
        cfg.frames as u64,
        cfg.width as u64,
        cfg.heads as u64,
        cfg.embed_dim as u64,
    );
    let hid = cfg.mlp_hidden() as u64;
    let tokens = t * s + 1;
    let ln = 3 * d;
    let attn = |g: u64| g * g * (2 * d + h);

    let temporal = tokens * (ln + 5 * d * d) + attn(t + 1) + (s - 1) * attn(t);
    let spatial = tokens * (2 * ln + 4 * d * d + 2 * d * hid + hid) + t * attn(s) + attn(1);
    let gates = (cfg.branch_layers as u64 - 1) * t * s * d;
    let head = d + ln + d * e + e;
    Ok(cfg.branch_layers as u64 * (temporal + spatial) + gates + head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::{normal_vec, rng};
    use crate::tensor::Tape;

    fn model_store(cfg: &ModelConfig) -> ParamStore {
        let mut s = ParamStore::new();
        backbone::init_backbone(&mut s, cfg, 7);
        init_branch(&mut s, cfg, 7).unwrap();
        s
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(&mut rng(seed), n, 1.0)).unwrap()
    }

    #[test]
    fn tube_mask_counts_and_determinism() {
        let m = make_tube_mask(10, 0.7, 1).unwrap();
        assert_eq!(m.masked_positions().len(), 7);
        assert_eq!(m.kept_patches().len(), 3);
        assert!(!m.is_masked(0));
        assert!(m.masked_positions().iter().all(|&j| (1..=10).contains(&j)));
        assert!(make_tube_mask(16, 0.0, 3).unwrap().masked_positions().is_empty());
        let a = make_tube_mask(16, 0.7, 5).unwrap();
        assert_eq!(a, make_tube_mask(16, 0.7, 5).unwrap());
        assert_ne!(a.masked_positions(), make_tube_mask(16, 0.7, 6).unwrap().masked_positions());
        assert!(make_tube_mask(2, 0.8, 0).is_err());
        assert!(make_tube_mask(4, 1.0, 0).is_err());
    }

    #[test]
    fn branch_input_token_counts() {
        let cfg = ModelConfig {
            layers: 5,
            branch_layers: 4,
            frames: 4,
            patches: 10,
            ..ModelConfig::tiny()
        };
        let s = model_store(&cfg);
        let grid = TokenGrid {
            tokens: random_tensor(&[4, 11, cfg.width], 1),
            layer_index: 1,
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let full = branch_input(&b, &cfg, &[&grid], &TubeMask::none(10)).unwrap();
        assert_eq!(full.token_count(&b), 4 * 11 + 1);
        let mask = make_tube_mask(10, 0.7, 2).unwrap();
        let masked = branch_input(&b, &cfg, &[&grid], &mask).unwrap();
        assert_eq!(masked.token_count(&b), 17);
        let wrong = TokenGrid {
            layer_index: 2,
            ..grid.clone()
        };
        assert!(branch_input(&b, &cfg, &[&wrong], &mask).is_err());
    }

    #[test]
    fn zero_temporal_projection_is_identity() {
        let cfg = ModelConfig::tiny();
        let s = model_store(&cfg);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let frames = tape.constant(random_tensor(&[2, cfg.frames, 3, cfg.width], 4));
        let cls = tape.constant(random_tensor(&[2, 1, cfg.width], 5));
        let input = BranchTokens {
            frames,
            video_cls: cls,
        };
        let out = temporal_sublayer(&b, &cfg, 1, input).unwrap();
        assert!(tape.value(out.frames).bit_eq(&tape.value(frames)));
        assert!(tape.value(out.video_cls).bit_eq(&tape.value(cls)));
    }

    #[test]
    fn gates_start_at_one_half() {
        let cfg = ModelConfig::default();
        let s = model_store(&cfg);
        let names = gate_names(&cfg);
        assert_eq!(names.len(), cfg.branch_layers);
        for n in names {
            let w = s.tensor(&n).unwrap().data()[0];
            assert_eq!(crate::tensor::sigmoid_value(w), 0.5);
        }
    }

    #[test]
    fn gate_mix_edge_cases() {
        let mut s = ParamStore::new();
        s.insert("g", Tensor::vector(vec![0.0]), Group::Branch, true);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let p = random_tensor(&[3, 4], 1);
        let c = random_tensor(&[3, 4], 2);
        let out = gate_mix(&b, "g", tape.constant(p.clone()), tape.constant(c.clone())).unwrap();
        let out = tape.value(out);
        for i in 0..12 {
            let avg = 0.5 * p.data()[i] + 0.5 * c.data()[i];
            assert!((out.data()[i] - avg).abs() <= 4.0 * f64::EPSILON * avg.abs().max(1.0));
        }
        let same = gate_mix(&b, "g", tape.constant(p.clone()), tape.constant(p.clone())).unwrap();
        assert!(tape.value(same).bit_eq(&p));

        let mut s = ParamStore::new();
        s.insert("g", Tensor::vector(vec![30.0]), Group::Branch, true);
        let tape = Tape::new();
        let b = Binder::new(&tape, &s);
        let out = gate_mix(&b, "g", tape.constant(p.clone()), tape.constant(c)).unwrap();
        assert!(tape.value(out).max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn multiply_count_decreases_with_ratio() {
        let cfg = ModelConfig::default();
        let full = branch_multiply_count(&cfg, 0.0).unwrap();
        let mut prev = full;
        for r in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let c = branch_multiply_count(&cfg, r).unwrap();
            assert!(c < prev);
            prev = c;
        }
        assert!((branch_multiply_count(&cfg, 0.7).unwrap() as f64) <= 0.4 * full as f64);
    }

    #[test]
    fn freeze_ablation_keeps_projection_zero_and_frozen() {
        let cfg = ModelConfig {
            freeze_temporal_proj: true,
            temporal_init: TemporalInit::Random,
            ..ModelConfig::tiny()
        };
        let s = model_store(&cfg);
        for l in 1..=cfg.branch_layers {
            let p = s.get(&temporal_proj_name(l)).unwrap();
            assert!(!p.trainable());
            assert!(p.tensor.data().iter().all(|&v| v == 0.0));
        }
    }
}
