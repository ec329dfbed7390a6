//! Frozen CLIP-style dual encoder at toy scale.
//!
//! The visual tower embeds each frame's patches, prepends a frame `[CLS]`,
//! adds the spatial position table and runs `L` pre-LN blocks with
//! attention confined to one frame. The text tower is a causal transformer
//! pooled at the final position. Nothing here is trainable.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::params::{Binder, Group, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const PATCH_EMBED_W: &str = "visual.patch_embed.w";
pub const PATCH_EMBED_B: &str = "visual.patch_embed.b";
pub const FRAME_CLS: &str = "visual.cls";
/// Spatial position table P^s, `[N + 1, D]`.
pub const SPATIAL_POS: &str = "visual.pos";
pub const LN_POST: &str = "visual.ln_post";
/// Frozen visual projection W_vproj, `[D, E]`.
pub const VISUAL_PROJ: &str = "visual.proj";
pub const TOKEN_EMBED: &str = "text.token_embed";
pub const TEXT_POS: &str = "text.pos";
pub const TEXT_LN: &str = "text.ln_final";
pub const TEXT_PROJ: &str = "text.proj";

pub fn visual_layer_prefix(layer: usize) -> String {
    format!("visual.layers.{layer}")
}

pub fn text_layer_prefix(layer: usize) -> String {
    format!("text.layers.{layer}")
}

/// Token states of every frame after a given backbone layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[T, N + 1, D]`; column 0 is the frame `[CLS]`.
    pub tokens: Tensor,
    /// 0 is the embedding output, `l` the output of visual layer `l`.
    pub layer_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    /// Unit-norm joint-space embedding `[E]`.
    pub t: Tensor,
    /// Final-layer states `[len, D]`.
    pub token_states: Tensor,
}

/// Which projection maps visual width into the joint space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// The backbone's own W_vproj.
    Frozen,
    /// The separately initialised W'_vproj used by token alignment.
    Fresh,
}

impl Projection {
    pub fn param_name(self) -> &'static str {
        match self {
            Projection::Frozen => VISUAL_PROJ,
            Projection::Fresh => crate::adapter::TOKEN_PROJ,
        }
    }
}

/// Adds all backbone parameters, seeded Gaussian weights, all frozen.
pub fn init_backbone(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = rng::rng(rng::derive(seed, "backbone"));
    let mut init = Init {
        store,
        rng: &mut rng,
        std: cfg.init_std,
        group: Group::Backbone,
        trainable: false,
    };
    let d = cfg.width;
    init.normal(PATCH_EMBED_W, &[cfg.patch_dim, d]);
    init.constant(PATCH_EMBED_B, &[d], 0.0);
    init.normal(FRAME_CLS, &[d]);
    init.normal(SPATIAL_POS, &[cfg.patches + 1, d]);
    for l in 1..=cfg.layers {
        init.block(&visual_layer_prefix(l), cfg);
    }
    init.layer_norm(LN_POST, d);
    init.normal(VISUAL_PROJ, &[d, cfg.embed_dim]);
    init.normal(TOKEN_EMBED, &[cfg.vocab_size, d]);
    init.normal(TEXT_POS, &[cfg.text_len, d]);
    for l in 1..=cfg.text_layers {
        init.block(&text_layer_prefix(l), cfg);
    }
    init.layer_norm(TEXT_LN, d);
    init.normal(TEXT_PROJ, &[d, cfg.embed_dim]);
}

/// Patch embedding of `[.., T, N, P]` videos into `[frames, N + 1, D]`.
pub fn embed_patches(b: &Binder, cfg: &ModelConfig, video: &Tensor) -> Result<Var> {
    let sh = video.shape();
    let (n, p) = (cfg.patches, cfg.patch_dim);
    if sh.len() < 3 || sh[sh.len() - 1] != p || sh[sh.len() - 2] != n {
        return Err(Error::Config(format!(
            "video shape {sh:?} does not end in [N={n}, P={p}]"
        )));
    }
    let frames = video.numel() / (n * p);
    let tape = b.tape();
    let x = tape.constant(video.reshape(&[frames, n, p])?);
    let x = nn::linear(b, x, PATCH_EMBED_W, Some(PATCH_EMBED_B))?;
    let cls = tape.reshape(b.get(FRAME_CLS)?, &[1, cfg.width])?;
    let cls = tape.gather(cls, 0, &vec![0; frames])?;
    let cls = tape.reshape(cls, &[frames, 1, cfg.width])?;
    let x = tape.concat(&[cls, x], 1)?;
    Ok(tape.add(x, b.get(SPATIAL_POS)?)?)
}

/// Visual layer `layer` (1-based) applied to every frame independently.
pub fn clip_layer(b: &Binder, cfg: &ModelConfig, x: Var, layer: usize) -> Result<Var> {
    nn::transformer_block(b, &visual_layer_prefix(layer), x, cfg.heads, cfg.ln_eps, false)
}

/// Runs all `L` layers over a batch of videos `[B, T, N, P]` and keeps the
/// last `K + 1` grids per video.
pub fn encode_frames_batch(
    store: &ParamStore,
    cfg: &ModelConfig,
    videos: &[&Tensor],
) -> Result<Vec<Vec<TokenGrid>>> {
    let expected = [cfg.frames, cfg.patches, cfg.patch_dim];
    for v in videos {
        if v.shape() != expected {
            return Err(Error::Config(format!(
                "video shape {:?}, expected {expected:?}",
                v.shape()
            )));
        }
    }
    if videos.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Tensor::stack(videos)?;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    let mut x = embed_patches(&b, cfg, &batch)?;
    let first_kept = cfg.branch_source_layer();
    let mut kept = Vec::with_capacity(cfg.branch_layers + 1);
    if first_kept == 0 {
        kept.push((0, tape.value(x)));
    }
    for l in 1..=cfg.layers {
        x = clip_layer(&b, cfg, x, l)?;
        if l >= first_kept {
            kept.push((l, tape.value(x)));
        }
    }
    let per_video = cfg.frames * (cfg.patches + 1) * cfg.width;
    let grid_shape = [cfg.frames, cfg.patches + 1, cfg.width];
    let mut out: Vec<Vec<TokenGrid>> = vec![Vec::with_capacity(kept.len()); videos.len()];
    for (layer, value) in &kept {
        for (i, grids) in out.iter_mut().enumerate() {
            let data = value.data()[i * per_video..(i + 1) * per_video].to_vec();
            grids.push(TokenGrid {
                tokens: Tensor::new(grid_shape.to_vec(), data)?,
                layer_index: *layer,
            });
        }
    }
    Ok(out)
}

pub fn encode_frames(store: &ParamStore, cfg: &ModelConfig, video: &Tensor) -> Result<Vec<TokenGrid>> {
    Ok(encode_frames_batch(store, cfg, &[video])?.remove(0))
}

/// Causal text tower pooled at the last position.
pub fn encode_text(store: &ParamStore, cfg: &ModelConfig, ids: &[u32]) -> Result<TextFeature> {
    if ids.is_empty() || ids.len() > cfg.text_len {
        return Err(Error::Data(format!(
            "caption length {} outside 1..={}",
            ids.len(),
            cfg.text_len
        )));
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocabulary {}",
            cfg.vocab_size
        )));
    }
    let len = ids.len();
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather(b.get(TOKEN_EMBED)?, 0, &idx)?;
    let pos = tape.slice(b.get(TEXT_POS)?, 0, 0..len)?;
    let x = tape.add(tok, pos)?;
    let mut x = tape.reshape(x, &[1, len, cfg.width])?;
    for l in 1..=cfg.text_layers {
        x = nn::transformer_block(&b, &text_layer_prefix(l), x, cfg.heads, cfg.ln_eps, true)?;
    }
    let states = tape.reshape(x, &[len, cfg.width])?;
    let last = tape.slice(states, 0, len - 1..len)?;
    let last = nn::layer_norm(&b, last, TEXT_LN, cfg.ln_eps)?;
    let t = tape.matmul(last, b.get(TEXT_PROJ)?)?;
    let t = tape.l2_normalize(t)?;
    Ok(TextFeature {
        t: tape.value(t).reshape(&[cfg.embed_dim])?,
        token_states: (*tape.value(states)).clone(),
    })
}

/// Final visual LN followed by the chosen projection, for `x: [.., D]`.
pub fn project_visual(b: &Binder, cfg: &ModelConfig, x: Var, projection: Projection) -> Result<Var> {
    let h = nn::layer_norm(b, x, LN_POST, cfg.ln_eps)?;
    project_only(b, h, projection)
}

/// The projection without the preceding LN.
pub fn project_only(b: &Binder, x: Var, projection: Projection) -> Result<Var> {
    Ok(b.tape().matmul(x, b.get(projection.param_name())?)?)
}

/// Order-independent mean of the frame `[CLS]` tokens of a `[T, N + 1, D]` grid.
///
/// Each channel's values are sorted before summation so the result is
/// bitwise invariant under any permutation of frames.
pub fn mean_frame_cls(grid: &Tensor) -> Vec<f64> {
    let sh = grid.shape();
    let (t, cols, d) = (sh[0], sh[1], sh[2]);
    (0..d)
        .map(|c| {
            let mut vals: Vec<f64> = (0..t).map(|i| grid.data()[(i * cols) * d + c]).collect();
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / t as f64
        })
        .collect()
}
