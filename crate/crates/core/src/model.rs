//! A complete model: frozen backbone, branch and heads in one store.

use crate::adapter::{self, TubeMask};
use crate::backbone::{self, TextFeature, TokenGrid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, Group, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BtModel {
    config: ModelConfig,
    params: ParamStore,
}

impl BtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        backbone::init_backbone(&mut params, &config, seed);
        adapter::init_branch(&mut params, &config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.tensor.shape() != p.tensor.shape() || got.group != p.group {
                return Err(Error::Corrupt(format!("parameter {name} has wrong shape or group")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Corrupt("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    pub fn group_hash(&self, group: Group) -> String {
        self.params.group_hash(group)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn encode_frames(&self, video: &Tensor) -> Result<Vec<TokenGrid>> {
        backbone::encode_frames(&self.params, &self.config, video)
    }

    pub fn encode_frames_batch(&self, videos: &[&Tensor]) -> Result<Vec<Vec<TokenGrid>>> {
        backbone::encode_frames_batch(&self.params, &self.config, videos)
    }

    pub fn encode_text(&self, ids: &[u32]) -> Result<TextFeature> {
        backbone::encode_text(&self.params, &self.config, ids)
    }

    /// Unit video embeddings `[B, E]` from cached grids, no gradient.
    pub fn embed_grids(&self, grids: &[&[TokenGrid]], mask: Option<&TubeMask>) -> Result<Tensor> {
        let none = TubeMask::none(self.config.patches);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let fwd = adapter::forward_videos(&b, &self.config, grids, mask.unwrap_or(&none))?;
        Ok((*tape.value(fwd.v)).clone())
    }

    /// Unit video embedding `[E]`; `None` means no masking.
    pub fn encode_video(&self, video: &Tensor, mask: Option<&TubeMask>) -> Result<Tensor> {
        let grids = self.encode_frames(video)?;
        let v = self.embed_grids(&[&grids], mask)?;
        Ok(v.reshape(&[self.config.embed_dim])?)
    }

    /// Embeds many videos in chunks, rows in input order.
    pub fn encode_videos(&self, videos: &[&Tensor]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(16) {
            let grids = self.encode_frames_batch(chunk)?;
            let refs: Vec<&[TokenGrid]> = grids.iter().map(|g| g.as_slice()).collect();
            let v = self.embed_grids(&refs, None)?;
            for i in 0..chunk.len() {
                rows.push(v.row(i).to_vec());
            }
        }
        Ok(Tensor::from_rows(&rows)?)
    }

    pub fn encode_texts(&self, captions: &[&[u32]]) -> Result<Tensor> {
        let rows = captions
            .iter()
            .map(|c| Ok(self.encode_text(c)?.t.into_data()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_rows(&rows)?)
    }
}

/// One checked initialisation property.
#[derive(Clone, Debug, PartialEq)]
pub struct InitCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Exact initialisation invariants: zero temporal projections acting as
/// identities, gates at one half, frame-order invariance and mask
/// independence of the video embedding. `probe` is a `[T, N, P]` video.
pub fn verify_init(model: &BtModel, probe: &Tensor, mask_seed: u64) -> Result<Vec<InitCheck>> {
    let cfg = model.config();
    let params = model.params();
    let mut checks = Vec::new();

    let zero = (1..=cfg.branch_layers).all(|l| {
        params
            .tensor(&adapter::temporal_proj_name(l))
            .map(|t| t.data().iter().all(|&v| v == 0.0))
            .unwrap_or(false)
    });
    let grids = model.encode_frames(probe)?;
    let identity = {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, params);
        let tokens =
            adapter::branch_input(&b, cfg, &[&grids[0]], &TubeMask::none(cfg.patches))?;
        let mut ok = true;
        for l in 1..=cfg.branch_layers {
            let out = adapter::temporal_sublayer(&b, cfg, l, tokens)?;
            ok &= tape.value(out.frames).bit_eq(&tape.value(tokens.frames))
                && tape.value(out.video_cls).bit_eq(&tape.value(tokens.video_cls));
        }
        ok
    };
    checks.push(InitCheck {
        name: "temporal_identity",
        passed: zero && identity,
        detail: format!("W_t all zero: {zero}; sublayers exact identity: {identity}"),
    });

    let gates: Vec<f64> = adapter::gate_names(cfg)
        .iter()
        .map(|n| Ok(crate::tensor::sigmoid_value(params.tensor(n)?.data()[0])))
        .collect::<Result<_>>()?;
    checks.push(InitCheck {
        name: "gate_half",
        passed: gates.iter().all(|&g| g == 0.5),
        detail: format!("{} gates, sigmoid values {gates:?}", gates.len()),
    });

    let v = model.encode_video(probe, None)?;
    let reversed = reverse_frames(probe)?;
    let v_rev = model.encode_video(&reversed, None)?;
    checks.push(InitCheck {
        name: "order_invariance",
        passed: v.bit_eq(&v_rev),
        detail: format!("max |v - v_reversed| = {:e}", v.max_abs_diff(&v_rev)),
    });

    let mask = adapter::make_tube_mask(cfg.patches, cfg.mask_ratio, mask_seed)?;
    let v_mask = model.encode_video(probe, Some(&mask))?;
    checks.push(InitCheck {
        name: "mask_equality",
        passed: v.bit_eq(&v_mask),
        detail: format!(
            "rho {}: max |v_masked - v| = {:e}",
            cfg.mask_ratio,
            v.max_abs_diff(&v_mask)
        ),
    });
    Ok(checks)
}

/// Reverses the frame axis of a `[T, ..]` tensor.
pub fn reverse_frames(video: &Tensor) -> Result<Tensor> {
    let t = video.shape()[0];
    let order: Vec<usize> = (0..t).rev().collect();
    Ok(video.select(0, &order)?)
}
