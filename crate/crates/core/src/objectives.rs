//! Video-text contrast and the two masked-branch alignment losses.

use serde::{Deserialize, Serialize};

use crate::adapter::{BranchTokens, VideoForward};
use crate::backbone::{self, Projection};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tensor::{Tape, Tensor, Var};

const NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub vtc: f64,
    pub mbta: f64,
    pub mbca: f64,
    pub batch_size: usize,
    /// Surviving patch tokens per video (`T · (N − |M|)`).
    pub unmasked_count: usize,
}

fn check_unit_rows(tape: &Tape, x: Var, what: &str) -> Result<()> {
    let t = tape.value(x);
    let sh = t.shape();
    if sh.len() != 2 || sh[0] == 0 {
        return Err(Error::Loss(format!("{what}: expected [B, E], got {sh:?}")));
    }
    for i in 0..sh[0] {
        let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Loss(format!("{what}: row {i} has norm {norm}")));
        }
    }
    Ok(())
}

/// `−(1/B) Σ_m log softmax_m(x_m · yᵀ / τ)` with matched pairs on the diagonal.
pub fn nce_loss(tape: &Tape, x: Var, y: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Loss(format!("temperature {tau} must be positive")));
    }
    check_unit_rows(tape, x, "nce x")?;
    check_unit_rows(tape, y, "nce y")?;
    let (bx, by) = (tape.shape(x), tape.shape(y));
    if bx != by {
        return Err(Error::Loss(format!("nce shapes {bx:?} and {by:?} differ")));
    }
    let yt = tape.transpose(y)?;
    let s = tape.matmul(x, yt)?;
    let logits = tape.scale(s, 1.0 / tau);
    let targets: Vec<usize> = (0..bx[0]).collect();
    Ok(tape.cross_entropy(logits, &targets)?)
}

pub fn vtc_loss(tape: &Tape, v: Var, t: Var, tau: f64) -> Result<Var> {
    let (bv, bt) = (tape.shape(v), tape.shape(t));
    if bv.first() != bt.first() {
        return Err(Error::Loss(format!("batch sizes {bv:?} and {bt:?} differ")));
    }
    let a = nce_loss(tape, v, t, tau)?;
    let b = nce_loss(tape, t, v, tau)?;
    Ok(tape.add(a, b)?)
}

fn branch_patches(b: &Binder, branch: &BranchTokens) -> Result<Var> {
    let tape = b.tape();
    let s = tape.shape(branch.frames)[2];
    if s < 2 {
        return Err(Error::Loss("no surviving patch tokens".into()));
    }
    Ok(tape.slice(branch.frames, 2, 1..s)?)
}

/// Token alignment: mean over surviving patch tokens of
/// `‖W_vproj·LN(clip) − W'·LN(branch)‖²`.
///
/// `clip_restricted` is the final backbone grid already restricted to the
/// surviving columns (`[B, T, S', D]`, column 0 first).
pub fn mbta_loss(
    b: &Binder,
    cfg: &ModelConfig,
    clip_restricted: &Tensor,
    branch: &BranchTokens,
) -> Result<Var> {
    let tape = b.tape();
    let ours = branch_patches(b, branch)?;
    let sh = clip_restricted.shape();
    let theirs = clip_restricted.select(2, &(1..sh[2]).collect::<Vec<_>>())?;
    if theirs.shape() != tape.shape(ours).as_slice() {
        return Err(Error::Loss(format!(
            "surviving clip tokens {:?} vs branch tokens {:?}",
            theirs.shape(),
            tape.shape(ours)
        )));
    }
    // The clip side carries no gradient regardless of parameter flags.
    let target = {
        let inner = Tape::new();
        let frozen = Binder::frozen(&inner, b.store());
        let x = inner.constant(theirs);
        let y = backbone::project_visual(&frozen, cfg, x, Projection::Frozen)?;
        (*inner.value(y)).clone()
    };
    let target = tape.constant(target);
    let pred = backbone::project_visual(b, cfg, ours, Projection::Fresh)?;
    let mse = tape.mse(pred, target)?;
    // mse averages over E as well; rescale to a per-token squared distance.
    Ok(tape.scale(mse, cfg.embed_dim as f64))
}

/// Cross-modal alignment of the mean projected surviving branch patch token.
pub fn mbca_loss(
    b: &Binder,
    cfg: &ModelConfig,
    branch: &BranchTokens,
    t: Var,
    tau: f64,
) -> Result<Var> {
    let tape = b.tape();
    let ours = branch_patches(b, branch)?;
    let sh = tape.shape(ours);
    let flat = tape.reshape(ours, &[sh[0], sh[1] * sh[2], sh[3]])?;
    let proj = backbone::project_visual(b, cfg, flat, Projection::Frozen)?;
    let mean = tape.mean_axis(proj, 1)?;
    let vhat = tape.l2_normalize(mean)?;
    vtc_loss(tape, vhat, t, tau)
}

/// Weighted sum of the three components. Zero-weight components are still
/// evaluated so the report is complete.
pub fn total_loss(
    b: &Binder,
    cfg: &ModelConfig,
    fwd: &VideoForward,
    t: Var,
) -> Result<(Var, LossReport)> {
    let tape = b.tape();
    let tau = cfg.temperature;
    let vtc = vtc_loss(tape, fwd.v, t, tau)?;
    let mbta = mbta_loss(b, cfg, &fwd.clip_final, &fwd.branch)?;
    let mbca = mbca_loss(b, cfg, &fwd.branch, t, tau)?;
    let w = cfg.loss_weights;
    let total = tape.scale(vtc, w.vtc);
    let total = tape.add(total, tape.scale(mbta, w.mbta))?;
    let total = tape.add(total, tape.scale(mbca, w.mbca))?;
    let sh = tape.shape(fwd.branch.frames);
    let report = LossReport {
        total: tape.value(total).item()?,
        vtc: tape.value(vtc).item()?,
        mbta: tape.value(mbta).item()?,
        mbca: tape.value(mbca).item()?,
        batch_size: sh[0],
        unmasked_count: sh[1] * (sh[2] - 1),
    };
    Ok((total, report))
}
