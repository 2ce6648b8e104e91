//! Point-wise foreground classification and center voting on backbone
//! point features, plus the vote-scaling knob used in ablations.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::nn::{Mlp, Mode};
use crate::autodiff::{sigmoid, AutodiffError, Graph, NodeId, ParamStore};
use crate::geom::{point_in_box, Box3D, PointCloud};
use crate::scalar::Scalar;

/// Default foreground probability threshold.
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("vote scale {s} outside [0, 1]")]
    ScaleOutOfRange { s: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Classification logits, vote offsets, and the voted centers of the
/// predicted-foreground points.
pub struct VoteOutput {
    /// `[N, K+1]` per-point class logits; column `K` is background.
    pub fg_logits: NodeId,
    /// `[N, 3]` per-point center offsets in meters.
    pub offsets: NodeId,
    /// Indices of predicted-foreground points; row `i` of `centers` comes
    /// from point `source[i]`.
    pub source: Vec<usize>,
    /// `[M, 3]` voted centers: `coords[source] + scale * offsets[source]`.
    pub centers: NodeId,
    /// Vote scaling currently applied to `centers`.
    pub scale: f64,
    /// `[N, 3]` the coordinates the votes originate from.
    pub coords: NodeId,
}

/// The two MLP heads producing logits and offsets.
pub struct VoteHeads {
    pub cls: Mlp,
    pub reg: Mlp,
}

impl VoteHeads {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        n_classes: usize,
        widths: &[usize],
    ) -> Result<Self, AutodiffError> {
        let mut cls_dims = vec![c_in];
        cls_dims.extend_from_slice(widths);
        cls_dims.push(n_classes + 1);
        let mut reg_dims = vec![c_in];
        reg_dims.extend_from_slice(widths);
        reg_dims.push(3);
        Ok(Self {
            cls: Mlp::new(store, rng, &format!("{name}.cls"), &cls_dims, false, false)?,
            reg: Mlp::new(store, rng, &format!("{name}.reg"), &reg_dims, false, false)?,
        })
    }
}

/// Runs both heads and collects voted centers for every point whose
/// highest foreground-class probability exceeds `tau`. Probabilities are
/// per-class sigmoids; the background column never votes.
pub fn classify_and_vote<S: Scalar>(
    g: &mut Graph<S>,
    store: &mut ParamStore<S>,
    heads: &VoteHeads,
    point_feats: NodeId,
    coords: NodeId,
    tau: f64,
    mode: Mode,
) -> Result<VoteOutput, AutodiffError> {
    let fg_logits = heads.cls.forward(g, store, point_feats, mode)?;
    let offsets = heads.reg.forward(g, store, point_feats, mode)?;
    let source = {
        let lv = g.value2(fg_logits);
        let n_classes = lv.ncols() - 1;
        let mut source = Vec::new();
        for (i, row) in lv.outer_iter().enumerate() {
            let best = row
                .iter()
                .take(n_classes)
                .cloned()
                .fold(S::neg_infinity(), S::max);
            if sigmoid(best).as_f64() > tau {
                source.push(i);
            }
        }
        source
    };
    let centers = scaled_centers(g, coords, offsets, &source, 1.0)?;
    Ok(VoteOutput {
        fg_logits,
        offsets,
        source,
        centers,
        scale: 1.0,
        coords,
    })
}

fn scaled_centers<S: Scalar>(
    g: &mut Graph<S>,
    coords: NodeId,
    offsets: NodeId,
    source: &[usize],
    s: f64,
) -> Result<NodeId, AutodiffError> {
    let idx = Rc::new(source.to_vec());
    let base = g.gather_rows(coords, idx.clone())?;
    let off = g.gather_rows(offsets, idx)?;
    let scaled = g.mul_scalar(off, S::lit(s));
    g.add(base, scaled)
}

/// Rebuilds the voted centers as `coord + s * offset`. `s = 0` collapses
/// votes onto their source points; `s = 1` is the full vote.
pub fn scale_votes<S: Scalar>(
    g: &mut Graph<S>,
    out: &VoteOutput,
    s: f64,
) -> Result<VoteOutput, VoteError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(VoteError::ScaleOutOfRange { s });
    }
    let centers = scaled_centers(g, out.coords, out.offsets, &out.source, s)?;
    Ok(VoteOutput {
        fg_logits: out.fg_logits,
        offsets: out.offsets,
        source: out.source.clone(),
        centers,
        scale: s,
        coords: out.coords,
    })
}

/// Ground-truth class targets: for each point the class of its containing
/// box (nearest box center when boxes overlap), else background. Returns
/// the one-hot `[N, K+1]` matrix and the foreground point indices.
pub fn point_class_targets<S: Scalar>(
    points: &PointCloud<S>,
    boxes: &[Box3D<S>],
    n_classes: usize,
) -> (Array2<S>, Vec<usize>) {
    let n = points.len();
    let mut targets = Array2::zeros((n, n_classes + 1));
    let mut fg = Vec::new();
    for (i, p) in points.xyz.iter().enumerate() {
        let mut best: Option<(S, usize)> = None;
        for b in boxes {
            if point_in_box(*p, b) {
                let d2 = (0..3)
                    .map(|k| (p[k] - b.center[k]) * (p[k] - b.center[k]))
                    .fold(S::zero(), |a, v| a + v);
                if best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, b.class_id));
                }
            }
        }
        match best {
            Some((_, class)) => {
                targets[(i, class)] = S::one();
                fg.push(i);
            }
            None => targets[(i, n_classes)] = S::one(),
        }
    }
    (targets, fg)
}

/// Auxiliary vote supervision: focal classification loss over all points
/// and mean L1 on the offsets of true-foreground points with target
/// `box gravity center - point`.
pub fn vote_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &VoteOutput,
    points: &PointCloud<S>,
    boxes: &[Box3D<S>],
    gamma: S,
    alpha: S,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let n_classes = g.value2(out.fg_logits).ncols() - 1;
    let (targets, fg) = point_class_targets(points, boxes, n_classes);
    let cls = g.focal_loss(out.fg_logits, targets, gamma, alpha)?;
    if fg.is_empty() {
        let zero = g.constant(ndarray::ArrayD::zeros(vec![1]));
        return Ok((cls, zero));
    }
    let mut reg_target = Array2::zeros((fg.len(), 3));
    for (r, &i) in fg.iter().enumerate() {
        let p = points.xyz[i];
        // the gravity-center target of the containing box
        let mut best: Option<(S, &Box3D<S>)> = None;
        for b in boxes {
            if point_in_box(p, b) {
                let d2 = (0..3)
                    .map(|k| (p[k] - b.center[k]) * (p[k] - b.center[k]))
                    .fold(S::zero(), |a, v| a + v);
                if best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, b));
                }
            }
        }
        let b = best.expect("fg point lies in some box").1;
        for k in 0..3 {
            reg_target[(r, k)] = b.center[k] - p[k];
        }
    }
    let fg_offsets = g.gather_rows(out.offsets, Rc::new(fg.clone()))?;
    let l1 = g.l1_sum(fg_offsets, reg_target)?;
    let reg = g.mul_scalar(l1, S::lit(1.0 / fg.len() as f64));
    Ok((cls, reg))
}
