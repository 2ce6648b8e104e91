//! Virtual voxel head: per-task-group MLPs for classification and 8-dim box
//! regression, sigmoid focal + L1 losses, box decoding and BEV NMS. Only
//! virtual voxels are meant to reach this head; background voxels carry an
//! all-zeros classification target rather than an explicit class column.

use rand::Rng;
use thiserror::Error;

use crate::assign::decode_regression_target;
use crate::autodiff::nn::{Mlp, Mode};
use crate::autodiff::{sigmoid, AutodiffError, Graph, NodeId, ParamStore};
use crate::geom::{bev_iou, Box3D};
use crate::scalar::Scalar;

pub const DEFAULT_NMS_IOU: f64 = 0.25;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.1;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("task groups must partition the class set: {0}")]
    NotAPartition(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// How classes are split across prediction heads, plus the shared MLP
/// widths of each head.
#[derive(Debug, Clone)]
pub struct TaskGroupSpec {
    pub groups: Vec<Vec<usize>>,
    pub widths: Vec<usize>,
}

impl TaskGroupSpec {
    pub fn new(groups: Vec<Vec<usize>>, widths: Vec<usize>) -> Result<Self, HeadError> {
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        if all.is_empty() {
            return Err(HeadError::NotAPartition("no classes".into()));
        }
        all.sort_unstable();
        for (want, &got) in all.iter().enumerate() {
            if want != got {
                return Err(HeadError::NotAPartition(format!(
                    "class ids must cover 0..{} exactly once, got {all:?}",
                    all.len()
                )));
            }
        }
        Ok(Self { groups, widths })
    }

    /// All classes behind one shared head.
    pub fn single(n_classes: usize, widths: Vec<usize>) -> Self {
        Self::new(vec![(0..n_classes).collect()], widths).expect("contiguous ids")
    }

    pub fn n_classes(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

/// One task group's predictions over all input voxels.
pub struct GroupOutput {
    /// Global class ids covered by this group, in column order.
    pub classes: Vec<usize>,
    /// `[N, classes.len()]` sigmoid logits.
    pub cls: NodeId,
    /// `[N, 8]` regression vectors.
    pub reg: NodeId,
}

pub struct HeadOutput {
    pub groups: Vec<GroupOutput>,
}

pub struct VoxelHead {
    groups: Vec<Vec<usize>>,
    cls: Vec<Mlp>,
    reg: Vec<Mlp>,
}

impl VoxelHead {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        spec: &TaskGroupSpec,
    ) -> Result<Self, HeadError> {
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for (gi, group) in spec.groups.iter().enumerate() {
            let mut cls_dims = vec![c_in];
            cls_dims.extend_from_slice(&spec.widths);
            cls_dims.push(group.len());
            let mut reg_dims = vec![c_in];
            reg_dims.extend_from_slice(&spec.widths);
            reg_dims.push(8);
            cls.push(Mlp::new(
                store,
                rng,
                &format!("{name}.g{gi}.cls"),
                &cls_dims,
                false,
                false,
            )?);
            reg.push(Mlp::new(
                store,
                rng,
                &format!("{name}.g{gi}.reg"),
                &reg_dims,
                false,
                false,
            )?);
        }
        Ok(Self {
            groups: spec.groups.clone(),
            cls,
            reg,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        feats: NodeId,
        mode: Mode,
    ) -> Result<HeadOutput, AutodiffError> {
        let mut groups = Vec::with_capacity(self.groups.len());
        for (gi, classes) in self.groups.iter().enumerate() {
            groups.push(GroupOutput {
                classes: classes.clone(),
                cls: self.cls[gi].forward(g, store, feats, mode)?,
                reg: self.reg[gi].forward(g, store, feats, mode)?,
            });
        }
        Ok(HeadOutput { groups })
    }
}

/// Focal classification loss summed over groups plus the L1 regression loss
/// averaged over positive voxels. `labels[i]` is the global class of voxel
/// `i` or `None` for background; `targets` must be present exactly for the
/// labelled voxels.
pub fn head_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &HeadOutput,
    labels: &[Option<usize>],
    targets: &[Option<[S; 8]>],
    gamma: S,
    alpha: S,
) -> Result<(NodeId, NodeId), AutodiffError> {
    assert_eq!(labels.len(), targets.len());
    let mut cls_total: Option<NodeId> = None;
    let mut reg_sums: Option<NodeId> = None;
    let mut n_pos = 0usize;
    for group in &out.groups {
        let n = g.value(group.cls).shape()[0];
        if n != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "head_loss",
                lhs: vec![n],
                rhs: vec![labels.len()],
            });
        }
        let mut cls_target = ndarray::Array2::zeros((n, group.classes.len()));
        let mut rows = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            if let Some(class) = label {
                if let Some(col) = group.classes.iter().position(|c| c == class) {
                    cls_target[[i, col]] = S::one();
                    rows.push(i);
                }
            }
        }
        let cls = g.focal_loss(group.cls, cls_target, gamma, alpha)?;
        cls_total = Some(match cls_total {
            Some(acc) => g.add(acc, cls)?,
            None => cls,
        });
        if rows.is_empty() {
            continue;
        }
        let mut reg_target = ndarray::Array2::zeros((rows.len(), 8));
        for (r, &i) in rows.iter().enumerate() {
            let t = targets[i].expect("regression target for a labelled voxel");
            for (c, v) in t.iter().enumerate() {
                reg_target[[r, c]] = *v;
            }
        }
        let picked = g.gather_rows(group.reg, std::rc::Rc::new(rows.clone()))?;
        let l1 = g.l1_sum(picked, reg_target)?;
        n_pos += rows.len();
        reg_sums = Some(match reg_sums {
            Some(acc) => g.add(acc, l1)?,
            None => l1,
        });
    }
    let cls = cls_total.expect("at least one task group");
    let reg = match reg_sums {
        Some(sum) => g.mul_scalar(sum, S::one() / S::from_usize(n_pos).unwrap()),
        None => g.constant(ndarray::ArrayD::zeros(vec![1])),
    };
    Ok((cls, reg))
}

/// A decoded box with its detection score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionBox<S: Scalar> {
    pub bbox: Box3D<S>,
    pub score: S,
}

/// Decodes every (voxel, class) pair whose sigmoid score clears the
/// threshold. Rows that decode to an invalid box (non-finite values from an
/// untrained head) are skipped.
pub fn decode_boxes<S: Scalar>(
    g: &Graph<S>,
    out: &HeadOutput,
    centers: &[[S; 3]],
    score_threshold: S,
) -> Vec<DetectionBox<S>> {
    let mut dets = Vec::new();
    for group in &out.groups {
        let logits = g.value2(group.cls);
        let reg = g.value2(group.reg);
        assert_eq!(logits.nrows(), centers.len());
        for (i, center) in centers.iter().enumerate() {
            for (col, &class) in group.classes.iter().enumerate() {
                let score = sigmoid(logits[[i, col]]);
                if score < score_threshold {
                    continue;
                }
                let mut t = [S::zero(); 8];
                for (c, v) in t.iter_mut().enumerate() {
                    *v = reg[[i, c]];
                }
                if let Ok(bbox) = decode_regression_target(&t, *center, class) {
                    dets.push(DetectionBox { bbox, score });
                }
            }
        }
    }
    dets
}

/// Greedy per-class BEV non-maximum suppression. Boxes are visited in
/// descending score order (ties by input order) and kept unless they
/// overlap an already-kept box of the same class above `iou_thresh`.
pub fn nms_bev<S: Scalar>(dets: &[DetectionBox<S>], iou_thresh: S) -> Vec<DetectionBox<S>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<DetectionBox<S>> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|k| {
            k.bbox.class_id == d.bbox.class_id && bev_iou(&k.bbox, &d.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
