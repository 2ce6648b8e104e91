//! Grouped set encoder: point groups (instance clusters or voxel member
//! lists) are turned into fixed-width group features by iterating
//! MLP → group max-pool → broadcast → concat → MLP, then max-pooling the
//! final point features once more without broadcasting back.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::nn::{Mlp, Mode};
use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore};
use crate::scalar::Scalar;

/// Points carrying features, 3D coordinates, and a group assignment.
/// Group ids must be a compact `0..n_groups` range (empty groups allowed —
/// they produce zero feature rows).
///
/// Coordinates are a graph node so gradients can reach upstream producers
/// (e.g. predicted vote offsets that shift member positions).
pub struct GroupedPoints {
    /// `[N, C]` per-point features.
    pub feats: NodeId,
    /// `[N, 3]` per-point coordinates.
    pub coords: NodeId,
    /// Group of each point, in `0..n_groups`.
    pub group_id: Vec<usize>,
    pub n_groups: usize,
}

/// Widths of each MLP block, number of encode iterations, and whether the
/// blocks use batch normalization.
#[derive(Debug, Clone)]
pub struct SirSpec {
    pub widths: Vec<usize>,
    pub iterations: usize,
    pub batch_norm: bool,
}

impl Default for SirSpec {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            iterations: 2,
            batch_norm: false,
        }
    }
}

pub struct SirOutput {
    /// `[G, C_out]` one feature row per group; empty groups give zero rows.
    pub group_feats: NodeId,
    /// `[N, C_out]` per-point features after the last iteration.
    pub point_feats: NodeId,
}

/// The encoder's parameters: per iteration a pre-pool MLP and a post-concat
/// MLP.
pub struct SirEncoder {
    pre: Vec<Mlp>,
    post: Vec<Mlp>,
    out_width: usize,
}

impl SirEncoder {
    /// `c_in` counts the caller's feature columns; the three centered
    /// coordinate columns are appended internally.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        spec: &SirSpec,
    ) -> Result<Self, AutodiffError> {
        assert!(spec.iterations >= 1, "need at least one encode iteration");
        assert!(!spec.widths.is_empty(), "MLP blocks need at least one width");
        let w_last = *spec.widths.last().unwrap();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        for i in 0..spec.iterations {
            let mut dims_a = vec![if i == 0 { c_in + 3 } else { w_last }];
            dims_a.extend_from_slice(&spec.widths);
            pre.push(Mlp::new(
                store,
                rng,
                &format!("{name}.it{i}.pre"),
                &dims_a,
                spec.batch_norm,
                true,
            )?);
            let mut dims_b = vec![2 * w_last];
            dims_b.extend_from_slice(&spec.widths);
            post.push(Mlp::new(
                store,
                rng,
                &format!("{name}.it{i}.post"),
                &dims_b,
                spec.batch_norm,
                true,
            )?);
        }
        Ok(Self {
            pre,
            post,
            out_width: w_last,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    /// Encodes each group into one feature row. Point coordinates are
    /// centered on their group's coordinate mean and the offsets appended
    /// to the input features.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        gp: &GroupedPoints,
        mode: Mode,
    ) -> Result<SirOutput, AutodiffError> {
        let n = g.value(gp.feats).shape()[0];
        let cshape = g.value(gp.coords).shape().to_vec();
        if cshape != [n, 3] || gp.group_id.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "sir_encode",
                lhs: vec![n, gp.group_id.len()],
                rhs: cshape,
            });
        }
        let mut members = vec![Vec::new(); gp.n_groups];
        for (i, &gid) in gp.group_id.iter().enumerate() {
            if gid >= gp.n_groups {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "sir_encode",
                    index: gid,
                    len: gp.n_groups,
                });
            }
            members[gid].push(i);
        }
        let members = Rc::new(members);
        let gid = Rc::new(gp.group_id.clone());

        let mean = g.group_mean(gp.coords, members.clone())?;
        let mean_per_point = g.gather_rows(mean, gid.clone())?;
        let offset = g.sub(gp.coords, mean_per_point)?;
        let mut x = g.concat_cols(&[gp.feats, offset])?;
        for (pre, post) in self.pre.iter().zip(&self.post) {
            let h = pre.forward(g, store, x, mode)?;
            let pooled = g.group_max(h, members.clone())?;
            let back = g.gather_rows(pooled, gid.clone())?;
            let cat = g.concat_cols(&[back, h])?;
            x = post.forward(g, store, cat, mode)?;
        }
        let group_feats = g.group_max(x, members)?;
        Ok(SirOutput {
            group_feats,
            point_feats: x,
        })
    }
}
