//! Hash-based sparse tensor operators: dynamic pooling, broadcast,
//! submanifold and strided sparse convolution, and the SparseUNet used as
//! both the point backbone and the mixer body.
//!
//! A sparse feature map is a list of unique voxel coordinates (always kept
//! in lexicographic order) paired with a feature matrix node in an autodiff
//! graph. Convolutions are driven by precomputed [`KernelMap`]s: per kernel
//! offset, the list of (input row, output row) pairs. Neighbor lookup uses
//! a hash map keyed on packed coordinates (21 bits per signed axis, see
//! [`pack_coord`]).

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array3;
use rand::Rng;

use crate::autodiff::nn::kaiming_normal;
use crate::autodiff::{AutodiffError, Graph, KernelMap, NodeId, ParamId, ParamStore};
use crate::geom::{bucket_coords, VoxelCoord, VoxelGridSpec};
use crate::scalar::Scalar;

/// Packs signed voxel coordinates into a single hash key: each axis is
/// offset by 2^20 and masked to 21 bits, then laid out as
/// `x << 42 | y << 21 | z`. Valid for coordinates in `[-2^20, 2^20)`.
pub fn pack_coord(c: VoxelCoord) -> u64 {
    debug_assert!(
        c.0.iter().all(|&v| (-(1 << 20)..(1 << 20)).contains(&(v as i64))),
        "coordinate {c:?} outside packable range"
    );
    let enc = |v: i32| ((v as i64 + (1 << 20)) as u64) & 0x1F_FFFF;
    (enc(c.0[0]) << 42) | (enc(c.0[1]) << 21) | enc(c.0[2])
}

/// Inverse of [`pack_coord`].
pub fn unpack_coord(key: u64) -> VoxelCoord {
    let dec = |bits: u64| (bits & 0x1F_FFFF) as i64 - (1 << 20);
    VoxelCoord([
        dec(key >> 42) as i32,
        dec(key >> 21) as i32,
        dec(key) as i32,
    ])
}

/// Kernel slot for a 3-cubed offset: `(dx+1)*9 + (dy+1)*3 + (dz+1)`.
pub fn offset_slot(d: [i32; 3]) -> usize {
    debug_assert!(d.iter().all(|v| (-1..=1).contains(v)));
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

/// All 27 offsets of a 3-cubed kernel in slot order.
pub fn kernel_offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|dx| (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [dx, dy, dz])))
}

fn row_index(coords: &[VoxelCoord]) -> HashMap<u64, usize> {
    coords
        .iter()
        .enumerate()
        .map(|(i, &c)| (pack_coord(c), i))
        .collect()
}

/// Unique, lexicographically sorted voxel coordinates paired with a feature
/// node of matching row count, at a given stride over a base grid.
#[derive(Clone)]
pub struct SparseFeatureMap<S: Scalar> {
    pub coords: Vec<VoxelCoord>,
    pub feats: NodeId,
    pub stride: u32,
    pub spec: VoxelGridSpec<S>,
}

impl<S: Scalar> SparseFeatureMap<S> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Merges duplicate coordinates by group mean/max. Returns the unique
/// coordinates in lexicographic order, the reduced feature node, and the
/// inverse index mapping each input row to its output row.
pub fn dynamic_pool<S: Scalar>(
    g: &mut Graph<S>,
    coords: &[VoxelCoord],
    feats: NodeId,
    reduce: Reduce,
) -> Result<(Vec<VoxelCoord>, NodeId, Vec<usize>), AutodiffError> {
    let buckets = bucket_coords(coords);
    let members = Rc::new(buckets.members);
    let pooled = match reduce {
        Reduce::Mean => g.group_mean(feats, members)?,
        Reduce::Max => g.group_max(feats, members)?,
    };
    Ok((buckets.coords, pooled, buckets.point_voxel))
}

/// Routes pooled rows back to input rows: `out[i] = pooled[inverse[i]]`.
pub fn broadcast<S: Scalar>(
    g: &mut Graph<S>,
    pooled: NodeId,
    inverse: &[usize],
) -> Result<NodeId, AutodiffError> {
    g.gather_rows(pooled, Rc::new(inverse.to_vec()))
}

/// Gather plan for a submanifold convolution: outputs sit exactly on the
/// input coordinates, and slot `k(d)` pairs the row at `c + d` with the
/// output row at `c`.
pub fn subm_kernel_map(coords: &[VoxelCoord]) -> KernelMap {
    let index = row_index(coords);
    let mut pairs = vec![Vec::new(); 27];
    for d in kernel_offsets() {
        let slot = &mut pairs[offset_slot(d)];
        for (o, &c) in coords.iter().enumerate() {
            if let Some(&i) = index.get(&pack_coord(c.offset(d))) {
                slot.push((i, o));
            }
        }
    }
    KernelMap {
        n_out: coords.len(),
        pairs,
    }
}

/// Gather plan for a stride-2 downsampling convolution. Output coordinates
/// are the unique floored halves of the input coordinates; the kernel
/// window of output `q` covers input sites `2q + d`.
pub fn strided_kernel_map(coords: &[VoxelCoord]) -> (Vec<VoxelCoord>, KernelMap) {
    let mut out: Vec<VoxelCoord> = coords.iter().map(|c| c.floor_div(2)).collect();
    out.sort_unstable();
    out.dedup();
    let index = row_index(coords);
    let mut pairs = vec![Vec::new(); 27];
    for d in kernel_offsets() {
        let slot = &mut pairs[offset_slot(d)];
        for (o, &q) in out.iter().enumerate() {
            let site = VoxelCoord([2 * q.0[0], 2 * q.0[1], 2 * q.0[2]]).offset(d);
            if let Some(&i) = index.get(&pack_coord(site)) {
                slot.push((i, o));
            }
        }
    }
    let kmap = KernelMap {
        n_out: out.len(),
        pairs,
    };
    (out, kmap)
}

/// 3-cubed sparse convolution weights plus bias. The same parameter shape
/// serves submanifold and strided use; the kernel map decides the routing.
pub struct SparseConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl SparseConv {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self, AutodiffError> {
        // fan-in counts every kernel tap
        let flat = kaiming_normal::<S, _>(rng, 27 * c_in, c_out);
        let w3 = Array3::from_shape_vec((27, c_in, c_out), flat.into_raw_vec_and_offset().0)
            .expect("27*c_in*c_out elements");
        let w = store.register(&format!("{name}.w"), w3.into_dyn())?;
        let b = store.register(&format!("{name}.b"), ndarray::ArrayD::zeros(vec![c_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        feats: NodeId,
        kmap: Rc<KernelMap>,
    ) -> Result<NodeId, AutodiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.sparse_conv(feats, w, kmap)?;
        g.add_bias(y, b)
    }
}

/// Coordinate-preserving sparse convolution over a feature map.
pub fn submanifold_conv<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    conv: &SparseConv,
    input: &SparseFeatureMap<S>,
) -> Result<SparseFeatureMap<S>, AutodiffError> {
    let kmap = Rc::new(subm_kernel_map(&input.coords));
    let feats = conv.forward(g, store, input.feats, kmap)?;
    Ok(SparseFeatureMap {
        coords: input.coords.clone(),
        feats,
        stride: input.stride,
        spec: input.spec,
    })
}

/// Downsampling sparse convolution: doubles the stride, output coordinates
/// are the unique floored halves of the input coordinates.
pub fn strided_conv_down<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    conv: &SparseConv,
    input: &SparseFeatureMap<S>,
) -> Result<SparseFeatureMap<S>, AutodiffError> {
    let (coords, kmap) = strided_kernel_map(&input.coords);
    let feats = conv.forward(g, store, input.feats, Rc::new(kmap))?;
    let stride = input.stride * 2;
    Ok(SparseFeatureMap {
        coords,
        feats,
        stride,
        spec: input.spec.at_stride(stride),
    })
}

/// Encoder-decoder over sparse maps. Each encoder stage halves the
/// resolution (except the first) and applies two convolutions; the decoder
/// routes features back to the coordinate sets recorded on the way down,
/// concatenating skip features and projecting. The stride-1 output has
/// exactly the input coordinate set.
pub struct SparseUnet {
    stage_down: Vec<Option<SparseConv>>, // None for stage 0 (kept at stride 1)
    stage_first: Vec<Option<SparseConv>>, // stage 0's first conv
    stage_second: Vec<SparseConv>,
    dec_proj: Vec<crate::autodiff::nn::Linear>,
    dec_conv: Vec<SparseConv>,
    widths: Vec<usize>,
}

/// All decoder-side maps of a [`SparseUnet`] pass, ordered by ascending
/// stride: `maps[0]` is the stride-1 output (same coordinates as the
/// input), deeper entries halve the resolution per step.
pub struct UnetOutput<S: Scalar> {
    pub maps: Vec<SparseFeatureMap<S>>,
}

impl<S: Scalar> UnetOutput<S> {
    pub fn at_stride(&self, stride: u32) -> Option<&SparseFeatureMap<S>> {
        self.maps.iter().find(|m| m.stride == stride)
    }
}

impl SparseUnet {
    /// `widths[i]` is the channel width of stage `i`; `widths.len()` is the
    /// depth (number of resolution levels).
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        widths: &[usize],
    ) -> Result<Self, AutodiffError> {
        assert!(!widths.is_empty(), "UNet needs at least one stage");
        let mut stage_down = Vec::new();
        let mut stage_first = Vec::new();
        let mut stage_second = Vec::new();
        let mut prev = c_in;
        for (i, &w) in widths.iter().enumerate() {
            if i == 0 {
                stage_down.push(None);
                stage_first.push(Some(SparseConv::new(
                    store,
                    rng,
                    &format!("{name}.enc{i}.a"),
                    prev,
                    w,
                )?));
            } else {
                stage_down.push(Some(SparseConv::new(
                    store,
                    rng,
                    &format!("{name}.enc{i}.down"),
                    prev,
                    w,
                )?));
                stage_first.push(None);
            }
            stage_second.push(SparseConv::new(
                store,
                rng,
                &format!("{name}.enc{i}.b"),
                w,
                w,
            )?);
            prev = w;
        }
        // decoder levels i = depth-2 .. 0, stored in application order
        let mut dec_proj = Vec::new();
        let mut dec_conv = Vec::new();
        for i in (0..widths.len().saturating_sub(1)).rev() {
            dec_proj.push(crate::autodiff::nn::Linear::new(
                store,
                rng,
                &format!("{name}.dec{i}.proj"),
                widths[i + 1] + widths[i],
                widths[i],
            )?);
            dec_conv.push(SparseConv::new(
                store,
                rng,
                &format!("{name}.dec{i}.conv"),
                widths[i],
                widths[i],
            )?);
        }
        Ok(Self {
            stage_down,
            stage_first,
            stage_second,
            dec_proj,
            dec_conv,
            widths: widths.to_vec(),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: &SparseFeatureMap<S>,
    ) -> Result<UnetOutput<S>, AutodiffError> {
        let depth = self.widths.len();
        // encoder
        let mut enc: Vec<SparseFeatureMap<S>> = Vec::with_capacity(depth);
        for i in 0..depth {
            let prev = if i == 0 { input } else { &enc[i - 1] };
            let mut h = if let Some(down) = &self.stage_down[i] {
                strided_conv_down(g, store, down, prev)?
            } else {
                submanifold_conv(
                    g,
                    store,
                    self.stage_first[i].as_ref().expect("stage 0 first conv"),
                    prev,
                )?
            };
            h.feats = g.relu(h.feats);
            let kmap = Rc::new(subm_kernel_map(&h.coords));
            h.feats = self.stage_second[i].forward(g, store, h.feats, kmap)?;
            h.feats = g.relu(h.feats);
            enc.push(h);
        }
        // decoder: deepest encoder map is the deepest output as-is
        let mut maps: Vec<SparseFeatureMap<S>> = vec![enc[depth - 1].clone()];
        let mut deeper = enc[depth - 1].clone();
        for (step, i) in (0..depth - 1).rev().enumerate() {
            let skip = &enc[i];
            // route each fine coordinate to its recorded parent's row
            let parent_rows: Vec<usize> = skip
                .coords
                .iter()
                .map(|c| {
                    deeper
                        .coords
                        .binary_search(&c.floor_div(2))
                        .expect("parent coord recorded by strided downsampling")
                })
                .collect();
            let up = g.gather_rows(deeper.feats, Rc::new(parent_rows))?;
            let cat = g.concat_cols(&[up, skip.feats])?;
            let proj = self.dec_proj[step].forward(g, store, cat)?;
            let proj = g.relu(proj);
            let kmap = Rc::new(subm_kernel_map(&skip.coords));
            let conv = self.dec_conv[step].forward(g, store, proj, kmap)?;
            let feats = g.relu(conv);
            let out = SparseFeatureMap {
                coords: skip.coords.clone(),
                feats,
                stride: skip.stride,
                spec: skip.spec,
            };
            maps.push(out.clone());
            deeper = out;
        }
        maps.reverse();
        Ok(UnetOutput { maps })
    }
}
