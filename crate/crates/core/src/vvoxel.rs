//! Virtual voxelization: bucketing the union of real points and voted
//! centers on the stride-1 grid, initializing per-member features, and
//! encoding every voxel (virtual and real) with the grouped set encoder.

use ndarray::Array2;
use thiserror::Error;

use crate::autodiff::nn::Mode;
use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::autodiff::ParamStore;
use crate::geom::{bucket_coords, GeomError, PointCloud, VoxelCoord, VoxelGridSpec};
use crate::scalar::Scalar;
use crate::segvote::VoteOutput;
use crate::sir::{GroupedPoints, SirEncoder};
use crate::sparse::SparseFeatureMap;

#[derive(Debug, Error)]
pub enum VvoxelError {
    #[error("virtual voxelization requires a stride-1 grid, got stride {0}")]
    BadStride(u32),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A voxel member is either a real point (index into the point cloud) or a
/// voted center (index into the vote list).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberId {
    Point(usize),
    Vote(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelKind {
    /// Contains at least one voted center.
    Virtual,
    /// Holds real points only.
    Real,
}

/// Voxels over the union of real points and voted centers. The flat member
/// order is all real points first, then all votes; `union_coords` holds the
/// matching `[n_points + n_votes, 3]` position node so downstream encoders
/// keep a gradient path into the vote offsets.
pub struct VirtualVoxelSet<S: Scalar> {
    pub coords: Vec<VoxelCoord>,
    pub kind: Vec<VoxelKind>,
    pub members: Vec<Vec<MemberId>>,
    /// Flat union index (points then votes) → row in `coords`.
    pub member_voxel: Vec<usize>,
    pub union_coords: NodeId,
    pub n_points: usize,
    pub n_votes: usize,
    pub spec: VoxelGridSpec<S>,
}

impl<S: Scalar> VirtualVoxelSet<S> {
    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn n_virtual(&self) -> usize {
        self.kind.iter().filter(|k| **k == VoxelKind::Virtual).count()
    }

    /// Recomputes the kind flags from the member lists (idempotent with
    /// respect to the stored flags).
    pub fn kinds_from_members(&self) -> Vec<VoxelKind> {
        self.members
            .iter()
            .map(|ms| {
                if ms.iter().any(|m| matches!(m, MemberId::Vote(_))) {
                    VoxelKind::Virtual
                } else {
                    VoxelKind::Real
                }
            })
            .collect()
    }

    /// Voxels introduced purely by votes (no real-point member), and the
    /// count of voxels the real points occupy on their own. The relative
    /// sparsity cost of the virtual mechanism is `added as f64 / base`.
    pub fn voxel_increase(&self) -> (usize, usize) {
        let added = self
            .members
            .iter()
            .filter(|ms| ms.iter().all(|m| matches!(m, MemberId::Vote(_))))
            .count();
        (added, self.coords.len() - added)
    }

    pub fn virtual_mask(&self) -> Vec<bool> {
        self.kind.iter().map(|k| *k == VoxelKind::Virtual).collect()
    }
}

/// Buckets real points and voted centers together on the stride-1 grid. A
/// voxel is virtual exactly when at least one voted center falls in it.
pub fn virtual_voxelize<S: Scalar>(
    g: &mut Graph<S>,
    points: &PointCloud<S>,
    votes: &VoteOutput,
    spec: &VoxelGridSpec<S>,
) -> Result<VirtualVoxelSet<S>, VvoxelError> {
    if spec.stride != 1 {
        return Err(VvoxelError::BadStride(spec.stride));
    }
    let n = points.len();
    let centers = g.value2(votes.centers).to_owned();
    let m = centers.nrows();
    let mut cell = Vec::with_capacity(n + m);
    for p in &points.xyz {
        cell.push(spec.voxel_of(*p));
    }
    for (j, c) in centers.outer_iter().enumerate() {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFiniteCoordinate { index: n + j }.into());
        }
        cell.push(spec.voxel_of([c[0], c[1], c[2]]));
    }
    let buckets = bucket_coords(&cell);

    let members: Vec<Vec<MemberId>> = buckets
        .members
        .iter()
        .map(|ms| {
            ms.iter()
                .map(|&i| {
                    if i < n {
                        MemberId::Point(i)
                    } else {
                        MemberId::Vote(i - n)
                    }
                })
                .collect()
        })
        .collect();
    let kind: Vec<VoxelKind> = members
        .iter()
        .map(|ms| {
            if ms.iter().any(|m| matches!(m, MemberId::Vote(_))) {
                VoxelKind::Virtual
            } else {
                VoxelKind::Real
            }
        })
        .collect();

    let point_xyz = Array2::from_shape_fn((n, 3), |(r, c)| points.xyz[r][c]);
    let point_node = g.constant2(point_xyz);
    let union_coords = g.concat_rows(&[point_node, votes.centers])?;

    Ok(VirtualVoxelSet {
        coords: buckets.coords,
        kind,
        members,
        member_voxel: buckets.point_voxel,
        union_coords,
        n_points: n,
        n_votes: m,
        spec: *spec,
    })
}

/// Per-member input features: every member carries its (source) point's
/// backbone feature with a 3-channel displacement appended — exactly zero
/// for real points, the applied vote displacement (`center − source
/// position`) for voted centers.
pub fn init_member_features<S: Scalar>(
    g: &mut Graph<S>,
    set: &VirtualVoxelSet<S>,
    backbone_feats: NodeId,
    votes: &VoteOutput,
) -> Result<NodeId, AutodiffError> {
    let n = set.n_points;
    let zeros = g.constant2(Array2::zeros((n, 3)));
    let real_rows = g.concat_cols(&[backbone_feats, zeros])?;
    if set.n_votes == 0 {
        return Ok(real_rows);
    }
    let idx = std::rc::Rc::new(votes.source.clone());
    let vote_base_feats = g.gather_rows(backbone_feats, idx.clone())?;
    let vote_origin = g.gather_rows(votes.coords, idx)?;
    let displacement = g.sub(votes.centers, vote_origin)?;
    let vote_rows = g.concat_cols(&[vote_base_feats, displacement])?;
    g.concat_rows(&[real_rows, vote_rows])
}

/// Encodes every voxel's member set into one feature row, returning a
/// stride-1 sparse map over all voxels plus the virtual mask.
pub fn vve_encode<S: Scalar>(
    g: &mut Graph<S>,
    store: &mut ParamStore<S>,
    encoder: &SirEncoder,
    set: &VirtualVoxelSet<S>,
    member_feats: NodeId,
    mode: Mode,
) -> Result<(SparseFeatureMap<S>, Vec<bool>), AutodiffError> {
    let gp = GroupedPoints {
        feats: member_feats,
        coords: set.union_coords,
        group_id: set.member_voxel.clone(),
        n_groups: set.coords.len(),
    };
    let out = encoder.forward(g, store, &gp, mode)?;
    Ok((
        SparseFeatureMap {
            coords: set.coords.clone(),
            feats: out.group_feats,
            stride: 1,
            spec: set.spec,
        },
        set.virtual_mask(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use crate::autodiff::ParamStore;
    use crate::segvote::scale_votes;
    use crate::sir::SirSpec;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn spec04() -> VoxelGridSpec<f64> {
        VoxelGridSpec::new([0.4; 3], [0.0; 3], 1).unwrap()
    }

    fn cloud(xyz: Vec<[f64; 3]>) -> PointCloud<f64> {
        let n = xyz.len();
        PointCloud::new(xyz, Array2::zeros((n, 1)), None).unwrap()
    }

    /// A VoteOutput with explicitly chosen offsets, all points voting.
    fn votes_from(
        g: &mut Graph<f64>,
        xyz: &[[f64; 3]],
        offsets: Array2<f64>,
        source: Vec<usize>,
    ) -> VoteOutput {
        let n = xyz.len();
        let coords = g.constant2(Array2::from_shape_fn((n, 3), |(r, c)| xyz[r][c]));
        let off = g.constant2(offsets);
        let logits = g.constant2(Array2::zeros((n, 2)));
        let idx = Rc::new(source.clone());
        let base = g.gather_rows(coords, idx.clone()).unwrap();
        let sel = g.gather_rows(off, idx).unwrap();
        let centers = g.add(base, sel).unwrap();
        VoteOutput {
            fg_logits: logits,
            offsets: off,
            source,
            centers,
            scale: 1.0,
            coords,
        }
    }

    #[test]
    fn no_votes_gives_all_real_voxels() {
        let xyz = vec![[0.1, 0.1, 0.1], [1.0, 1.0, 1.0], [1.1, 1.0, 1.0]];
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let votes = votes_from(&mut g, &xyz, Array2::zeros((3, 3)), vec![]);
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        assert!(set.kind.iter().all(|k| *k == VoxelKind::Real));
        assert_eq!(set.n_virtual(), 0);
        assert_eq!(set.voxel_increase().0, 0);
    }

    #[test]
    fn lone_vote_creates_virtual_voxel_with_only_the_vote() {
        let xyz = vec![[0.1, 0.1, 0.1]];
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        // vote lands far away in an empty cell
        let votes = votes_from(&mut g, &xyz, arr2(&[[2.0, 2.0, 2.0]]), vec![0]);
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        assert_eq!(set.n_voxels(), 2);
        assert_eq!(set.n_virtual(), 1);
        let virt = set
            .kind
            .iter()
            .position(|k| *k == VoxelKind::Virtual)
            .unwrap();
        assert_eq!(set.members[virt], vec![MemberId::Vote(0)]);
        assert_eq!(set.voxel_increase(), (1, 1));
    }

    #[test]
    fn perfect_votes_give_one_virtual_voxel_per_object() {
        // two rings of points, all votes landing exactly on their object
        // center; the centers sit mid-cell (never on a cell boundary) in
        // cells containing no real points
        let c0 = [2.2, 2.2, 1.0];
        let c1 = [6.2, 5.0, 1.0];
        let mut xyz = Vec::new();
        let mut offsets = Vec::new();
        for c in [c0, c1] {
            for k in 0..8 {
                let a = k as f64 / 8.0 * std::f64::consts::TAU;
                let p = [c[0] + a.cos(), c[1] + a.sin(), c[2]];
                xyz.push(p);
                offsets.push([c[0] - p[0], c[1] - p[1], c[2] - p[2]]);
            }
        }
        let n = xyz.len();
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let off = Array2::from_shape_fn((n, 3), |(r, c)| offsets[r][c]);
        let votes = votes_from(&mut g, &xyz, off, (0..n).collect());
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        assert_eq!(set.n_virtual(), 2, "one virtual voxel per object");
        // idempotent kind recomputation
        assert_eq!(set.kinds_from_members(), set.kind);
        // never more virtual voxels than votes
        assert!(set.n_virtual() <= n);
    }

    #[test]
    fn zero_scale_votes_add_no_new_voxel_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let xyz: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..2.0),
                ]
            })
            .collect();
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let off = Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
        let source: Vec<usize> = (0..40).filter(|i| i % 3 == 0).collect();
        let votes = votes_from(&mut g, &xyz, off, source.clone());
        let collapsed = scale_votes(&mut g, &votes, 0.0).unwrap();
        let set = virtual_voxelize(&mut g, &points, &collapsed, &spec04()).unwrap();
        assert_eq!(set.voxel_increase().0, 0, "collapsed votes reuse point cells");
        // every virtual voxel also holds the vote's source point
        for (v, k) in set.kind.iter().enumerate() {
            if *k == VoxelKind::Virtual {
                let has_source_point = set.members[v]
                    .iter()
                    .any(|m| matches!(m, MemberId::Point(i) if source.contains(i)));
                assert!(has_source_point);
            }
        }
    }

    #[test]
    fn member_features_share_base_and_differ_in_offset() {
        // dyadic coordinates keep the recovered displacement exact
        let xyz = vec![[0.125, 0.125, 0.125], [1.0, 1.0, 1.0]];
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let votes = votes_from(&mut g, &xyz, arr2(&[[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]]), vec![0]);
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        let backbone = g.constant2(arr2(&[[1.0, -2.0], [3.0, 4.0]]));
        let feats = init_member_features(&mut g, &set, backbone, &votes).unwrap();
        let fv = g.value2(feats);
        assert_eq!(fv.nrows(), 3);
        // real rows: zero offset channels
        assert_eq!(fv.row(0).to_vec(), vec![1.0, -2.0, 0.0, 0.0, 0.0]);
        assert_eq!(fv.row(1).to_vec(), vec![3.0, 4.0, 0.0, 0.0, 0.0]);
        // vote row: same base feature as its source, offset channels live
        assert_eq!(fv.row(2).to_vec(), vec![1.0, -2.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn bad_source_index_is_an_error() {
        let xyz = vec![[0.1, 0.1, 0.1]];
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let mut votes = votes_from(&mut g, &xyz, arr2(&[[0.5, 0.0, 0.0]]), vec![0]);
        votes.source = vec![7];
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        let backbone = g.constant2(arr2(&[[1.0, -2.0]]));
        assert!(init_member_features(&mut g, &set, backbone, &votes).is_err());
    }

    #[test]
    fn stride_must_be_one() {
        let xyz = vec![[0.1, 0.1, 0.1]];
        let points = cloud(xyz.clone());
        let mut g = Graph::new();
        let votes = votes_from(&mut g, &xyz, Array2::zeros((1, 3)), vec![]);
        let bad = spec04().at_stride(2);
        assert!(matches!(
            virtual_voxelize(&mut g, &points, &votes, &bad),
            Err(VvoxelError::BadStride(2))
        ));
    }

    fn small_encoder(seed: u64, c_in: usize) -> (ParamStore<f64>, SirEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let spec = SirSpec {
            widths: vec![6, 5],
            iterations: 2,
            batch_norm: false,
        };
        let enc = SirEncoder::new(&mut st, &mut rng, "vve", c_in, &spec).unwrap();
        (st, enc)
    }

    #[test]
    fn encoding_is_within_voxel_only() {
        // two separated voxels; perturbing a member of one leaves the
        // other's encoded feature bitwise unchanged
        let xyz = vec![[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [3.0, 3.0, 3.0]];
        let (mut st, enc) = small_encoder(61, 2 + 3);
        let mut run = |first_feat: f64| {
            let points = cloud(xyz.clone());
            let mut g = Graph::new();
            let votes = votes_from(&mut g, &xyz, Array2::zeros((3, 3)), vec![]);
            let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
            let backbone = g.constant2(arr2(&[
                [first_feat, 0.3],
                [0.5, -0.2],
                [1.0, 0.8],
            ]));
            let feats = init_member_features(&mut g, &set, backbone, &votes).unwrap();
            let (map, mask) = vve_encode(&mut g, &mut st, &enc, &set, feats, Mode::Eval).unwrap();
            assert_eq!(mask.len(), map.coords.len());
            // row of the far voxel
            let far = map
                .coords
                .iter()
                .position(|c| *c == VoxelCoord([7, 7, 7]))
                .unwrap();
            g.value2(map.feats).row(far).to_owned()
        };
        assert_eq!(run(0.1), run(9.0));
    }

    #[test]
    fn singleton_voxel_matches_sir_singleton() {
        let xyz = vec![[0.1, 0.1, 0.1]];
        let points = cloud(xyz.clone());
        let (mut st, enc) = small_encoder(62, 1 + 3);
        let mut g = Graph::new();
        let votes = votes_from(&mut g, &xyz, Array2::zeros((1, 3)), vec![]);
        let set = virtual_voxelize(&mut g, &points, &votes, &spec04()).unwrap();
        let backbone = g.constant2(arr2(&[[0.7]]));
        let feats = init_member_features(&mut g, &set, backbone, &votes).unwrap();
        let (map, _) = vve_encode(&mut g, &mut st, &enc, &set, feats, Mode::Eval).unwrap();
        // group feature of a single-member voxel equals its point feature
        let gp = GroupedPoints {
            feats,
            coords: set.union_coords,
            group_id: vec![0],
            n_groups: 1,
        };
        let sir_out = enc.forward(&mut g, &mut st, &gp, Mode::Eval).unwrap();
        assert_eq!(g.value2(map.feats), g.value2(sir_out.group_feats));
    }

    #[test]
    fn gradient_reaches_vote_offsets() {
        // full chain: offsets are parameters; the loss on encoded voxel
        // features must push gradient back into them both through the
        // appended offset channels and through the member coordinates
        let xyz = vec![
            [0.15, 0.15, 0.15],
            [0.55, 0.15, 0.15],
            [0.95, 0.55, 0.15],
            [1.35, 0.95, 0.55],
        ];
        let (mut st, enc) = small_encoder(63, 2 + 3);
        let mut rng = ChaCha8Rng::seed_from_u64(630);
        // jitter params off the relu kink for the finite-difference check;
        // biases go strictly positive so no layer starts fully dead
        let names: Vec<String> = st.iter_named().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let id = st.id_of(name).unwrap();
            let bias = name.ends_with(".b");
            for x in st.value_mut(id).iter_mut() {
                *x += if bias {
                    rng.gen_range(0.05..0.35)
                } else {
                    rng.gen_range(-0.3..0.3)
                };
            }
        }
        // offsets small enough that ±h probes never change any bucket
        let off_param = st
            .register(
                "offsets",
                Array2::from_shape_fn((4, 3), |_| rng.gen_range(-0.05..0.05)).into_dyn(),
            )
            .unwrap();
        let backbone_arr = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let points = cloud(xyz.clone());

        let build = |g: &mut Graph<f64>, st: &mut ParamStore<f64>| {
            let coords =
                g.constant2(Array2::from_shape_fn((4, 3), |(r, c)| xyz[r][c]));
            let off = g.param(st, off_param);
            let logits = g.constant2(Array2::zeros((4, 2)));
            let source = vec![0usize, 1, 2, 3];
            let idx = Rc::new(source.clone());
            let base = g.gather_rows(coords, idx.clone())?;
            let sel = g.gather_rows(off, idx)?;
            let centers = g.add(base, sel)?;
            let votes = VoteOutput {
                fg_logits: logits,
                offsets: off,
                source,
                centers,
                scale: 1.0,
                coords,
            };
            let set = virtual_voxelize(g, &points, &votes, &spec04()).unwrap();
            let backbone = g.constant2(backbone_arr.clone());
            let feats = init_member_features(g, &set, backbone, &votes)?;
            let (map, _) = vve_encode(g, st, &enc, &set, feats, Mode::Eval)?;
            let v = g.value2(map.feats).nrows();
            let target = Array2::from_elem((v, 5), 0.1);
            g.l1_sum(map.feats, target)
        };

        // analytic gradient reaches the offsets and is nonzero
        let mut g = Graph::new();
        let root = build(&mut g, &mut st).unwrap();
        // a fully relu-dead encoder outputs zeros, giving loss exactly
        // 4 voxels * 5 channels * 0.1; the gradient would then be zero for
        // the wrong reason, so insist the network is alive first
        assert_ne!(g.value(root)[0], 2.0, "encoder output is relu-dead");
        st.zero_grads();
        g.backward(root).unwrap();
        g.accumulate_grads(&mut st);
        let grad_norm: f64 = st.grad(off_param).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(grad_norm > 1e-6, "offset gradient must be nonzero");

        // and matches finite differences through the whole encode chain
        let report = grad_check(&mut st, build, 1e-6).unwrap();
        report.assert_below(1e-5);
    }
}
