//! Label assignment for virtual voxels: every virtual voxel whose position
//! falls inside a ground-truth box becomes a positive for that box. The
//! position is the weighted centroid of the voxel's members by default, so
//! tiny objects can still claim voxels whose geometric center lies outside
//! them. Ablation alternatives (plain centroid, geometric center, enlarged
//! boxes, nearest-top-k) share the same machinery.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::autodiff::Graph;
use crate::geom::{point_in_box, Box3D, GeomError, VoxelCoord, VoxelGridSpec};
use crate::scalar::Scalar;
use crate::segvote::VoteOutput;
use crate::vvoxel::{MemberId, VirtualVoxelSet, VoxelKind};

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("nearest-top-k needs k >= 1")]
    BadTopK,
    #[error("enlarge margin must be >= 0, got {0}")]
    BadMargin(f64),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// How a voxel's position is defined and which voxels a box may claim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignStrategy<S: Scalar> {
    /// Voxel-in-box with the weighted centroid as position (primary).
    WeightedCentroid,
    /// Voxel-in-box with the unweighted member mean.
    PlainCentroid,
    /// Voxel-in-box with the voxel's geometric center.
    GeometricCenter,
    /// Geometric center against boxes grown by `margin` meters per side.
    EnlargeGt { margin: S },
    /// Weighted centroid, but each box keeps only its `k` nearest positives.
    NearestTopK { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig<S: Scalar> {
    pub strategy: AssignStrategy<S>,
    /// Background-member weight in the centroid (foreground weighs 1).
    pub alpha: S,
}

impl<S: Scalar> AssignConfig<S> {
    pub fn new(strategy: AssignStrategy<S>, alpha: S) -> Result<Self, AssignError> {
        if !(alpha >= S::zero() && alpha <= S::one()) {
            return Err(AssignError::BadAlpha(alpha.as_f64()));
        }
        match strategy {
            AssignStrategy::NearestTopK { k } if k == 0 => return Err(AssignError::BadTopK),
            AssignStrategy::EnlargeGt { margin } if margin < S::zero() => {
                return Err(AssignError::BadMargin(margin.as_f64()))
            }
            _ => {}
        }
        Ok(Self { strategy, alpha })
    }
}

impl<S: Scalar> Default for AssignConfig<S> {
    fn default() -> Self {
        Self {
            strategy: AssignStrategy::WeightedCentroid,
            alpha: S::lit(0.5),
        }
    }
}

/// Everything assignment needs to know about one voxel: its grid cell, the
/// positions of its members (raw points and voted centers together) and
/// which of them count as foreground.
#[derive(Debug, Clone)]
pub struct VoxelForAssign<S: Scalar> {
    pub coord: VoxelCoord,
    pub is_virtual: bool,
    pub members: Vec<[S; 3]>,
    pub fg: Vec<bool>,
}

/// Where the foreground flags for centroid weighting come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgSource {
    /// Points that voted plus all voted centers — what the model acted on.
    Predicted,
    /// Points inside any ground-truth box, for controlled studies.
    GroundTruth,
}

/// Bridges a [`VirtualVoxelSet`] into per-voxel assignment inputs.
pub fn voxels_for_assign<S: Scalar>(
    g: &Graph<S>,
    set: &VirtualVoxelSet<S>,
    votes: &VoteOutput,
    fg: FgSource,
    boxes: &[Box3D<S>],
) -> Vec<VoxelForAssign<S>> {
    let rows = g.value2(set.union_coords);
    let voted: HashSet<usize> = votes.source.iter().copied().collect();
    set.coords
        .iter()
        .zip(&set.kind)
        .zip(&set.members)
        .map(|((&coord, kind), members)| {
            let mut pos = Vec::with_capacity(members.len());
            let mut flags = Vec::with_capacity(members.len());
            for m in members {
                let (row, is_fg) = match *m {
                    MemberId::Point(i) => {
                        let is_fg = match fg {
                            FgSource::Predicted => voted.contains(&i),
                            FgSource::GroundTruth => {
                                let p = [rows[[i, 0]], rows[[i, 1]], rows[[i, 2]]];
                                boxes.iter().any(|b| point_in_box(p, b))
                            }
                        };
                        (i, is_fg)
                    }
                    MemberId::Vote(j) => (set.n_points + j, true),
                };
                pos.push([rows[[row, 0]], rows[[row, 1]], rows[[row, 2]]]);
                flags.push(is_fg);
            }
            VoxelForAssign {
                coord,
                is_virtual: *kind == VoxelKind::Virtual,
                members: pos,
                fg: flags,
            }
        })
        .collect()
}

/// Foreground members weigh 1 and background members weigh `alpha`. If the
/// weights sum to zero (all background, alpha = 0) the plain mean is used:
/// the formula is undefined there and such voxels are never positive anyway.
pub fn weighted_centroid<S: Scalar>(members: &[[S; 3]], fg: &[bool], alpha: S) -> [S; 3] {
    assert!(!members.is_empty(), "centroid of an empty voxel");
    assert_eq!(members.len(), fg.len());
    let mut acc = [S::zero(); 3];
    let mut total = S::zero();
    for (p, &is_fg) in members.iter().zip(fg) {
        let w = if is_fg { S::one() } else { alpha };
        for a in 0..3 {
            acc[a] += p[a] * w;
        }
        total += w;
    }
    if total == S::zero() {
        return plain_mean(members);
    }
    [acc[0] / total, acc[1] / total, acc[2] / total]
}

fn plain_mean<S: Scalar>(members: &[[S; 3]]) -> [S; 3] {
    let mut acc = [S::zero(); 3];
    for p in members {
        for a in 0..3 {
            acc[a] += p[a];
        }
    }
    let n = S::from_usize(members.len()).unwrap();
    [acc[0] / n, acc[1] / n, acc[2] / n]
}

/// Regression target for an assigned pair: the offset from the voxel's
/// geometric center to the box gravity center, log dimensions, and the
/// heading encoded as (sin, cos).
pub fn encode_regression_target<S: Scalar>(
    b: &Box3D<S>,
    voxel_center: [S; 3],
) -> Result<[S; 8], GeomError> {
    b.validate()?;
    Ok([
        b.center[0] - voxel_center[0],
        b.center[1] - voxel_center[1],
        b.center[2] - voxel_center[2],
        b.dims[0].ln(),
        b.dims[1].ln(),
        b.dims[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ])
}

/// Inverse of [`encode_regression_target`]. Accepts arbitrary (sin, cos)
/// pairs, so it also decodes raw head predictions.
pub fn decode_regression_target<S: Scalar>(
    t: &[S; 8],
    voxel_center: [S; 3],
    class_id: usize,
) -> Result<Box3D<S>, GeomError> {
    let mut yaw = t[6].atan2(t[7]);
    let pi = S::lit(std::f64::consts::PI);
    if yaw <= -pi {
        yaw = pi; // atan2(-0, negative) returns -pi; boxes use (-pi, pi]
    }
    Box3D::new(
        [
            voxel_center[0] + t[0],
            voxel_center[1] + t[1],
            voxel_center[2] + t[2],
        ],
        [t[3].exp(), t[4].exp(), t[5].exp()],
        yaw,
        class_id,
    )
}

/// Per-voxel assignment outcome. `target[i]` is present exactly when
/// `label[i]` is; regression targets always point at the voxel's geometric
/// center no matter which position strategy decided the label.
#[derive(Debug, Clone)]
pub struct AssignmentResult<S: Scalar> {
    pub label: Vec<Option<usize>>,
    pub box_index: Vec<Option<usize>>,
    pub target: Vec<Option<[S; 8]>>,
    /// The position each voxel was judged by.
    pub position: Vec<[S; 3]>,
    /// Voxels whose position fell inside several boxes (tie-broken to the
    /// nearest box center).
    pub overlap_ties: usize,
}

impl<S: Scalar> AssignmentResult<S> {
    pub fn n_positive(&self) -> usize {
        self.label.iter().filter(|l| l.is_some()).count()
    }
}

fn dist2<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    let mut acc = S::zero();
    for i in 0..3 {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

pub fn assign<S: Scalar>(
    voxels: &[VoxelForAssign<S>],
    grid: &VoxelGridSpec<S>,
    boxes: &[Box3D<S>],
    cfg: &AssignConfig<S>,
) -> Result<AssignmentResult<S>, AssignError> {
    let position: Vec<[S; 3]> = voxels
        .iter()
        .map(|v| match cfg.strategy {
            AssignStrategy::WeightedCentroid | AssignStrategy::NearestTopK { .. } => {
                weighted_centroid(&v.members, &v.fg, cfg.alpha)
            }
            AssignStrategy::PlainCentroid => plain_mean(&v.members),
            AssignStrategy::GeometricCenter | AssignStrategy::EnlargeGt { .. } => {
                grid.center_of(v.coord)
            }
        })
        .collect();

    let test_boxes: Vec<Box3D<S>> = match cfg.strategy {
        AssignStrategy::EnlargeGt { margin } => boxes.iter().map(|b| b.enlarged(margin)).collect(),
        _ => boxes.to_vec(),
    };

    let mut label = vec![None; voxels.len()];
    let mut box_index = vec![None; voxels.len()];
    let mut target = vec![None; voxels.len()];
    let mut overlap_ties = 0usize;
    for (i, v) in voxels.iter().enumerate() {
        if !v.is_virtual {
            continue; // real voxels are never positive
        }
        let mut hits = test_boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| point_in_box(position[i], b));
        let Some((mut best, first)) = hits.next() else {
            continue;
        };
        let mut best_d = dist2(position[i], first.center);
        let mut tied = false;
        for (j, b) in hits {
            tied = true;
            let d = dist2(position[i], b.center);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if tied {
            overlap_ties += 1;
        }
        label[i] = Some(boxes[best].class_id);
        box_index[i] = Some(best);
        target[i] = Some(encode_regression_target(
            &boxes[best],
            grid.center_of(v.coord),
        )?);
    }

    if let AssignStrategy::NearestTopK { k } = cfg.strategy {
        let mut per_box: HashMap<usize, Vec<(usize, S)>> = HashMap::new();
        for (i, bi) in box_index.iter().enumerate() {
            if let Some(b) = bi {
                per_box
                    .entry(*b)
                    .or_default()
                    .push((i, dist2(position[i], boxes[*b].center)));
            }
        }
        for (_, mut claimed) in per_box {
            claimed.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            for &(i, _) in claimed.iter().skip(k) {
                label[i] = None;
                box_index[i] = None;
                target[i] = None;
            }
        }
    }

    if overlap_ties > 0 {
        log::warn!("{overlap_ties} voxel positions fell inside several boxes; tie-broken to the nearest center");
    }
    Ok(AssignmentResult {
        label,
        box_index,
        target,
        position,
        overlap_ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid04() -> VoxelGridSpec<f64> {
        VoxelGridSpec::new([0.4; 3], [0.0; 3], 1).unwrap()
    }

    fn vox(coord: VoxelCoord, members: Vec<[f64; 3]>, fg: Vec<bool>) -> VoxelForAssign<f64> {
        VoxelForAssign {
            coord,
            is_virtual: true,
            members,
            fg,
        }
    }

    #[test]
    fn alpha_one_is_the_plain_mean() {
        let members = vec![[0.1, 2.0, -1.0], [3.0, 0.5, 0.25], [-2.0, 1.0, 4.0]];
        let fg = vec![true, false, false];
        assert_eq!(
            weighted_centroid(&members, &fg, 1.0),
            plain_mean(&members)
        );
    }

    #[test]
    fn alpha_zero_uses_foreground_only() {
        let members = vec![[1.0, 1.0, 1.0], [5.0, 5.0, 5.0], [3.0, 1.0, 1.0]];
        let fg = vec![true, false, true];
        assert_eq!(weighted_centroid(&members, &fg, 0.0), [2.0, 1.0, 1.0]);
        // all-background with alpha = 0 falls back to the plain mean
        let none = vec![false, false, false];
        assert_eq!(
            weighted_centroid(&members, &none, 0.0),
            plain_mean(&members)
        );
    }

    #[test]
    fn worked_weighting_example() {
        // fg at the origin, bg at (2,0,0), alpha 0.5: (0 + 0.5*2)/(1.5)
        let c = weighted_centroid::<f64>(&[[0.0; 3], [2.0, 0.0, 0.0]], &[true, false], 0.5);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c[1], 0.0);
        assert_eq!(c[2], 0.0);
    }

    proptest! {
        #[test]
        fn centroid_interpolates_between_fg_mean_and_full_mean(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 2..12),
            fg_seed in 0u64..u64::MAX,
            alpha in 0.0f64..=1.0,
        ) {
            let members: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
            // derive flags from the seed, forcing at least one of each kind
            let mut fg: Vec<bool> = (0..members.len())
                .map(|i| (fg_seed >> (i % 64)) & 1 == 1)
                .collect();
            fg[0] = true;
            let last = fg.len() - 1;
            fg[last] = false;

            let wc = weighted_centroid(&members, &fg, alpha);
            let fg_members: Vec<[f64; 3]> =
                members.iter().zip(&fg).filter(|(_, f)| **f).map(|(m, _)| *m).collect();
            let a = plain_mean(&fg_members);
            let b = plain_mean(&members);
            // wc = a + t (b - a) for one t in [0, 1] shared by all coordinates
            let mut t_seen: Option<f64> = None;
            for i in 0..3 {
                let span = b[i] - a[i];
                if span.abs() < 1e-9 {
                    prop_assert!((wc[i] - a[i]).abs() < 1e-9);
                } else {
                    let t = (wc[i] - a[i]) / span;
                    prop_assert!((-1e-9..=1.0 + 1e-9).contains(&t));
                    if let Some(prev) = t_seen {
                        prop_assert!((t - prev).abs() < 1e-6);
                    }
                    t_seen = Some(t);
                }
            }
        }
    }

    #[test]
    fn tiny_box_scenario_geometric_center_misses_weighted_hits() {
        // a 0.1 m box tucked into the corner of a 0.4 m voxel: the voxel
        // fully contains the box yet its geometric center (0.2, 0.2, 0.2)
        // is outside, so only centroid-based positions assign it
        let b = Box3D::new([0.05, 0.05, 0.2], [0.1, 0.1, 0.4], 0.0, 1).unwrap();
        let v = vox(
            VoxelCoord::new(0, 0, 0),
            vec![[0.04, 0.04, 0.2], [0.04, 0.06, 0.2], [0.3, 0.3, 0.2]],
            vec![true, true, false],
        );
        let run = |strategy| {
            let cfg = AssignConfig::new(strategy, 0.5).unwrap();
            assign(std::slice::from_ref(&v), &grid04(), &[b], &cfg).unwrap()
        };
        let geo = run(AssignStrategy::GeometricCenter);
        assert_eq!(geo.label, vec![None]);
        let plain = run(AssignStrategy::PlainCentroid);
        assert_eq!(plain.label, vec![None], "plain mean dragged out by bg");
        let weighted = run(AssignStrategy::WeightedCentroid);
        assert_eq!(weighted.label, vec![Some(1)]);
        assert_eq!(weighted.box_index, vec![Some(0)]);
        assert!(weighted.target[0].is_some());
    }

    #[test]
    fn centroid_at_box_center_gives_zero_offsets() {
        // a dyadic 0.5 m grid makes the voxel center exact: (0.75, 0.75, 0.75)
        let grid = VoxelGridSpec::new([0.5; 3], [0.0; 3], 1).unwrap();
        let b = Box3D::new([0.75, 0.75, 0.75], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let v = vox(
            VoxelCoord::new(1, 1, 1),
            vec![[0.75, 0.75, 0.75]],
            vec![true],
        );
        let cfg = AssignConfig::default();
        let res = assign(&[v], &grid, &[b], &cfg).unwrap();
        assert_eq!(res.label, vec![Some(0)]);
        assert_eq!(
            res.target[0].unwrap(),
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn real_voxels_are_never_positive() {
        let b = Box3D::new([0.2, 0.2, 0.2], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let mut v = vox(VoxelCoord::new(0, 0, 0), vec![[0.2, 0.2, 0.2]], vec![true]);
        v.is_virtual = false;
        let res = assign(&[v], &grid04(), &[b], &AssignConfig::default()).unwrap();
        assert_eq!(res.label, vec![None]);
        assert_eq!(res.n_positive(), 0);
    }

    #[test]
    fn random_voxels_match_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let boxes: Vec<Box3D<f64>> = (0..8)
            .map(|i| {
                Box3D::new(
                    [
                        rng.gen_range(-8.0..8.0),
                        rng.gen_range(-8.0..8.0),
                        rng.gen_range(-1.0..1.0),
                    ],
                    [
                        rng.gen_range(1.0..4.0),
                        rng.gen_range(1.0..4.0),
                        rng.gen_range(1.0..3.0),
                    ],
                    rng.gen_range(-3.0..3.0),
                    i % 3,
                )
                .unwrap()
            })
            .collect();
        let voxels: Vec<VoxelForAssign<f64>> = (0..100)
            .map(|_| {
                let coord = VoxelCoord::new(
                    rng.gen_range(-25..25),
                    rng.gen_range(-25..25),
                    rng.gen_range(-3..3),
                );
                let base = grid04().center_of(coord);
                let n = rng.gen_range(1..=5);
                let members: Vec<[f64; 3]> = (0..n)
                    .map(|_| {
                        [
                            base[0] + rng.gen_range(-0.2..0.2),
                            base[1] + rng.gen_range(-0.2..0.2),
                            base[2] + rng.gen_range(-0.2..0.2),
                        ]
                    })
                    .collect();
                let fg: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
                let mut v = vox(coord, members, fg);
                v.is_virtual = rng.gen_bool(0.8);
                v
            })
            .collect();
        let cfg = AssignConfig::default();
        let res = assign(&voxels, &grid04(), &boxes, &cfg).unwrap();

        for (i, v) in voxels.iter().enumerate() {
            let pos = weighted_centroid(&v.members, &v.fg, 0.5);
            let mut want: Option<usize> = None;
            let mut best = f64::INFINITY;
            for (j, b) in boxes.iter().enumerate() {
                if v.is_virtual && point_in_box(pos, b) {
                    let d = dist2(pos, b.center);
                    if d < best {
                        best = d;
                        want = Some(j);
                    }
                }
            }
            assert_eq!(res.box_index[i], want, "voxel {i}");
            assert_eq!(res.label[i], want.map(|j| boxes[j].class_id));
            assert_eq!(res.target[i].is_some(), want.is_some());
            if let Some(t) = res.target[i] {
                assert!((t[6] * t[6] + t[7] * t[7] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assignment_is_order_independent() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let b = Box3D::new([1.0, 1.0, 0.5], [2.0, 2.0, 2.0], 0.3, 2).unwrap();
        let voxels: Vec<VoxelForAssign<f64>> = (0..20)
            .map(|_| {
                let coord = VoxelCoord::new(rng.gen_range(0..8), rng.gen_range(0..8), 1);
                let base = grid04().center_of(coord);
                vox(coord, vec![base], vec![rng.gen_bool(0.5)])
            })
            .collect();
        let cfg = AssignConfig::default();
        let res = assign(&voxels, &grid04(), &[b], &cfg).unwrap();
        let mut order: Vec<usize> = (0..voxels.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<VoxelForAssign<f64>> =
            order.iter().map(|&i| voxels[i].clone()).collect();
        let res2 = assign(&shuffled, &grid04(), &[b], &cfg).unwrap();
        for (new_row, &old_row) in order.iter().enumerate() {
            assert_eq!(res2.label[new_row], res.label[old_row]);
            assert_eq!(res2.target[new_row], res.target[old_row]);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let b: Box3D<f64> = Box3D::new(
                [
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-2.0..2.0),
                ],
                [
                    rng.gen_range(0.1..5.0),
                    rng.gen_range(0.1..5.0),
                    rng.gen_range(0.1..3.0),
                ],
                rng.gen_range(-3.1..=3.1),
                rng.gen_range(0..3),
            )
            .unwrap();
            let center = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-2.0..2.0),
            ];
            let t = encode_regression_target(&b, center).unwrap();
            let back = decode_regression_target(&t, center, b.class_id).unwrap();
            for a in 0..3 {
                assert!((back.center[a] - b.center[a]).abs() < 1e-9);
                assert!((back.dims[a] - b.dims[a]).abs() < 1e-9);
            }
            assert!((back.yaw - b.yaw).abs() < 1e-9);
            assert_eq!(back.class_id, b.class_id);
        }
        // quarter-turn heading lands in the (sin, cos) slots
        let q = Box3D::new([0.0; 3], [1.0; 3], std::f64::consts::FRAC_PI_2, 0).unwrap();
        let t = encode_regression_target(&q, [0.0; 3]).unwrap();
        assert!((t[6] - 1.0).abs() < 1e-12);
        assert!(t[7].abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let mut b = Box3D::new([0.0; 3], [1.0; 3], 0.0, 0).unwrap();
        b.dims[1] = 0.0;
        assert!(encode_regression_target(&b, [0.0; 3]).is_err());
    }

    #[test]
    fn enlarging_boxes_is_monotone() {
        let b = Box3D::new([1.0, 1.0, 1.0], [0.8, 0.8, 0.8], 0.4, 0).unwrap();
        let voxels: Vec<VoxelForAssign<f64>> = (0..6)
            .flat_map(|i| (0..6).map(move |j| (i, j)))
            .map(|(i, j)| {
                let c = VoxelCoord::new(i, j, 2);
                vox(c, vec![grid04().center_of(c)], vec![true])
            })
            .collect();
        let positives = |margin: f64| -> Vec<usize> {
            let cfg =
                AssignConfig::new(AssignStrategy::EnlargeGt { margin }, 0.5).unwrap();
            let res = assign(&voxels, &grid04(), &[b], &cfg).unwrap();
            (0..voxels.len()).filter(|&i| res.label[i].is_some()).collect()
        };
        let p0 = positives(0.0);
        let p1 = positives(0.3);
        let p2 = positives(0.8);
        assert!(p0.iter().all(|i| p1.contains(i)));
        assert!(p1.iter().all(|i| p2.contains(i)));
        assert!(p1.len() > p0.len(), "margin 0.3 must add voxels here");

        // margin 0 is exactly the geometric-center strategy
        let cfg = AssignConfig::new(AssignStrategy::GeometricCenter, 0.5).unwrap();
        let geo = assign(&voxels, &grid04(), &[b], &cfg).unwrap();
        let pg: Vec<usize> = (0..voxels.len())
            .filter(|&i| geo.label[i].is_some())
            .collect();
        assert_eq!(p0, pg);
    }

    #[test]
    fn nearest_top_k_limits_positives_per_box() {
        // one large box holding three virtual voxels at different distances
        let b = Box3D::new([1.0, 0.6, 0.6], [2.4, 0.8, 0.8], 0.0, 1).unwrap();
        let mk = |c: VoxelCoord| vox(c, vec![grid04().center_of(c)], vec![true]);
        let voxels = vec![
            mk(VoxelCoord::new(0, 1, 1)), // center (0.2, 0.6, 0.6)
            mk(VoxelCoord::new(2, 1, 1)), // center (1.0, 0.6, 0.6) = box center
            mk(VoxelCoord::new(4, 1, 1)), // center (1.8, 0.6, 0.6)
        ];
        let run = |strategy| {
            let cfg = AssignConfig::new(strategy, 0.5).unwrap();
            assign(&voxels, &grid04(), &[b], &cfg).unwrap()
        };
        let primary = run(AssignStrategy::WeightedCentroid);
        assert_eq!(primary.n_positive(), 3);
        let top1 = run(AssignStrategy::NearestTopK { k: 1 });
        assert_eq!(top1.n_positive(), 1);
        assert_eq!(top1.label[1], Some(1), "the nearest voxel survives");
        assert!(top1.n_positive() < primary.n_positive());
        // a large k is the primary assignment again
        let top9 = run(AssignStrategy::NearestTopK { k: 9 });
        assert_eq!(top9.label, primary.label);
        assert_eq!(top9.target, primary.target);
    }

    #[test]
    fn overlapping_boxes_tie_break_to_nearest_center() {
        let near = Box3D::new([0.7, 0.6, 0.6], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let far = Box3D::new([1.4, 0.6, 0.6], [2.0, 2.0, 2.0], 0.0, 1).unwrap();
        let v = vox(
            VoxelCoord::new(1, 1, 1), // center (0.6, 0.6, 0.6), inside both
            vec![[0.6, 0.6, 0.6]],
            vec![true],
        );
        let res = assign(&[v], &grid04(), &[near, far], &AssignConfig::default()).unwrap();
        assert_eq!(res.box_index, vec![Some(0)]);
        assert_eq!(res.overlap_ties, 1);
    }

    #[test]
    fn config_validation() {
        assert!(AssignConfig::new(AssignStrategy::<f64>::WeightedCentroid, 1.5).is_err());
        assert!(AssignConfig::new(AssignStrategy::<f64>::WeightedCentroid, -0.1).is_err());
        assert!(AssignConfig::new(AssignStrategy::<f64>::NearestTopK { k: 0 }, 0.5).is_err());
        assert!(
            AssignConfig::new(AssignStrategy::EnlargeGt { margin: -0.2 }, 0.5).is_err()
        );
        assert!(AssignConfig::new(AssignStrategy::<f64>::PlainCentroid, 0.0).is_ok());
    }
}
