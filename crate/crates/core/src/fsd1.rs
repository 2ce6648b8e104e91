//! FSDv1-style pipeline tail: connected-component clustering of voted
//! centers, one SIR pass per cluster, and the shared head parameterization
//! over cluster centroids. Kept alongside the virtual-voxel pipeline so the
//! two grouping mechanisms can be compared on the same scenes.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;

use crate::assign::encode_regression_target;
use crate::autodiff::nn::Mode;
use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore};
use crate::geom::{point_in_box, Box3D, PointCloud};
use crate::head::{HeadError, HeadOutput, TaskGroupSpec, VoxelHead};
use crate::scalar::Scalar;
use crate::segvote::VoteOutput;
use crate::sir::{GroupedPoints, SirEncoder, SirSpec};
use crate::vvoxel::VirtualVoxelSet;

/// Default connectivity radius for clustering voted centers, in meters.
pub const DEFAULT_CCL_RADIUS: f64 = 0.6;
/// Objects closer than this (BEV, same class) count as crowded.
pub const CROWDED_DISTANCE: f64 = 2.0;

/// Partition of voted centers into connected components. Cluster ids are
/// contiguous and ordered by each cluster's smallest member index.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub cluster_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl ClusterSet {
    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }
}

/// Connected components of the graph linking centers within Euclidean
/// distance `r` (inclusive). A spatial hash keeps it near-linear.
pub fn ccl_cluster<S: Scalar>(centers: &[[S; 3]], r: S) -> ClusterSet {
    assert!(r > S::zero(), "connectivity radius must be positive");
    let n = centers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let cell_of = |p: &[S; 3]| -> [i64; 3] {
        [
            (p[0] / r).floor().as_f64() as i64,
            (p[1] / r).floor().as_f64() as i64,
            (p[2] / r).floor().as_f64() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in centers.iter().enumerate() {
        grid.entry(cell_of(p)).or_default().push(i);
    }
    let r2 = r * r;
    for (i, p) in centers.iter().enumerate() {
        let c = cell_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let q = centers[j];
                        let d2 = (0..3)
                            .map(|a| (p[a] - q[a]) * (p[a] - q[a]))
                            .fold(S::zero(), |acc, v| acc + v);
                        if d2 <= r2 {
                            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                            if ri != rj {
                                parent[ri.max(rj)] = ri.min(rj);
                            }
                        }
                    }
                }
            }
        }
    }
    // contiguous ids in order of first appearance
    let mut id_of_root: HashMap<usize, usize> = HashMap::new();
    let mut cluster_of = vec![0usize; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let id = *id_of_root.entry(root).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        cluster_of[i] = id;
        members[id].push(i);
    }
    ClusterSet {
        cluster_of,
        members,
    }
}

/// Cluster-level SIR encoder plus the shared detection head.
pub struct Fsd1Tail {
    pub sir: SirEncoder,
    pub head: VoxelHead,
}

/// One forward pass: the clustering, each cluster's mean voted center (the
/// regression reference point), and the head predictions per cluster.
pub struct Fsd1Forward<S: Scalar> {
    pub clusters: ClusterSet,
    pub centers: Vec<[S; 3]>,
    pub head: HeadOutput,
}

impl Fsd1Tail {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        sir: &SirSpec,
        groups: &TaskGroupSpec,
    ) -> Result<Self, HeadError> {
        let sir = SirEncoder::new(store, rng, &format!("{name}.sir"), c_in, sir)?;
        let head = VoxelHead::new(store, rng, &format!("{name}.head"), sir.out_width(), groups)?;
        Ok(Self { sir, head })
    }

    /// Groups the predicted-foreground points by the clustering of their
    /// voted centers and predicts one box per cluster. Background points
    /// never reach the SIR stage — the information loss this baseline is
    /// known for.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &mut ParamStore<S>,
        votes: &VoteOutput,
        point_feats: NodeId,
        radius: S,
        mode: Mode,
    ) -> Result<Fsd1Forward<S>, AutodiffError> {
        let center_rows: Vec<[S; 3]> = {
            let v = g.value2(votes.centers);
            (0..v.nrows()).map(|i| [v[[i, 0]], v[[i, 1]], v[[i, 2]]]).collect()
        };
        let clusters = ccl_cluster(&center_rows, radius);
        let centers: Vec<[S; 3]> = clusters
            .members
            .iter()
            .map(|m| {
                let mut acc = [S::zero(); 3];
                for &v in m {
                    for a in 0..3 {
                        acc[a] += center_rows[v][a];
                    }
                }
                let k = S::from_usize(m.len()).unwrap();
                [acc[0] / k, acc[1] / k, acc[2] / k]
            })
            .collect();
        let pts = Rc::new(votes.source.clone());
        let feats = g.gather_rows(point_feats, pts.clone())?;
        let coords = g.gather_rows(votes.coords, pts)?;
        let gp = GroupedPoints {
            feats,
            coords,
            group_id: clusters.cluster_of.clone(),
            n_groups: clusters.n_clusters(),
        };
        let sir_out = self.sir.forward(g, store, &gp, mode)?;
        let head = self.head.forward(g, store, sir_out.group_feats, mode)?;
        Ok(Fsd1Forward {
            clusters,
            centers,
            head,
        })
    }
}

/// Cluster-level labels: a cluster takes the class and box of the box its
/// mean center falls in (nearest center on overlap), like voxel assignment
/// but with the cluster centroid as both position and regression reference.
pub fn fsd1_labels<S: Scalar>(
    centers: &[[S; 3]],
    boxes: &[Box3D<S>],
) -> (Vec<Option<usize>>, Vec<Option<[S; 8]>>) {
    let mut labels = Vec::with_capacity(centers.len());
    let mut targets = Vec::with_capacity(centers.len());
    for c in centers {
        let mut best: Option<(S, &Box3D<S>)> = None;
        for b in boxes {
            if point_in_box(*c, b) {
                let d2 = (0..3)
                    .map(|a| (c[a] - b.center[a]) * (c[a] - b.center[a]))
                    .fold(S::zero(), |acc, v| acc + v);
                if best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, b));
                }
            }
        }
        match best {
            Some((_, b)) => {
                labels.push(Some(b.class_id));
                targets.push(Some(
                    encode_regression_target(b, *c).expect("validated box"),
                ));
            }
            None => {
                labels.push(None);
                targets.push(None);
            }
        }
    }
    (labels, targets)
}

/// How one ground-truth object was carved up by the grouping stages.
/// Counts cover only the object's predicted-foreground points, so missed
/// (false-negative) points do not drag the means down.
#[derive(Debug, Clone)]
pub struct ObjectGroups {
    pub class_id: usize,
    pub crowded: bool,
    pub n_votes: usize,
    pub n_clusters: usize,
    pub n_virtual_voxels: usize,
    pub n_real_voxels: usize,
    /// Every cluster holding this object's votes is owned (by vote
    /// majority) by a different object.
    pub merged: bool,
}

/// Measures, for each ground-truth object of one scene, how many clusters,
/// virtual voxels and real voxels its predicted-foreground points spread
/// over, and whether a crowded neighbor absorbed all its votes.
pub fn observe_scene<S: Scalar>(
    g: &Graph<S>,
    points: &PointCloud<S>,
    boxes: &[Box3D<S>],
    votes: &VoteOutput,
    set: &VirtualVoxelSet<S>,
    clusters: &ClusterSet,
) -> Vec<ObjectGroups> {
    // attribute each point to its nearest containing box
    let object_of: Vec<Option<usize>> = points
        .xyz
        .iter()
        .map(|p| {
            let mut best: Option<(S, usize)> = None;
            for (bi, b) in boxes.iter().enumerate() {
                if point_in_box(*p, b) {
                    let d2 = (0..3)
                        .map(|a| (p[a] - b.center[a]) * (p[a] - b.center[a]))
                        .fold(S::zero(), |acc, v| acc + v);
                    if best.map_or(true, |(bd, _)| d2 < bd) {
                        best = Some((d2, bi));
                    }
                }
            }
            best.map(|(_, bi)| bi)
        })
        .collect();
    let _ = g; // positions come from the raw cloud; the graph carries votes

    // cluster ownership by majority object among its votes (ties to the
    // smaller object index)
    let vote_object: Vec<Option<usize>> = votes
        .source
        .iter()
        .map(|&p| object_of[p])
        .collect();
    let owner: Vec<Option<usize>> = clusters
        .members
        .iter()
        .map(|m| {
            let mut count: HashMap<usize, usize> = HashMap::new();
            for &v in m {
                if let Some(o) = vote_object[v] {
                    *count.entry(o).or_insert(0) += 1;
                }
            }
            count
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(o, _)| o)
        })
        .collect();

    let crowded = crate::geom::crowded_flags(boxes, S::lit(CROWDED_DISTANCE));

    boxes
        .iter()
        .enumerate()
        .map(|(bi, b)| {
            let mut cluster_ids = HashSet::new();
            let mut vvoxels = HashSet::new();
            let mut cells = HashSet::new();
            let mut n_votes = 0usize;
            for (v, &src) in votes.source.iter().enumerate() {
                if object_of[src] != Some(bi) {
                    continue;
                }
                n_votes += 1;
                cluster_ids.insert(clusters.cluster_of[v]);
                vvoxels.insert(set.member_voxel[set.n_points + v]);
                cells.insert(set.spec.voxel_of(points.xyz[src]));
            }
            let merged = n_votes > 0
                && cluster_ids.iter().all(|&c| owner[c] != Some(bi));
            ObjectGroups {
                class_id: b.class_id,
                crowded: crowded[bi],
                n_votes,
                n_clusters: cluster_ids.len(),
                n_virtual_voxels: vvoxels.len(),
                n_real_voxels: cells.len(),
                merged,
            }
        })
        .collect()
}

/// Per-class aggregate over many scenes. Means cover objects with at least
/// one vote; the merge rate is over crowded objects with at least one vote.
#[derive(Debug, Clone, Default)]
pub struct ClassGroupStats {
    pub n_objects: usize,
    pub mean_clusters: f64,
    pub mean_virtual_voxels: f64,
    pub mean_real_voxels: f64,
    pub crowded_objects: usize,
    pub crowded_merged: usize,
}

impl ClassGroupStats {
    pub fn crowded_merge_rate(&self) -> f64 {
        if self.crowded_objects == 0 {
            0.0
        } else {
            self.crowded_merged as f64 / self.crowded_objects as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupStats {
    pub per_class: Vec<ClassGroupStats>,
}

impl GroupStats {
    pub fn from_observations<'a, I>(obs: I, n_classes: usize) -> Self
    where
        I: IntoIterator<Item = &'a ObjectGroups>,
    {
        let mut sums = vec![(0usize, 0.0f64, 0.0f64, 0.0f64, 0usize, 0usize); n_classes];
        for o in obs {
            if o.n_votes == 0 {
                continue;
            }
            let s = &mut sums[o.class_id];
            s.0 += 1;
            s.1 += o.n_clusters as f64;
            s.2 += o.n_virtual_voxels as f64;
            s.3 += o.n_real_voxels as f64;
            if o.crowded {
                s.4 += 1;
                if o.merged {
                    s.5 += 1;
                }
            }
        }
        GroupStats {
            per_class: sums
                .into_iter()
                .map(|(n, c, v, r, cr, me)| ClassGroupStats {
                    n_objects: n,
                    mean_clusters: if n == 0 { 0.0 } else { c / n as f64 },
                    mean_virtual_voxels: if n == 0 { 0.0 } else { v / n as f64 },
                    mean_real_voxels: if n == 0 { 0.0 } else { r / n as f64 },
                    crowded_objects: cr,
                    crowded_merged: me,
                })
                .collect(),
        }
    }

    /// Delimited-text report, one row per class.
    pub fn to_delimited(&self, names: &[&str]) -> String {
        let mut out = String::from(
            "class,objects,mean_clusters,mean_virtual_voxels,mean_real_voxels,crowded,crowded_merge_rate\n",
        );
        for (i, s) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            out.push_str(&format!(
                "{name},{},{:.3},{:.3},{:.3},{},{:.3}\n",
                s.n_objects,
                s.mean_clusters,
                s.mean_virtual_voxels,
                s.mean_real_voxels,
                s.crowded_objects,
                s.crowded_merge_rate()
            ));
        }
        out
    }
}
