//! Point-cloud and box geometry: voxelization, stride coordinate
//! conversion, point-in-box tests and rotated BEV IoU.

use std::collections::HashMap;

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },
    #[error("point cloud field lengths disagree: xyz {xyz}, attrs {attrs}, labels {labels:?}")]
    LengthMismatch {
        xyz: usize,
        attrs: usize,
        labels: Option<usize>,
    },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),
}

/// Background label for per-point ground-truth classes.
pub const BACKGROUND: i32 = -1;

/// A set of N points with per-point attributes and optional ground-truth
/// class labels (`BACKGROUND` for ground/clutter points).
#[derive(Debug, Clone)]
pub struct PointCloud<S: Scalar> {
    pub xyz: Vec<[S; 3]>,
    /// `[N, A]` attribute matrix (e.g. intensity).
    pub attrs: Array2<S>,
    /// Per-point class id, `BACKGROUND` for background; `None` outside training.
    pub gt_label: Option<Vec<i32>>,
}

impl<S: Scalar> PointCloud<S> {
    pub fn new(
        xyz: Vec<[S; 3]>,
        attrs: Array2<S>,
        gt_label: Option<Vec<i32>>,
    ) -> Result<Self, GeomError> {
        if attrs.nrows() != xyz.len()
            || gt_label.as_ref().is_some_and(|l| l.len() != xyz.len())
        {
            return Err(GeomError::LengthMismatch {
                xyz: xyz.len(),
                attrs: attrs.nrows(),
                labels: gt_label.as_ref().map(|l| l.len()),
            });
        }
        for (index, p) in xyz.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeomError::NonFiniteCoordinate { index });
            }
        }
        Ok(Self {
            xyz,
            attrs,
            gt_label,
        })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

/// Gravity-centered oriented 3D box. `dims` is (length, width, height);
/// `yaw` rotates the length axis from +x, in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D<S: Scalar> {
    pub center: [S; 3],
    pub dims: [S; 3],
    pub yaw: S,
    pub class_id: usize,
}

impl<S: Scalar> Box3D<S> {
    pub fn new(center: [S; 3], dims: [S; 3], yaw: S, class_id: usize) -> Result<Self, GeomError> {
        let b = Self {
            center,
            dims,
            yaw,
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !self.dims.iter().all(|d| d.is_finite() && *d > S::zero()) {
            return Err(GeomError::InvalidBox(format!(
                "dims must be strictly positive, got {:?}",
                self.dims
            )));
        }
        let pi = S::lit(std::f64::consts::PI);
        if !(self.yaw > -pi && self.yaw <= pi) || !self.yaw.is_finite() {
            return Err(GeomError::InvalidBox(format!(
                "yaw must lie in (-pi, pi], got {}",
                self.yaw
            )));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(GeomError::InvalidBox("non-finite center".into()));
        }
        Ok(())
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[S; 2]; 4] {
        let half = S::lit(0.5);
        let (hl, hw) = (self.dims[0] * half, self.dims[1] * half);
        let (sin, cos) = (self.yaw.sin(), self.yaw.cos());
        let rot = |x: S, y: S| {
            [
                self.center[0] + cos * x - sin * y,
                self.center[1] + sin * x + cos * y,
            ]
        };
        [
            rot(hl, hw),
            rot(-hl, hw),
            rot(-hl, -hw),
            rot(hl, -hw),
        ]
    }

    /// Box grown by `margin` meters on every side (dims += 2 * margin per axis).
    pub fn enlarged(&self, margin: S) -> Self {
        let two = S::lit(2.0);
        Self {
            dims: [
                self.dims[0] + two * margin,
                self.dims[1] + two * margin,
                self.dims[2] + two * margin,
            ],
            ..*self
        }
    }
}

/// Signed integer voxel grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord(pub [i32; 3]);

impl VoxelCoord {
    pub fn new(i: i32, j: i32, k: i32) -> Self {
        Self([i, j, k])
    }

    pub fn offset(self, d: [i32; 3]) -> Self {
        Self([self.0[0] + d[0], self.0[1] + d[1], self.0[2] + d[2]])
    }

    /// Componentwise floor division (floor semantics for negatives).
    pub fn floor_div(self, s: i32) -> Self {
        Self([
            self.0[0].div_euclid(s),
            self.0[1].div_euclid(s),
            self.0[2].div_euclid(s),
        ])
    }
}

/// Voxel grid geometry: cell size, origin offset and stride relative to
/// the stride-1 grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec<S: Scalar> {
    pub voxel_size: [S; 3],
    pub origin: [S; 3],
    pub stride: u32,
}

impl<S: Scalar> VoxelGridSpec<S> {
    pub fn new(voxel_size: [S; 3], origin: [S; 3], stride: u32) -> Result<Self, GeomError> {
        if !voxel_size.iter().all(|v| v.is_finite() && *v > S::zero()) {
            return Err(GeomError::InvalidGrid(format!(
                "voxel_size must be strictly positive, got {voxel_size:?}"
            )));
        }
        if stride < 1 {
            return Err(GeomError::InvalidGrid("stride must be >= 1".into()));
        }
        Ok(Self {
            voxel_size,
            origin,
            stride,
        })
    }

    /// Same grid base at a different stride.
    pub fn at_stride(&self, stride: u32) -> Self {
        Self { stride, ..*self }
    }

    /// Grid cell containing `p`: `floor((p - origin) / (voxel_size * stride))`.
    /// Points exactly on a boundary belong to the higher-index cell.
    pub fn voxel_of(&self, p: [S; 3]) -> VoxelCoord {
        let s = S::from_u32(self.stride).unwrap();
        let mut c = [0i32; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / (self.voxel_size[a] * s)).floor();
            c[a] = v.as_f64() as i32;
        }
        VoxelCoord(c)
    }

    /// Geometric center of a cell at this spec's stride, in meters.
    pub fn center_of(&self, c: VoxelCoord) -> [S; 3] {
        let s = S::from_u32(self.stride).unwrap();
        let half = S::lit(0.5);
        let mut out = [S::zero(); 3];
        for a in 0..3 {
            out[a] = self.origin[a]
                + self.voxel_size[a] * s * (S::from_i32(c.0[a]).unwrap() + half);
        }
        out
    }
}

/// Result of [`voxelize`]: unique cells in lexicographic coordinate order,
/// the point indices each cell contains, and each point's cell row.
#[derive(Debug, Clone)]
pub struct VoxelBuckets {
    pub coords: Vec<VoxelCoord>,
    pub members: Vec<Vec<usize>>,
    /// `point_voxel[p]` is the row in `coords` holding point `p`.
    pub point_voxel: Vec<usize>,
}

/// Buckets every point into its grid cell. The bucket lists partition
/// `0..points.len()`; output rows are sorted lexicographically by
/// coordinate for deterministic downstream ordering.
pub fn voxelize<S: Scalar>(
    points: &PointCloud<S>,
    spec: &VoxelGridSpec<S>,
) -> Result<VoxelBuckets, GeomError> {
    let coords_per_point: Vec<VoxelCoord> = points
        .xyz
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if p.iter().all(|c| c.is_finite()) {
                Ok(spec.voxel_of(*p))
            } else {
                Err(GeomError::NonFiniteCoordinate { index })
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(bucket_coords(&coords_per_point))
}

/// Groups pre-computed coordinates into sorted unique buckets.
pub fn bucket_coords(coords: &[VoxelCoord]) -> VoxelBuckets {
    let mut map: HashMap<VoxelCoord, Vec<usize>> = HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        map.entry(*c).or_default().push(i);
    }
    let mut pairs: Vec<(VoxelCoord, Vec<usize>)> = map.into_iter().collect();
    pairs.sort_by_key(|(c, _)| *c);
    let mut point_voxel = vec![0usize; coords.len()];
    let mut out_coords = Vec::with_capacity(pairs.len());
    let mut members = Vec::with_capacity(pairs.len());
    for (row, (c, idxs)) in pairs.into_iter().enumerate() {
        for &i in &idxs {
            point_voxel[i] = row;
        }
        out_coords.push(c);
        members.push(idxs);
    }
    VoxelBuckets {
        coords: out_coords,
        members,
        point_voxel,
    }
}

/// Converts a stride-`s` coordinate to its representative stride-1
/// coordinate: `I * s + floor(s / 2)` componentwise.
pub fn convert_stride(coord: VoxelCoord, s: u32) -> VoxelCoord {
    let s = s as i32;
    let half = s / 2;
    VoxelCoord([
        coord.0[0] * s + half,
        coord.0[1] * s + half,
        coord.0[2] * s + half,
    ])
}

/// Whether `p`, expressed in the box frame, lies within the box extents
/// (boundary inclusive).
pub fn point_in_box<S: Scalar>(p: [S; 3], b: &Box3D<S>) -> bool {
    let half = S::lit(0.5);
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let dz = p[2] - b.center[2];
    let (sin, cos) = (b.yaw.sin(), b.yaw.cos());
    // rotate by -yaw into the box frame
    let lx = cos * dx + sin * dy;
    let ly = -sin * dx + cos * dy;
    lx.abs() <= b.dims[0] * half && ly.abs() <= b.dims[1] * half && dz.abs() <= b.dims[2] * half
}

/// Shoelace area of a simple polygon (positive for CCW order).
fn polygon_area<S: Scalar>(poly: &[[S; 2]]) -> S {
    if poly.len() < 3 {
        return S::zero();
    }
    let mut acc = S::zero();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc * S::lit(0.5)
}

/// Sutherland-Hodgman clip of `subject` against the CCW convex `clip`.
fn clip_polygon<S: Scalar>(subject: &[[S; 2]], clip: &[[S; 2]]) -> Vec<[S; 2]> {
    let mut output: Vec<[S; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: [S; 2]| -> bool {
            // left of (or on) the directed edge a->b
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= S::zero()
        };
        let intersect = |p: [S; 2], q: [S; 2]| -> [S; 2] {
            // solve p + t*dp = a + u*dc for t by crossing out the u term
            let dc = [b[0] - a[0], b[1] - a[1]];
            let dp = [q[0] - p[0], q[1] - p[1]];
            let denom = dc[0] * dp[1] - dc[1] * dp[0];
            let t = (dc[0] * (a[1] - p[1]) - dc[1] * (a[0] - p[0])) / denom;
            [p[0] + dp[0] * t, p[1] + dp[1] * t]
        };
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(cur), inside(prev)) {
                (true, true) => output.push(cur),
                (true, false) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, true) => output.push(intersect(prev, cur)),
                (false, false) => {}
            }
        }
    }
    output
}

/// Rotated-rectangle intersection-over-union in the BEV plane.
/// Degenerate (near zero-area) boxes count as zero overlap.
pub fn bev_iou<S: Scalar>(a: &Box3D<S>, b: &Box3D<S>) -> S {
    let eps = S::lit(1e-9);
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let area_a = polygon_area(&ca);
    let area_b = polygon_area(&cb);
    if area_a < eps || area_b < eps {
        return S::zero();
    }
    let inter_poly = clip_polygon(&ca, &cb);
    let inter = polygon_area(&inter_poly).max(S::zero());
    let union = area_a + area_b - inter;
    if union < eps {
        return S::zero();
    }
    (inter / union).clamp(S::zero(), S::one())
}

/// Flags boxes that have a same-class neighbor whose BEV center distance is
/// below `max_dist` (the crowdedness rule used for statistics and evaluation
/// breakdowns).
pub fn crowded_flags<S: Scalar>(boxes: &[Box3D<S>], max_dist: S) -> Vec<bool> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            boxes.iter().enumerate().any(|(j, other)| {
                if i == j || other.class_id != b.class_id {
                    return false;
                }
                let dx = b.center[0] - other.center[0];
                let dy = b.center[1] - other.center[1];
                dx * dx + dy * dy < max_dist * max_dist
            })
        })
        .collect()
}
