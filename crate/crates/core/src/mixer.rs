//! Virtual voxel mixer: positions sparse features from several strides into
//! the stride-1 grid, merges coordinate collisions by averaging, and runs a
//! lightweight UNet so virtual voxels can exchange information with each
//! other and with nearby real voxels.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::nn::Linear;
use crate::autodiff::{AutodiffError, Graph, ParamStore};
use crate::geom::{convert_stride, VoxelCoord};
use crate::scalar::Scalar;
use crate::sparse::{dynamic_pool, Reduce, SparseFeatureMap, SparseUnet, UnetOutput};

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("mixer was built for {expected} input scales, got {got}")]
    ScaleCount { expected: usize, got: usize },
    #[error("scale {index} expects stride {expected}, got a map at stride {got}")]
    StrideMismatch { index: usize, expected: u32, got: u32 },
    #[error("scale at stride {stride} expects {expected} channels, got {got}")]
    ChannelMismatch {
        stride: u32,
        expected: usize,
        got: usize,
    },
    #[error("bundle maps must share one grid base")]
    GridMismatch,
    #[error("virtual mask covers {got} voxels but the stride-1 map has {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What the mixer consumes, mirroring the input-composition ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerInput {
    VirtualOnly,
    VirtualPlusReal,
    VirtualPlusMultiScaleReal,
}

/// Sparse maps destined for one mixer pass. `maps[0]` is the stride-1
/// virtual/real map and owns the virtual mask; deeper entries are coarser
/// backbone scales over the same grid base.
pub struct MultiScaleBundle<S: Scalar> {
    pub maps: Vec<SparseFeatureMap<S>>,
    pub virtual_mask: Vec<bool>,
}

/// Assembles the mixer input for a given composition mode. `VirtualOnly`
/// drops real rows from the stride-1 map; the multi-scale mode appends every
/// backbone decoder map coarser than stride 1.
pub fn build_bundle<S: Scalar>(
    g: &mut Graph<S>,
    input: MixerInput,
    vve: &SparseFeatureMap<S>,
    virtual_mask: &[bool],
    backbone: &UnetOutput<S>,
) -> Result<MultiScaleBundle<S>, MixerError> {
    if virtual_mask.len() != vve.len() {
        return Err(MixerError::MaskLength {
            expected: vve.len(),
            got: virtual_mask.len(),
        });
    }
    match input {
        MixerInput::VirtualOnly => {
            let keep: Vec<usize> = (0..vve.len()).filter(|&i| virtual_mask[i]).collect();
            let coords: Vec<VoxelCoord> = keep.iter().map(|&i| vve.coords[i]).collect();
            let feats = g.gather_rows(vve.feats, Rc::new(keep.clone()))?;
            Ok(MultiScaleBundle {
                maps: vec![SparseFeatureMap {
                    coords,
                    feats,
                    stride: vve.stride,
                    spec: vve.spec,
                }],
                virtual_mask: vec![true; keep.len()],
            })
        }
        MixerInput::VirtualPlusReal => Ok(MultiScaleBundle {
            maps: vec![vve.clone()],
            virtual_mask: virtual_mask.to_vec(),
        }),
        MixerInput::VirtualPlusMultiScaleReal => {
            let mut maps = vec![vve.clone()];
            maps.extend(backbone.maps.iter().filter(|m| m.stride > 1).cloned());
            Ok(MultiScaleBundle {
                maps,
                virtual_mask: virtual_mask.to_vec(),
            })
        }
    }
}

/// Mixer defaults: per-scale projection width and the UNet stage widths
/// ("three stages with different strides").
#[derive(Debug, Clone)]
pub struct MixerSpec {
    pub width: usize,
    pub unet_widths: Vec<usize>,
}

impl Default for MixerSpec {
    fn default() -> Self {
        Self {
            width: 64,
            unet_widths: vec![64, 64, 64],
        }
    }
}

/// Per-scale linear projections to a common width plus the mixing UNet.
pub struct VoxelMixer {
    proj: Vec<Linear>,
    strides: Vec<u32>,
    in_widths: Vec<usize>,
    unet: SparseUnet,
}

impl VoxelMixer {
    /// `scales` lists `(stride, channels)` per input scale in bundle order;
    /// the first entry must be the stride-1 scale.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        scales: &[(u32, usize)],
        spec: &MixerSpec,
    ) -> Result<Self, AutodiffError> {
        assert!(!scales.is_empty(), "mixer needs at least one input scale");
        assert_eq!(scales[0].0, 1, "the first mixer scale must be stride 1");
        let mut proj = Vec::new();
        for (i, &(_, c_in)) in scales.iter().enumerate() {
            proj.push(Linear::new(
                store,
                rng,
                &format!("{name}.lin{i}"),
                c_in,
                spec.width,
            )?);
        }
        let unet = SparseUnet::new(
            store,
            rng,
            &format!("{name}.unet"),
            spec.width,
            &spec.unet_widths,
        )?;
        Ok(Self {
            proj,
            strides: scales.iter().map(|&(s, _)| s).collect(),
            in_widths: scales.iter().map(|&(_, c)| c).collect(),
            unet,
        })
    }

    /// Projects every scale to the common width, converts its coordinates to
    /// the stride-1 grid, concatenates along the voxel dimension and merges
    /// coordinate collisions by mean. The returned mask marks which output
    /// voxels are virtual (collisions with real scales keep the flag).
    pub fn aggregate<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bundle: &MultiScaleBundle<S>,
    ) -> Result<(SparseFeatureMap<S>, Vec<bool>), MixerError> {
        if bundle.maps.len() != self.proj.len() {
            return Err(MixerError::ScaleCount {
                expected: self.proj.len(),
                got: bundle.maps.len(),
            });
        }
        let base = &bundle.maps[0];
        if bundle.virtual_mask.len() != base.len() {
            return Err(MixerError::MaskLength {
                expected: base.len(),
                got: bundle.virtual_mask.len(),
            });
        }
        let mut parts = Vec::with_capacity(bundle.maps.len());
        let mut all_coords = Vec::new();
        for (i, map) in bundle.maps.iter().enumerate() {
            if map.stride != self.strides[i] {
                return Err(MixerError::StrideMismatch {
                    index: i,
                    expected: self.strides[i],
                    got: map.stride,
                });
            }
            if map.spec.at_stride(1) != base.spec.at_stride(1) {
                return Err(MixerError::GridMismatch);
            }
            let got = g.value(map.feats).shape()[1];
            if got != self.in_widths[i] {
                return Err(MixerError::ChannelMismatch {
                    stride: map.stride,
                    expected: self.in_widths[i],
                    got,
                });
            }
            parts.push(self.proj[i].forward(g, store, map.feats)?);
            all_coords.extend(map.coords.iter().map(|&c| convert_stride(c, map.stride)));
        }
        let cat = g.concat_rows(&parts)?;
        let (coords, feats, _) = dynamic_pool(g, &all_coords, cat, Reduce::Mean)?;
        let virt: HashMap<VoxelCoord, bool> = base
            .coords
            .iter()
            .copied()
            .zip(bundle.virtual_mask.iter().copied())
            .collect();
        let mask = coords
            .iter()
            .map(|c| virt.get(c).copied().unwrap_or(false))
            .collect();
        Ok((
            SparseFeatureMap {
                coords,
                feats,
                stride: 1,
                spec: base.spec.at_stride(1),
            },
            mask,
        ))
    }

    /// Runs the mixing UNet over the aggregated map. The stride-1 output
    /// keeps the input coordinate set, so the virtual mask carries over.
    pub fn mix<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        agg: &SparseFeatureMap<S>,
        mask: &[bool],
    ) -> Result<(SparseFeatureMap<S>, Vec<bool>), MixerError> {
        let out = self.unet.forward(g, store, agg)?;
        let mixed = out.maps.into_iter().next().expect("UNet yields maps");
        debug_assert_eq!(mixed.coords, agg.coords);
        Ok((mixed, mask.to_vec()))
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        bundle: &MultiScaleBundle<S>,
    ) -> Result<(SparseFeatureMap<S>, Vec<bool>), MixerError> {
        let (agg, mask) = self.aggregate(g, store, bundle)?;
        self.mix(g, store, &agg, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use crate::geom::VoxelGridSpec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> VoxelGridSpec<f64> {
        VoxelGridSpec::new([0.4; 3], [0.0; 3], 1).unwrap()
    }

    fn map_at(
        g: &mut Graph<f64>,
        coords: Vec<VoxelCoord>,
        feats: Array2<f64>,
        stride: u32,
    ) -> SparseFeatureMap<f64> {
        assert_eq!(coords.len(), feats.nrows());
        SparseFeatureMap {
            coords,
            feats: g.constant2(feats),
            stride,
            spec: grid().at_stride(stride),
        }
    }

    /// Reads a linear layer's parameters back out of the store and applies
    /// it by hand, as an oracle independent of the graph.
    fn apply_lin(st: &ParamStore<f64>, name: &str, x: &Array2<f64>) -> Array2<f64> {
        let w = st.value(st.id_of(&format!("{name}.w")).unwrap());
        let b = st.value(st.id_of(&format!("{name}.b")).unwrap());
        let w2 = w.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = x.dot(&w2);
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
        y
    }

    fn mixer(
        seed: u64,
        scales: &[(u32, usize)],
        width: usize,
        unet: Vec<usize>,
    ) -> (ParamStore<f64>, VoxelMixer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let spec = MixerSpec {
            width,
            unet_widths: unet,
        };
        let mx = VoxelMixer::new(&mut st, &mut rng, "mx", scales, &spec).unwrap();
        (st, mx)
    }

    #[test]
    fn single_scale_aggregate_is_the_projection() {
        let (st, mx) = mixer(1, &[(1, 3)], 4, vec![4]);
        let mut g = Graph::new();
        let x = Array2::from_shape_fn((5, 3), |(r, c)| (r * 3 + c) as f64 * 0.25 - 1.5);
        let coords: Vec<VoxelCoord> = (0..5).map(|i| VoxelCoord::new(i, 0, 0)).collect();
        let map = map_at(&mut g, coords.clone(), x.clone(), 1);
        let bundle = MultiScaleBundle {
            maps: vec![map],
            virtual_mask: vec![true, false, true, false, false],
        };
        let (agg, mask) = mx.aggregate(&mut g, &st, &bundle).unwrap();
        assert_eq!(agg.coords, coords);
        assert_eq!(agg.stride, 1);
        assert_eq!(mask, bundle.virtual_mask);
        // no duplicates and stride-1 conversion is the identity, so the
        // output is exactly the linear projection
        assert_eq!(g.value2(agg.feats), apply_lin(&st, "mx.lin0", &x));
    }

    #[test]
    fn stride2_voxel_merges_with_colliding_stride1_voxel() {
        let (st, mx) = mixer(2, &[(1, 2), (2, 2)], 3, vec![3]);
        let mut g = Graph::new();
        let xa = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let xb = Array2::from_shape_vec((1, 2), vec![1.5, -0.5]).unwrap();
        // stride-2 coordinate (1,1,1) lands on stride-1 coordinate (3,3,3)
        let a = map_at(
            &mut g,
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(3, 3, 3)],
            xa.clone(),
            1,
        );
        let b = map_at(&mut g, vec![VoxelCoord::new(1, 1, 1)], xb.clone(), 2);
        let bundle = MultiScaleBundle {
            maps: vec![a, b],
            virtual_mask: vec![false, true],
        };
        let (agg, mask) = mx.aggregate(&mut g, &st, &bundle).unwrap();
        assert_eq!(
            agg.coords,
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(3, 3, 3)]
        );
        // the merged voxel keeps the virtual flag of its stride-1 origin
        assert_eq!(mask, vec![false, true]);
        let pa = apply_lin(&st, "mx.lin0", &xa);
        let pb = apply_lin(&st, "mx.lin1", &xb);
        let got = g.value2(agg.feats);
        for c in 0..3 {
            assert!((got[[0, c]] - pa[[0, c]]).abs() < 1e-12);
            let want = (pa[[1, c]] + pb[[0, c]]) / 2.0;
            assert!((got[[1, c]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn random_three_scale_bundle_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (st, mx) = mixer(33, &[(1, 3), (2, 4), (4, 2)], 5, vec![5]);
        let mut g = Graph::new();
        let mut maps = Vec::new();
        let mut arrays = Vec::new();
        let mut coord_lists = Vec::new();
        for (i, &(stride, width)) in [(1u32, 3usize), (2, 4), (4, 2)].iter().enumerate() {
            let n = 12 - 2 * i;
            let mut coords: Vec<VoxelCoord> = (0..n)
                .map(|_| {
                    VoxelCoord::new(
                        rng.gen_range(0..6),
                        rng.gen_range(0..6),
                        rng.gen_range(0..3),
                    )
                })
                .collect();
            coords.sort_unstable();
            coords.dedup();
            let x = Array2::from_shape_fn((coords.len(), width), |_| rng.gen_range(-1.0..1.0));
            maps.push(map_at(&mut g, coords.clone(), x.clone(), stride));
            arrays.push(x);
            coord_lists.push(coords);
        }
        let mask = vec![false; coord_lists[0].len()];
        let bundle = MultiScaleBundle {
            maps,
            virtual_mask: mask,
        };
        let (agg, _) = mx.aggregate(&mut g, &st, &bundle).unwrap();

        // oracle: convert every coordinate, group rows by it, average
        let mut groups: HashMap<VoxelCoord, Vec<ndarray::Array1<f64>>> = HashMap::new();
        for (i, stride) in [1u32, 2, 4].iter().enumerate() {
            let proj = apply_lin(&st, &format!("mx.lin{i}"), &arrays[i]);
            for (r, &c) in coord_lists[i].iter().enumerate() {
                groups
                    .entry(convert_stride(c, *stride))
                    .or_default()
                    .push(proj.row(r).to_owned());
            }
        }
        let mut want: Vec<(VoxelCoord, ndarray::Array1<f64>)> = groups
            .into_iter()
            .map(|(c, rows)| {
                let mut acc = ndarray::Array1::zeros(5);
                for r in &rows {
                    acc += r;
                }
                (c, acc / rows.len() as f64)
            })
            .collect();
        want.sort_by_key(|(c, _)| *c);
        assert_eq!(
            agg.coords,
            want.iter().map(|(c, _)| *c).collect::<Vec<_>>()
        );
        let got = g.value2(agg.feats);
        for (r, (_, row)) in want.iter().enumerate() {
            for c in 0..5 {
                assert!((got[[r, c]] - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_preserves_coords_and_mask() {
        let (st, mx) = mixer(4, &[(1, 2)], 3, vec![3, 4]);
        let mut g = Graph::new();
        let coords = vec![
            VoxelCoord::new(0, 0, 0),
            VoxelCoord::new(1, 0, 0),
            VoxelCoord::new(5, 5, 2),
        ];
        let x = Array2::from_shape_fn((3, 2), |(r, c)| (r + c) as f64 * 0.5);
        let map = map_at(&mut g, coords.clone(), x, 1);
        let bundle = MultiScaleBundle {
            maps: vec![map],
            virtual_mask: vec![true, false, true],
        };
        let (mixed, mask) = mx.forward(&mut g, &st, &bundle).unwrap();
        assert_eq!(mixed.coords, coords);
        assert_eq!(mixed.stride, 1);
        assert_eq!(mask, vec![true, false, true]);
        assert_eq!(g.value2(mixed.feats).nrows(), 3);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (mut st, mx) = mixer(5, &[(1, 2), (2, 3)], 4, vec![4, 4]);
        let names: Vec<String> = st.iter_named().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let id = st.id_of(name).unwrap();
            st.value_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let a = map_at(
            &mut g,
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 1, 0)],
            Array2::from_elem((2, 2), 1.5),
            1,
        );
        let b = map_at(
            &mut g,
            vec![VoxelCoord::new(0, 0, 0)],
            Array2::from_elem((1, 3), -2.0),
            2,
        );
        let bundle = MultiScaleBundle {
            maps: vec![a, b],
            virtual_mask: vec![true, false],
        };
        let (mixed, _) = mx.forward(&mut g, &st, &bundle).unwrap();
        assert!(g.value(mixed.feats).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn real_voxel_reaches_nearby_virtual_voxel_but_not_distant_one() {
        // the mechanism that repairs inconsistent votes: after mixing, a
        // virtual voxel's feature depends on real voxels within the UNet's
        // receptive field and is bitwise unaffected by voxels far outside it
        let (st, mx) = mixer(6, &[(1, 2)], 4, vec![4, 4, 4]);
        let coords = vec![
            VoxelCoord::new(5, 5, 5),  // virtual
            VoxelCoord::new(6, 5, 5),  // adjacent real
            VoxelCoord::new(40, 5, 5), // real, far beyond any kernel reach
        ];
        let run = |near: f64, far: f64| {
            let mut g = Graph::new();
            let x = Array2::from_shape_vec(
                (3, 2),
                vec![0.3, -0.4, near, 0.8, far, 0.1],
            )
            .unwrap();
            let map = map_at(&mut g, coords.clone(), x, 1);
            let bundle = MultiScaleBundle {
                maps: vec![map],
                virtual_mask: vec![true, false, false],
            };
            let (mixed, _) = mx.forward(&mut g, &st, &bundle).unwrap();
            g.value2(mixed.feats).row(0).to_owned()
        };
        let base = run(0.5, 0.5);
        assert_ne!(base, run(1.5, 0.5), "adjacent real voxel must influence");
        assert_eq!(base, run(0.5, 1.5), "distant voxel must not influence");
    }

    #[test]
    fn bundle_shape_errors() {
        let (st, mx) = mixer(7, &[(1, 2), (2, 3)], 4, vec![4]);
        let mut g = Graph::new();
        let a = map_at(
            &mut g,
            vec![VoxelCoord::new(0, 0, 0)],
            Array2::zeros((1, 2)),
            1,
        );
        let b = map_at(&mut g, vec![VoxelCoord::new(1, 1, 1)], Array2::zeros((1, 3)), 2);

        let short = MultiScaleBundle {
            maps: vec![a.clone()],
            virtual_mask: vec![true],
        };
        assert!(matches!(
            mx.aggregate(&mut g, &st, &short),
            Err(MixerError::ScaleCount { expected: 2, got: 1 })
        ));

        let swapped = MultiScaleBundle {
            maps: vec![a.clone(), a.clone()],
            virtual_mask: vec![true],
        };
        assert!(matches!(
            mx.aggregate(&mut g, &st, &swapped),
            Err(MixerError::StrideMismatch { index: 1, .. })
        ));

        let wide = map_at(
            &mut g,
            vec![VoxelCoord::new(1, 1, 1)],
            Array2::zeros((1, 4)),
            2,
        );
        let bad_channels = MultiScaleBundle {
            maps: vec![a.clone(), wide],
            virtual_mask: vec![true],
        };
        assert!(matches!(
            mx.aggregate(&mut g, &st, &bad_channels),
            Err(MixerError::ChannelMismatch {
                stride: 2,
                expected: 3,
                got: 4
            })
        ));

        let bad_mask = MultiScaleBundle {
            maps: vec![a, b],
            virtual_mask: vec![true, false],
        };
        assert!(matches!(
            mx.aggregate(&mut g, &st, &bad_mask),
            Err(MixerError::MaskLength { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn build_bundle_modes() {
        let mut g = Graph::new();
        let vve = map_at(
            &mut g,
            vec![
                VoxelCoord::new(0, 0, 0),
                VoxelCoord::new(1, 0, 0),
                VoxelCoord::new(2, 0, 0),
            ],
            Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64),
            1,
        );
        let mask = vec![true, false, true];
        let deep = map_at(
            &mut g,
            vec![VoxelCoord::new(0, 0, 0)],
            Array2::from_elem((1, 3), 7.0),
            2,
        );
        let backbone = UnetOutput {
            maps: vec![vve.clone(), deep],
        };

        let only = build_bundle(&mut g, MixerInput::VirtualOnly, &vve, &mask, &backbone).unwrap();
        assert_eq!(only.maps.len(), 1);
        assert_eq!(
            only.maps[0].coords,
            vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(2, 0, 0)]
        );
        assert_eq!(only.virtual_mask, vec![true, true]);
        let kept = g.value2(only.maps[0].feats);
        assert_eq!(kept[[0, 0]], 0.0);
        assert_eq!(kept[[1, 0]], 4.0);

        let both =
            build_bundle(&mut g, MixerInput::VirtualPlusReal, &vve, &mask, &backbone).unwrap();
        assert_eq!(both.maps.len(), 1);
        assert_eq!(both.maps[0].coords.len(), 3);
        assert_eq!(both.virtual_mask, mask);

        let multi = build_bundle(
            &mut g,
            MixerInput::VirtualPlusMultiScaleReal,
            &vve,
            &mask,
            &backbone,
        )
        .unwrap();
        assert_eq!(multi.maps.len(), 2);
        assert_eq!(multi.maps[1].stride, 2);

        let bad = build_bundle(&mut g, MixerInput::VirtualOnly, &vve, &mask[..2], &backbone);
        assert!(matches!(bad, Err(MixerError::MaskLength { .. })));
    }

    #[test]
    fn gradients_flow_through_aggregate_and_mix() {
        let (mut st, mx) = mixer(8, &[(1, 3), (2, 2)], 4, vec![4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        // keep every relu alive for the finite-difference probes
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
        let xa = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let xb = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let ca = vec![
            VoxelCoord::new(0, 0, 0),
            VoxelCoord::new(1, 0, 0),
            VoxelCoord::new(3, 3, 3),
            VoxelCoord::new(2, 2, 2),
        ];
        let cb = vec![VoxelCoord::new(1, 1, 1), VoxelCoord::new(0, 1, 0)];
        let build = |g: &mut Graph<f64>, st: &mut ParamStore<f64>| {
            let a = SparseFeatureMap {
                coords: ca.clone(),
                feats: g.constant2(xa.clone()),
                stride: 1,
                spec: grid(),
            };
            let b = SparseFeatureMap {
                coords: cb.clone(),
                feats: g.constant2(xb.clone()),
                stride: 2,
                spec: grid().at_stride(2),
            };
            let bundle = MultiScaleBundle {
                maps: vec![a, b],
                virtual_mask: vec![true, false, true, false],
            };
            let (mixed, _) = mx.forward(g, st, &bundle).unwrap();
            let n = g.value(mixed.feats).shape()[0];
            let target = Array2::from_elem((n, 4), 0.1);
            g.l1_sum(mixed.feats, target)
        };
        let report = grad_check(&mut st, build, 1e-6).unwrap();
        report.assert_below(1e-5);
    }
}
