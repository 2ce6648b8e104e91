//! End-to-end models and the training loop. `Fsdv2Model` runs the full
//! virtual-voxel pipeline: sparse UNet over real-point voxels, per-point
//! classification and center voting, virtual voxelization, per-voxel SIR
//! encoding, multi-scale mixing, and box prediction from the virtual
//! voxels only. `Fsd1Model` shares the backbone and vote stages but groups
//! votes by radius clustering instead, predicting one box per cluster.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::assign::{assign, voxels_for_assign, AssignConfig, AssignError, FgSource};
use crate::autodiff::nn::Mode;
use crate::autodiff::optim::{AdamW, OneCycle};
use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore};
use crate::config::Config;
use crate::eval::{evaluate_ap, EvalResult};
use crate::fsd1::{fsd1_labels, Fsd1Forward, Fsd1Tail};
use crate::geom::{Box3D, GeomError, PointCloud, VoxelGridSpec};
use crate::head::{
    decode_boxes, head_loss, nms_bev, DetectionBox, HeadError, HeadOutput, TaskGroupSpec,
    VoxelHead, FOCAL_ALPHA, FOCAL_GAMMA,
};
use crate::mixer::{build_bundle, MixerError, MixerInput, MixerSpec, VoxelMixer};
use crate::scene::SceneSpec;
use crate::segvote::{classify_and_vote, scale_votes, vote_loss, VoteHeads, VoteOutput};
use crate::sir::{SirEncoder, SirSpec};
use crate::sparse::{broadcast, dynamic_pool, Reduce, SparseFeatureMap, SparseUnet, UnetOutput};
use crate::vvoxel::{init_member_features, virtual_voxelize, vve_encode, VirtualVoxelSet};

/// Channels of the raw per-point input: offset to the voxel center (3)
/// plus intensity.
const POINT_IN: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("{0}")]
    Pipeline(String),
}

impl From<crate::segvote::VoteError> for ModelError {
    fn from(e: crate::segvote::VoteError) -> Self {
        ModelError::Pipeline(e.to_string())
    }
}

impl From<crate::vvoxel::VvoxelError> for ModelError {
    fn from(e: crate::vvoxel::VvoxelError) -> Self {
        ModelError::Pipeline(e.to_string())
    }
}

/// Everything a model needs to know about its own shape and thresholds.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub width: usize,
    pub voxel_size: f64,
    pub tau: f64,
    pub vote_scale: f64,
    pub mixer_input: MixerInput,
    pub assign: AssignConfig<f64>,
    pub fsd1_radius: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_config(cfg: &Config, n_classes: usize) -> Result<Self, AssignError> {
        Ok(Self {
            n_classes,
            width: cfg.model_width,
            voxel_size: cfg.voxel_size,
            tau: cfg.model_tau,
            vote_scale: cfg.model_vote_scale,
            mixer_input: cfg.model_mixer_input,
            assign: cfg.assign_config()?,
            fsd1_radius: cfg.fsd1_radius,
            seed: cfg.model_seed,
        })
    }
}

/// Shared first stages: raw point features, voxelized backbone pass, and
/// per-point features (voxel feature broadcast back plus the raw input).
struct PointStage {
    point_feats: NodeId,
    coords: NodeId,
    unet: UnetOutput<f64>,
}

fn point_stage(
    g: &mut Graph<f64>,
    store: &mut ParamStore<f64>,
    backbone: &SparseUnet,
    grid: &VoxelGridSpec<f64>,
    points: &PointCloud<f64>,
) -> Result<PointStage, ModelError> {
    let n = points.len();
    if n == 0 {
        return Err(ModelError::Pipeline("empty point cloud".into()));
    }
    let mut cells = Vec::with_capacity(n);
    let mut raw = Array2::zeros((n, POINT_IN));
    for (i, p) in points.xyz.iter().enumerate() {
        let cell = grid.voxel_of(*p);
        let center = grid.center_of(cell);
        for a in 0..3 {
            raw[(i, a)] = p[a] - center[a];
        }
        raw[(i, 3)] = if points.attrs.ncols() > 0 {
            points.attrs[[i, 0]]
        } else {
            0.0
        };
        cells.push(cell);
    }
    let point_input = g.constant2(raw);
    let (vox_coords, vox_feats, inverse) = dynamic_pool(g, &cells, point_input, Reduce::Mean)?;
    let backbone_in = SparseFeatureMap {
        coords: vox_coords,
        feats: vox_feats,
        stride: 1,
        spec: *grid,
    };
    let unet = backbone.forward(g, store, &backbone_in)?;
    let per_point_vox = broadcast(g, unet.maps[0].feats, &inverse)?;
    let point_feats = g.concat_cols(&[per_point_vox, point_input])?;
    let coords = g.constant2(Array2::from_shape_fn((n, 3), |(r, c)| points.xyz[r][c]));
    Ok(PointStage {
        point_feats,
        coords,
        unet,
    })
}

/// One full FSDv2 forward pass over a scene.
pub struct Fsdv2Forward {
    pub votes: VoteOutput,
    pub set: VirtualVoxelSet<f64>,
    /// Head predictions; row `i` belongs to the virtual voxel whose
    /// geometric center is `centers[i]`.
    pub head: HeadOutput,
    pub centers: Vec<[f64; 3]>,
    /// For each head row, the row of `set.coords` it came from.
    pub set_rows: Vec<usize>,
}

pub struct Fsdv2Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f64>,
    pub grid: VoxelGridSpec<f64>,
    backbone: SparseUnet,
    vote_heads: VoteHeads,
    vve: SirEncoder,
    mixer: VoxelMixer,
    head: VoxelHead,
}

impl Fsdv2Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.width;
        let grid = VoxelGridSpec::new([cfg.voxel_size; 3], [0.0; 3], 1)?;
        let backbone = SparseUnet::new(&mut store, &mut rng, "backbone", POINT_IN, &[w, w, w])?;
        let vote_heads = VoteHeads::new(
            &mut store,
            &mut rng,
            "vote",
            w + POINT_IN,
            cfg.n_classes,
            &[w],
        )?;
        let vve = SirEncoder::new(
            &mut store,
            &mut rng,
            "vve",
            w + POINT_IN + 3,
            &SirSpec {
                widths: vec![w, w],
                iterations: 2,
                batch_norm: false,
            },
        )?;
        let scales: Vec<(u32, usize)> = match cfg.mixer_input {
            MixerInput::VirtualOnly | MixerInput::VirtualPlusReal => {
                vec![(1, vve.out_width())]
            }
            MixerInput::VirtualPlusMultiScaleReal => {
                vec![(1, vve.out_width()), (2, w), (4, w)]
            }
        };
        let mixer = VoxelMixer::new(
            &mut store,
            &mut rng,
            "mixer",
            &scales,
            &MixerSpec {
                width: w,
                unet_widths: vec![w, w, w],
            },
        )?;
        let head = VoxelHead::new(
            &mut store,
            &mut rng,
            "head",
            w,
            &TaskGroupSpec::single(cfg.n_classes, vec![w]),
        )?;
        Ok(Self {
            cfg,
            store,
            grid,
            backbone,
            vote_heads,
            vve,
            mixer,
            head,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        points: &PointCloud<f64>,
        mode: Mode,
    ) -> Result<Fsdv2Forward, ModelError> {
        let stage = point_stage(g, &mut self.store, &self.backbone, &self.grid, points)?;
        let mut votes = classify_and_vote(
            g,
            &mut self.store,
            &self.vote_heads,
            stage.point_feats,
            stage.coords,
            self.cfg.tau,
            mode,
        )?;
        if self.cfg.vote_scale != 1.0 {
            votes = scale_votes(g, &votes, self.cfg.vote_scale)?;
        }
        let set = virtual_voxelize(g, points, &votes, &self.grid)?;
        let member_feats = init_member_features(g, &set, stage.point_feats, &votes)?;
        let (vve_map, vmask) = vve_encode(g, &mut self.store, &self.vve, &set, member_feats, mode)?;

        let bundle = build_bundle(g, self.cfg.mixer_input, &vve_map, &vmask, &stage.unet)?;
        if bundle.maps[0].is_empty() {
            // no votes anywhere: nothing to predict from
            let empty = g.constant2(Array2::zeros((0, self.cfg.width)));
            let head = self.head.forward(g, &mut self.store, empty, mode)?;
            return Ok(Fsdv2Forward {
                votes,
                set,
                head,
                centers: Vec::new(),
                set_rows: Vec::new(),
            });
        }
        let (mixed, mask) = self.mixer.forward(g, &self.store, &bundle)?;

        let virtual_rows: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
            .collect();
        let row_of_coord: HashMap<_, _> = set
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i))
            .collect();
        let mut centers = Vec::with_capacity(virtual_rows.len());
        let mut set_rows = Vec::with_capacity(virtual_rows.len());
        for &r in &virtual_rows {
            let coord = mixed.coords[r];
            centers.push(self.grid.center_of(coord));
            set_rows.push(*row_of_coord.get(&coord).ok_or_else(|| {
                ModelError::Pipeline("virtual voxel lost its source coordinate".into())
            })?);
        }
        let vfeats = g.gather_rows(mixed.feats, Rc::new(virtual_rows))?;
        let head = self.head.forward(g, &mut self.store, vfeats, mode)?;
        Ok(Fsdv2Forward {
            votes,
            set,
            head,
            centers,
            set_rows,
        })
    }

    /// Per-head-row labels and regression targets from voxel-in-box
    /// assignment over the whole virtual voxel set.
    pub fn targets(
        &self,
        g: &Graph<f64>,
        fwd: &Fsdv2Forward,
        boxes: &[Box3D<f64>],
    ) -> Result<(Vec<Option<usize>>, Vec<Option<[f64; 8]>>), ModelError> {
        let voxels = voxels_for_assign(g, &fwd.set, &fwd.votes, FgSource::Predicted, boxes);
        let res = assign(&voxels, &self.grid, boxes, &self.cfg.assign)?;
        let labels = fwd.set_rows.iter().map(|&r| res.label[r]).collect();
        let targets = fwd.set_rows.iter().map(|&r| res.target[r]).collect();
        Ok((labels, targets))
    }

    pub fn loss(
        &mut self,
        g: &mut Graph<f64>,
        fwd: &Fsdv2Forward,
        points: &PointCloud<f64>,
        boxes: &[Box3D<f64>],
    ) -> Result<LossNodes, ModelError> {
        let (vote_cls, vote_reg) = vote_loss(g, &fwd.votes, points, boxes, FOCAL_GAMMA, FOCAL_ALPHA)?;
        let (labels, targets) = self.targets(g, fwd, boxes)?;
        let (det_cls, det_reg) = head_loss(g, &fwd.head, &labels, &targets, FOCAL_GAMMA, FOCAL_ALPHA)?;
        let vote_total = g.add(vote_cls, vote_reg)?;
        let det_total = g.add(det_cls, det_reg)?;
        let total = g.add(vote_total, det_total)?;
        Ok(LossNodes {
            vote_cls,
            vote_reg,
            det_cls,
            det_reg,
            total,
        })
    }

    pub fn detect(
        &mut self,
        points: &PointCloud<f64>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<DetectionBox<f64>>, ModelError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, points, Mode::Eval)?;
        let dets = decode_boxes(&g, &fwd.head, &fwd.centers, score_threshold);
        Ok(nms_bev(&dets, nms_iou))
    }
}

/// FSDv1-style model: same backbone and vote stages, clustering tail.
pub struct Fsd1Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f64>,
    pub grid: VoxelGridSpec<f64>,
    backbone: SparseUnet,
    vote_heads: VoteHeads,
    tail: Fsd1Tail,
}

impl Fsd1Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.width;
        let grid = VoxelGridSpec::new([cfg.voxel_size; 3], [0.0; 3], 1)?;
        let backbone = SparseUnet::new(&mut store, &mut rng, "backbone", POINT_IN, &[w, w, w])?;
        let vote_heads = VoteHeads::new(
            &mut store,
            &mut rng,
            "vote",
            w + POINT_IN,
            cfg.n_classes,
            &[w],
        )?;
        let tail = Fsd1Tail::new(
            &mut store,
            &mut rng,
            "v1",
            w + POINT_IN,
            &SirSpec {
                widths: vec![w, w],
                iterations: 2,
                batch_norm: false,
            },
            &TaskGroupSpec::single(cfg.n_classes, vec![w]),
        )?;
        Ok(Self {
            cfg,
            store,
            grid,
            backbone,
            vote_heads,
            tail,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<f64>,
        points: &PointCloud<f64>,
        mode: Mode,
    ) -> Result<(VoteOutput, Fsd1Forward<f64>), ModelError> {
        let stage = point_stage(g, &mut self.store, &self.backbone, &self.grid, points)?;
        let mut votes = classify_and_vote(
            g,
            &mut self.store,
            &self.vote_heads,
            stage.point_feats,
            stage.coords,
            self.cfg.tau,
            mode,
        )?;
        if self.cfg.vote_scale != 1.0 {
            votes = scale_votes(g, &votes, self.cfg.vote_scale)?;
        }
        let fwd = self.tail.forward(
            g,
            &mut self.store,
            &votes,
            stage.point_feats,
            self.cfg.fsd1_radius,
            mode,
        )?;
        Ok((votes, fwd))
    }

    pub fn loss(
        &mut self,
        g: &mut Graph<f64>,
        votes: &VoteOutput,
        fwd: &Fsd1Forward<f64>,
        points: &PointCloud<f64>,
        boxes: &[Box3D<f64>],
    ) -> Result<LossNodes, ModelError> {
        let (vote_cls, vote_reg) = vote_loss(g, votes, points, boxes, FOCAL_GAMMA, FOCAL_ALPHA)?;
        let (labels, targets) = fsd1_labels(&fwd.centers, boxes);
        let (det_cls, det_reg) = head_loss(g, &fwd.head, &labels, &targets, FOCAL_GAMMA, FOCAL_ALPHA)?;
        let vote_total = g.add(vote_cls, vote_reg)?;
        let det_total = g.add(det_cls, det_reg)?;
        let total = g.add(vote_total, det_total)?;
        Ok(LossNodes {
            vote_cls,
            vote_reg,
            det_cls,
            det_reg,
            total,
        })
    }

    pub fn detect(
        &mut self,
        points: &PointCloud<f64>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<DetectionBox<f64>>, ModelError> {
        let mut g = Graph::new();
        let (_votes, fwd) = self.forward(&mut g, points, Mode::Eval)?;
        let dets = decode_boxes(&g, &fwd.head, &fwd.centers, score_threshold);
        Ok(nms_bev(&dets, nms_iou))
    }
}

pub struct LossNodes {
    pub vote_cls: NodeId,
    pub vote_reg: NodeId,
    pub det_cls: NodeId,
    pub det_reg: NodeId,
    pub total: NodeId,
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_vote: f64,
    pub map: f64,
}

impl EpochMetrics {
    /// The metrics-log line format.
    pub fn line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            self.epoch, self.loss_cls, self.loss_reg, self.loss_vote, self.map
        )
    }
}

/// Training knobs shared by both models.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub onecycle: bool,
    pub nms_score: f64,
    pub nms_iou: f64,
    pub eval_iou: f64,
    /// Evaluate validation mAP every this many epochs (always on the last).
    pub eval_every: usize,
}

impl TrainOpts {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            epochs: cfg.train_epochs,
            lr: cfg.train_lr,
            batch: cfg.train_batch.max(1),
            weight_decay: cfg.train_weight_decay,
            onecycle: cfg.train_onecycle,
            nms_score: cfg.nms_score,
            nms_iou: cfg.nms_iou,
            eval_iou: cfg.eval_iou,
            eval_every: 1,
        }
    }
}

pub type Scene = (PointCloud<f64>, Vec<Box3D<f64>>);

/// Either model behind one training entry point.
pub enum Detector {
    V2(Fsdv2Model),
    V1(Fsd1Model),
}

impl Detector {
    pub fn store(&self) -> &ParamStore<f64> {
        match self {
            Detector::V2(m) => &m.store,
            Detector::V1(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f64> {
        match self {
            Detector::V2(m) => &mut m.store,
            Detector::V1(m) => &mut m.store,
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Detector::V2(m) => &m.cfg,
            Detector::V1(m) => &m.cfg,
        }
    }

    fn scene_loss(&mut self, scene: &Scene) -> Result<(Graph<f64>, LossNodes), ModelError> {
        let mut g = Graph::new();
        let nodes = match self {
            Detector::V2(m) => {
                let fwd = m.forward(&mut g, &scene.0, Mode::Train)?;
                m.loss(&mut g, &fwd, &scene.0, &scene.1)?
            }
            Detector::V1(m) => {
                let (votes, fwd) = m.forward(&mut g, &scene.0, Mode::Train)?;
                m.loss(&mut g, &votes, &fwd, &scene.0, &scene.1)?
            }
        };
        Ok((g, nodes))
    }

    pub fn detect(
        &mut self,
        points: &PointCloud<f64>,
        score_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<DetectionBox<f64>>, ModelError> {
        match self {
            Detector::V2(m) => m.detect(points, score_threshold, nms_iou),
            Detector::V1(m) => m.detect(points, score_threshold, nms_iou),
        }
    }

    /// Detections for every scene of a split.
    pub fn detect_split(
        &mut self,
        scenes: &[Scene],
        opts: &TrainOpts,
    ) -> Result<Vec<Vec<DetectionBox<f64>>>, ModelError> {
        scenes
            .iter()
            .map(|s| self.detect(&s.0, opts.nms_score, opts.nms_iou))
            .collect()
    }

    pub fn evaluate(&mut self, scenes: &[Scene], opts: &TrainOpts) -> Result<EvalResult, ModelError> {
        let preds = self.detect_split(scenes, opts)?;
        let gts: Vec<Vec<Box3D<f64>>> = scenes.iter().map(|s| s.1.clone()).collect();
        let thresholds = vec![opts.eval_iou; self.cfg().n_classes];
        Ok(evaluate_ap(&preds, &gts, &thresholds))
    }
}

/// Deterministic training: fixed scene shuffling per epoch, per-scene
/// graphs with gradient accumulation over `opts.batch` scenes, one AdamW
/// step per batch. Returns per-epoch metrics.
pub fn train(
    model: &mut Detector,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    opts: &TrainOpts,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, ModelError> {
    assert!(!train_scenes.is_empty(), "no training scenes");
    let steps_per_epoch = train_scenes.len().div_ceil(opts.batch);
    let mut opt = AdamW::new(opts.lr).with_weight_decay(opts.weight_decay);
    if opts.onecycle {
        opt = opt.with_schedule(OneCycle::new((opts.epochs * steps_per_epoch) as u64));
    }
    let seed = model.cfg().seed;
    let mut metrics = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);
        let (mut sum_cls, mut sum_reg, mut sum_vote) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(opts.batch) {
            model.store_mut().zero_grads();
            for &si in chunk {
                let (mut g, nodes) = model.scene_loss(&train_scenes[si])?;
                sum_cls += g.value(nodes.det_cls)[0];
                sum_reg += g.value(nodes.det_reg)[0];
                sum_vote += g.value(nodes.vote_cls)[0] + g.value(nodes.vote_reg)[0];
                g.backward(nodes.total)?;
                g.accumulate_grads(model.store_mut());
            }
            model.store_mut().scale_grads(1.0 / chunk.len() as f64);
            opt.step(model.store_mut());
        }
        let n = train_scenes.len() as f64;
        let map = if !val_scenes.is_empty()
            && (epoch % opts.eval_every.max(1) == 0 || epoch + 1 == opts.epochs)
        {
            model.evaluate(val_scenes, opts)?.map
        } else {
            f64::NAN
        };
        let m = EpochMetrics {
            epoch,
            loss_cls: sum_cls / n,
            loss_reg: sum_reg / n,
            loss_vote: sum_vote / n,
            map,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

/// Train/val splits for a config plus an optional template override. The
/// validation split draws from a disjoint seed stream.
pub fn build_corpus(
    cfg: &Config,
    templates: Option<Vec<crate::scene::ClassTemplate>>,
) -> (Vec<Scene>, Vec<Scene>) {
    let mut spec = cfg.scene_spec(0);
    if let Some(t) = templates {
        spec.templates = t;
    }
    let mut val_spec = cfg.scene_spec(0x5641_4c00);
    val_spec.templates = spec.templates.clone();
    let train_scenes = crate::scene::generate_split(&spec, cfg.data_n_train);
    let val_scenes = crate::scene::generate_split(&val_spec, cfg.data_n_val);
    (train_scenes, val_scenes)
}

/// Convenience wrapper used by trend studies: build corpus, train, return
/// the final validation evaluation.
pub fn train_eval_once(
    cfg: &Config,
    templates: Option<Vec<crate::scene::ClassTemplate>>,
) -> Result<(Detector, EvalResult, Vec<EpochMetrics>), ModelError> {
    let spec = corpus_spec(cfg, templates.clone());
    let (train_scenes, val_scenes) = build_corpus(cfg, templates);
    let n_classes = spec.templates.len();
    let mcfg = ModelConfig::from_config(cfg, n_classes)?;
    let mut model = Detector::V2(Fsdv2Model::new(mcfg)?);
    let opts = TrainOpts::from_config(cfg);
    let metrics = train(&mut model, &train_scenes, &val_scenes, &opts, |_| {})?;
    let result = model.evaluate(&val_scenes, &opts)?;
    Ok((model, result, metrics))
}

/// Scene spec matching a config plus an optional template override.
pub fn corpus_spec(cfg: &Config, templates: Option<Vec<crate::scene::ClassTemplate>>) -> SceneSpec {
    let mut spec = cfg.scene_spec(0);
    if let Some(t) = templates {
        spec.templates = t;
    }
    spec
}
