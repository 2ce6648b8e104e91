use std::time::Instant;

use vvdet_core::config::Config;
use vvdet_core::model::{train, Detector, Fsdv2Model, ModelConfig, TrainOpts};
use vvdet_core::scene::generate_split;

fn main() {
    let mut cfg = Config::default();
    let mut args = std::env::args().skip(1);
    let mut sets = Vec::new();
    while let Some(a) = args.next() {
        sets.push(a);
    }
    cfg.apply_sets(&sets).unwrap();

    let spec = cfg.scene_spec(0);
    let val_spec = cfg.scene_spec(0x5641_4c00);
    let t0 = Instant::now();
    let train_scenes = generate_split(&spec, cfg.data_n_train);
    let val_scenes = generate_split(&val_spec, cfg.data_n_val);
    eprintln!(
        "gen: {:?} ({} train, {} val), pts/scene ~{}",
        t0.elapsed(),
        train_scenes.len(),
        val_scenes.len(),
        train_scenes.iter().map(|s| s.0.len()).sum::<usize>() / train_scenes.len()
    );

    let mcfg = ModelConfig::from_config(&cfg, spec.templates.len()).unwrap();
    let mut model = Detector::V2(Fsdv2Model::new(mcfg).unwrap());
    let opts = TrainOpts::from_config(&cfg);
    let start = Instant::now();
    train(&mut model, &train_scenes, &val_scenes, &opts, |m| {
        eprintln!("{}  [{:?}]", m.line(), start.elapsed());
    })
    .unwrap();
    let result = model.evaluate(&val_scenes, &opts).unwrap();
    eprintln!("final mAP {:.4}", result.map);
    for (i, c) in result.per_class.iter().enumerate() {
        eprintln!(
            "  class {i}: AP {:.4} recall {:.4} n_gt {}",
            c.ap, c.recall, c.n_gt
        );
    }
    eprintln!(
        "crowded mAP {:.4} recall {:.4} | normal mAP {:.4} recall {:.4}",
        result.crowded.map, result.crowded.recall, result.normal.map, result.normal.recall
    );
    eprintln!("total {:?}", start.elapsed());

    // per-GT diagnostics on the first few val scenes
    for (si, (cloud, boxes)) in val_scenes.iter().take(3).enumerate() {
        let dets = model.detect(cloud, opts.nms_score, opts.nms_iou).unwrap();
        eprintln!("scene {si}: {} dets, {} gt", dets.len(), boxes.len());
        for (bi, b) in boxes.iter().enumerate() {
            let best = dets
                .iter()
                .map(|d| (vvdet_core::geom::bev_iou(&d.bbox, b), d))
                .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            match best {
                Some((iou, d)) => {
                    let dc = ((d.bbox.center[0] - b.center[0]).powi(2)
                        + (d.bbox.center[1] - b.center[1]).powi(2))
                    .sqrt();
                    eprintln!(
                        "  gt{bi} cls{} dims {:.1}x{:.1} yaw {:+.2}: best iou {:.3} (cls{} score {:.3} dc {:.2} yaw {:+.2} dims {:.1}x{:.1})",
                        b.class_id, b.dims[0], b.dims[1], b.yaw,
                        iou, d.bbox.class_id, d.score, dc, d.bbox.yaw, d.bbox.dims[0], d.bbox.dims[1]
                    );
                }
                None => eprintln!("  gt{bi} cls{}: no detections at all", b.class_id),
            }
        }
    }
}
