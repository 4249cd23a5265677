use abfpe::data::{generate_synthetic, load_manifest, Manifest, ManifestOptions, SynthConfig};
use abfpe::evaluation::{
    evaluate, evaluate_predictor, load_box_sidecar, write_box_sidecar, EvalOptions, MetricsReport, OraclePredictor,
};
use abfpe::network::{save_checkpoint, FingertipNet, ModelConfig};

fn dataset(count: usize) -> (tempfile::TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        count,
        seed: 21,
        ..Default::default()
    };
    let path = generate_synthetic(&cfg, &dir.path().join("data")).unwrap();
    let manifest = load_manifest(&path, ManifestOptions::strict()).unwrap();
    (dir, manifest)
}

#[test]
fn oracle_round_trip_is_exact() {
    let (_dir, manifest) = dataset(12);
    let mut oracle = OraclePredictor::new(24, 224).unwrap();
    let eval = evaluate_predictor(&mut oracle, &manifest, &EvalOptions::default()).unwrap();
    let r = &eval.report;
    for t in &r.per_threshold {
        assert_eq!((t.precision, t.recall, t.f1), (1.0, 1.0, 1.0));
    }
    assert!(r.avg_pixel_error_defined);
    assert!(r.avg_pixel_error < 1e-3);
    let present: usize = manifest.records.iter().map(|m| m.fingertips_px().present_count()).sum();
    assert_eq!(r.actual_fingertips, present);
    assert_eq!(r.detected_fingertips, present);
    assert_eq!(r.images, 12);
    assert_eq!(r.cde.last().unwrap().1, 1.0);
    assert!(r.mean_iou.is_none());
}

#[test]
fn shifted_oracle_respects_threshold() {
    let (_dir, manifest) = dataset(8);
    let mut oracle = OraclePredictor::new(24, 224).unwrap().with_shift(8.0, 0.0);
    let opts = EvalOptions {
        deltas: vec![5.0, 10.0],
        ..Default::default()
    };
    let eval = evaluate_predictor(&mut oracle, &manifest, &opts).unwrap();
    assert_eq!(eval.report.threshold(10.0).unwrap().f1, 1.0);
    assert_eq!(eval.report.threshold(5.0).unwrap().f1, 0.0);
    assert!((eval.report.avg_pixel_error - 8.0).abs() < 1e-3);
    let detected: usize = eval.images.iter().map(|i| i.prediction.present_count()).sum();
    assert_eq!(eval.report.detected_fingertips, detected);
}

#[test]
fn predicted_boxes_report_iou() {
    let (dir, manifest) = dataset(6);
    let exact: Vec<(String, [f64; 4])> = manifest.records.iter().map(|r| (r.image.clone(), r.bbox)).collect();
    let path = dir.path().join("boxes.jsonl");
    write_box_sidecar(&path, &exact).unwrap();
    let opts = EvalOptions {
        boxes: Some(load_box_sidecar(&path).unwrap()),
        ..Default::default()
    };
    let mut oracle = OraclePredictor::new(24, 224).unwrap();
    let eval = evaluate_predictor(&mut oracle, &manifest, &opts).unwrap();
    assert_eq!(eval.report.mean_iou, Some(1.0));
    assert_eq!(eval.report.threshold(10.0).unwrap().f1, 1.0);

    let mut boxes = load_box_sidecar(&path).unwrap();
    let first = &manifest.records[0].image;
    boxes.remove(first);
    let opts = EvalOptions {
        boxes: Some(boxes),
        ..Default::default()
    };
    assert!(evaluate_predictor(&mut oracle, &manifest, &opts).is_err());

    std::fs::write(&path, "{\"image\":\"a.png\",\"bbox\":[0.5,0.1,0.4,0.2]}\n").unwrap();
    assert!(load_box_sidecar(&path).is_err());
}

#[test]
fn checkpoint_evaluation_writes_report() {
    let (dir, manifest) = dataset(4);
    let cfg = ModelConfig {
        anchor_count: 12,
        input_size: 64,
        neck_channels: 16,
        ..Default::default()
    };
    let model = FingertipNet::<f32>::new(&cfg, 1).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ckpt, Some(1)).unwrap();
    let out = dir.path().join("reports/eval.json");
    let eval = evaluate(&ckpt, &manifest, &EvalOptions::default(), Some(12), Some(&out)).unwrap();
    let read = MetricsReport::read(&out).unwrap();
    assert_eq!(read, eval.report);
    assert_eq!(read.metadata.checkpoint_sha256.as_ref().unwrap().len(), 64);
    assert_eq!(read.metadata.deltas, vec![10.0, 15.0]);
    for t in &read.per_threshold {
        assert!((0.0..=1.0).contains(&t.f1));
    }
    assert!(evaluate(&ckpt, &manifest, &EvalOptions::default(), Some(24), None).is_err());
}
