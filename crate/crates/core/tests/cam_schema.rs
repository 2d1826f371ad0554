use resgcn::cam::{activated_joints, export_cam, sampled_frames, ActivationMap, DEFAULT_QUANTILE};
use resgcn::graph::SkeletonGraph;
use resgcn::Tensor;

fn validator() -> jsonschema::Validator {
    let text = include_str!("../schemas/cam.schema.json");
    jsonschema::validator_for(&serde_json::from_str(text).unwrap()).unwrap()
}

#[test]
fn exported_cam_matches_shipped_schema() {
    let map = ActivationMap {
        values: Tensor::from_fn(&[75, 25], |i| ((i[0] * 25 + i[1]) as f64 * 0.37).sin()),
        class_id: 1,
        frame_scale: 0.25,
    };
    let act = activated_joints(&map, &sampled_frames(75, 10), DEFAULT_QUANTILE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cam.json");
    export_cam(&map, &act, DEFAULT_QUANTILE, &SkeletonGraph::ntu25().edges, &path).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let v = validator();
    assert!(v.is_valid(&doc), "{:?}", v.iter_errors(&doc).map(|e| e.to_string()).collect::<Vec<_>>());
    assert_eq!(doc["frames"].as_array().unwrap().len(), 75);
}

#[test]
fn schema_rejects_malformed_documents() {
    let v = validator();
    assert!(!v.is_valid(&serde_json::json!({"class_id": 0})));
    let mut doc = serde_json::json!({
        "class_id": 0, "frame_scale": 0.25, "num_frames": 1, "num_joints": 2, "quantile": 0.8,
        "edges": [[0, 1]], "frames": [{"frame": 0, "scores": [0.1, 0.2]}], "activated": []
    });
    assert!(v.is_valid(&doc));
    doc["quantile"] = serde_json::json!(1.0);
    assert!(!v.is_valid(&doc));
}
