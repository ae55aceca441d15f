use std::collections::HashSet;

use scene_removal::colmap::{masked_keypoints, SparseModel};
use scene_removal::geometry::{project_to_pixel, Vec2};
use scene_removal::mask::Mask;
use scene_removal::metrics::{mask_accuracy, mask_iou};
use scene_removal::propagation::{
    predict_masks, propagate_points, run_points_prompt, run_text_prompt, sample_points_from_mask, BoxDetector,
    Detection, ExecPredictor, MaskPredictor, PointPrompt, PredictorError, PropagationError, PromptSource, ViewInput,
};
use scene_removal::synthetic::{oracle_mask_predictor, CameraRing, OracleDetector, SceneSpec};

fn scene(count: usize) -> SceneSpec {
    SceneSpec {
        cameras: CameraRing {
            count,
            ..SceneSpec::default().cameras
        },
        ..SceneSpec::default()
    }
}

/// Three user clicks inside the object in view 0.
fn object_clicks(spec: &SceneSpec) -> Vec<Vec2> {
    let mask = spec.ground_truth_mask(0).unwrap();
    let fg: Vec<(u32, u32)> = mask.foreground().collect();
    [fg.len() / 5, fg.len() / 2, 4 * fg.len() / 5]
        .iter()
        .map(|&i| Vec2::new(fg[i].0 as f64, fg[i].1 as f64))
        .collect()
}

fn projected_cloud(model: &SparseModel, view: u32, pids: &[u64]) -> Vec<Vec2> {
    let img = model.image(view).unwrap();
    let cam = model.camera_of(img);
    pids.iter()
        .filter_map(|p| project_to_pixel(cam, &img.pose, &model.points()[p].position))
        .collect()
}

#[test]
fn two_camera_scene_points_land_on_object() {
    let spec = scene(2);
    let model = spec.emit_sparse_model(11).unwrap();
    let mask0 = spec.ground_truth_mask(0).unwrap();
    let under = masked_keypoints(&model, 1, &mask0).unwrap();
    assert!(under.len() >= 20, "only {} keypoints on the object", under.len());

    let prompt = PointPrompt {
        view_id: 1,
        points: object_clicks(&spec),
    };
    let set = propagate_points(&model, &prompt, &mask0).unwrap();
    assert_eq!(set.m, 3);
    assert_eq!(set.views.len(), 2);
    for (v, vp) in set.views.iter().enumerate() {
        let truth = spec.ground_truth_mask(v).unwrap();
        assert_eq!(vp.points.len(), 3);
        for p in &vp.points {
            assert!(truth.contains_point(*p), "view {v}: {p:?} off the object");
        }
    }
}

#[test]
fn points_are_snapped_members_of_projected_cloud() {
    let spec = scene(8);
    let model = spec.emit_sparse_model(2).unwrap();
    let mask0 = spec.ground_truth_mask(0).unwrap();
    let pids: Vec<u64> = masked_keypoints(&model, 1, &mask0)
        .unwrap()
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let prompt = PointPrompt {
        view_id: 1,
        points: object_clicks(&spec),
    };
    let a = propagate_points(&model, &prompt, &mask0).unwrap();
    let b = propagate_points(&model, &prompt, &mask0).unwrap();
    assert_eq!(a, b, "propagation must be deterministic");
    for vp in &a.views {
        let cloud = projected_cloud(&model, vp.view_id, &pids);
        assert!(vp.points.len() <= a.m);
        if cloud.len() >= a.m {
            assert_eq!(vp.points.len(), a.m);
        }
        let unique: HashSet<(u64, u64)> = vp.points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        assert_eq!(unique.len(), vp.points.len(), "duplicates in view {}", vp.view_id);
        for p in &vp.points {
            assert!(cloud.contains(p), "view {}: {p:?} was synthesized", vp.view_id);
        }
    }
}

#[test]
fn single_view_model_returns_snapped_points() {
    let spec = scene(1);
    let model = spec.emit_sparse_model(4).unwrap();
    let mask0 = spec.ground_truth_mask(0).unwrap();
    let clicks = object_clicks(&spec);
    let set = propagate_points(
        &model,
        &PointPrompt {
            view_id: 1,
            points: clicks.clone(),
        },
        &mask0,
    )
    .unwrap();
    assert_eq!(set.views.len(), 1);
    let keypoints: Vec<Vec2> = masked_keypoints(&model, 1, &mask0).unwrap().into_iter().map(|(p, _)| p).collect();
    let snapped: Vec<Vec2> = clicks
        .iter()
        .map(|c| {
            *keypoints
                .iter()
                .min_by(|a, b| (*a - c).norm().partial_cmp(&(*b - c).norm()).unwrap())
                .unwrap()
        })
        .collect();
    let mut dedup = Vec::new();
    for s in snapped {
        if !dedup.contains(&s) {
            dedup.push(s);
        }
    }
    assert_eq!(&set.views[0].points[..dedup.len()], &dedup[..]);
}

#[test]
fn wall_mask_has_no_correspondence() {
    let spec = scene(4);
    let model = spec.emit_sparse_model(4).unwrap();
    let empty = Mask::new(spec.width, spec.height);
    let err = propagate_points(
        &model,
        &PointPrompt {
            view_id: 1,
            points: vec![Vec2::new(1.0, 1.0)],
        },
        &empty,
    )
    .unwrap_err();
    assert!(matches!(err, PropagationError::NoSparseCorrespondence(1)));
    let err = propagate_points(
        &model,
        &PointPrompt {
            view_id: 99,
            points: vec![Vec2::new(1.0, 1.0)],
        },
        &empty,
    )
    .unwrap_err();
    assert!(matches!(err, PropagationError::ViewAbsent(99)));
}

#[test]
fn oracle_predictor_gives_perfect_masks() {
    let spec = scene(8);
    let model = spec.emit_sparse_model(9).unwrap();
    let views = ViewInput::from_model(&model, None);
    let oracle = oracle_mask_predictor(&spec);
    let (set, initial) = run_points_prompt(&model, &oracle, &views[0], &object_clicks(&spec)).unwrap();
    assert_eq!(initial, spec.ground_truth_mask(0).unwrap());
    let stack = predict_masks(&oracle, &views, &set);
    assert!(stack.failures.is_empty());
    for v in 0..8 {
        let truth = spec.ground_truth_mask(v).unwrap();
        let pred = &stack.masks[&(v as u32 + 1)];
        assert_eq!(mask_iou(pred, &truth).unwrap(), 1.0);
        assert_eq!(mask_accuracy(pred, &truth).unwrap(), 1.0);
    }
}

struct WrongSize;
impl MaskPredictor for WrongSize {
    fn predict(&self, view: &ViewInput, _: &[Vec2]) -> Result<Mask, PredictorError> {
        Ok(Mask::full(view.width + 1, view.height))
    }
}

#[test]
fn wrong_dims_and_zero_point_views_are_per_view() {
    let spec = scene(3);
    let model = spec.emit_sparse_model(9).unwrap();
    let views = ViewInput::from_model(&model, None);
    let oracle = oracle_mask_predictor(&spec);
    let (mut set, _) = run_points_prompt(&model, &oracle, &views[0], &object_clicks(&spec)).unwrap();
    set.views[1].points.clear();

    let stack = predict_masks(&WrongSize, &views, &set);
    assert_eq!(stack.failures.len(), 2);
    assert!(stack.failures[&1].contains("expected"));
    assert!(stack.masks[&2].is_empty());
    assert!(stack.diagnostics.iter().any(|d| d.view_id == 2));
}

#[cfg(unix)]
#[test]
fn external_predictor_protocol() {
    let spec = scene(2);
    let model = spec.emit_sparse_model(9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let views = ViewInput::from_model(&model, Some(dir.path()));
    std::fs::write(views[0].image_path.as_ref().unwrap(), b"not read").unwrap();
    let fixture = dir.path().join("fixture.mask.png");
    Mask::from_rect(spec.width, spec.height, 2, 2, 5, 5).save_png(&fixture).unwrap();

    // Copies a fixture mask to <out_mask_path> after checking its arguments.
    let script = dir.path().join("predict.sh");
    std::fs::write(
        &script,
        format!(
            "#!/bin/sh\n[ -f \"$1\" ] || exit 3\ngrep -q '\"points\"' \"$2\" || exit 4\ncp {} \"$3\"\n",
            fixture.display()
        ),
    )
    .unwrap();
    let pred = ExecPredictor::new(&format!("sh {}", script.display())).unwrap();
    let mask = pred.predict(&views[0], &[Vec2::new(3.0, 3.0)]).unwrap();
    assert_eq!(mask.count(), 16);

    let failing = ExecPredictor::new("sh -c 'exit 1'").unwrap();
    assert!(matches!(
        failing.predict(&views[0], &[Vec2::new(3.0, 3.0)]),
        Err(PredictorError::External(_))
    ));
    assert!(matches!(
        pred.predict(&views[1], &[Vec2::new(3.0, 3.0)]),
        Err(PredictorError::External(_))
    ));
}

#[test]
fn text_path_matches_points_path() {
    let spec = scene(8);
    let model = spec.emit_sparse_model(5).unwrap();
    let views = ViewInput::from_model(&model, None);
    let oracle = oracle_mask_predictor(&spec);
    let detector = OracleDetector::new(&spec);

    let text_set = run_text_prompt(&model, &detector, &oracle, &views[0], "ball").unwrap();
    assert_eq!(text_set.source, PromptSource::Text);

    let det = detector.detect(&views[0], "ball").unwrap().unwrap();
    let seeded = sample_points_from_mask(&det.region(spec.width, spec.height)).unwrap();
    let (mut points_set, _) = run_points_prompt(&model, &oracle, &views[0], &seeded).unwrap();
    points_set.source = PromptSource::Text;
    assert_eq!(text_set, points_set);
}

struct FixedDetector(Option<Detection>);
impl BoxDetector for FixedDetector {
    fn detect(&self, _: &ViewInput, _: &str) -> Result<Option<Detection>, PredictorError> {
        Ok(self.0.clone())
    }
}

#[test]
fn text_path_edge_cases() {
    let spec = scene(4);
    let model = spec.emit_sparse_model(5).unwrap();
    let views = ViewInput::from_model(&model, None);
    let oracle = oracle_mask_predictor(&spec);
    let err = run_text_prompt(&model, &FixedDetector(None), &oracle, &views[0], "chair").unwrap_err();
    assert!(matches!(err, PropagationError::NoDetection(_)));

    // Whole-image box samples the same points as a full mask.
    let whole = Detection {
        bbox: [0, 0, spec.width - 1, spec.height - 1],
        mask: None,
    };
    let region = whole.region(spec.width, spec.height);
    assert_eq!(
        sample_points_from_mask(&region).unwrap(),
        sample_points_from_mask(&Mask::full(spec.width, spec.height)).unwrap()
    );
    let set = run_text_prompt(&model, &FixedDetector(Some(whole)), &oracle, &views[0], "ball").unwrap();
    let (expect, _) = run_points_prompt(
        &model,
        &oracle,
        &views[0],
        &sample_points_from_mask(&Mask::full(spec.width, spec.height)).unwrap(),
    )
    .unwrap();
    assert_eq!(set.views, expect.views);
}
