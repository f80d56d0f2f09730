//! Detection, description, matching and registration through the public API.

use kpgraph_core::detector::{detect_corners, ground_truth_matches, HarrisConfig, DEFAULT_PE_THRESHOLD};
use kpgraph_core::eval::{describe_keypoints, evaluate_pair, FeatureKind, TestTransform};
use kpgraph_core::geometry::Point2;
use kpgraph_core::imaging::{preprocess, ClaheConfig, Image};
use kpgraph_core::matcher::match_nn;
use kpgraph_core::model::ModelParams;
use kpgraph_core::mosaic::{composite_panorama, ransac_homography, CompositeConfig, Homography, RansacConfig};
use kpgraph_core::synth::{synthesize, SynthConfig};
use kpgraph_core::train::{PreparedFrame, TrainConfig, Trainer};
use kpgraph_core::views::Augmentation;

fn prepared(seed: u64) -> Image {
    preprocess(&synthesize(seed, &SynthConfig::default()).unwrap(), &ClaheConfig::default()).unwrap()
}

fn harris() -> HarrisConfig {
    HarrisConfig { max_points: 64, ..TrainConfig::toy().harris() }
}

#[test]
fn identical_images_match_perfectly() {
    let img = prepared(3);
    let model = ModelParams::<f32>::init(32, 1).unwrap();
    let e = evaluate_pair(&model, &img, &img, &Homography::identity(), &harris(), DEFAULT_PE_THRESHOLD, FeatureKind::Global).unwrap();
    assert!(e.matches.len() > 20);
    assert_eq!(e.metrics.precision, Some(1.0));
    assert!(e.matches.matches.iter().all(|m| m.correct == Some(true)));
}

#[test]
fn translated_pair_has_consistent_ground_truth() {
    let img = prepared(4);
    let (warped, map) = TestTransform::Affine(Augmentation::Translation { dx: 6.0, dy: -4.0 }).apply(&img).unwrap();
    let p = map.apply(Point2::new(100.0, 100.0));
    assert!((p.x - 106.0).abs() < 1e-9 && (p.y - 96.0).abs() < 1e-9);
    let model = ModelParams::<f32>::init(32, 2).unwrap();
    let e = evaluate_pair(&model, &img, &warped, &map, &harris(), DEFAULT_PE_THRESHOLD, FeatureKind::Global).unwrap();
    assert!(e.metrics.ground_truth > 10, "{:?}", e.metrics);
    let gt = ground_truth_matches(&e.keypoints_a, &e.keypoints_b, &map, DEFAULT_PE_THRESHOLD);
    assert!(gt.within.len() >= e.metrics.ground_truth);
}

#[test]
fn trained_model_describes_in_both_precisions() {
    let cfg = TrainConfig { epochs: 1, max_keypoints: 16, ..TrainConfig::toy() };
    let frames: Vec<PreparedFrame> = (0..3)
        .map(|k| PreparedFrame::new(&synthesize(10 + k, &SynthConfig::default()).unwrap(), &cfg.clahe, &cfg.harris()).unwrap())
        .collect();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.fit(&frames, &mut |r, _| {
        assert!(r.loss.is_finite());
        Ok(())
    }, &mut |k, e| panic!("frame {k} skipped: {e}")).unwrap();
    assert_eq!(trainer.steps_taken(), 3);

    let img = prepared(20);
    let kps = detect_corners(&img, &harris());
    let single = describe_keypoints(&trainer.model, &img, &kps, FeatureKind::Global).unwrap();
    let double = describe_keypoints(&trainer.model.cast::<f64>(), &img, &kps, FeatureKind::Global).unwrap();
    let worst = single.data().iter().zip(double.data()).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
    let m = match_nn(&single, &single).unwrap();
    assert!(m.matches.iter().all(|x| x.i == x.j));
}

#[test]
fn registration_from_ground_truth_correspondences() {
    let scene = synthesize(30, &SynthConfig { width: 300, height: 280, ..SynthConfig::default() }).unwrap();
    let crop = |ox: usize, oy: usize| Image::from_fn(256, 256, |x, y| scene.at(ox + x, oy + y));
    let frames = [crop(0, 20), crop(22, 8), crop(40, 0)];
    let mut pairwise = Vec::new();
    for k in 1..frames.len() {
        let (a, b) = (preprocess(&frames[k], &ClaheConfig::default()).unwrap(), preprocess(&frames[k - 1], &ClaheConfig::default()).unwrap());
        let (ka, kb) = (detect_corners(&a, &harris()), detect_corners(&b, &harris()));
        let truth = [Homography::translation(22.0, -12.0), Homography::translation(18.0, -8.0)][k - 1].clone();
        let gt = ground_truth_matches(&ka, &kb, &truth, 1.0);
        let pairs: Vec<_> = gt
            .nearest
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|(j, _)| (ka[i].position, kb[j].position)))
            .collect();
        assert!(pairs.len() >= 8, "{}", pairs.len());
        let h = ransac_homography(&pairs, &RansacConfig::default()).unwrap();
        assert!(h.corner_error(&truth, 256, 256) < 2.0);
        pairwise.push(h);
    }
    let pano = composite_panorama(&frames, &pairwise, &CompositeConfig::default()).unwrap();
    assert!((295..=297).contains(&pano.image.width()) && (275..=277).contains(&pano.image.height()));
    assert!(pano.overlap_rms.unwrap() < 0.03);
}
