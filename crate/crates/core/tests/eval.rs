mod common;

use common::{domain, prepared_domain, tiny_synth};
use proptest::prelude::*;
use u2net::datapipe::{read_label, Volume};
use u2net::eval::*;
use u2net::netarch::{Mode, ModelState, NetworkConfig};
use u2net::{ops, Error, Tensor};

fn model() -> ModelState<f32> {
    ModelState::build(NetworkConfig::new(Mode::Universal, 4, 2), &[domain("a", 2, 3, 16, 2)]).unwrap()
}

fn image(extent: [usize; 3]) -> Volume {
    let t = Tensor::from_fn(&[2, extent[0], extent[1], extent[2]], |i| {
        ((i * 29) % 23) as f32 / 11.0 - 1.0
    });
    Volume::image(t, [1.0; 3]).unwrap()
}

#[test]
fn window_corners() {
    assert_eq!(window_starts(192, 128), vec![0, 64]);
    assert_eq!(window_starts(128, 128), vec![0]);
    assert_eq!(window_starts(40, 16), vec![0, 8, 16, 24]);
    assert_eq!(window_starts(41, 16), vec![0, 8, 16, 24, 25]);
    let n = [192usize; 3]
        .iter()
        .map(|&e| window_starts(e, 128).len())
        .product::<usize>();
    assert_eq!(n, 8);
}

#[test]
fn single_window_equals_direct_forward() {
    let m = model();
    let img = image([16, 16, 16]);
    let pred = sliding_window_infer(&m, "a", &img, [16; 3]).unwrap();
    let direct = argmax_channels(&ops::softmax_channels(&m.predict("a", &img.data).unwrap()).unwrap());
    assert_eq!(pred.data, direct);
    assert_eq!(pred.spacing, img.spacing);
}

#[test]
fn overlapping_windows_are_averaged_uniformly() {
    let m = model();
    let img = image([24, 16, 16]);
    let probs = sliding_window_probs(&m, "a", &img.data, [16; 3]).unwrap();
    // windows start at depth 0 and 8; compute both by hand
    let window = |z0: usize| {
        let w = u2net::datapipe::extract(&img.data, [z0, 0, 0], [16; 3]);
        ops::softmax_channels(&m.predict("a", &w).unwrap()).unwrap()
    };
    let (w0, w1) = (window(0), window(8));
    let n = 16 * 16 * 16;
    for c in 0..3 {
        for z in 0..24 {
            for yx in 0..256 {
                let a = (z < 16).then(|| w0.data()[c * n + z * 256 + yx]);
                let b = (z >= 8).then(|| w1.data()[c * n + (z - 8) * 256 + yx]);
                let want = match (a, b) {
                    (Some(a), Some(b)) => (f64::from(a) + f64::from(b)) / 2.0,
                    (Some(v), None) | (None, Some(v)) => f64::from(v),
                    (None, None) => unreachable!(),
                };
                let got = f64::from(probs.data()[c * 24 * 256 + z * 256 + yx]);
                assert!((got - want).abs() < 1e-6, "class {c} depth {z}");
            }
        }
    }
}

#[test]
fn small_and_large_images_keep_their_extent() {
    let m = model();
    for extent in [[10, 16, 12], [40, 20, 16], [16, 16, 33]] {
        let pred = sliding_window_infer(&m, "a", &image(extent), [16; 3]).unwrap();
        assert_eq!(pred.extent(), extent);
        assert!(pred.data.data().iter().all(|&v| v < 3.0));
    }
    assert!(matches!(
        sliding_window_infer(&m, "zz", &image([16; 3]), [16; 3]),
        Err(Error::UnknownDomain(_))
    ));
}

#[test]
fn dice_examples() {
    assert_eq!(dice(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], 1).unwrap(), 1.0);
    assert_eq!(dice(&[1.0, 0.0], &[0.0, 1.0], 1).unwrap(), 0.0);
    assert_eq!(dice(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0], 1).unwrap(), 0.5);
    assert_eq!(dice(&[0.0, 0.0], &[0.0, 0.0], 1).unwrap(), 1.0);
    assert!(dice(&[0.0], &[0.0, 1.0], 1).is_err());
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_permutation_invariant(
        pairs in prop::collection::vec((0u8..3, 0u8..3), 1..40),
        rot in 0usize..40,
    ) {
        let p: Vec<f32> = pairs.iter().map(|x| x.0 as f32).collect();
        let g: Vec<f32> = pairs.iter().map(|x| x.1 as f32).collect();
        let n = p.len();
        let rp: Vec<f32> = (0..n).map(|i| p[(i + rot) % n]).collect();
        let rg: Vec<f32> = (0..n).map(|i| g[(i + rot) % n]).collect();
        for c in 0..3 {
            let d = dice(&p, &g, c).unwrap();
            prop_assert_eq!(d, dice(&g, &p, c).unwrap());
            prop_assert_eq!(d, dice(&rp, &rg, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}

#[test]
fn dataset_reports_and_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = domain("e", 1, 3, 16, 2);
    let manifest = prepared_domain(tmp.path(), &spec, &tiny_synth(), 2);
    let m = ModelState::<f32>::build(NetworkConfig::new(Mode::Universal, 4, 2), &[spec]).unwrap();
    let preds = tmp.path().join("pred");
    let report = evaluate_dataset(&m, &manifest, Some(&preds)).unwrap();
    assert_eq!(report.cases.len(), 1);
    assert_eq!(report.class_mean.len(), 2);
    assert_eq!(report.classes, vec!["class1", "class2"]);
    let case = &report.cases[0];
    let pred = read_label(&preds.join("e").join(format!("{}.u2vol", case.case))).unwrap();
    let test = manifest.cases.iter().find(|c| c.id == case.case).unwrap();
    let gt = read_label(&manifest.resolve(test.label.as_ref().unwrap())).unwrap();
    assert_eq!(pred.extent(), gt.extent());
    for c in 1..3 {
        assert_eq!(case.dice[c - 1], dice(pred.data.data(), gt.data.data(), c).unwrap());
    }

    let full = EvalReport::new("universal", vec![report.clone()]);
    let (json, txt) = full.write(tmp.path()).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back, full);
    let table = std::fs::read_to_string(txt).unwrap();
    assert!(table.starts_with("Model"));
    assert!(table.contains("e/class1") && table.contains("Mean"));

    let mut no_test = manifest.clone();
    no_test.cases.retain(|c| c.split == u2net::datapipe::Split::Train);
    assert!(evaluate_dataset(&m, &no_test, None).is_err());
}
