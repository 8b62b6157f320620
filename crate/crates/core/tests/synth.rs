use satr_autodiff::Tensor;
use satr_core::dataset::{Dataset, Split};
use satr_core::synth::{generate_volume, render_boxes, slice_window, Lesion, SynthConfig};
use satr_core::CoreError;

fn sphere(cz: f64, r: f64) -> Lesion {
    Lesion { cx: 30.0, cy: 20.0, cz, rx: r, ry: r, rz: r, contrast: 0.4 }
}

#[test]
fn same_seed_gives_identical_volumes() {
    let cfg = SynthConfig::default();
    let (a, la) = generate_volume(&cfg, 42);
    let (b, lb) = generate_volume(&cfg, 42);
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(la, lb);
    let (c, _) = generate_volume(&cfg, 43);
    assert_ne!(a, c);
}

#[test]
fn lesion_count_stays_in_range() {
    let cfg = SynthConfig::default();
    for seed in 0..100 {
        let (_, lesions) = generate_volume(&cfg, seed);
        assert!((1..=3).contains(&lesions.len()), "seed {seed}");
        for l in &lesions {
            assert!((3.0..=10.0).contains(&l.rx) && (3.0..=10.0).contains(&l.ry));
            assert!((0.2..=0.6).contains(&l.contrast));
        }
    }
}

#[test]
fn zero_contrast_volume_is_pure_background() {
    let cfg = SynthConfig::default();
    let flat = SynthConfig { contrast: [0.0, 0.0], ..cfg.clone() };
    let none = SynthConfig { lesions: [0, 0], ..cfg };
    let (a, lesions) = generate_volume(&flat, 5);
    let (b, _) = generate_volume(&none, 5);
    assert!(!lesions.is_empty());
    assert_eq!(a, b);
}

#[test]
fn slice_windows_centre_the_key_slice() {
    let vol = Tensor::from_fn(&[9, 2, 2], |i| (i / 4) as f64);
    let one = slice_window(&vol, 4, 0).unwrap();
    assert_eq!(one.slices().shape(), &[1, 1, 2, 2]);
    assert!(one.slices().data().iter().all(|&v| v == 4.0));
    let three = slice_window(&vol, 4, 1).unwrap();
    assert_eq!(three.key_index(), 1);
    let planes: Vec<f64> = three.slices().data().chunks(4).map(|c| c[0]).collect();
    assert_eq!(planes, vec![3.0, 4.0, 5.0]);
    assert!(matches!(slice_window(&vol, 0, 1), Err(CoreError::Index(_))));
    assert!(matches!(slice_window(&vol, 8, 1), Err(CoreError::Index(_))));
}

#[test]
fn analytic_boxes_follow_plane_sections() {
    let b = render_boxes(&[sphere(4.0, 5.0)], 4);
    assert_eq!(b.len(), 1);
    assert_eq!((b[0].cx, b[0].cy, b[0].w, b[0].h), (30.0, 20.0, 10.0, 10.0));
    assert!(render_boxes(&[sphere(4.0, 2.0)], 7).is_empty());
    let b = render_boxes(&[sphere(7.0, 5.0)], 4);
    assert!((b[0].w - 8.0).abs() < 1e-12 && (b[0].h - 8.0).abs() < 1e-12);
}

#[test]
fn boxes_cover_only_lesions_cutting_the_key_slice_and_stay_in_bounds() {
    let cfg = SynthConfig::default();
    for seed in 0..30 {
        let (_, lesions) = generate_volume(&cfg, seed);
        for z in 0..cfg.depth {
            let boxes = render_boxes(&lesions, z);
            let cutting = lesions.iter().filter(|l| (z as f64 - l.cz).abs() < l.rz).count();
            assert_eq!(boxes.len(), cutting);
            assert!(boxes.iter().all(|b| b.within(cfg.width as f64, cfg.height as f64)));
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = SynthConfig { depth: 2, ..SynthConfig::default() };
    assert!(cfg.validate(1).is_err());
    let cfg = SynthConfig { radius: [3.0, 16.0], ..SynthConfig::default() };
    assert!(cfg.validate(1).is_err());
    assert!(SynthConfig::default().validate(1).is_ok());
}

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let ds = Dataset::generate(&SynthConfig::default(), 1, &seeds).unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back, ds);
    for split in [Split::Train, Split::Val, Split::Test] {
        assert_eq!(back.samples(split).unwrap(), ds.samples(split).unwrap());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|s| ds.samples(*s).unwrap().len()).sum();
    assert_eq!(manifest["image_count"], total);
    assert_eq!(manifest["split"]["train"].as_array().unwrap().len(), 7);
}

#[test]
fn truncated_volume_is_a_format_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::generate(&SynthConfig::default(), 1, &[3, 4]).unwrap().write(dir.path()).unwrap();
    let path = dir.path().join("volume_4.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match Dataset::read(dir.path()) {
        Err(CoreError::Format { file, .. }) => assert_eq!(file, path),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_manifest_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::generate(&SynthConfig::default(), 1, &[3]).unwrap().write(dir.path()).unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{\"format\": 3").unwrap();
    assert!(matches!(Dataset::read(dir.path()), Err(CoreError::Format { .. })));
}
