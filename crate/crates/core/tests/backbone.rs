use satr_autodiff::{gradcheck, Tape, Tensor, Var};
use satr_core::backbone::{Backbone, BackboneConfig, Fpn, StageFeatures};
use satr_core::params::{Binder, ParamStore};
use satr_core::satr::{SatrBlocks, SatrConfig, Variant};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn toy() -> BackboneConfig {
    BackboneConfig::default()
}

#[test]
fn toy_config_stage_shapes() {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&toy(), 1, &mut store, 0).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(random(&[3, 1, 64, 64], 1));
    let feats = bb.forward(&mut tape, &mut binder, x).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|f| tape.shape(f.per_slice).to_vec()).collect();
    assert_eq!(shapes, vec![vec![3, 32, 32, 32], vec![3, 64, 16, 16], vec![3, 128, 8, 8]]);

    let fused: Vec<Var> = feats.iter().map(|f| bb.fuse_slices(&mut tape, &mut binder, f).unwrap()).collect();
    let mut fpn_store = ParamStore::new();
    let fpn = Fpn::new(bb.stages(), 64, &mut fpn_store, 0);
    let mut fpn_binder = Binder::new(&fpn_store, false);
    let out = fpn.forward(&mut tape, &mut fpn_binder, &fused).unwrap();
    let shapes: Vec<Vec<usize>> = out.iter().map(|v| tape.shape(*v).to_vec()).collect();
    assert_eq!(shapes, vec![vec![64, 32, 32], vec![64, 16, 16], vec![64, 8, 8]]);
}

#[test]
fn zero_input_with_zero_biases_gives_zero_features() {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&BackboneConfig { channels: vec![4, 6], ..toy() }, 1, &mut store, 3).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(Tensor::zeros(&[3, 1, 16, 16]));
    for f in bb.forward(&mut tape, &mut binder, x).unwrap() {
        assert!(tape.data(f.per_slice).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn slices_are_processed_independently() {
    let cfg = BackboneConfig { channels: vec![4, 6, 8], ..toy() };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&cfg, 1, &mut store, 9).unwrap();
    let base = random(&[3, 1, 32, 32], 2);
    let mut bumped = base.clone();
    for v in &mut bumped.data_mut()[..32 * 32] {
        *v += 0.37;
    }
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(input.clone());
        let feats = bb.forward(&mut tape, &mut binder, x).unwrap();
        feats.iter().map(|f| tape.value(f.per_slice).clone()).collect::<Vec<_>>()
    };
    let (a, b) = (run(&base), run(&bumped));
    for (fa, fb) in a.iter().zip(&b) {
        let plane = fa.numel() / 3;
        assert_ne!(&fa.data()[..plane], &fb.data()[..plane], "upper slice must change");
        assert_eq!(&fa.data()[plane..], &fb.data()[plane..], "key and lower slices must be untouched");
    }
}

#[test]
fn indivisible_input_is_a_configuration_error() {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&toy(), 1, &mut store, 0).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(Tensor::zeros(&[3, 1, 60, 64]));
    let err = bb.forward(&mut tape, &mut binder, x).unwrap_err();
    assert!(matches!(err, satr_core::CoreError::Config(_)), "{err}");
}

fn fusion_with(kernel: impl Fn(usize, usize, usize) -> f64, c: usize, input: &Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&BackboneConfig { channels: vec![c], ..toy() }, 1, &mut store, 0).unwrap();
    let w = store.get_mut(bb.fusion_params(0).weight);
    for o in 0..c {
        for i in 0..c {
            for s in 0..3 {
                w.data_mut()[(o * c + i) * 3 + s] = kernel(o, i, s);
            }
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(input.clone());
    let f = StageFeatures { per_slice: x, stage: bb.stages()[0] };
    let y = bb.fuse_slices(&mut tape, &mut binder, &f).unwrap();
    tape.value(y).clone()
}

#[test]
fn key_slice_selector_reduces_to_pointwise_conv_of_key_slice() {
    let c = 3;
    let input = random(&[3, c, 4, 5], 4);
    let map = random(&[c, c], 5);
    let y = fusion_with(|o, i, s| if s == 1 { map.data()[o * c + i] } else { 0.0 }, c, &input);
    let key = &input.data()[c * 20..2 * c * 20];
    let (want, _, _) = satr_oracles::conv2d(key, c, 4, 5, map.data(), &[0.0; 3], 1, 1, 1, 0);
    assert!(y.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn averaging_kernel_over_constant_slices() {
    let c = 2;
    let input = Tensor::from_fn(&[3, c, 3, 3], |i| [1.0, 2.0, 6.0][i / (c * 9)]);
    let y = fusion_with(|o, i, _| if o == i { 1.0 / 3.0 } else { 0.0 }, c, &input);
    assert!(y.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
}

#[test]
fn fusion_matches_explicit_conv3d_and_is_affine() {
    let c = 3;
    let mut store = ParamStore::new();
    let bb = Backbone::new(&BackboneConfig { channels: vec![c], ..toy() }, 1, &mut store, 21).unwrap();
    let b = bb.fusion_params(0).bias;
    for (k, v) in store.get_mut(b).data_mut().iter_mut().enumerate() {
        *v = 0.1 * k as f64 - 0.05;
    }
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(input.clone());
        let y = bb.fuse_slices(&mut tape, &mut binder, &StageFeatures { per_slice: x, stage: bb.stages()[0] }).unwrap();
        tape.value(y).clone()
    };
    let a = random(&[3, c, 4, 4], 8);
    let b2 = random(&[3, c, 4, 4], 9);
    let ya = run(&a);
    // Oracle on [C, S, H, W].
    let mut perm = vec![0.0; a.numel()];
    for s in 0..3 {
        for ch in 0..c {
            for p in 0..16 {
                perm[(ch * 3 + s) * 16 + p] = a.data()[(s * c + ch) * 16 + p];
            }
        }
    }
    let w = store.get(bb.fusion_params(0).weight);
    let (want, _) = satr_oracles::conv3d(&perm, [c, 3, 4, 4], w.data(), store.get(b).data(), [3, 1, 1], [1, 1, 1]);
    assert!(ya.data().iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-10));

    let sum = Tensor::new(a.shape(), a.data().iter().zip(b2.data()).map(|(x, y)| x + y).collect()).unwrap();
    let lhs = run(&sum);
    let (yb, y0) = (run(&b2), run(&Tensor::zeros(a.shape())));
    for k in 0..lhs.numel() {
        let rhs = ya.data()[k] + yb.data()[k] - y0.data()[k];
        assert!((lhs.data()[k] - rhs).abs() < 1e-12);
    }
}

#[test]
fn single_stage_fpn_is_smooth_of_lateral_and_zero_maps_to_zero() {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { channels: vec![5], ..toy() };
    let stages = cfg.stages();
    let fpn = Fpn::new(&stages, 7, &mut store, 2);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(random(&[5, 6, 6], 3));
    let out = fpn.forward(&mut tape, &mut binder, &[x]).unwrap();
    assert_eq!(tape.shape(out[0]), &[7, 6, 6]);
    let z = tape.constant(Tensor::zeros(&[5, 6, 6]));
    let out = fpn.forward(&mut tape, &mut binder, &[z]).unwrap();
    assert!(tape.data(out[0]).iter().all(|&v| v == 0.0));
}

#[test]
fn fpn_rejects_levels_not_related_by_two() {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { channels: vec![2, 2], ..toy() };
    let fpn = Fpn::new(&cfg.stages(), 4, &mut store, 2);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let a = tape.constant(Tensor::zeros(&[2, 8, 8]));
    let b = tape.constant(Tensor::zeros(&[2, 3, 3]));
    assert!(matches!(fpn.forward(&mut tape, &mut binder, &[a, b]), Err(satr_core::CoreError::Config(_))));
}

#[test]
fn baseline_pipeline_passes_gradcheck() {
    let cfg = BackboneConfig { channels: vec![2, 3], share_slice_weights: false, fpn_width: 2 };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&cfg, 1, &mut store, 4).unwrap();
    let satr_cfg = SatrConfig { variant: Variant::Baseline, stages: vec![true, true], ..SatrConfig::default() };
    let blocks = SatrBlocks::new(&satr_cfg, bb.stages(), 1, 8, 8, &mut store, 4).unwrap();
    let fpn = Fpn::new(bb.stages(), 2, &mut store, 4);
    let proj = random(&[2, 4, 4], 77);
    let x = random(&[3, 1, 8, 8], 6);
    let report = gradcheck(
        |tape, v| {
            let mut binder = Binder::new(&store, false);
            let feats = bb.forward(tape, &mut binder, v).map_err(to_tensor)?;
            let (layers, _) = blocks.forward(tape, &mut binder, &bb, &feats).map_err(to_tensor)?;
            let out = fpn.forward(tape, &mut binder, &layers).map_err(to_tensor)?;
            let r = tape.constant(proj.clone());
            let p = tape.mul(out[0], r)?;
            Ok(tape.sum(p))
        },
        &x,
        1e-5,
        1e-4,
    )
    .map_err(|e| e.to_string())
    .unwrap();
    assert!(report.pass, "max rel err {:.3e}", report.max_rel_err);
}

fn to_tensor(e: satr_core::CoreError) -> satr_autodiff::TensorError {
    satr_autodiff::TensorError::Evaluation(e.to_string())
}
