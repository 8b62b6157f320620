use satr_autodiff::{Tape, Tensor, Var};
use satr_core::backbone::{BackboneConfig, StageFeatures, StageSpec};
use satr_core::model::{Detector, ModelConfig};
use satr_core::params::{Binder, ParamStore};
use satr_core::satr::{hybrid_fuse, hybrid_params, PatchEmbeddings, SatrConfig, SatrStage, Variant};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn stage(channels: usize) -> StageSpec {
    StageSpec { index: 0, channels, ratio: 2 }
}

fn small_cfg(variant: Variant) -> SatrConfig {
    SatrConfig { embed_dim: 8, grid: 4, heads: 2, variant, stages: vec![true], ..SatrConfig::default() }
}

fn zero_biases(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

#[test]
fn constant_input_gives_identical_tokens() {
    let cfg = small_cfg(Variant::Satr);
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(3), &cfg, 3, (8, 8), &mut store, 1);
    zero_biases(&mut store);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(Tensor::full(&[3, 8, 8], 0.7));
    let e = blk.single_slice_embed(&mut tape, &mut binder, x).unwrap();
    assert_eq!(tape.shape(e), &[16, 8]);
    let w = store.get(blk.single_params().weight);
    let data = tape.data(e);
    for t in 0..16 {
        for j in 0..8 {
            let want: f64 = 0.7 * (0..3).map(|i| w.data()[j * 3 + i]).sum::<f64>();
            assert!((data[t * 8 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn default_config_embeddings_are_256_by_384_at_every_stage_size() {
    let cfg = SatrConfig::default();
    for (side, channels) in [(32, 32), (16, 64), (8, 128)] {
        let mut store = ParamStore::new();
        let blk = SatrStage::new(StageSpec { index: 0, channels, ratio: 64 / side }, &cfg, 3, (side, side), &mut store, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let x = tape.constant(random(&[3, channels, side, side], 3));
        let f = StageFeatures { per_slice: x, stage: blk.spec() };
        let e = blk.embed(&mut tape, &mut binder, &f).unwrap();
        for v in e.per_slice.iter().chain([&e.all_slice]) {
            assert_eq!(tape.shape(*v), &[256, 384]);
        }
    }
}

#[test]
fn divisible_input_matches_fixed_pooling_of_pointwise_conv() {
    let cfg = SatrConfig { embed_dim: 6, grid: 16, heads: 2, stages: vec![true], ..SatrConfig::default() };
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(4), &cfg, 3, (32, 32), &mut store, 5);
    let b = blk.single_params().bias;
    store.get_mut(b).data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.6]);
    let x = random(&[4, 32, 32], 6);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let xv = tape.constant(x.clone());
    let e = blk.single_slice_embed(&mut tape, &mut binder, xv).unwrap();
    let (conv, _, _) = satr_oracles::conv2d(
        x.data(), 4, 32, 32, store.get(blk.single_params().weight).data(), store.get(b).data(), 1, 1, 1, 0,
    );
    let pooled = satr_oracles::avg_pool_fixed(&conv, 6, 32, 32, 2);
    for t in 0..256 {
        for j in 0..6 {
            assert!((tape.data(e)[t * 6 + j] - pooled[j * 256 + t]).abs() < 1e-10);
        }
    }
}

#[test]
fn key_plane_selector_kernel_reproduces_single_slice_embedding() {
    for side in [32, 20, 16, 8] {
        let cfg = small_cfg(Variant::Satr);
        let c = 3;
        let mut store = ParamStore::new();
        let blk = SatrStage::new(stage(c), &cfg, 3, (side, side), &mut store, 7);
        let (kh, kw) = blk.patch_kernel();
        let single_w = store.get(blk.single_params().weight).clone();
        let all = blk.all_params();
        store.get_mut(all.bias).data_mut().fill(0.0);
        store.get_mut(blk.single_params().bias).data_mut().fill(0.0);
        // Uniform weights on the key plane over each bin; only valid when
        // every bin has the full kernel extent.
        if side % 4 != 0 && side > 4 {
            continue;
        }
        let w = store.get_mut(all.weight).data_mut();
        for o in 0..8 {
            for i in 0..c {
                for s in 0..3 {
                    for k in 0..kh * kw {
                        let idx = (((o * c + i) * 3 + s) * kh * kw) + k;
                        w[idx] = if s == 1 { single_w.data()[o * c + i] / (kh * kw) as f64 } else { 0.0 };
                    }
                }
            }
        }
        let x = random(&[3, c, side, side], 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let xv = tape.constant(x);
        let f = StageFeatures { per_slice: xv, stage: blk.spec() };
        let e = blk.embed(&mut tape, &mut binder, &f).unwrap();
        let (a, b) = (tape.data(e.all_slice), tape.data(e.key()));
        assert!(a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12), "side {side}");
    }
}

#[test]
fn zero_features_with_zero_bias_give_zero_all_slice_tokens() {
    let cfg = small_cfg(Variant::Satr);
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(2), &cfg, 3, (8, 8), &mut store, 7);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(Tensor::zeros(&[3, 2, 8, 8]));
    let e = blk.all_slice_embed(&mut tape, &mut binder, x).unwrap();
    assert!(tape.data(e).iter().all(|&v| v == 0.0));
}

fn embeddings(tape: &mut Tape, slices: &[Tensor], all: &Tensor) -> PatchEmbeddings {
    let per_slice: Vec<Var> = slices.iter().map(|t| tape.constant(t.clone())).collect();
    let all_slice = tape.constant(all.clone());
    PatchEmbeddings { key_index: per_slice.len() / 2, per_slice, all_slice }
}

#[test]
fn zero_adjacent_embeddings_give_uniform_attention_and_identical_tokens() {
    let cfg = small_cfg(Variant::Satr);
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(2), &cfg, 3, (8, 8), &mut store, 7);
    zero_biases(&mut store);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let zero = Tensor::zeros(&[16, 8]);
    let e = embeddings(&mut tape, &[zero.clone(), random(&[16, 8], 1), zero], &random(&[16, 8], 2));
    let (_, rec) = blk.slice_attention(&mut tape, &mut binder, &e).unwrap();
    assert!(rec.weights.data().iter().all(|&w| (w - 1.0 / 16.0).abs() < 1e-15));
    let msa = rec.msa.data();
    for t in 1..16 {
        assert_eq!(&msa[t * 8..(t + 1) * 8], &msa[..8]);
    }
}

#[test]
fn satr_attention_weights_ignore_key_and_all_slice_embeddings() {
    let cfg = small_cfg(Variant::Satr);
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(2), &cfg, 3, (8, 8), &mut store, 9);
    let up = random(&[16, 8], 1);
    let low = random(&[16, 8], 3);
    let run = |key: &Tensor, all: &Tensor| {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let e = embeddings(&mut tape, &[up.clone(), key.clone(), low.clone()], all);
        blk.slice_attention(&mut tape, &mut binder, &e).unwrap().1
    };
    let base = run(&random(&[16, 8], 2), &random(&[16, 8], 4));
    for k in 0..20 {
        let other = run(&random(&[16, 8], 100 + k), &random(&[16, 8], 200 + k));
        assert_eq!(base.weights, other.weights);
        assert!(other.max_row_sum_error() < 1e-10);
    }
}

#[test]
fn value_enhancement_is_an_additive_key_term() {
    let cfg = small_cfg(Variant::Satr);
    let mut store = ParamStore::new();
    let blk = SatrStage::new(stage(2), &cfg, 3, (8, 8), &mut store, 9);
    zero_biases(&mut store);
    let (e_all, e_k) = (random(&[16, 8], 5), random(&[16, 8], 6));
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let a = tape.constant(e_all.clone());
    let k = tape.constant(e_k.clone());
    let sum = tape.add(a, k).unwrap();
    let lhs = blk.value_head(&mut tape, &mut binder, sum).unwrap();
    let ra = blk.value_head(&mut tape, &mut binder, a).unwrap();
    let rk = blk.value_head(&mut tape, &mut binder, k).unwrap();
    for i in 0..tape.value(lhs).numel() {
        assert!((tape.data(lhs)[i] - tape.data(ra)[i] - tape.data(rk)[i]).abs() < 1e-10);
    }
}

#[test]
fn variants_choose_their_attention_inputs() {
    let slices = [random(&[16, 8], 1), random(&[16, 8], 2), random(&[16, 8], 3)];
    let all = random(&[16, 8], 4);
    for (variant, qk_width, adds_key) in [(Variant::Satr, 16, true), (Variant::ValueEnh, 24, true), (Variant::Naive, 24, false)] {
        let mut store = ParamStore::new();
        let blk = SatrStage::new(stage(2), &small_cfg(variant), 3, (8, 8), &mut store, 1);
        let mut tape = Tape::new();
        let e = embeddings(&mut tape, &slices, &all);
        let (qk, v) = blk.attention_inputs(&mut tape, &e).unwrap();
        assert_eq!(tape.shape(qk), &[16, qk_width]);
        let want: Vec<f64> =
            all.data().iter().zip(slices[1].data()).map(|(a, k)| if adds_key { a + k } else { *a }).collect();
        assert_eq!(tape.data(v), want.as_slice());
    }
}

#[test]
fn output_resampling_shapes_and_constants() {
    let cfg = small_cfg(Variant::Satr);
    for side in [4, 8, 12] {
        let mut store = ParamStore::new();
        let blk = SatrStage::new(stage(3), &cfg, 3, (side, side), &mut store, 2);
        zero_biases(&mut store);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let row = random(&[1, 8], 3);
        let tokens = Tensor::from_fn(&[16, 8], |i| row.data()[i % 8]);
        let x = tape.constant(tokens.clone());
        let y = blk.satr_output(&mut tape, &mut binder, x).unwrap();
        assert_eq!(tape.shape(y), &[3, side, side]);
        for ch in 0..3 {
            let plane = &tape.data(y)[ch * side * side..(ch + 1) * side * side];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
        if side == 4 {
            // Identity resize: the output is the projection of the token grid.
            let w = store.get(blk.project_params().weight);
            let x = tape.constant(random(&[16, 8], 9));
            let y = blk.satr_output(&mut tape, &mut binder, x).unwrap();
            let tok = tape.data(x);
            for ch in 0..3 {
                for t in 0..16 {
                    let want: f64 = (0..8).map(|j| w.data()[ch * 8 + j] * tok[t * 8 + j]).sum();
                    assert!((tape.data(y)[ch * 16 + t] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn hybrid_fusion_selector_and_averaging_kernels() {
    let c = 3;
    let mut store = ParamStore::new();
    let conv = hybrid_params(&mut store, "h", c);
    let a = random(&[c, 5, 5], 1);
    let b = random(&[c, 5, 5], 2);
    let run = |store: &ParamStore, a: &Tensor, b: &Tensor| {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, false);
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let z = hybrid_fuse(&mut tape, &mut binder, conv, x, y).unwrap();
        tape.value(z).clone()
    };
    let set = |store: &mut ParamStore, satr: f64, fuse: f64| {
        let w = store.get_mut(conv.weight).data_mut();
        for o in 0..c {
            for i in 0..c {
                let eye = if o == i { 1.0 } else { 0.0 };
                w[(o * c + i) * 2] = satr * eye;
                w[(o * c + i) * 2 + 1] = fuse * eye;
            }
        }
    };
    set(&mut store, 0.0, 1.0);
    assert_eq!(run(&store, &a, &b), b);
    set(&mut store, 1.0, 0.0);
    assert_eq!(run(&store, &a, &b), a);
    set(&mut store, 0.5, 0.5);
    let out = run(&store, &Tensor::full(&[c, 5, 5], 2.0), &Tensor::full(&[c, 5, 5], 5.0));
    assert!(out.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));

    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, false);
    let x = tape.constant(a);
    let y = tape.constant(Tensor::zeros(&[c, 4, 5]));
    assert!(hybrid_fuse(&mut tape, &mut binder, conv, x, y).is_err());
}

fn toy_model(variant: Variant) -> ModelConfig {
    let mut m = ModelConfig {
        backbone: BackboneConfig { channels: vec![4, 6, 8], share_slice_weights: false, fpn_width: 5 },
        satr: small_cfg(variant),
        ..ModelConfig::default()
    };
    m.satr.stages = vec![true; 3];
    m
}

#[test]
fn baseline_variant_is_the_fusion_path_bit_for_bit() {
    let cfg = toy_model(Variant::Baseline);
    let det = Detector::new(&cfg, 1, 32, 32, 3).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new(det.params(), false);
    let x = tape.constant(random(&[3, 1, 32, 32], 1));
    let out = det.forward(&mut tape, &mut binder, x).unwrap();
    for (f, l) in out.stages.iter().zip(&out.fpn_inputs) {
        let fused = det.backbone().fuse_slices(&mut tape, &mut binder, f).unwrap();
        assert_eq!(tape.value(fused), tape.value(*l));
    }
    assert!(out.attention.iter().all(Option::is_none));
    assert!(det.params().names().iter().all(|n| !n.starts_with("satr.")));
}

#[test]
fn fpn_inputs_keep_baseline_shapes_for_every_radius_and_size() {
    for radius in 1..=3 {
        for side in [32, 64] {
            let sat = Detector::new(&toy_model(Variant::Satr), radius, side, side, 1).unwrap();
            let base = Detector::new(&toy_model(Variant::Baseline), radius, side, side, 1).unwrap();
            let x = random(&[2 * radius + 1, 1, side, side], 4);
            let shapes = |det: &Detector| {
                let mut tape = Tape::new();
                let mut binder = Binder::new(det.params(), false);
                let xv = tape.constant(x.clone());
                let out = det.forward(&mut tape, &mut binder, xv).unwrap();
                out.fpn_inputs.iter().map(|v| tape.shape(*v).to_vec()).collect::<Vec<_>>()
            };
            let want: Vec<Vec<usize>> =
                [(4, 2), (6, 4), (8, 8)].iter().map(|&(c, r)| vec![c, side / r, side / r]).collect();
            assert_eq!(shapes(&sat), want);
            assert_eq!(shapes(&base), want);
        }
    }
}

#[test]
fn unknown_variant_names_are_rejected() {
    assert!("value-enh".parse::<Variant>().is_ok());
    assert!("value_enh".parse::<Variant>().is_ok());
    assert!(matches!("transformer".parse::<Variant>(), Err(satr_core::CoreError::Config(_))));
}

#[test]
fn invalid_head_split_is_a_configuration_error() {
    let cfg = SatrConfig { embed_dim: 10, heads: 3, stages: vec![true], ..SatrConfig::default() };
    assert!(cfg.validate(1, 1).is_err());
    let cfg = SatrConfig { stages: vec![true], ..SatrConfig::default() };
    assert!(cfg.validate(3, 1).is_err(), "stage flag count must match the backbone");
    assert!(cfg.validate(1, 0).is_err(), "satr needs adjacent slices");
}
