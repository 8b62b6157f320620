use satr_autodiff::{Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_identity_and_row_sums() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    let r = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.shape(r), &[2, 1]);
    assert_eq!(tape.data(r), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::Dimension { .. }));
    assert!(msg.contains("[2, 3] × [2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.data(y), &[0.5, 0.5]);
    let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let y = tape.softmax_lastdim(x).unwrap();
    close(tape.data(y), &[1.0 / 3.0; 3], 1e-15);
    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert!(tape.value(y).is_finite());
    close(tape.data(y), &[1.0, 0.0], 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::ones(&[2]));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[5.0, 5.0]));
    let y = tape.layer_norm(x, one, zero, 1e-5).unwrap();
    close(tape.data(y), &[0.0, 0.0], 1e-12);

    let x = tape.constant(t(&[2], &[0.0, 2.0]));
    let y = tape.layer_norm(x, one, zero, 1e-12).unwrap();
    close(tape.data(y), &[-1.0, 1.0], 1e-10);

    let sevens = tape.constant(t(&[2], &[7.0, 7.0]));
    let y = tape.layer_norm(x, zero, sevens, 1e-5).unwrap();
    assert_eq!(tape.data(y), &[7.0, 7.0]);

    assert!(matches!(tape.layer_norm(x, one, zero, 0.0), Err(TensorError::Usage(_))));
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 100.0, -100.0]));
    let y = tape.gelu(x);
    let d = tape.data(y);
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 100.0).abs() < 1e-9);
    assert!(d[2].abs() < 1e-9);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 3, 4], 3.0));
    let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4]);
    assert!(tape.data(y).iter().all(|&v| v == 6.0));

    let w0 = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let b5 = tape.constant(Tensor::full(&[1], 5.0));
    let y = tape.conv2d(x, w0, b5, 1, 0).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 5.0));
}

#[test]
fn conv2d_empty_output_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv3d_selector_and_average() {
    // x: [1 channel, 3 depth, 2, 2] with depth planes a=1, b=2, c=6
    let planes = [1.0, 2.0, 6.0];
    let x = Tensor::from_fn(&[1, 3, 2, 2], |i| planes[i / 4]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let b = tape.constant(Tensor::zeros(&[1]));
    let sel = tape.constant(t(&[1, 1, 3, 1, 1], &[1.0, 0.0, 0.0]));
    let y = tape.conv3d(xv, sel, b, [1, 1, 1]).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.data(y), &[1.0; 4]);
    let avg = tape.constant(t(&[1, 1, 3, 1, 1], &[1.0 / 3.0; 3]));
    let y = tape.conv3d(xv, avg, b, [1, 1, 1]).unwrap();
    close(tape.data(y), &[3.0; 4], 1e-15);
}

#[test]
fn adaptive_pool_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 7, 5], 1.25));
    let y = tape.adaptive_avg_pool2d(c, 3, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 2]);
    assert!(tape.data(y).iter().all(|&v| v == 1.25));

    let x = tape.constant(t(
        &[1, 4, 4],
        &[1., 1., 3., 3., 1., 1., 3., 3., 5., 5., 7., 7., 5., 5., 7., 7.],
    ));
    let y = tape.adaptive_avg_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.data(y), &[1.0, 3.0, 5.0, 7.0]);

    assert!(matches!(tape.adaptive_avg_pool2d(x, 5, 2), Err(TensorError::Dimension { .. })));
}

#[test]
fn grid_pool_replicates_when_finer_than_input() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.grid_pool2d(x, 4, 4).unwrap();
    assert_eq!(
        tape.data(y),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
}

#[test]
fn bilinear_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 3, 2], -2.5));
    let y = tape.bilinear_resize(c, 7, 5).unwrap();
    assert!(tape.data(y).iter().all(|&v| (v + 2.5).abs() < 1e-15));

    let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let y = tape.bilinear_resize(x, 3, 3).unwrap();
    assert_eq!(tape.data(y), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    let y = tape.bilinear_resize(x, 2, 2).unwrap();
    assert_eq!(tape.data(y), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn shape_primitives_round_trip() {
    let a = Tensor::from_fn(&[2, 3], |i| i as f64);
    let b = Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let s = tape.stack(&[av, bv]).unwrap();
    assert_eq!(tape.shape(s), &[2, 2, 3]);
    let a2 = tape.select(s, 0, 0).unwrap();
    let b2 = tape.select(s, 0, 1).unwrap();
    assert_eq!(tape.value(a2).data(), a.data());
    assert_eq!(tape.value(b2).data(), b.data());

    let c = tape.concat(&[av, bv], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 6]);
    let back = tape.narrow(c, 1, 3, 3).unwrap();
    assert_eq!(tape.data(back), b.data());

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let sum = tape.add(av, z).unwrap();
    assert_eq!(tape.data(sum), a.data());

    let r = tape.reshape(av, &[3, 2]).unwrap();
    assert_eq!(tape.data(r), a.data());
    let r2 = tape.reshape(r, &[2, 3]).unwrap();
    assert_eq!(tape.value(r2).data(), a.data());
    assert_eq!(tape.shape(r2), a.shape());

    let p = tape.permute(av, &[1, 0]).unwrap();
    let tr = tape.transpose(av).unwrap();
    assert_eq!(tape.data(p), tape.data(tr));

    assert!(tape.concat(&[av, r], 0).is_err());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5).with_requires_grad(true));
    let y = tape.sum(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.sum(sq);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    assert_eq!(tape.value(x).grad().unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]).with_requires_grad(true));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(TensorError::Usage(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]).with_requires_grad(true));
    let c = tape.constant(Tensor::full(&[3], 2.0));
    let p = tape.mul(x, c).unwrap();
    let y = tape.sum(p);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0; 3]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
    let x = Tensor::zeros(&[2, 3]);
    assert!(x.clone().reshape(&[4]).is_err());
    assert_eq!(x.reshape(&[6]).unwrap().shape(), &[6]);
}
