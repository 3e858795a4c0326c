use audiocap_nn::{Graph, Tensor};

#[test]
fn max_ops_and_relu_propagate_nan() {
    let mut g = Graph::detached();
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![f64::NAN, 1.0, 2.0, -1.0]));
    let p = g.max_pool2(x);
    assert!(g.value(p).data()[0].is_nan());
    let r = g.relu(x);
    assert!(g.value(r).data()[0].is_nan());
    assert_eq!(&g.value(r).data()[1..], &[1.0, 2.0, 0.0]);
    let y = g.constant(Tensor::new(vec![3], vec![1.0, f64::NAN, 3.0]));
    let m = g.max_axis(y, 0);
    assert!(g.value(m).to_scalar().is_nan());
}
