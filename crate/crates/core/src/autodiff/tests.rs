use super::*;
use alloc::vec::Vec;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor4D {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor4D::from_fn(shape, |_, _, _, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

/// Reduces a tensor to a scalar without symmetries that would hide gradient
/// errors: a fixed random channel projection, an offset, a square and a sum.
fn probe(tape: &mut Tape, y: Var) -> Var {
    let s = tape.shape(y);
    if s.is_scalar() {
        return y;
    }
    let w = tape.constant(rand_tensor(Shape::new(1, s.c, 1, 1), 99));
    let p = tape.conv1x1(y, w, None).unwrap();
    let p = tape.offset(p, 0.3);
    let sq = tape.square(p);
    tape.sum(sq)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences (step 1e-3) against the tape gradient, per input.
fn check_gradients(inputs: Vec<Tensor4D>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |inputs: &[Tensor4D]| -> (f32, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = build(&mut tape, &vars);
        let loss = probe(&mut tape, y);
        (tape.value(loss).item(), tape, vars, loss)
    };
    let (_, tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-3f32;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get_or_zeros(vars[k], input.shape())
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let d = (eval(&plus).0 as f64 - eval(&minus).0 as f64) / (2.0 * h as f64);
            numeric.push(d);
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&numeric).max(norm(&analytic)).max(1e-6);
        let rel = norm(&diff) / denom;
        assert!(rel <= 1e-2, "input {k}: relative error {rel}\n analytic {analytic:?}\n numeric {numeric:?}");
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(rand_tensor(Shape::new(2, 3, 2, 2), 1));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn relu_negative_input_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4D::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| -0.1 - (c + h + w) as f32));
    let r = tape.relu(x);
    let s = tape.sum(r);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4D::zeros(Shape::new(1, 1, 1, 2)));
    let r = tape.relu(x);
    let s = tape.sum(r);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4D::zeros(Shape::new(1, 2, 1, 1)));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn diamond_graph_accumulates() {
    // a = 2x, b = x^2, loss = sum(a + b)  =>  dloss/dx = 2 + 2x
    let mut tape = Tape::new();
    let xv = Tensor4D::from_vec(Shape::new(1, 1, 1, 3), alloc::vec![-1.0, 0.5, 3.0]).unwrap();
    let x = tape.param(xv.clone());
    let a = tape.scale(x, 2.0);
    let b = tape.square(x);
    let c = tape.add(a, b).unwrap();
    let loss = tape.sum(c);
    let g = tape.backward(loss).unwrap();
    let expect: Vec<f32> = xv.data().iter().map(|v| 2.0 + 2.0 * v).collect();
    assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
}

#[test]
fn shared_input_in_binary_op() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor4D::full(Shape::new(1, 1, 1, 2), 1.5));
    let y = tape.add(x, x).unwrap();
    let loss = tape.sum(y);
    assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn conv1x1_weight_gradient_of_sum() {
    // d/dW sum(W x) = sum over positions of x, per input channel.
    let x = rand_tensor(Shape::new(2, 3, 2, 2), 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.param(rand_tensor(Shape::new(4, 3, 1, 1), 4));
    let y = tape.conv1x1(xv, w, None).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    let gw = g.get(w).unwrap();
    for ci in 0..3 {
        let total: f32 = (0..2).map(|n| x.plane(n, ci).iter().sum::<f32>()).sum();
        for co in 0..4 {
            assert!((gw[(co, ci, 0, 0)] - total).abs() < 1e-5);
        }
    }
    assert!(g.get(xv).is_none(), "constants carry no gradient");
}

#[test]
fn fd_conv1x1() {
    check_gradients(
        alloc::vec![
            rand_tensor(Shape::new(2, 3, 3, 2), 5),
            rand_tensor(Shape::new(4, 3, 1, 1), 6),
            rand_tensor(Shape::new(1, 4, 1, 1), 7),
        ],
        |t, v| t.conv1x1(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn fd_depthwise() {
    check_gradients(
        alloc::vec![
            rand_tensor(Shape::new(2, 3, 4, 3), 8),
            rand_tensor(Shape::new(3, 1, 3, 3), 9),
            rand_tensor(Shape::new(1, 3, 1, 1), 10),
        ],
        |t, v| t.depthwise3x3(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn fd_batchnorm_train() {
    check_gradients(
        alloc::vec![
            rand_tensor(Shape::new(3, 2, 2, 3), 11),
            rand_tensor(Shape::new(1, 2, 1, 1), 12),
            rand_tensor(Shape::new(1, 2, 1, 1), 13),
        ],
        |t, v| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
    );
}

#[test]
fn fd_batchnorm_eval() {
    check_gradients(
        alloc::vec![
            rand_tensor(Shape::new(2, 2, 2, 2), 14),
            rand_tensor(Shape::new(1, 2, 1, 1), 15),
            rand_tensor(Shape::new(1, 2, 1, 1), 16),
        ],
        |t, v| t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5).unwrap(),
    );
}

#[test]
fn fd_activations_and_pools() {
    let x = rand_tensor(Shape::new(2, 2, 4, 4), 17).map(|v| v * 8.0);
    check_gradients(alloc::vec![x.clone()], |t, v| t.relu6(v[0]));
    check_gradients(alloc::vec![x.clone()], |t, v| t.relu(v[0]));
    check_gradients(alloc::vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
    check_gradients(alloc::vec![x], |t, v| t.avg_pool2(v[0]).unwrap());
}

#[test]
fn fd_broadcast_ops() {
    check_gradients(
        alloc::vec![rand_tensor(Shape::new(2, 3, 2, 3), 18), rand_tensor(Shape::new(2, 1, 2, 3), 19)],
        |t, v| t.mul_spatial(v[0], v[1]).unwrap(),
    );
    check_gradients(
        alloc::vec![rand_tensor(Shape::new(2, 3, 2, 3), 20), rand_tensor(Shape::new(2, 3, 1, 1), 21)],
        |t, v| t.add_broadcast(v[0], v[1]).unwrap(),
    );
}

#[test]
fn fd_cross_entropy_and_scalars() {
    check_gradients(alloc::vec![rand_tensor(Shape::new(3, 4, 1, 1), 22)], |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 1]).unwrap()
    });
    check_gradients(alloc::vec![rand_tensor(Shape::new(1, 1, 1, 1), 23)], |t, v| {
        let a = t.scale(v[0], -1.7);
        let b = t.offset(a, 0.4);
        let c = t.relu(b);
        t.square(c)
    });
}

#[test]
fn straight_through_uses_soft_derivative() {
    // d sum(z) / dm = sigmoid'((m + d) / tau) / tau with the same noise d.
    let m = Tensor4D::from_vec(Shape::new(1, 1, 1, 4), alloc::vec![-1.3, 0.0, 0.4, 2.0]).unwrap();
    let noise = [0.5f32, -0.2, 0.0, -3.0];
    for tau in [1.0f32, 0.5, 5.0] {
        let mut tape = Tape::new();
        let mv = tape.param(m.clone());
        let z = tape.straight_through(mv, Some(&noise), tau).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        for i in 0..4 {
            let a = (m.data()[i] + noise[i]) as f64 / tau as f64;
            let hard = if a > 0.0 { 1.0 } else { 0.0 };
            assert_eq!(tape.value(z).data()[i], hard);
            // finite differences on the soft function
            let soft = |mm: f64| 1.0 / (1.0 + libm::exp(-(mm + noise[i] as f64) / tau as f64));
            let h = 1e-3;
            let fd = (soft(m.data()[i] as f64 + h) - soft(m.data()[i] as f64 - h)) / (2.0 * h);
            let an = g.get(mv).unwrap().data()[i] as f64;
            assert!((an - fd).abs() <= 1e-2 * fd.abs().max(1e-6), "tau {tau} i {i}: {an} vs {fd}");
        }
    }
}
