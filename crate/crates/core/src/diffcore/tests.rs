use super::*;
use crate::error::Error;

fn leaf(tape: &mut Tape, shape: &[usize], data: &[f64], grad: bool) -> Var {
    let mut t = Tensor::new(shape, data.to_vec()).unwrap();
    t.set_requires_grad(grad);
    tape.leaf(&t)
}

#[test]
fn matmul_by_hand() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
    let b = leaf(&mut tape, &[2, 1], &[1.0, 1.0], false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c), &[3.0, 7.0]);
}

#[test]
fn softmax_symmetric_and_mean() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2], &[0.0, 0.0], false);
    let s = tape.softmax(a);
    assert_eq!(tape.value(s), &[0.5, 0.5]);
    let v = leaf(&mut tape, &[3], &[2.0, 4.0, 6.0], false);
    let m = tape.mean(v).unwrap();
    assert_eq!(tape.scalar_value(m), 4.0);
}

#[test]
fn matmul_shape_mismatch_names_primitive() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 3], &[0.0; 6], false);
    let b = leaf(&mut tape, &[2, 1], &[0.0; 2], false);
    match tape.matmul(a, b) {
        Err(Error::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[2, 1]"));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn add_broadcasts_leading_dims_only() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
    let b = leaf(&mut tape, &[3], &[10.0, 20.0, 30.0], true);
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    assert_eq!(tape.grad(a).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 3], &[0.0; 6], false);
    let bad = leaf(&mut tape, &[2], &[0.0; 2], false);
    assert!(tape.add(a, bad).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut x = Tensor::vector(&[1.0, 2.0, 3.0]).requiring_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    tape.accumulate_into(v, &mut x).unwrap();
    assert_eq!(x.grad().unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_loss_is_a_noop() {
    let mut tape = Tape::new();
    let c = leaf(&mut tape, &[], &[3.0], false);
    let d = tape.scale(c, 2.0);
    tape.backward(d).unwrap();
    assert!(tape.grad(c).is_none());
}

#[test]
fn non_scalar_loss_and_double_backward_rejected() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2], &[1.0, 2.0], true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let x = leaf(&mut tape, &[2], &[1.0, 2.0], true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
}

#[test]
fn constant_only_ops_are_not_recorded_as_operations() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2], &[1.0, 2.0], false);
    let b = tape.exp(a);
    assert!(!tape.requires_grad(b));
    let w = leaf(&mut tape, &[2], &[1.0, 2.0], true);
    let c = tape.mul(w, b).unwrap();
    assert!(tape.requires_grad(c));
}

#[test]
fn sgd_step_examples() {
    let mut p = Tensor::vector(&[1.0]).requiring_grad();
    p.accumulate_grad(&[0.5]).unwrap();
    sgd_step(&mut [&mut p], 0.1).unwrap();
    assert_eq!(p.data(), &[0.95]);
    assert!(p.grad().is_none());

    let mut p = Tensor::vector(&[1.0, -2.0]).requiring_grad();
    p.accumulate_grad(&[3.0, 4.0]).unwrap();
    sgd_step(&mut [&mut p], 0.0).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0]);

    let mut q = Tensor::vector(&[1.0]);
    assert!(matches!(sgd_step(&mut [&mut q], 0.1), Err(Error::Contract(_))));
}

#[test]
fn two_sgd_steps_on_quadratic() {
    let mut x = Tensor::vector(&[1.0]).requiring_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.accumulate_into(v, &mut x).unwrap();
        sgd_step(&mut [&mut x], 0.1).unwrap();
    }
    assert!((x.data()[0] - 0.64).abs() < 1e-15);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, &[2, 3], &[1.0, -7.0, 30.0, 0.1, 0.2, 0.3], false);
    let s = tape.softmax(a);
    for row in tape.value(s).chunks(3) {
        assert!(row.iter().all(|p| *p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    assert_eq!(Tensor::scalar(1.0).shape(), &[] as &[usize]);
}
