use std::rc::Rc;

use modalfuse::tensor::{gradcheck, AttentionLayout, SequenceSpan, Tape, Tensor, GRADCHECK_STEP};
use modalfuse::Error;
use proptest::prelude::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn value(shape: &[usize], data: &[f64], f: impl Fn(&mut Tape<f64>, modalfuse::tensor::Var) -> modalfuse::tensor::Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(&t64(shape, data));
    let y = f(&mut tape, x);
    tape.value(y).to_vec()
}

#[test]
fn matmul_identity_and_oracle() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.leaf(&Tensor::eye(2));
    let a = tape.leaf(&t64(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.leaf(&t64(&[2, 2], &[5., 6., 7., 8.]));
    let ia = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(ia), &[1., 2., 3., 4.]);
    let ab = tape.matmul(a, b).unwrap();
    // brute-force triple loop
    let (av, bv) = ([1., 2., 3., 4.], [5., 6., 7., 8.]);
    let mut want = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                want[i * 2 + j] += av[i * 2 + k] * bv[k * 2 + j];
            }
        }
    }
    assert_eq!(want, [19., 22., 43., 50.]);
    assert_eq!(tape.value(ab), &want);

    let z = tape.leaf(&Tensor::zeros(&[2, 3]));
    let any = tape.leaf(&t64(&[3, 4], &(0..12).map(|v| v as f64 * 0.7 - 2.0).collect::<Vec<_>>()));
    let zz = tape.matmul(z, any).unwrap();
    assert_eq!(tape.shape(zz), &[2, 4]);
    assert!(tape.value(zz).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]));
    let b = tape.leaf(&Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let y = value(&[3], &[0., 0., 0.], |t, x| t.softmax_lastdim(x));
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = value(&[2], &[f64::NEG_INFINITY, 0.], |t, x| t.softmax_lastdim(x));
    assert_eq!(y, vec![0.0, 1.0]);
    let y = value(&[3], &[1., 2., 3.], |t, x| t.softmax_lastdim(x));
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    for (i, v) in y.iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
    }
    let y = value(&[2], &[f64::NEG_INFINITY; 2], |t, x| t.softmax_lastdim(x));
    assert_eq!(y, vec![0.0, 0.0]);
}

#[test]
fn rmsnorm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.leaf(&Tensor::full(&[4], 1.0));
    let g = tape.leaf(&Tensor::full(&[4], 1.0));
    let y = tape.rmsnorm(ones, g).unwrap();
    for v in tape.value(y) {
        assert!((v - 1.0).abs() < 1e-5);
    }
    let z = tape.leaf(&Tensor::zeros(&[2, 4]));
    let y = tape.rmsnorm(z, g).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
    let x = tape.leaf(&t64(&[2], &[3., 4.]));
    let g2 = tape.leaf(&Tensor::full(&[2], 1.0));
    let y = tape.rmsnorm(x, g2).unwrap();
    let r = (12.5f64 + 1e-5).sqrt();
    assert!((tape.value(y)[0] - 3.0 / r).abs() < 1e-14);
    assert!((tape.value(y)[1] - 4.0 / r).abs() < 1e-14);
}

#[test]
fn cross_entropy_examples() {
    let v = 5;
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(&Tensor::zeros(&[3, v]));
    let ce = tape.cross_entropy_logits(l, &[0, 3, 4], &[true; 3]).unwrap();
    assert!((tape.value(ce)[0] - (v as f64).ln()).abs() < 1e-12);

    let mut onehot = vec![0.0; v];
    onehot[2] = 30.0;
    let l = tape.leaf(&t64(&[1, v], &onehot));
    let ce = tape.cross_entropy_logits(l, &[2], &[true]).unwrap();
    assert!(tape.value(ce)[0] < 1e-12);

    // 2×3 against direct exp-normalize at double precision
    let logits = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
    let targets = [2usize, 0];
    let l = tape.leaf(&t64(&[2, 3], &logits));
    let ce = tape.cross_entropy_logits(l, &targets, &[true, true]).unwrap();
    let mut want = 0.0;
    for r in 0..2 {
        let row = &logits[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        want += -(row[targets[r]].exp() / z).ln();
    }
    want /= 2.0;
    assert!((tape.value(ce)[0] - want).abs() < 1e-14);
}

#[test]
fn cross_entropy_all_masked_is_exact_zero_without_grad() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(&t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad());
    let ce = tape.cross_entropy_logits(l, &[0, 1], &[false, false]).unwrap();
    assert_eq!(tape.value(ce), &[0.0]);
    let grads = tape.backward(ce).unwrap();
    assert!(grads.get(l).is_none());
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(&Tensor::zeros(&[1, 3]));
    assert!(tape.cross_entropy_logits(l, &[3], &[true]).is_err());
    // masked rows are not validated
    assert!(tape.cross_entropy_logits(l, &[3], &[false]).is_ok());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::full(&[2, 3], 0.3).with_grad());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[2], &[1., 2.]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2., 4.]);

    assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn repeated_backward_accumulates_into_tensor() {
    let mut p = t64(&[2], &[1., 2.]).with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap().accumulate_into(x, &mut p);
    }
    assert_eq!(p.grad().unwrap(), &[4., 8.]);
    p.zero_grad();
    assert!(p.grad().is_none());
}

#[test]
fn gradcheck_of_sum_is_tight() {
    let x = t64(&[3, 2], &[0.1, -0.4, 2.0, 0.0, 1.5, -3.0]);
    let err = gradcheck(|t, v| Ok(t.sum(v)), &x, GRADCHECK_STEP).unwrap();
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn masked_coordinate_gets_exact_zero_gradient() {
    let x = t64(&[1, 3], &[0.3, -0.2, 0.9]);
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let ce = tape.cross_entropy_logits(v, &[1], &[true]).unwrap();
    let g = tape.backward(ce).unwrap();
    assert!(g.get(v).unwrap().iter().all(|g| *g != 0.0));

    // attention: key 2 is invisible to every query
    let layout = Rc::new(AttentionLayout {
        spans: vec![SequenceSpan {
            start: 0,
            len: 3,
            allowed: vec![true, false, false, true, true, false, true, true, false],
        }],
        n_heads: 1,
        head_dim: 2,
    });
    let qk = t64(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
    let vals = t64(&[3, 2], &[1.0, -1.0, 0.5, 0.25, 3.0, 7.0]).with_grad();
    let mut tape = Tape::new();
    let q = tape.leaf(&qk);
    let k = tape.leaf(&qk);
    let vv = tape.leaf(&vals);
    let o = tape.attention(q, k, vv, layout).unwrap();
    let s = tape.sum(o);
    let g = tape.backward(s).unwrap();
    assert_eq!(&g.get(vv).unwrap()[4..6], &[0.0, 0.0]);
}

fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gradcheck_matmul(a in small_vec(6), b in small_vec(12)) {
        let bt = t64(&[3, 4], &b);
        let err = gradcheck(|t, x| {
            let w = t.leaf(&bt);
            let y = t.matmul(x, w)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }, &t64(&[2, 3], &a), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
        let at = t64(&[2, 3], &a);
        let err = gradcheck(|t, x| {
            let w = t.leaf(&at);
            let y = t.matmul(w, x)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }, &t64(&[3, 4], &b), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_softmax(x in small_vec(8), w in small_vec(8)) {
        let wt = t64(&[2, 4], &w);
        let err = gradcheck(|t, v| {
            let y = t.softmax_lastdim(v);
            let c = t.leaf(&wt);
            let p = t.mul(y, c)?;
            Ok(t.sum(p))
        }, &t64(&[2, 4], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_rmsnorm(x in small_vec(8), g in small_vec(4), w in small_vec(8)) {
        let gt = t64(&[4], &g);
        let wt = t64(&[2, 4], &w);
        let err = gradcheck(|t, v| {
            let gain = t.leaf(&gt);
            let y = t.rmsnorm(v, gain)?;
            let c = t.leaf(&wt);
            let p = t.mul(y, c)?;
            Ok(t.sum(p))
        }, &t64(&[2, 4], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
        let xt = t64(&[2, 4], &x);
        let err = gradcheck(|t, gain| {
            let xv = t.leaf(&xt);
            let y = t.rmsnorm(xv, gain)?;
            let c = t.leaf(&wt);
            let p = t.mul(y, c)?;
            Ok(t.sum(p))
        }, &gt, GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_silu_and_gate(x in small_vec(6), y in small_vec(6)) {
        let yt = t64(&[2, 3], &y);
        let err = gradcheck(|t, v| {
            let s = t.silu(v);
            let o = t.leaf(&yt);
            let p = t.mul(s, o)?;
            Ok(t.sum(p))
        }, &t64(&[2, 3], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_cross_entropy(x in small_vec(12), t0 in 0usize..4, t1 in 0usize..4, t2 in 0usize..4, m in any::<[bool; 3]>()) {
        let err = gradcheck(|t, v| t.cross_entropy_logits(v, &[t0, t1, t2], &m),
            &t64(&[3, 4], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_mse_and_sub(x in small_vec(6), y in small_vec(6)) {
        let yt = t64(&[3, 2], &y);
        let err = gradcheck(|t, v| {
            let o = t.leaf(&yt);
            let d = t.sub(o, v)?;
            let s = t.scale(d, 0.5);
            let z = t.leaf(&Tensor::zeros(&[3, 2]));
            t.mse(s, z)
        }, &t64(&[3, 2], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_rope(x in small_vec(12), w in small_vec(12)) {
        let wt = t64(&[3, 4], &w);
        let pos: Rc<[usize]> = Rc::from(vec![0usize, 3, 7]);
        let err = gradcheck(|t, v| {
            let y = t.rope(v, pos.clone(), 2, 2)?;
            let c = t.leaf(&wt);
            let p = t.mul(y, c)?;
            Ok(t.sum(p))
        }, &t64(&[3, 4], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_rows_and_concat(x in small_vec(8), w in small_vec(12)) {
        let wt = t64(&[4, 3], &w);
        let err = gradcheck(|t, v| {
            let a = t.gather_rows(v, Rc::from(vec![0usize, 2]))?;
            let b = t.gather_rows(v, Rc::from(vec![3usize, 1]))?;
            let a2 = t.mul(a, a)?;
            let m = t.merge_rows(vec![(a2, Rc::from(vec![1usize, 2])), (b, Rc::from(vec![0usize, 3]))], 4)?;
            let repeated = t.gather_rows(v, Rc::from(vec![1usize, 1, 0, 2]))?;
            let m = t.add(m, repeated)?;
            let narrow = t.leaf(&Tensor::full(&[4, 1], 1.0));
            let c = t.concat_cols(m, narrow)?;
            let cw = t.leaf(&wt);
            let p = t.mul(c, cw)?;
            Ok(t.sum(p))
        }, &t64(&[4, 2], &x), GRADCHECK_STEP).unwrap();
        prop_assert!(err <= TOL, "{}", err);
    }

    #[test]
    fn gradcheck_attention(q in small_vec(16), k in small_vec(16), v in small_vec(16), w in small_vec(16)) {
        // two sequences of length 2, two heads of width 2
        let layout = Rc::new(AttentionLayout {
            spans: vec![
                SequenceSpan { start: 0, len: 2, allowed: vec![true, false, true, true] },
                SequenceSpan { start: 2, len: 2, allowed: vec![true, true, true, true] },
            ],
            n_heads: 2,
            head_dim: 2,
        });
        let (qt, kt, vt, wt) = (t64(&[4, 4], &q), t64(&[4, 4], &k), t64(&[4, 4], &v), t64(&[4, 4], &w));
        for which in 0..3 {
            let l = layout.clone();
            let err = gradcheck(|t, x| {
                let mut ins = [t.leaf(&qt), t.leaf(&kt), t.leaf(&vt)];
                ins[which] = x;
                let o = t.attention(ins[0], ins[1], ins[2], l.clone())?;
                let c = t.leaf(&wt);
                let p = t.mul(o, c)?;
                Ok(t.sum(p))
            }, [&qt, &kt, &vt][which], GRADCHECK_STEP).unwrap();
            prop_assert!(err <= TOL, "input {} err {}", which, err);
        }
    }

    #[test]
    fn softmax_is_a_simplex(x in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let y = value(&[x.len()], &x, |t, v| t.softmax_lastdim(v));
        prop_assert!(y.iter().all(|&p| p >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn forward_ops_are_deterministic(x in prop::collection::vec(-3.0f32..3.0, 12)) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(&Tensor::new(vec![3, 4], x.clone()).unwrap());
            let g = tape.leaf(&Tensor::full(&[4], 1.5f32));
            let n = tape.rmsnorm(a, g).unwrap();
            let s = tape.softmax_lastdim(n);
            let w = tape.leaf(&Tensor::new(vec![4, 3], x.clone()).unwrap());
            let m = tape.matmul(s, w).unwrap();
            tape.value(m).to_vec()
        };
        let (r1, r2) = (run(), run());
        prop_assert!(r1.iter().zip(&r2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
