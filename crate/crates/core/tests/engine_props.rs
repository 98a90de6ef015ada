//! Tape properties over random inputs.

use proptest::prelude::*;
use radvl_core::tensor::{Tape, Tensor, Var};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0..4.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// A small network: `sum(tanh(x W) ⊙ c)` and `mean(softmax(x W)²)`.
fn losses(t: &mut Tape, x: Var, w: Var) -> (Var, Var) {
    let h = t.matmul(x, w).unwrap();
    let a = t.tanh(h);
    let s = t.softmax_rows(h).unwrap();
    let s2 = t.square(s);
    let l1 = t.sum(a);
    let l2 = t.mean(s2).unwrap();
    (l1, l2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7)) {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.softmax_rows(v).unwrap();
        for row in t.value(s).data().chunks(7) {
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(x in matrix(3, 4), w in matrix(4, 5)) {
        let grads = |which: u8| {
            let mut t = Tape::new();
            let (xv, wv) = (t.param(x.clone()), t.param(w.clone()));
            let (l1, l2) = losses(&mut t, xv, wv);
            let out = match which {
                1 => l1,
                2 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.backward(out).unwrap();
            (t.grad_tensor(xv), t.grad_tensor(wv))
        };
        let (a, b, both) = (grads(1), grads(2), grads(0));
        for (g, (g1, g2)) in [(&both.0, (&a.0, &b.0)), (&both.1, (&a.1, &b.1))] {
            for ((s, p), q) in g.data().iter().zip(g1.data()).zip(g2.data()) {
                prop_assert!((s - (p + q)).abs() < 1e-12 * (1.0 + s.abs()));
            }
        }
    }

    #[test]
    fn forward_and_backward_are_bit_identical(x in matrix(3, 4), w in matrix(4, 5)) {
        let run = || {
            let mut t = Tape::new();
            let (xv, wv) = (t.param(x.clone()), t.param(w.clone()));
            let (l1, l2) = losses(&mut t, xv, wv);
            let out = t.add(l1, l2).unwrap();
            t.backward(out).unwrap();
            (t.value(out).item().to_bits(), t.grad_tensor(wv))
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
