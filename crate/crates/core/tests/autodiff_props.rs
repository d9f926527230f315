use depth_inject_core::{grad_check, Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_matches_the_triple_loop(
        (m, k, n) in (1usize..12, 1usize..40, 1usize..12),
        seed in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        let gen = |len: usize, off: usize| (0..len).map(|i| seed[(i + off) % seed.len()] * (1.0 + (i % 7) as f64 * 0.1)).collect::<Vec<_>>();
        let a = Tensor::new(&[m, k], gen(m * k, 0)).unwrap();
        let b = Tensor::new(&[k, n], gen(k * n, 3)).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        prop_assert!(close(tape.value(c).data(), &naive_matmul(&a, &b), 1e-12));

        // d(sum(AB))/dA[i,t] = sum_j B[t,j]
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let ga = g.get(va).unwrap();
        for i in 0..m {
            for t in 0..k {
                let want: f64 = b.row(t).iter().sum();
                prop_assert!((ga.at(i, t) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn broadcast_gradients_fold_the_leading_axis(x in matrix(6, 5), scale in -2.0f64..2.0) {
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let bias = Tensor::vector((0..cols).map(|j| scale * j as f64).collect());
        let mut tape = Tape::new();
        let (vx, vb) = (tape.leaf(x.clone()), tape.leaf(bias.clone()));
        let sum = tape.add(vx, vb).unwrap();
        let prod = tape.mul(vb, sum).unwrap();
        for r in 0..rows {
            for j in 0..cols {
                let want = bias.data()[j] * (x.at(r, j) + bias.data()[j]);
                prop_assert_eq!(tape.value(prod).at(r, j), want);
            }
        }
        let total = tape.sum(prod);
        let g = tape.backward(total).unwrap();
        // d/db_j of sum_r b_j (x_rj + b_j) = sum_r (x_rj + 2 b_j)
        for j in 0..cols {
            let want: f64 = (0..rows).map(|r| x.at(r, j) + 2.0 * bias.data()[j]).sum();
            prop_assert!((g.get(vb).unwrap().data()[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        let scalar = tape.leaf(Tensor::scalar(scale));
        prop_assert!(tape.mul(vx, scalar).is_ok());
        if cols > 1 {
            let wrong = tape.leaf(Tensor::vector(vec![1.0; cols - 1]));
            prop_assert!(tape.add(vx, wrong).is_err());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 9), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let p = tape.softmax(v).unwrap();
        let shifted = tape.leaf(x.map(|e| e + shift));
        let q = tape.softmax(shifted).unwrap();
        let cols = x.shape()[1];
        for (row, qrow) in tape.value(p).data().chunks(cols).zip(tape.value(q).data().chunks(cols)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&e| e > 0.0 && e <= 1.0));
            prop_assert!(close(row, qrow, 1e-12));
        }
        // rows sum to a constant, so the gradient of their total vanishes
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        prop_assert!(g.get(v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn layernorm_without_eps_standardizes_rows(x in matrix(5, 8)) {
        let cols = x.shape()[1];
        prop_assume!(cols >= 2);
        prop_assume!(x.data().chunks(cols).all(|r| r.iter().any(|&e| (e - r[0]).abs() > 1e-3)));
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.layernorm(v, 0.0).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_and_reshape_only_move_entries(x in matrix(7, 7)) {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let t = tape.transpose(v).unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(tape.value(t).at(j, i), x.at(i, j));
            }
        }
        let tt = tape.transpose(t).unwrap();
        prop_assert_eq!(tape.value(tt), &x);
        let flat = tape.reshape(tt, &[r * c]).unwrap();
        prop_assert_eq!(tape.value(flat).data(), x.data());
        prop_assert!(tape.reshape(flat, &[r * c + 1]).is_err());

        let w = tape.constant(Tensor::new(&[r * c], (0..r * c).map(|i| i as f64).collect()).unwrap());
        let weighted = tape.mul(flat, w).unwrap();
        let s = tape.sum(weighted);
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = (0..r * c).map(|i| i as f64).collect();
        prop_assert_eq!(g.get(v).unwrap().data(), &expected[..]);
        prop_assert!(g.get(w).is_none());
    }

    #[test]
    fn backward_is_repeatable(x in matrix(4, 4)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let a = tape.gelu(v);
        let b = tape.softmax(a).unwrap();
        let c = tape.mul(a, b).unwrap();
        let s = tape.mean(c).unwrap();
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        prop_assert_eq!(g1.get(v).unwrap(), g2.get(v).unwrap());
    }

    #[test]
    fn composite_graphs_pass_finite_differences(
        (x, w) in (1usize..5, 1usize..6, 2usize..4).prop_flat_map(|(m, k, n)| (
            prop::collection::vec(-2.0f64..2.0, m * k).prop_map(move |d| Tensor::new(&[m, k], d).unwrap()),
            prop::collection::vec(-2.0f64..2.0, k * n).prop_map(move |d| Tensor::new(&[k, n], d).unwrap()),
        ))
    ) {
        let report = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.gelu(h);
                let h = t.scale(h, 0.5);
                let p = t.softmax(h)?;
                let m = t.reduce_max(p)?;
                let q = t.mul(m, m)?;
                Ok(t.sum(q))
            },
            &[x, w],
            1e-5,
            1e-4,
        )
        .unwrap();
        prop_assert!(report.passed, "max relative error {}", report.max_rel_err);
    }
}

#[test]
fn reduce_max_routes_ties_to_the_first_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 5.0], &[3.0, 0.0]]).unwrap());
    let m = tape.reduce_max(x).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}
