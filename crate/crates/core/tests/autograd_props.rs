use ndarray::Array2;
use proptest::prelude::*;
use protodisent::autograd::Tape;
use protodisent::disent::{grl, total_loss, DisentLossParts};
use protodisent::params::ParamStore;

/// `sum(tanh(y) * w)` and its gradient with respect to `y`.
fn downstream(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (y.mapv(f64::tanh) * w).sum()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_reversal_is_identity_forward_and_negated_backward(
        (s, w) in (1usize..4, 1usize..9).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c))),
        li in 0usize..3,
    ) {
        let lambda = [0.0, 0.1, 1.0][li];
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(s.clone());
        let y = grl(&mut tape, x, lambda);
        prop_assert!(tape.value(y).iter().zip(s.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let t = tape.tanh(y);
        let wv = tape.constant(w.clone());
        let p = tape.mul(t, wv);
        let loss = tape.sum(p);
        let (_, adj) = tape.backward_full(loss);
        let up = adj[x.index()].clone().unwrap();
        let down = adj[y.index()].clone().unwrap();
        let h = 1e-4;
        for ((i, j), &g_up) in up.indexed_iter() {
            prop_assert!((g_up + lambda * down[[i, j]]).abs() <= 1e-6);
            let mut plus = s.clone();
            plus[[i, j]] += h;
            let mut minus = s.clone();
            minus[[i, j]] -= h;
            let fd = (downstream(&plus, &w) - downstream(&minus, &w)) / (2.0 * h);
            prop_assert!((down[[i, j]] - fd).abs() <= 1e-3 * fd.abs().max(1e-3));
            prop_assert!((g_up + lambda * fd).abs() <= 1e-3 * (lambda * fd).abs().max(1e-3));
        }
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn total_loss_is_linear_in_the_weights(
        l_tts in 0.0f64..20.0,
        l_dys in 0.0f64..20.0,
        l_adv in 0.0f64..20.0,
        alpha in 0.0f64..5.0,
        beta in 0.0f64..5.0,
        lambda_grl in 0.0f64..2.0,
        c in 0.0f64..3.0,
    ) {
        let parts = DisentLossParts { l_tts, l_dys, l_adv, alpha, beta, lambda_grl };
        let expected = l_tts + alpha * l_dys + beta * l_adv;
        let got = total_loss(&parts).unwrap();
        prop_assert!(rel_close(got, expected, 1e-9));
        // Moving one weight moves the total by that weight's part alone.
        let moved = total_loss(&DisentLossParts { alpha: alpha + c, ..parts }).unwrap();
        prop_assert!(rel_close(moved - got, c * l_dys, 1e-9) || (moved - got - c * l_dys).abs() < 1e-12);
        let moved = total_loss(&DisentLossParts { beta: beta + c, ..parts }).unwrap();
        prop_assert!(rel_close(moved - got, c * l_adv, 1e-9) || (moved - got - c * l_adv).abs() < 1e-12);
        // The reversal strength never enters the scalar total.
        prop_assert_eq!(total_loss(&DisentLossParts { lambda_grl: 0.0, ..parts }).unwrap(), got);
        let unit = DisentLossParts { alpha: 1.0, beta: 1.0, ..parts };
        prop_assert_eq!(total_loss(&unit).unwrap(), l_tts + l_dys + l_adv);
    }
}
