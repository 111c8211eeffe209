//! Finite-difference oracles for every tape operation and for the full model
//! loss.

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
mod common;

use tempo::backbone::gradcheck::relative_error;
use tempo::backbone::params::ParamGroup;
use tempo::backbone::tape::{Mat, Tape, Var};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Checks d(loss)/d(inputs) of `build` against central differences on every
/// coordinate. `build` receives the input leaves and returns any node; the
/// loss is its weighted sum with fixed random weights.
fn check_op(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |vals: &[Mat], weights: Option<&Mat>| -> (f64, Option<Vec<Mat>>, Mat) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).dim();
        let w = weights.cloned().unwrap_or_else(|| Mat::zeros(shape));
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(out, wv);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
            .collect();
        (tape.scalar(loss), Some(g), w)
    };
    let (_, _, zero_w) = eval(&inputs, None);
    let (r, c) = zero_w.dim();
    let weights = random(r, c, &mut rng);
    let (_, analytic, _) = eval(&inputs, Some(&weights));
    let analytic = analytic.unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let a = analytic[k].as_slice().unwrap()[idx];
            let err = relative_error(a, numeric);
            assert!(err < 1e-6, "input {k} coord {idx}: analytic {a} numeric {numeric} err {err}");
        }
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    let row = random(1, 4, &mut rng);
    let s = random(1, 1, &mut rng) + 1.5;
    check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op(vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
    check_op(vec![a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
    check_op(vec![a.clone(), s.clone()], |t, v| t.add_scalar(v[0], v[1]));
    check_op(vec![a.clone(), s.clone()], |t, v| t.mul_scalar(v[0], v[1]));
    check_op(vec![a.clone(), s.clone()], |t, v| t.div_scalar(v[0], v[1]));
    check_op(vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    check_op(vec![a.clone()], |t, v| t.gelu(v[0]));
    let pos = a.mapv(|x| x.abs() + 0.5);
    check_op(vec![pos.clone()], |t, v| t.recip(v[0]));
    check_op(vec![pos.clone()], |t, v| t.sqrt(v[0]));
    check_op(vec![pos], |t, v| t.ln(v[0]));
}

#[test]
fn matrix_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(3, 4, &mut rng);
    let b = random(4, 2, &mut rng);
    let c = random(2, 4, &mut rng);
    check_op(vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    check_op(vec![a.clone()], |t, v| t.transpose(v[0]));
    check_op(vec![a.clone(), c.clone()], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
    check_op(vec![a.clone(), b.clone()], |t, v| {
        let bt = t.transpose(v[1]);
        let top = t.slice_rows(bt, 0, 2);
        let left = t.slice_rows(v[0], 1, 2);
        t.concat_cols(&[left, top])
    });
    check_op(vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 2));
    check_op(vec![a.clone()], |t, v| t.flatten(v[0]));
    check_op(vec![a.clone()], |t, v| t.sum(v[0]));
    check_op(vec![a.clone()], |t, v| t.mean(v[0]));
    check_op(vec![a.clone(), random(3, 4, &mut rng)], |t, v| t.mse(v[0], v[1]));
    let series = random(1, 13, &mut rng);
    check_op(vec![series], |t, v| t.unfold(v[0], 4, 3));
}

#[test]
fn softmax_and_normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(4, 4, &mut rng) * 3.0;
    check_op(vec![a.clone()], |t, v| t.softmax(v[0]));
    check_op(vec![a.clone()], |t, v| t.causal_softmax(v[0]));
    check_op(vec![a], |t, v| t.normalize_rows(v[0], 1e-5));
}

#[test]
fn two_logit_cross_entropy() {
    // −log softmax(a, b)[0] has gradient σ(a − b) − 1 in a.
    for (a, b) in [(0.3, -1.1), (2.0, 2.0), (-4.0, 1.5)] {
        let mut tape = Tape::new();
        let logits = tape.leaf(array![[a, b]]);
        let p = tape.softmax(logits);
        let first = tape.slice_cols(p, 0, 1);
        let logp = tape.ln(first);
        let loss = tape.scale(logp, -1.0);
        let g = tape.backward(loss).unwrap();
        let ga = g.get(logits).unwrap()[[0, 0]];
        let sigma = 1.0 / (1.0 + (-(a - b) as f64).exp());
        assert!((ga - (sigma - 1.0)).abs() < 1e-12, "{ga} vs {}", sigma - 1.0);
    }
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Mat::zeros((2, 2)));
    assert!(tape.backward(x).is_err());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let summary = common::full_model_gradcheck(&[5, 6, 7]);
    for (group, checked, err) in &summary {
        println!("{group:<20} checked {checked:>3} max rel err {err:.3e}");
        assert!(*checked >= 20, "{group}");
        assert!(*err <= 1e-4, "{group}: {err}");
    }
    assert_eq!(summary.len(), ParamGroup::ALL.len());
}
