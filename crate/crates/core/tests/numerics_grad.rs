//! Analytic gradients of every tape primitive against central differences.

use proptest::prelude::*;
use salova::numerics::{seeded_rng, NumericsError, ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-5;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::matrix(rows, cols, rng.normals(rows * cols)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central-difference oracle over every coordinate of every input.
fn check<F>(inputs: &[Tensor], f: F, tol: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).value().data()[0]
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.gradients(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for c in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[c], fd));
        }
    }
    assert!(worst <= tol, "max rel err {worst}");
    worst
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn probe<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let shape = v.shape();
    let w = tape.constant(random(shape[0], shape[1], seed));
    v.mul(w).unwrap().sum_all().unwrap()
}

#[test]
fn matmul_gradient_matches_differences_tightly() {
    let a = random(5, 4, 1);
    let b = random(4, 3, 2);
    let err = check(&[a, b], |t, v| probe(t, v[0].matmul(v[1]).unwrap(), 3), 1e-6);
    assert!(err <= 1e-6);
}

#[test]
fn matmul_nt_gradient() {
    check(
        &[random(3, 4, 1), random(5, 4, 2)],
        |t, v| probe(t, v[0].matmul_nt(v[1]).unwrap(), 3),
        1e-6,
    );
}

#[test]
fn elementwise_gradients() {
    let inputs = [random(3, 4, 10), random(3, 4, 11)];
    check(&inputs, |t, v| probe(t, v[0].add(v[1]).unwrap(), 1), 1e-6);
    check(&inputs, |t, v| probe(t, v[0].sub(v[1]).unwrap(), 1), 1e-6);
    check(&inputs, |t, v| probe(t, v[0].mul(v[1]).unwrap(), 1), 1e-6);
    check(&inputs, |t, v| probe(t, v[0].scale(-1.7).unwrap(), 1), 1e-6);
}

#[test]
fn row_broadcast_gradients() {
    let inputs = [random(4, 3, 20), random(1, 3, 21)];
    check(&inputs, |t, v| probe(t, v[0].add_row(v[1]).unwrap(), 2), 1e-6);
    check(&inputs, |t, v| probe(t, v[0].mul_row(v[1]).unwrap(), 2), 1e-6);
}

#[test]
fn activation_gradients() {
    let x = random(3, 5, 30);
    check(std::slice::from_ref(&x), |t, v| probe(t, v[0].gelu().unwrap(), 4), 1e-6);
    check(
        std::slice::from_ref(&x),
        |t, v| probe(t, v[0].sigmoid().unwrap(), 4),
        1e-6,
    );
    check(
        &[x, Tensor::scalar(0.25)],
        |t, v| probe(t, v[0].prelu(v[1]).unwrap(), 4),
        1e-6,
    );
}

#[test]
fn normalization_gradients() {
    let x = random(3, 6, 40);
    check(
        std::slice::from_ref(&x),
        |t, v| probe(t, v[0].softmax_rows().unwrap(), 5),
        1e-5,
    );
    check(
        std::slice::from_ref(&x),
        |t, v| probe(t, v[0].layer_norm().unwrap(), 5),
        1e-5,
    );
    check(&[x], |t, v| probe(t, v[0].mean_rows().unwrap(), 5), 1e-6);
}

#[test]
fn structural_gradients() {
    let inputs = [random(2, 3, 50), random(4, 3, 51)];
    check(
        &inputs,
        |t, v| probe(t, Var::concat_rows(&[v[0], v[1]]).unwrap(), 6),
        1e-6,
    );
    let inputs = [random(3, 2, 52), random(3, 4, 53)];
    check(
        &inputs,
        |t, v| probe(t, Var::concat_cols(&[v[0], v[1]]).unwrap(), 6),
        1e-6,
    );
    check(
        &[random(3, 5, 54)],
        |t, v| probe(t, v[0].slice_cols(1, 4).unwrap(), 6),
        1e-6,
    );
    check(
        &[random(5, 2, 55)],
        |t, v| probe(t, v[0].slice_rows(2, 4).unwrap(), 6),
        1e-6,
    );
}

#[test]
fn loss_gradients() {
    let logits = random(4, 1, 60);
    check(
        std::slice::from_ref(&logits),
        |_, v| v[0].sigmoid().unwrap().bce(&[1.0, 0.0, 1.0, 0.0]).unwrap(),
        1e-5,
    );
    // pairs chosen away from the hinge kink
    let s = Tensor::matrix(4, 1, vec![0.6, 0.55, 0.9, 0.1]).unwrap();
    check(
        &[s],
        |_, v| v[0].margin_ranking(&[(0, 1), (2, 3), (0, 3), (2, 1)], 0.2).unwrap(),
        1e-6,
    );
    check(
        &[random(1, 5, 61)],
        |_, v| v[0].cross_entropy_bag(&[0, 3, 3, 4]).unwrap(),
        1e-5,
    );
}

#[test]
fn sum_gives_all_ones() {
    let mut store = ParamStore::new();
    let id = store.add("p", random(2, 3, 70));
    let tape = Tape::new();
    let p = tape.param(&store, id);
    tape.backward(p.sum_all().unwrap(), &mut store).unwrap();
    assert!(store.get(id).grad.data().iter().all(|&g| g == 1.0));
}

#[test]
fn squared_norm_closed_form() {
    // loss = ||W x||², grad = 2 (W x) xᵀ
    let w = random(3, 2, 80);
    let x = random(2, 1, 81);
    let mut store = ParamStore::new();
    let id = store.add("w", w.clone());
    let tape = Tape::new();
    let wx = tape.param(&store, id).matmul(tape.constant(x.clone())).unwrap();
    let loss = wx.mul(wx).unwrap().sum_all().unwrap();
    tape.backward(loss, &mut store).unwrap();
    let wxv = salova::numerics::matmul(&w, &x).unwrap();
    let expected = salova::numerics::matmul(&wxv, &x.transpose()).unwrap();
    for (g, e) in store.get(id).grad.data().iter().zip(expected.data()) {
        assert!((g - 2.0 * e).abs() < 1e-12);
    }
}

#[test]
fn accumulation_is_additive() {
    let mut store = ParamStore::new();
    let id = store.add("p", random(1, 3, 90));
    for _ in 0..2 {
        let tape = Tape::new();
        let p = tape.param(&store, id);
        tape.backward(p.sum_all().unwrap(), &mut store).unwrap();
    }
    assert!(store.get(id).grad.data().iter().all(|&g| g == 2.0));
    store.zero_grad();
    assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn detached_loss_is_usage_error() {
    let mut store = ParamStore::new();
    store.add("p", random(1, 3, 91));
    let tape = Tape::new();
    let c = tape.constant(random(1, 3, 92)).sum_all().unwrap();
    assert!(matches!(tape.backward(c, &mut store), Err(NumericsError::Usage(_))));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParamStore::new();
    let id = store.add("p", random(2, 2, 93));
    let tape = Tape::new();
    let p = tape.param(&store, id);
    assert!(matches!(tape.backward(p, &mut store), Err(NumericsError::Usage(_))));
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let run = || {
        let tape = Tape::new();
        let a = tape.constant(random(4, 4, 1));
        let b = tape.constant(random(4, 4, 2));
        let y = a
            .matmul(b)
            .unwrap()
            .layer_norm()
            .unwrap()
            .gelu()
            .unwrap()
            .softmax_rows()
            .unwrap();
        y.value().as_ref().clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_chain_gradients_on_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let inputs = [random(m, k, seed), random(k, n, seed + 1)];
        let err = check(&inputs, |t, v| probe(t, v[0].matmul(v[1]).unwrap().gelu().unwrap(), seed + 2), 1e-4);
        prop_assert!(err <= 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(rows in 1usize..4, cols in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let x = random(rows, cols, seed);
        let y = salova::numerics::softmax_rows(&x).unwrap();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        let shifted = salova::numerics::softmax_rows(&x.map(|v| v + shift)).unwrap();
        for (a, b) in y.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_and_prelu_gradients(rows in 1usize..4, cols in 2usize..7, seed in 0u64..1000) {
        let inputs = [random(rows, cols, seed), Tensor::scalar(0.1)];
        let err = check(&inputs, |t, v| probe(t, v[0].layer_norm().unwrap().prelu(v[1]).unwrap(), seed + 7), 1e-4);
        prop_assert!(err <= 1e-4);
    }
}
