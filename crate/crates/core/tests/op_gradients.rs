//! Finite-difference checks of every differentiable tape op over random instances.

use drl::numkernel::{gradient_check, Matrix, ParamStore, Rng, Tape, Var};
use drl::Result;

const INSTANCES: u64 = 20;
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn positive(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(0.2, 2.0))
}

/// `sum(op(x) ⊙ R)` with a fixed random `R`, so every output entry gets a distinct weight.
fn weighted(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check_unary<F>(name: &str, make_input: impl Fn(&mut Rng) -> Matrix, op: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(1000 + seed);
        let mut store = ParamStore::new();
        let id = store.insert("x", make_input(&mut rng));
        let shape = {
            let mut t = Tape::new();
            let x = t.param(&store, id);
            let out = op(&mut t, x).unwrap();
            t.value(out).shape()
        };
        let weights = random(shape.0, shape.1, &mut rng);
        let report = gradient_check(
            |tape, st| {
                let x = tape.param(st, id);
                let out = op(tape, x)?;
                weighted(tape, out, &weights)
            },
            &store,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(
            report.passed(),
            "{name} instance {seed}: max relative error {}",
            report.max_rel_error()
        );
    }
}

fn check_binary<F>(name: &str, a_shape: (usize, usize), b_shape: (usize, usize), op: F)
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(2000 + seed);
        let mut store = ParamStore::new();
        let a = store.insert("a", random(a_shape.0, a_shape.1, &mut rng));
        let b = store.insert("b", random(b_shape.0, b_shape.1, &mut rng));
        let shape = {
            let mut t = Tape::new();
            let (x, y) = (t.param(&store, a), t.param(&store, b));
            let out = op(&mut t, x, y).unwrap();
            t.value(out).shape()
        };
        let weights = random(shape.0, shape.1, &mut rng);
        let report = gradient_check(
            |tape, st| {
                let (x, y) = (tape.param(st, a), tape.param(st, b));
                let out = op(tape, x, y)?;
                weighted(tape, out, &weights)
            },
            &store,
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.passed(), "{name} instance {seed}: {}", report.max_rel_error());
    }
}

#[test]
fn matmul_add_sub_mul() {
    check_binary("matmul", (3, 4), (4, 2), |t, a, b| t.matmul(a, b));
    check_binary("add", (3, 4), (3, 4), |t, a, b| t.add(a, b));
    check_binary("sub", (3, 4), (3, 4), |t, a, b| t.sub(a, b));
    check_binary("mul", (3, 4), (3, 4), |t, a, b| t.mul(a, b));
    check_binary("add_row", (5, 3), (1, 3), |t, a, b| t.add_row(a, b));
    check_binary("concat_cols", (3, 2), (3, 4), |t, a, b| t.concat_cols(&[a, b]));
    check_binary("concat_rows", (2, 3), (4, 3), |t, a, b| t.concat_rows(&[a, b]));
}

#[test]
fn elementwise_ops() {
    check_unary("scale", |r| random(3, 4, r), |t, x| Ok(t.scale(x, -1.7)));
    check_unary("add_scalar", |r| random(3, 4, r), |t, x| Ok(t.add_scalar(x, 0.3)));
    check_unary("sigmoid", |r| random(3, 4, r), |t, x| Ok(t.sigmoid(x)));
    check_unary("exp", |r| random(3, 4, r), |t, x| Ok(t.exp(x)));
    check_unary("recip", |r| positive(3, 4, r), |t, x| t.recip(x));
    check_unary(
        "relu",
        |r| Matrix::from_fn(3, 4, |_, _| {
            let v = r.uniform_range(0.1, 2.0);
            if r.uniform() < 0.5 { -v } else { v }
        }),
        |t, x| Ok(t.relu(x)),
    );
}

#[test]
fn row_ops() {
    check_unary("row_softmax", |r| random(4, 5, r), |t, x| Ok(t.row_softmax(x)));
    check_unary("center_rows", |r| random(4, 5, r), |t, x| Ok(t.center_rows(x)));
    check_unary("normalize_rows_l2", |r| random(4, 5, r), |t, x| t.normalize_rows_l2(x));
    check_unary("row_normalize", |r| positive(4, 5, r), |t, x| Ok(t.row_normalize(x)));
    check_unary("row_shift", |r| random(4, 5, r), |t, x| Ok(t.row_shift(x)));
    check_unary("group_mean_rows", |r| random(6, 3, r), |t, x| t.group_mean_rows(x, 2));
}

#[test]
fn structural_ops() {
    check_unary("transpose", |r| random(3, 5, r), |t, x| Ok(t.transpose(x)));
    check_unary("select_rows", |r| random(5, 3, r), |t, x| t.select_rows(x, &[4, 0, 0, 2]));
    check_unary("slice", |r| random(5, 6, r), |t, x| t.slice(x, 1, 3, 2, 3));
    check_unary("reshape", |r| random(4, 3, r), |t, x| t.reshape(x, 2, 6));
    check_unary("gather", |r| random(4, 4, r), |t, x| t.gather(x, &[(0, 1), (3, 3), (2, 0), (0, 1)], 2, 2));
    check_unary("set_diagonal_one", |r| random(4, 4, r), |t, x| t.set_diagonal_one(x));
    let replacement = Matrix::filled(4, 3, 0.25);
    check_unary(
        "replace_rows",
        |r| random(4, 3, r),
        move |t, x| t.replace_rows(x, &[true, false, true, false], &replacement),
    );
    check_unary("sum", |r| random(3, 3, r), |t, x| Ok(t.sum(x)));
}

#[test]
fn pairwise_ops() {
    check_unary("pairwise_sq_dist", |r| random(4, 3, r), |t, x| Ok(t.pairwise_sq_dist(x)));
    check_unary("pairwise_dist", |r| random(4, 3, r), |t, x| Ok(t.pairwise_dist(x)));
    check_unary("pairwise_abs_diff", |r| random(4, 3, r), |t, x| Ok(t.pairwise_abs_diff(x)));
}

#[test]
fn nll_mean_on_softmax() {
    check_unary(
        "nll_mean",
        |r| random(5, 4, r),
        |t, x| {
            let p = t.row_softmax(x);
            t.nll_mean(p, &[0, 3, 1, 1, 2])
        },
    );
}

#[test]
fn full_loss_on_smallest_episode() {
    let cfg = drl::training::tiny_config(2, 1, 3, 4, 31);
    let report = drl::training::check_full_loss(&cfg, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "max relative error {}", report.max_rel_error());
}
