use rulechat_core::gradcheck::{all_cases, check, CheckConfig};
use rulechat_core::{Gradients, Graph, Mode, ParamStore, Tensor, TensorError, Var};

const SEEDS: u64 = 10;
const TOLERANCE: f64 = 1e-3;

#[test]
fn square_gradient() {
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::row(vec![3.0]));
    let g = &mut Graph::new(&s, Mode::Eval);
    let v = g.param(x);
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq);
    let mut grads = Gradients::for_store(&s);
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::row(vec![0.0]));
    let g = &mut Graph::new(&s, Mode::Eval);
    let v = g.param(w);
    let y = g.sigmoid(v);
    let loss = g.sum(y);
    let mut grads = Gradients::for_store(&s);
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[0.25]);
}

#[test]
fn backward_accumulates() {
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::row(vec![2.0]));
    let mut grads = Gradients::for_store(&s);
    for _ in 0..2 {
        let g = &mut Graph::new(&s, Mode::Eval);
        let v = g.param(x);
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut grads).unwrap();
    }
    assert_eq!(grads.get(x).unwrap(), &[8.0]);
}

#[test]
fn every_op_and_head_matches_finite_differences() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..SEEDS {
        for mut case in all_cases(seed) {
            let report = case.run(2, seed).unwrap();
            checked += 1;
            if report.max_rel_error >= TOLERANCE {
                failures.push(format!("{} seed {seed}: {report:?}", case.name));
            }
        }
    }
    assert!(checked >= 30 * SEEDS as usize);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn a_broken_gradient_is_caught() {
    // Treating one factor as a constant halves the derivative of x².
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::row(vec![1.5, -0.5]));
    let r = check(&mut s, &CheckConfig::default(), |g| -> Result<Var, TensorError> {
        let v = g.param(x);
        let t = g.value(v).clone();
        let c = g.constant(t);
        let p = g.mul(v, c)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_error > 0.3, "{r:?}");
}

#[cfg(feature = "f64")]
#[test]
fn joint_loss_matches_finite_differences() {
    use rulechat_core::gradcheck::reader_case;
    for seed in 0..3 {
        let mut case = reader_case(seed);
        let config = CheckConfig {
            step: 1e-6,
            mode: case.mode,
            seed,
            ..CheckConfig::default()
        };
        let loss = std::mem::replace(&mut case.loss, Box::new(|_| unreachable!()));
        let r = check(&mut case.store, &config, |g| loss(g)).unwrap();
        assert!(r.max_rel_error < TOLERANCE, "{r:?}");
    }
}
