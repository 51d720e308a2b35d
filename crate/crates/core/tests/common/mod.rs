//! Finite-difference oracle shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitr_core::tensor::{Graph, ParamStore, Tensor, Var};
use vitr_core::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so every output element matters.
fn reduce(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let (r, c) = g.dims(out);
    let w = random(r, c, 0xfeed);
    let w = g.constant(&w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = reduce(&mut g, out).unwrap();
    g.scalar(s)
}

#[derive(Debug)]
pub struct Report {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` (w.r.t. every input and every
/// parameter it touches) with central differences.
pub fn check<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Report
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = f(&mut g, &vars).unwrap();
    let loss = reduce(&mut g, out).unwrap();
    g.backward(loss).unwrap();
    let input_grads: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();
    let param_grads: Vec<_> = g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect();
    drop(g);

    let mut report = Report {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |label: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel || report.worst.is_empty() {
            report.max_rel = report.max_rel.max(e);
            report.worst = format!("{label}: analytic {a:e} numeric {n:e}");
        }
    };

    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= STEP;
            let n = (eval(store, &plus, &f) - eval(store, &minus, &f)) / (2.0 * STEP);
            record(format!("input {i}[{e}]"), input_grads[i].data()[e], n);
        }
    }
    for (id, grad) in &param_grads {
        for e in 0..grad.len() {
            let mut s = store.clone();
            s.get_mut(*id).data_mut()[e] += STEP;
            let up = eval(&s, inputs, &f);
            s.get_mut(*id).data_mut()[e] -= 2.0 * STEP;
            let down = eval(&s, inputs, &f);
            record(format!("{}[{e}]", store.name(*id)), grad[e], (up - down) / (2.0 * STEP));
        }
    }
    report
}

pub fn assert_gradients<F>(name: &str, store: &ParamStore, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let r = check(store, inputs, f);
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel < TOLERANCE, "{name}: max rel err {:e} at {}", r.max_rel, r.worst);
}
