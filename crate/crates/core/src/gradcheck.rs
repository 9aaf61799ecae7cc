//! Central finite-difference gradient checking.
//!
//! Only forward evaluation is used to build the numeric estimate, so the
//! check stays independent of the backward pass it validates.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
}

/// Relative error with a small absolute floor in the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}

/// `count` coordinates drawn uniformly (with replacement) across all inputs.
pub fn sample_coords(inputs: &[Tensor], count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    (0..count)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut which = 0;
            while flat >= inputs[which].numel() {
                flat -= inputs[which].numel();
                which += 1;
            }
            (which, flat)
        })
        .collect()
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares autodiff gradients of the scalar `f(inputs)` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], coords: &[(usize, usize)], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(g);

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: (0, 0, 0.0, 0.0) };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = evaluate(&work, &f)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = evaluate(&work, &f)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let err = rel_err(a, numeric);
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (i, j, a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output coordinate gets a
/// distinct cotangent.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = crate::rng::stream(seed, 0x5eed);
    let r = uniform(&mut rng, g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var>);

/// Gradient check of every differentiable primitive on seeded inputs drawn
/// from `[-2, 2]`, at every input coordinate.
pub fn primitive_checks(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use alloc::vec;
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        ("token_linear", vec![vec![5, 3], vec![2, 3, 4], vec![5]], |g, v| g.token_linear(v[0], v[1], Some(v[2]))),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![vec![3, 4]], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("square", vec![vec![3, 4]], |g, v| Ok(g.square(v[0]))),
        ("abs", vec![vec![3, 4]], |g, v| Ok(g.abs(v[0]))),
        ("mean", vec![vec![3, 4]], |g, v| Ok(g.mean(v[0]))),
        ("sum", vec![vec![3, 4]], |g, v| Ok(g.sum(v[0]))),
        ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        ("reshape", vec![vec![2, 3, 4]], |g, v| g.reshape(v[0], &[4, 6])),
        ("gelu", vec![vec![3, 4]], |g, v| Ok(g.gelu(v[0]))),
        ("tanh", vec![vec![3, 4]], |g, v| Ok(g.tanh(v[0]))),
        ("relu", vec![vec![3, 4]], |g, v| Ok(g.relu(v[0]))),
        ("leaky_relu", vec![vec![3, 4]], |g, v| Ok(g.leaky_relu(v[0], 0.2))),
        ("layer_norm", vec![vec![2, 3, 5], vec![5], vec![5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("instance_norm", vec![vec![2, 3, 4, 4]], |g, v| g.instance_norm(v[0], 1e-5)),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ("conv2d_strided", vec![vec![1, 2, 6, 6], vec![2, 2, 4, 4], vec![2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ("conv_transpose2d", vec![vec![1, 3, 3, 3], vec![3, 2, 3, 3], vec![2]], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        }),
        ("patchify", vec![vec![2, 3, 4, 4]], |g, v| g.patchify(v[0], 2)),
        ("unpatchify", vec![vec![2, 4, 12]], |g, v| g.unpatchify(v[0], 3, 4, 4, 2)),
        ("global_avg_pool", vec![vec![2, 3, 3, 3]], |g, v| g.global_avg_pool(v[0])),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, shapes, op)) in cases.into_iter().enumerate() {
        let mut rng = crate::rng::stream(seed, i as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
        let coords = all_coords(&inputs);
        let case_seed = seed.wrapping_add(i as u64);
        let report = check_gradients(&inputs, &coords, eps, |g, v| {
            let y = op(g, v)?;
            weighted(g, y, case_seed)
        })?;
        out.push((name, report));
    }
    Ok(out)
}
