//! Central finite-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
const MAGNITUDE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`, worst case.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst case.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, false)).collect();
    let out = f(&mut g, &vars)?;
    let d = g.data(out);
    if d.len() != 1 {
        return Err(TensorError::spec(
            "grad_check",
            "function must be scalar-valued",
        ));
    }
    Ok(d[0])
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, epsilon, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let out = f(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates_checked: 0,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for c in coords {
            let orig = input.data()[c];
            work[ii].data_mut()[c] = orig + epsilon;
            let fp = eval(&f, &work)?;
            work[ii].data_mut()[c] = orig - epsilon;
            let fm = eval(&f, &work)?;
            work[ii].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[ii].data()[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ii, c);
            }
        }
    }
    Ok(report)
}
