//! Finite-difference verification of every differentiable op and loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{
    attention_weights, global_contrastive_loss, local_contrastive_loss, local_matching_score,
    perturbation_sensitivity_loss, total_loss, LossWeights,
};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{finite_diff_grad, max_relative_error, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// A function of several tensors whose gradient is checked input by input.
type Case = fn(&[Tensor]) -> Result<Tensor>;
/// Draws the inputs of a case.
type Inputs = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("positive shape")
}

fn o1(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

/// Entries in `±[0.1, 1]`, away from kinks at zero.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(data, shape).expect("positive shape")
}

fn size(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Reduces any output to a scalar with fixed random weights so every output
/// entry contributes a distinct amount.
fn weighted(out: Tensor, salt: u64) -> Result<Tensor> {
    let mut rng = rng_from(derive_seed(salt, out.len() as u64));
    let w = uniform(&mut rng, out.shape(), 0.5, 1.5);
    Ok(out.mul(&w)?.sum())
}

fn spans_of(sizes: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let r = start..start + s;
            start += s;
            r
        })
        .collect()
}

fn seg_sizes(total: usize) -> Vec<usize> {
    // deterministic split of `total` rows into spans of 1..=3
    let mut out = Vec::new();
    let mut left = total;
    let mut k = 0;
    while left > 0 {
        let s = (k % 3 + 1).min(left);
        out.push(s);
        left -= s;
        k += 1;
    }
    out
}

fn local_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let d = size(rng, 2, 8);
    let m = size(rng, 1, 4);
    let w = size(rng, 1, 4);
    vec![o1(rng, &[d, m]), o1(rng, &[d, w])]
}

fn batch_local(inputs: &[Tensor]) -> (Vec<Tensor>, Vec<Tensor>) {
    let b = inputs.len() / 2;
    (inputs[..b].to_vec(), inputs[b..].to_vec())
}

fn batch_local_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let b = size(rng, 1, 4);
    let d = size(rng, 2, 8);
    let m = size(rng, 1, 4);
    let mut images: Vec<Tensor> = (0..b).map(|_| o1(rng, &[d, m])).collect();
    let texts: Vec<Tensor> = (0..b)
        .map(|_| {
            let w = size(rng, 1, 4);
            o1(rng, &[d, w])
        })
        .collect();
    images.extend(texts);
    images
}

fn pert_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let d = size(rng, 2, 8);
    let p = size(rng, 1, 9);
    vec![o1(rng, &[d]), o1(rng, &[d]), o1(rng, &[d, p])]
}

fn total_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let b = size(rng, 1, 4);
    let d = size(rng, 2, 8);
    let m = size(rng, 1, 4);
    let w = size(rng, 1, 4);
    let p = size(rng, 1, 9);
    let mut v = vec![o1(rng, &[b, d]), o1(rng, &[b, d]), o1(rng, &[d, p])];
    v.extend((0..b).map(|_| o1(rng, &[d, m])));
    v.extend((0..b).map(|_| o1(rng, &[d, w])));
    v
}

fn total_case(x: &[Tensor]) -> Result<Tensor> {
    let b = x[0].shape()[0];
    let d = x[0].shape()[1];
    let w = LossWeights::default();
    let global = global_contrastive_loss(&x[0], &x[1], w.tau)?;
    let local = local_contrastive_loss(&x[3..3 + b], &x[3 + b..3 + 2 * b], w.local_tau(), w.tau_local)?;
    let pert = perturbation_sensitivity_loss(
        &x[0].slice_rows(0..1)?.reshape(&[d])?,
        &x[1].slice_rows(0..1)?.reshape(&[d])?,
        &x[2],
        w.tau,
    )?;
    Ok(total_loss(&global, &local, &pert, &w)?.0)
}

fn cases() -> Vec<(&'static str, Case, Inputs)> {
    vec![
        (
            "matmul",
            |x| weighted(x[0].matmul(&x[1])?, 1),
            |r| {
                let (m, k, n) = (size(r, 1, 4), size(r, 1, 4), size(r, 1, 4));
                vec![o1(r, &[m, k]), o1(r, &[k, n])]
            },
        ),
        ("transpose", |x| weighted(x[0].t()?, 2), |r| {
            let (m, n) = (size(r, 1, 4), size(r, 1, 4));
            vec![o1(r, &[m, n])]
        }),
        ("add", |x| weighted(x[0].add(&x[1])?, 3), |r| vec![o1(r, &[2, 3]), o1(r, &[2, 3])]),
        ("sub", |x| weighted(x[0].sub(&x[1])?, 4), |r| vec![o1(r, &[3, 2]), o1(r, &[3, 2])]),
        ("mul", |x| weighted(x[0].mul(&x[1])?, 5), |r| vec![o1(r, &[4]), o1(r, &[4])]),
        ("add_row", |x| weighted(x[0].add_row(&x[1])?, 6), |r| vec![o1(r, &[3, 4]), o1(r, &[4])]),
        ("scale", |x| weighted(x[0].scale(-1.7), 7), |r| vec![o1(r, &[5])]),
        ("exp", |x| weighted(x[0].exp(), 8), |r| vec![o1(r, &[2, 3])]),
        ("ln", |x| weighted(x[0].ln()?, 9), |r| vec![uniform(r, &[5], 0.5, 2.0)]),
        ("relu", |x| weighted(x[0].relu(), 10), |r| vec![signed_away_from_zero(r, &[6])]),
        ("sum", |x| Ok(x[0].sum()), |r| vec![o1(r, &[3, 2])]),
        ("mean", |x| Ok(x[0].mean()), |r| vec![o1(r, &[3, 2])]),
        ("sum_axis", |x| weighted(x[0].sum_axis(1)?, 11), |r| vec![o1(r, &[2, 3, 2])]),
        ("softmax", |x| weighted(x[0].softmax(1)?, 12), |r| vec![o1(r, &[3, 4])]),
        ("softmax_axis0", |x| weighted(x[0].softmax(0)?, 13), |r| vec![o1(r, &[3, 4])]),
        ("log_softmax", |x| weighted(x[0].log_softmax(0)?, 14), |r| vec![o1(r, &[4, 3])]),
        ("logsumexp", |x| weighted(x[0].logsumexp(1)?, 15), |r| vec![o1(r, &[3, 4])]),
        ("l2_normalize", |x| weighted(x[0].l2_normalize(1)?, 16), |r| vec![o1(r, &[3, 4])]),
        ("l2_normalize_axis0", |x| weighted(x[0].l2_normalize(0)?, 17), |r| vec![o1(r, &[4, 3])]),
        ("reshape", |x| weighted(x[0].reshape(&[3, 2])?, 18), |r| vec![o1(r, &[2, 3])]),
        (
            "gather",
            |x| weighted(x[0].gather(vec![Some(0), Some(3), None, Some(3), Some(5)], &[5])?, 19),
            |r| vec![o1(r, &[2, 3])],
        ),
        ("select_rows", |x| weighted(x[0].select_rows(&[2, 0, 2])?, 20), |r| vec![o1(r, &[3, 2])]),
        (
            "cat_rows",
            |x| weighted(Tensor::cat_rows(&[x[0].clone(), x[1].clone()])?, 21),
            |r| vec![o1(r, &[1, 3]), o1(r, &[2, 3])],
        ),
        (
            "segment_mean",
            |x| weighted(x[0].segment_mean(&spans_of(&seg_sizes(x[0].shape()[0])))?, 22),
            |r| {
                let n = size(r, 1, 6);
                vec![o1(r, &[n, 3])]
            },
        ),
        (
            "segment_logsumexp",
            |x| weighted(x[0].segment_logsumexp(&spans_of(&seg_sizes(x[0].len())))?, 23),
            |r| {
                let n = size(r, 1, 7);
                vec![o1(r, &[n])]
            },
        ),
        (
            "segment_attention",
            |x| {
                let spans = spans_of(&seg_sizes(x[0].shape()[0]));
                weighted(Tensor::segment_attention(&x[0], &x[1], &x[2], &spans, 0.7)?, 24)
            },
            |r| {
                let n = size(r, 1, 6);
                vec![o1(r, &[n, 3]), o1(r, &[n, 3]), o1(r, &[n, 2])]
            },
        ),
        (
            "global_contrastive_loss",
            |x| global_contrastive_loss(&x[0], &x[1], 0.07),
            |r| {
                let (b, d) = (size(r, 1, 4), size(r, 2, 8));
                vec![o1(r, &[b, d]), o1(r, &[b, d])]
            },
        ),
        ("attention_weights", |x| weighted(attention_weights(&x[0], &x[1], 1.0)?, 25), local_inputs),
        ("local_matching_score", |x| local_matching_score(&x[0], &x[1], 1.0), local_inputs),
        (
            "local_contrastive_loss",
            |x| {
                let (images, texts) = batch_local(x);
                local_contrastive_loss(&images, &texts, 0.07, 1.0)
            },
            batch_local_inputs,
        ),
        (
            "perturbation_sensitivity_loss",
            |x| perturbation_sensitivity_loss(&x[0], &x[1], &x[2], 0.07),
            pert_inputs,
        ),
        ("total_loss", total_case, total_inputs),
    ]
}

/// Names of every checked function.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _, _)| n).collect()
}

/// Max relative error between autodiff and central differences over all
/// inputs of one instance.
pub fn check_instance(f: impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Result<f64> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        let numeric = finite_diff_grad(
            |x| {
                let mut args = inputs.to_vec();
                args[k] = x.clone();
                Ok(f(&args)?.item())
            },
            &inputs[k],
            STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

/// Runs `instances` random instances of the cases whose names pass `filter`.
pub fn run_filtered(instances: usize, seed: u64, filter: impl Fn(&str) -> bool) -> Result<GradcheckReport> {
    let mut reports = Vec::new();
    for (i, (name, f, inputs)) in cases().into_iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let mut worst: f64 = 0.0;
        for s in 0..instances {
            let mut rng = rng_from(derive_seed(derive_seed(seed, i as u64), s as u64));
            worst = worst.max(check_instance(f, &inputs(&mut rng))?);
        }
        reports.push(CaseReport {
            name: name.to_string(),
            instances,
            max_relative_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seed,
        step: STEP,
        tolerance: TOLERANCE,
        cases: reports,
    })
}

/// Runs every case on `instances` random instances.
pub fn run_suite(instances: usize, seed: u64) -> Result<GradcheckReport> {
    run_filtered(instances, seed, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_seeds() {
        let report = run_suite(3, 11).unwrap();
        for c in &report.cases {
            assert!(c.passed, "{} max rel error {}", c.name, c.max_relative_error);
        }
    }
}
