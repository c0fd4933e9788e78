//! Finite-difference verification of the analytic gradients.
//!
//! The checker compares reverse-mode gradients of a scalar-valued function
//! against central differences in f64. Non-smooth points (relu/abs kinks,
//! the BerHu threshold, maximum ties) must be avoided by the caller; the
//! stock batteries sample inputs away from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::scaled_dot_product_attention;
use super::{NoGradGuard, Tensor};
use crate::error::{Error, Result};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.3e}, {} elements, tol {:.1e})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.checked,
            self.tol
        )
    }
}

/// Relative error with a floor that keeps near-zero gradient pairs from
/// dominating the report.
fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-4);
    (a - n).abs() / denom
}

/// Compare the reverse-mode gradient of `func` against central finite
/// differences at the given inputs. `func` must be scalar-valued and every
/// input must be a grad-requiring leaf.
pub fn gradient_check<F>(
    name: &str,
    func: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let out = func(inputs)?;
    if out.numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient_check: {name} output has shape {:?}, want a scalar",
            out.shape()
        )));
    }
    let base = out.item()?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("gradient_check: {name} produced {base}")));
    }
    for t in inputs {
        t.zero_grad();
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        tol,
    };
    let _guard = NoGradGuard::new();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            t.update_data(|d| d[e] = orig + eps);
            let up = func(inputs)?.item()?;
            t.update_data(|d| d[e] = orig - eps);
            let down = func(inputs)?.item()?;
            t.update_data(|d| d[e] = orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient_check: {name} non-finite under perturbation"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][e];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // Box-Muller keeps us off rand_distr for one sampler.
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

/// Finite-difference battery over every differentiable tensor op, run at
/// small randomized shapes for the given seed.
pub fn op_battery(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    {
        let a = randn_tensor(&mut rng, &[3, 4], 1.0);
        let b = randn_tensor(&mut rng, &[3, 4], 1.0);
        for (name, func) in [
            ("add", (|i: &[Tensor<f64>]| i[0].add(&i[1])?.mul(&i[0])?.sum_all())
                as fn(&[Tensor<f64>]) -> Result<Tensor<f64>>),
            ("sub", |i| i[0].sub(&i[1])?.square()?.sum_all()),
            ("mul", |i| i[0].mul(&i[1])?.sum_all()),
            ("div", |i| i[0].div(&i[1])?.sum_all()),
        ] {
            let inputs = if name == "div" {
                vec![a.clone(), positive_tensor(&mut rng, &[3, 4], 0.5, 2.0)]
            } else {
                vec![a.clone(), b.clone()]
            };
            reports.push(gradient_check(name, func, &inputs, eps, tol)?);
        }
    }

    {
        // Keep |a-b| bounded away from zero so perturbation cannot flip winners.
        let a = randn_tensor(&mut rng, &[4, 3], 1.0);
        let shift: Vec<f64> = a.data().iter().map(|v| v + if v > &0.0 { 0.5 } else { -0.5 }).collect();
        let b = Tensor::parameter(&[4, 3], shift)?;
        reports.push(gradient_check(
            "maximum",
            |i| i[0].maximum(&i[1])?.sum_all(),
            &[a, b],
            eps,
            tol,
        )?);
    }

    let unary_cases: Vec<(&str, fn(&[Tensor<f64>]) -> Result<Tensor<f64>>, bool)> = vec![
        ("affine", |i| Ok(i[0].affine(1.7, -0.3)).and_then(|t| t.square()?.sum_all()), false),
        ("relu", |i| i[0].relu()?.square()?.sum_all(), false),
        ("gelu", |i| i[0].gelu()?.sum_all(), false),
        ("sigmoid", |i| i[0].sigmoid()?.sum_all(), false),
        ("softplus", |i| i[0].softplus()?.sum_all(), false),
        ("exp", |i| i[0].exp()?.sum_all(), false),
        ("ln", |i| i[0].ln()?.sum_all(), true),
        ("abs", |i| i[0].abs()?.sum_all(), false),
        ("sqrt", |i| i[0].sqrt()?.sum_all(), true),
        ("tanh", |i| i[0].tanh()?.sum_all(), false),
        ("sin", |i| i[0].sin()?.sum_all(), false),
        ("cos", |i| i[0].cos()?.sum_all(), false),
    ];
    for (name, func, positive) in unary_cases {
        let x = if positive {
            positive_tensor(&mut rng, &[2, 5], 0.3, 2.5)
        } else {
            // Bias away from the relu/abs kink at zero.
            let t = randn_tensor(&mut rng, &[2, 5], 1.0);
            let nudged: Vec<f64> = t
                .data()
                .iter()
                .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect();
            Tensor::parameter(&[2, 5], nudged)?
        };
        reports.push(gradient_check(name, func, &[x], eps, tol)?);
    }

    reports.push(gradient_check(
        "add_bias",
        |i| i[0].add_bias(&i[1])?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[3, 2, 4], 1.0), randn_tensor(&mut rng, &[2, 4], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "matmul2d",
        |i| i[0].matmul(&i[1])?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[3, 4], 1.0), randn_tensor(&mut rng, &[4, 2], 1.0)],
        eps,
        tol,
    )?);
    reports.push(gradient_check(
        "matmul3d",
        |i| i[0].matmul(&i[1])?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[2, 3, 4], 1.0), randn_tensor(&mut rng, &[2, 4, 3], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "conv2d",
        |i| i[0].conv2d(&i[1], Some(&i[2]), 2, 1)?.square()?.sum_all(),
        &[
            randn_tensor(&mut rng, &[2, 3, 6, 5], 1.0),
            randn_tensor(&mut rng, &[4, 3, 3, 3], 0.5),
            randn_tensor(&mut rng, &[4], 0.5),
        ],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "upsample_nearest2x",
        |i| i[0].upsample_nearest2x()?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[2, 2, 3, 2], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "softmax",
        |i| i[0].softmax(1)?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[3, 5], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "layer_norm",
        |i| i[0].layer_norm(&i[1], &i[2], 2, 1e-5)?.square()?.sum_all(),
        &[
            randn_tensor(&mut rng, &[2, 3, 4], 1.0),
            positive_tensor(&mut rng, &[4], 0.5, 1.5),
            randn_tensor(&mut rng, &[4], 0.3),
        ],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "batch_norm_train",
        |i| {
            let (mean, var_b, _) = i[0].channel_stats()?;
            i[0].batch_norm(&i[1], &i[2], &mean, &var_b, 1e-5, true)?.square()?.sum_all()
        },
        &[
            randn_tensor(&mut rng, &[3, 2, 2, 3], 1.0),
            positive_tensor(&mut rng, &[2], 0.5, 1.5),
            randn_tensor(&mut rng, &[2], 0.3),
        ],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "batch_norm_eval",
        |i| {
            let mean = vec![0.1, -0.2];
            let var = vec![0.9, 1.3];
            i[0].batch_norm(&i[1], &i[2], &mean, &var, 1e-5, false)?.square()?.sum_all()
        },
        &[
            randn_tensor(&mut rng, &[2, 2, 2, 2], 1.0),
            positive_tensor(&mut rng, &[2], 0.5, 1.5),
            randn_tensor(&mut rng, &[2], 0.3),
        ],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "reshape_permute",
        |i| i[0].reshape(&[4, 6])?.permute(&[1, 0])?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[2, 3, 4], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "concat_narrow",
        |i| {
            let c = Tensor::concat(&[&i[0], &i[1]], 1)?;
            c.narrow(1, 1, 3)?.square()?.sum_all()
        },
        &[randn_tensor(&mut rng, &[2, 2], 1.0), randn_tensor(&mut rng, &[2, 3], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "sum_mean_axis",
        |i| {
            let s = i[0].sum_axis(1)?;
            let m = i[0].mean_axis(0)?.sum_all()?;
            s.square()?.sum_all()?.add(&m)
        },
        &[randn_tensor(&mut rng, &[3, 4, 2], 1.0)],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "mean_all",
        |i| i[0].square()?.mean_all(),
        &[randn_tensor(&mut rng, &[7], 1.0)],
        eps,
        tol,
    )?);

    {
        let labels = std::rc::Rc::new(vec![0u32, 2, 255, 1]);
        let weights = vec![1.0, 2.0, 0.5];
        reports.push(gradient_check(
            "cross_entropy",
            move |i| i[0].cross_entropy(&labels, &weights, 255),
            &[randn_tensor(&mut rng, &[4, 3], 1.0)],
            eps,
            tol,
        )?);
    }

    reports.push(gradient_check(
        "attention",
        |i| scaled_dot_product_attention(&i[0], &i[1], &i[2], 2)?.square()?.sum_all(),
        &[
            randn_tensor(&mut rng, &[4, 8], 0.7),
            randn_tensor(&mut rng, &[4, 8], 0.7),
            randn_tensor(&mut rng, &[4, 8], 0.7),
        ],
        eps,
        tol,
    )?);

    reports.push(gradient_check(
        "merge_panels_uniform",
        |i| i[0].merge_panels(None, 1, 4, 2)?.square()?.sum_all(),
        &[randn_tensor(&mut rng, &[4, 2, 3, 4], 1.0)],
        eps,
        tol,
    )?);

    {
        let preds = randn_tensor(&mut rng, &[4, 2, 3, 4], 1.0);
        let conf = positive_tensor(&mut rng, &[4, 1, 3, 4], 0.2, 0.9);
        reports.push(gradient_check(
            "merge_panels_confidence",
            |i| i[0].merge_panels(Some(&i[1]), 1, 4, 2)?.square()?.sum_all(),
            &[preds, conf],
            eps,
            tol,
        )?);
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let report = gradient_check(
            "sum_of_squares",
            |i| i[0].square()?.sum_all(),
            &[x.clone()],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.max_abs_err < 1e-8, "{report}");
        let g = x.grad().unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn battery_passes_ten_seeds() {
        for seed in 0..10 {
            for report in op_battery(seed, 1e-4, 1e-3).unwrap() {
                assert!(report.passed(), "seed {seed}: {report}");
            }
        }
    }
}
