use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tol: f64,
    /// Magnitude below which the error is measured in absolute terms.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tol
    }
}

/// Compares analytic VJPs against central finite differences.
///
/// `op` builds an output from leaf vars holding `inputs`. A fixed random
/// cotangent projects non-scalar outputs to a scalar, so every output
/// element takes part in the check. The error per element is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(op: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with(op, inputs, &GradcheckOptions { tol, ..Default::default() })
}

pub fn gradcheck_with<F>(op: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let numel = g.value(out).numel();
    let cotangent: Vec<f64> = if numel == 1 {
        vec![1.0]
    } else {
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    g.backward_seeded(out, cotangent.clone())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let project = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(&cotangent).map(|(a, b)| a * b).sum())
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
        failure: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut elements: Vec<usize> = (0..input.numel()).collect();
        if let Some(limit) = opts.max_elements {
            while elements.len() > limit {
                let drop = rng.random_range(0..elements.len());
                elements.swap_remove(drop);
            }
            elements.sort_unstable();
        }
        for e in elements {
            let original = input.data()[e];
            work[i].data_mut()[e] = original + opts.step;
            let plus = project(&work)?;
            work[i].data_mut()[e] = original - opts.step;
            let minus = project(&work)?;
            work[i].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i][e];
            report.checked += 1;
            if !a.is_finite() || !numeric.is_finite() {
                report.failure = Some(format!("non-finite gradient at input {i} element {e}: analytic {a}, numeric {numeric}"));
                report.worst = Some((i, e));
                return Ok(report);
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gelu, layer_norm, Backward, BackwardCtx, GradSink};
    use crate::Result;

    struct Square {
        x: Var,
    }

    impl Backward<f64> for Square {
        fn name(&self) -> &'static str {
            "square"
        }
        fn inputs(&self) -> Vec<Var> {
            vec![self.x]
        }
        fn backward(&self, ctx: &BackwardCtx<'_, f64>, dy: &[f64], sink: &mut GradSink<'_, f64>) -> Result<()> {
            let d: Vec<f64> = ctx.value(self.x).data().iter().zip(dy).map(|(x, d)| 2.0 * x * d).collect();
            sink.accumulate(self.x, &d);
            Ok(())
        }
    }

    fn square(g: &mut Graph<f64>, x: Var) -> Var {
        let v = g.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|x| x * x).collect()).unwrap();
        g.record(t, Square { x })
    }

    #[test]
    fn polynomial_passes() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let r = gradcheck(|g, v| Ok(square(g, v[0])), &[x], 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_vjp_is_caught() {
        struct Wrong {
            x: Var,
        }
        impl Backward<f64> for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn inputs(&self) -> Vec<Var> {
                vec![self.x]
            }
            fn backward(&self, _: &BackwardCtx<'_, f64>, dy: &[f64], sink: &mut GradSink<'_, f64>) -> Result<()> {
                sink.accumulate(self.x, dy);
                Ok(())
            }
        }
        let x = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let r = gradcheck(
            |g, v| {
                let val = g.value(v[0]).data().iter().map(|x| x * x).collect();
                Ok(g.record(Tensor::new(&[2], val)?, Wrong { x: v[0] }))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn layer_norm_and_gelu_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
        };
        let inputs = [rand_t(&[3, 4]), rand_t(&[4]), rand_t(&[4])];
        let r = gradcheck(|g, v| layer_norm(g, v[0], v[1], v[2], 1e-5), &inputs, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        let r = gradcheck(|g, v| gelu(g, v[0]), &[rand_t(&[5, 3])], 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
