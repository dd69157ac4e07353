//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// max over elements of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` builds the scalar on the given tape from the input variable.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut t, v)?;
        let val = t.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        passed: worst < tol,
    })
}

/// Value range of a catalogue operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Normal,
    /// Uniform on `[0.5, 2]`, for logarithms, divisors and scales.
    Positive,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable tape operation with fixed operand shapes.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub operands: Vec<(Vec<usize>, Domain)>,
    build: Build,
}

impl OpCase {
    fn new(name: &'static str, operands: &[(&[usize], Domain)], build: Build) -> Self {
        OpCase {
            name,
            operands: operands.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
            build,
        }
    }

    /// Checks the gradient with respect to every operand at one random point.
    /// The output is reduced to a scalar through random weights so every
    /// output element contributes.
    pub fn check_at(&self, stream: &mut RngStream, h: f64, tol: f64) -> Result<GradCheck> {
        let values: Vec<Tensor> = self
            .operands
            .iter()
            .map(|(shape, d)| match d {
                Domain::Normal => stream.normal_tensor(shape),
                Domain::Positive => stream.uniform_tensor(shape, 0.5, 2.0),
            })
            .collect();
        let out_len = {
            let mut t = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
            let y = (self.build)(&mut t, &vars)?;
            t.value(y).shape().to_vec()
        };
        let weights = stream.normal_tensor(&out_len);
        let mut worst = GradCheck {
            max_rel_error: 0.0,
            passed: true,
        };
        for k in 0..values.len() {
            let r = grad_check(
                |t, x| {
                    let vars: Vec<Var> = (0..values.len())
                        .map(|j| if j == k { x } else { t.constant(values[j].clone()) })
                        .collect();
                    let y = (self.build)(t, &vars)?;
                    let w = t.constant(weights.clone());
                    let yw = t.mul(y, w)?;
                    t.sum(yw)
                },
                &values[k],
                h,
                tol,
            )?;
            if r.max_rel_error > worst.max_rel_error {
                worst.max_rel_error = r.max_rel_error;
            }
            worst.passed &= r.passed;
        }
        Ok(worst)
    }
}

/// Every differentiable tape operation, each with small fixed shapes.
pub fn op_catalogue() -> Vec<OpCase> {
    use Domain::{Normal as N, Positive as P};
    vec![
        OpCase::new("add", &[(&[3, 4], N), (&[3, 4], N)], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", &[(&[3, 4], N), (&[3, 4], N)], |t, v| t.sub(v[0], v[1])),
        OpCase::new("mul", &[(&[3, 4], N), (&[3, 4], N)], |t, v| t.mul(v[0], v[1])),
        OpCase::new("div", &[(&[3, 4], N), (&[3, 4], P)], |t, v| t.div(v[0], v[1])),
        OpCase::new("scale", &[(&[5], N)], |t, v| t.scale(v[0], -1.7)),
        OpCase::new("scale_shift", &[(&[5], N)], |t, v| t.scale_shift(v[0], 0.6, 0.3)),
        OpCase::new("one_minus", &[(&[5], N)], |t, v| t.one_minus(v[0])),
        OpCase::new("matmul", &[(&[3, 4], N), (&[4, 2], N)], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("add_bias", &[(&[2, 3, 4], N), (&[3], N)], |t, v| t.add_bias(v[0], v[1], 1)),
        OpCase::new("conv2d", &[(&[2, 2, 5, 4], N), (&[3, 2, 3, 3], N), (&[3], N)], |t, v| {
            t.conv2d(v[0], v[1], v[2])
        }),
        OpCase::new("maxpool2", &[(&[2, 2, 4, 4], N)], |t, v| t.maxpool2(v[0])),
        OpCase::new("relu", &[(&[12], N)], |t, v| t.relu(v[0])),
        OpCase::new("sigmoid", &[(&[12], N)], |t, v| t.sigmoid(v[0])),
        OpCase::new("tanh", &[(&[12], N)], |t, v| t.tanh(v[0])),
        OpCase::new("exp", &[(&[12], N)], |t, v| t.exp(v[0])),
        OpCase::new("log", &[(&[12], P)], |t, v| t.log(v[0])),
        OpCase::new("softplus", &[(&[12], N)], |t, v| t.softplus(v[0])),
        OpCase::new("sum", &[(&[3, 4], N)], |t, v| t.sum(v[0])),
        OpCase::new("mean", &[(&[3, 4], N)], |t, v| t.mean(v[0])),
        OpCase::new("reshape", &[(&[3, 4], N)], |t, v| t.reshape(v[0], &[2, 6])),
        OpCase::new("concat", &[(&[2, 3], N), (&[2, 2], N)], |t, v| t.concat(&[v[0], v[1]], 1)),
        OpCase::new("index_axis", &[(&[3, 4, 2], N)], |t, v| t.index_axis(v[0], 1, 2)),
        OpCase::new("tile", &[(&[2, 3], N)], |t, v| t.tile(v[0], 3)),
        OpCase::new("embedding", &[(&[6, 3], N)], |t, v| t.embedding(v[0], &[0, 2, 2, 5])),
        OpCase::new(
            "gru_cell",
            &[(&[2, 3], N), (&[2, 4], N), (&[3, 12], N), (&[4, 12], N), (&[12], N), (&[12], N)],
            |t, v| t.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]),
        ),
        OpCase::new("softmax_cross_entropy", &[(&[3, 4], N)], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 3, 1])
        }),
        OpCase::new("gaussian_reparam", &[(&[2, 3], N), (&[2, 3], P)], |t, v| {
            let eta = Tensor::from_fn([2, 3], |i| (i as f64 * 1.3).sin());
            t.gaussian_reparam(v[0], v[1], eta)
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let mut s = RngStream::new(3, 0);
        let x = s.normal_tensor(&[7]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn catalogue_passes_at_one_point() {
        let mut s = RngStream::new(1, 0);
        for case in op_catalogue() {
            let r = case.check_at(&mut s, 1e-6, 1e-5).unwrap();
            assert!(r.passed, "{}: {}", case.name, r.max_rel_error);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::zeros([1]);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0, 1.0).is_err());
    }
}
