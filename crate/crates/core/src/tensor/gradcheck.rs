//! Central finite-difference checks for tape gradients (f64 only).

use rand::Rng;

use super::{Parameterized, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so exact zeros compare absolutely.
const REL_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar-valued `op` at `point` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε`, one element at a time.
pub fn gradient_check<F>(
    op: F,
    point: &Tensor<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Var,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = op(&tape, v);
        let y = tape.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::non_finite("gradient_check forward"));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = op(&tape, x);
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(
            "gradient_check: op must return a scalar".into(),
        ));
    }
    let grads = tape.backward(out);
    let analytic = grads.get(x).expect("leaf gradient").to_f64_vec();
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("gradient_check backward"));
    }

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    /// `(parameter name, flat index, analytic, numeric, relative error)`.
    pub probes: Vec<(String, usize, f64, f64, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Picks `count` random `(parameter, element)` pairs, weighting parameters by size.
pub fn choose_probes<M: Parameterized<f64>>(
    model: &M,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(String, usize)> {
    let mut sizes = Vec::new();
    model.visit(&mut |p| sizes.push((p.name.clone(), p.value.len())));
    let total: usize = sizes.iter().map(|s| s.1).sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.gen_range(0..total);
            for (name, len) in &sizes {
                if pick < *len {
                    return (name.clone(), pick);
                }
                pick -= len;
            }
            unreachable!("probe index within total")
        })
        .collect()
}

/// Finite-difference check of selected parameter elements of a whole model.
pub fn probe_param_gradients<M, F>(
    model: &mut M,
    loss: F,
    probes: &[(String, usize)],
    epsilon: f64,
    tolerance: f64,
) -> Result<ProbeReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &Tape<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let out = loss(model, &tape)?;
    let grads = tape.backward(out).into_param_grads();

    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        let out = loss(m, &tape)?;
        let y = tape.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::non_finite("probe forward"));
        }
        Ok(y)
    };
    let set = |m: &mut M, name: &str, idx: usize, delta: f64| {
        m.visit_mut(&mut |p| {
            if p.name == name {
                p.value.data_mut()[idx] += delta;
            }
        });
    };

    let mut rows = Vec::with_capacity(probes.len());
    for (name, idx) in probes {
        let analytic = grads
            .get(name)
            .map(|g| g.data()[*idx])
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for parameter `{name}`")))?;
        set(model, name, *idx, epsilon);
        let plus = eval(model)?;
        set(model, name, *idx, -2.0 * epsilon);
        let minus = eval(model)?;
        set(model, name, *idx, epsilon);
        let numeric = (plus - minus) / (2.0 * epsilon);
        rows.push((
            name.clone(),
            *idx,
            analytic,
            numeric,
            rel_error(analytic, numeric),
        ));
    }
    let max_rel_error = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    Ok(ProbeReport {
        probes: rows,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_rng;
    use std::rc::Rc;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = init_rng(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(shape, &data)
    }

    fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> Var {
        // Random projection so every output element gets a distinct weight.
        let w = tape.constant(random(&tape.shape(y), seed));
        let p = tape.mul(y, w);
        tape.sum(p)
    }

    fn check(f: impl Fn(&Tape<f64>, Var) -> Var, shape: &[usize]) {
        let r = gradient_check(f, &random(shape, 42), 1e-5, 1e-3).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn sigmoid_at_zero() {
        let r = gradient_check(
            |t, x| {
                let y = t.sigmoid(x);
                t.sum(y)
            },
            &Tensor::from_f64(&[1], &[0.0]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!((r.analytic[0] - 0.25).abs() < 1e-15);
        assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn unary_ops() {
        check(
            |t, x| {
                let y = t.gelu(x);
                weighted_sum(t, y, 1)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let y = t.sigmoid(x);
                weighted_sum(t, y, 1)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let y = t.tanh(x);
                weighted_sum(t, y, 1)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let y = t.exp(x);
                weighted_sum(t, y, 1)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let s = t.sigmoid(x);
                let y = t.logit(s);
                weighted_sum(t, y, 1)
            },
            &[3, 4],
        );
    }

    #[test]
    fn binary_and_broadcast_ops() {
        check(
            |t, x| {
                let c = t.constant(random(&[3, 4], 7));
                let y = t.mul(x, c);
                let z = t.add(y, x);
                let w = t.sub(z, c);
                weighted_sum(t, w, 2)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let b = t.constant(random(&[4], 7));
                let y = t.mul_channels(x, b);
                let z = t.add_bias(y, b);
                weighted_sum(t, z, 2)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let c = t.constant(random(&[3, 4], 7));
                let s = t.reshape(x, &[4]);
                let y = t.add_bias(c, s);
                weighted_sum(t, y, 2)
            },
            &[2, 2],
        );
        check(
            |t, x| {
                let c = t.constant(random(&[3, 4], 7));
                let y = t.mul_rows(c, x);
                weighted_sum(t, y, 2)
            },
            &[3],
        );
        check(
            |t, x| {
                let c = t.constant(random(&[3], 7));
                let y = t.mul_rows(x, c);
                let z = t.scale(y, -1.7);
                weighted_sum(t, z, 2)
            },
            &[3, 4],
        );
    }

    #[test]
    fn matmul_variants() {
        for ta in [false, true] {
            for tb in [false, true] {
                let bshape = if tb { [5, 4] } else { [4, 5] };
                let ashape = if ta { [4, 3] } else { [3, 4] };
                check(
                    move |t, x| {
                        let b = t.constant(random(&bshape, 3));
                        let y = t.matmul_t(x, b, ta, tb);
                        weighted_sum(t, y, 4)
                    },
                    &ashape,
                );
                check(
                    move |t, x| {
                        let a = t.constant(random(&ashape, 3));
                        let y = t.matmul_t(a, x, ta, tb);
                        weighted_sum(t, y, 4)
                    },
                    &bshape,
                );
                let bshape3 = [2, bshape[0], bshape[1]];
                let ashape3 = [2, ashape[0], ashape[1]];
                check(
                    move |t, x| {
                        let b = t.constant(random(&bshape3, 3));
                        let y = t.matmul_t(x, b, ta, tb);
                        weighted_sum(t, y, 4)
                    },
                    &ashape3,
                );
                check(
                    move |t, x| {
                        let a = t.constant(random(&ashape3, 3));
                        let y = t.matmul_t(a, x, ta, tb);
                        weighted_sum(t, y, 4)
                    },
                    &bshape3,
                );
            }
        }
        // rank-3 lhs against a shared 2-D rhs
        check(
            |t, x| {
                let b = t.constant(random(&[4, 2], 3));
                let y = t.matmul(x, b);
                weighted_sum(t, y, 4)
            },
            &[2, 3, 4],
        );
    }

    #[test]
    fn softmax_and_layer_norm() {
        check(
            |t, x| {
                let y = t.softmax(x);
                weighted_sum(t, y, 5)
            },
            &[3, 5],
        );
        check(
            |t, x| {
                let g = t.constant(random(&[8], 6));
                let b = t.constant(random(&[8], 7));
                let y = t.layer_norm(x, g, b, 1e-5);
                weighted_sum(t, y, 5)
            },
            &[4, 8],
        );
        check(
            |t, x| {
                let h = t.constant(random(&[4, 8], 6));
                let b = t.constant(random(&[8], 7));
                let y = t.layer_norm(h, x, b, 1e-5);
                weighted_sum(t, y, 5)
            },
            &[8],
        );
    }

    #[test]
    fn structural_ops() {
        check(
            |t, x| {
                let y = t.mean_middle(x);
                weighted_sum(t, y, 8)
            },
            &[2, 3, 4],
        );
        check(
            |t, x| {
                let y = t.permute3(x, [1, 0, 2]);
                weighted_sum(t, y, 8)
            },
            &[2, 3, 4],
        );
        check(
            |t, x| {
                let y = t.select_rows(x, &[2, 0, 2]);
                weighted_sum(t, y, 8)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let taps = Rc::new(vec![vec![(0, 0.25), (2, 0.75)], vec![(1, 1.0)], vec![]]);
                let y = t.mix_rows(x, taps);
                weighted_sum(t, y, 8)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let c = t.constant(random(&[2, 4], 1));
                let y = t.concat_rows(&[x, c, x]);
                weighted_sum(t, y, 8)
            },
            &[3, 4],
        );
        check(
            |t, x| {
                let m = t.mean(x);
                t.scale(m, 3.0)
            },
            &[3, 4],
        );
    }

    #[test]
    fn loss_ops() {
        let target: Vec<f64> = random(&[3, 4], 99).into_data();
        check(move |t, x| t.l1_loss(x, &target), &[3, 4]);
        check(|t, x| t.cross_entropy(x, &[0, 4, 2]), &[3, 5]);
        check(
            |t, x| t.focal_loss(x, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 0.25, 2.0),
            &[6],
        );
    }

    #[test]
    fn non_finite_is_reported() {
        let r = gradient_check(
            |t, x| {
                let y = t.logit(x);
                t.sum(y)
            },
            &Tensor::from_f64(&[1], &[2.0]),
            1e-5,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
