use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F, Func>(f: Func, point: &Tensor<F>, step: F) -> Result<F>
where
    F: Scalar,
    Func: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    if step <= F::zero() {
        return Err(Error::Usage("grad_check: step must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape.grad(x).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); point.numel()]);

    let eval = |p: Tensor<F>| -> Result<F> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let out = f(&mut t, x)?;
        Ok(t.value(out).item())
    };
    let two = F::one() + F::one();
    let mut worst = F::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data[i] = plus.data[i] + step;
        let mut minus = point.clone();
        minus.data[i] = minus.data[i] - step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(F::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OperatorCheck {
    pub operator: &'static str,
    pub error: f64,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces a tensor-valued expression to a scalar with fixed random weights.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Gradient check of every tape operator (and each differentiable input)
/// on random inputs drawn from `seed`.
pub fn operator_sweep(seed: u64) -> Result<Vec<OperatorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-4;
    let mut out = Vec::new();
    let mut failure = None;
    let mut check = |operator: &'static str, point: Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| match grad_check(
        |tp, x| f(tp, x),
        &point,
        step,
    ) {
        Ok(error) => out.push(OperatorCheck { operator, error }),
        Err(e) => failure = failure.take().or(Some(e)),
    };

    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let bt = random(&[5, 4], &mut rng);
    {
        let b = b.clone();
        check("matmul/lhs", a.clone(), &move |tp, x| {
            let b = tp.constant(b.clone());
            let y = tp.matmul(x, b)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let a = a.clone();
        check("matmul/rhs", b.clone(), &move |tp, x| {
            let a = tp.constant(a.clone());
            let y = tp.matmul(a, x)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let a = a.clone();
        check("matmul_t/rhs", bt.clone(), &move |tp, x| {
            let a = tp.constant(a.clone());
            let y = tp.matmul_t(a, x)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let bt = bt.clone();
        check("matmul_t/lhs", a.clone(), &move |tp, x| {
            let b = tp.constant(bt.clone());
            let y = tp.matmul_t(x, b)?;
            weighted_sum(tp, y, seed)
        });
    }
    let ba = random(&[2, 3, 4], &mut rng);
    let bb = random(&[2, 4, 3], &mut rng);
    {
        let bb = bb.clone();
        check("bmm/lhs", ba.clone(), &move |tp, x| {
            let b = tp.constant(bb.clone());
            let y = tp.matmul(x, b)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let ba = ba.clone();
        check("bmm/rhs", bb.clone(), &move |tp, x| {
            let a = tp.constant(ba.clone());
            let y = tp.matmul(a, x)?;
            weighted_sum(tp, y, seed)
        });
    }
    let other = random(&[3, 4], &mut rng);
    {
        let o = other.clone();
        check("add", a.clone(), &move |tp, x| {
            let o = tp.constant(o.clone());
            let y = tp.add(x, o)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let o = other.clone();
        check("mul", a.clone(), &move |tp, x| {
            let o = tp.constant(o.clone());
            let y = tp.mul(x, o)?;
            weighted_sum(tp, y, seed)
        });
    }
    check("mul/self", a.clone(), &move |tp, x| {
        let y = tp.mul(x, x)?;
        weighted_sum(tp, y, seed)
    });
    let bias = random(&[4], &mut rng);
    {
        let bias = bias.clone();
        check("add_bias/x", a.clone(), &move |tp, x| {
            let b = tp.constant(bias.clone());
            let y = tp.add_bias(x, b)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let a = a.clone();
        check("add_bias/bias", bias.clone(), &move |tp, b| {
            let x = tp.constant(a.clone());
            let y = tp.add_bias(x, b)?;
            weighted_sum(tp, y, seed)
        });
    }
    // keep ReLU inputs away from the kink so central differences are valid
    let mut r = random(&[3, 4], &mut rng);
    r.data.iter_mut().for_each(|v| *v = v.signum() * (v.abs() + 0.05));
    check("relu", r, &move |tp, x| {
        let y = tp.relu(x);
        weighted_sum(tp, y, seed)
    });
    check("softmax", random(&[3, 6], &mut rng), &move |tp, x| {
        let y = tp.softmax(x)?;
        weighted_sum(tp, y, seed)
    });
    let ln_x = random(&[3, 8], &mut rng);
    let gain = random(&[8], &mut rng);
    let shift = random(&[8], &mut rng);
    {
        let (g, s) = (gain.clone(), shift.clone());
        check("layer_norm/x", ln_x.clone(), &move |tp, x| {
            let g = tp.constant(g.clone());
            let s = tp.constant(s.clone());
            let y = tp.layer_norm(x, g, s, 1e-5)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let (x0, s) = (ln_x.clone(), shift.clone());
        check("layer_norm/gain", gain.clone(), &move |tp, g| {
            let x = tp.constant(x0.clone());
            let s = tp.constant(s.clone());
            let y = tp.layer_norm(x, g, s, 1e-5)?;
            weighted_sum(tp, y, seed)
        });
    }
    {
        let (x0, g) = (ln_x.clone(), gain.clone());
        check("layer_norm/shift", shift.clone(), &move |tp, s| {
            let x = tp.constant(x0.clone());
            let g = tp.constant(g.clone());
            let y = tp.layer_norm(x, g, s, 1e-5)?;
            weighted_sum(tp, y, seed)
        });
    }
    check("embedding", random(&[5, 3], &mut rng), &move |tp, table| {
        let y = tp.embedding(table, &[4, 0, 4, 2])?;
        weighted_sum(tp, y, seed)
    });
    let c2 = random(&[3, 2], &mut rng);
    check("concat", a.clone(), &move |tp, x| {
        let o = tp.constant(c2.clone());
        let y = tp.concat(&[o, x, x])?;
        weighted_sum(tp, y, seed)
    });
    check("scale", a.clone(), &move |tp, x| {
        let y = tp.scale(x, -1.7);
        weighted_sum(tp, y, seed)
    });
    check("masked_fill+softmax", random(&[2, 4], &mut rng), &move |tp, x| {
        let m = tp.masked_fill(x, &[false, true, false, false, false, false, true, true])?;
        let y = tp.softmax(m)?;
        weighted_sum(tp, y, seed)
    });
    check("cross_entropy", random(&[4, 7], &mut rng), &move |tp, x| tp.cross_entropy(x, &[6, 0, 3, 3], &[true, false, true, true]));
    check("reshape", a.clone(), &move |tp, x| {
        let y = tp.reshape(x, &[2, 6])?;
        weighted_sum(tp, y, seed)
    });
    check("swap_axes12", random(&[2, 3, 2, 2], &mut rng), &move |tp, x| {
        let y = tp.swap_axes12(x)?;
        weighted_sum(tp, y, seed)
    });
    check("sum", a, &move |tp, x| Ok(tp.sum(x)));
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
