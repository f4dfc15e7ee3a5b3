use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Scalar>(f: &impl Fn(&mut Tape<T>, Var) -> Result<Var>, x: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.data()[0].as_f64())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of width `2 * step`.
///
/// `f` must be deterministic; a function whose two evaluations at `x` differ
/// is rejected as unusable.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    step: f64,
) -> Result<GradCheck> {
    if eval(&f, x)?.to_bits() != eval(&f, x)?.to_bits() {
        return Err(Error::Contract(
            "function is nondeterministic; gradient check unusable".into(),
        ));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = grads.get_or_zeros(&tape, v).iter().map(|g| g.as_f64()).collect();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + step);
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = T::of(orig.as_f64() - step);
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_squares() {
        let x = random(&[7], 1);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn softmax_then_pick() {
        let x = random(&[4, 4], 2);
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v, Some(&Mask::Causal))?;
                let pick = t.constant(Tensor::from_fn(&[4, 4], |i| (i % 3) as f64));
                let p = t.mul(s, pick)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    }

    #[test]
    fn layer_norm_composite() {
        let x = random(&[3, 5], 3);
        let gain = random(&[5], 4);
        let bias = random(&[5], 5);
        let w = random(&[5, 5], 6);
        let r = grad_check(
            |t, v| {
                let g = t.constant(gain.clone());
                let b = t.constant(bias.clone());
                let wv = t.constant(w.clone());
                let y = t.layer_norm(v, g, b)?;
                let y = t.matmul(y, wv)?;
                let y = t.gelu(y);
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
    }

    #[test]
    fn every_op_within_tolerance_in_f32() {
        // 32-bit forward; the invariant allows 1e-2.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand32 = |shape: &[usize]| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let a = rand32(&[3, 4]);
        let b = rand32(&[4, 4]);
        let bias = rand32(&[4]);
        let table = rand32(&[5, 4]);
        let weights = rand32(&[3, 4]);
        type F = Box<dyn Fn(&mut Tape<f32>, Var) -> Result<Var>>;
        let w2 = weights.clone();
        let weighted = move |t: &mut Tape<f32>, y: Var| -> Result<Var> {
            let w = t.constant(w2.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        };
        let cases: Vec<(&str, F, Tensor<f32>)> = vec![
            ("matmul", {
                let (b, wf) = (b.clone(), weighted.clone());
                Box::new(move |t, v| {
                    let bv = t.constant(b.clone());
                    let y = t.matmul(v, bv)?;
                    wf(t, y)
                })
            }, a.clone()),
            ("matmul_nt", {
                let wf = weighted.clone();
                let other = rand32(&[4, 4]);
                Box::new(move |t, v| {
                    let o = t.constant(other.clone());
                    let y = t.matmul_nt(v, o)?;
                    wf(t, y)
                })
            }, a.clone()),
            ("add_bias", {
                let (wf, a) = (weighted.clone(), a.clone());
                Box::new(move |t, v| {
                    let x = t.constant(a.clone());
                    let y = t.add_bias(x, v)?;
                    wf(t, y)
                })
            }, bias.clone()),
            ("gelu", {
                let wf = weighted.clone();
                Box::new(move |t, v| {
                    let y = t.gelu(v);
                    wf(t, y)
                })
            }, a.clone()),
            ("gather", {
                let wf = weighted.clone();
                Box::new(move |t, v| {
                    let y = t.gather(v, &[4, 0, 4])?;
                    wf(t, y)
                })
            }, table.clone()),
            ("slice_concat", {
                let wf = weighted.clone();
                Box::new(move |t, v| {
                    let l = t.slice_cols(v, 0, 1)?;
                    let r = t.slice_cols(v, 1, 3)?;
                    let y = t.concat_cols(&[r, l])?;
                    wf(t, y)
                })
            }, a.clone()),
            ("cross_entropy", Box::new(|t, v| t.cross_entropy(v, &[1, 3, 0])), a.clone()),
        ];
        for (name, f, x) in cases {
            let r = grad_check(f, &x, 1e-2).unwrap();
            assert!(r.max_rel_error <= 1e-2, "{name}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn nondeterministic_function_is_flagged() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = random(&[2], 9);
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum(v);
                Ok(t.scale(s, f64::from(calls.get())))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
