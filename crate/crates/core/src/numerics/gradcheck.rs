//! Central-difference oracle for reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} outside (0, 1e-2]"
        )));
    }
    Ok(())
}

fn scalar_value<T: Scalar>(g: &Graph<T>, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::Oracle(format!(
            "function output has {} elements",
            t.len()
        )));
    }
    let v = t.item().to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::Oracle(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Max relative error between reverse-mode gradients of `f` with respect to
/// each input element and `(f(x+eps) - f(x-eps)) / (2·eps)`.
pub fn gradient_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    let step = T::of(eps);
    for (t, grad) in analytic.iter().enumerate() {
        for e in 0..xs[t].len() {
            let orig = xs[t].data()[e];
            xs[t].data_mut()[e] = orig + step;
            let plus = eval(&xs)?;
            xs[t].data_mut()[e] = orig - step;
            let minus = eval(&xs)?;
            xs[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[e].to_f64_lossy(), numeric));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
}

/// Like [`gradient_check`], perturbing every parameter in `store` instead of
/// graph inputs.
pub fn gradient_check_params<T, F>(
    store: &mut ParamStore<T>,
    f: F,
    eps: f64,
) -> Result<GradientReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    gradient_check_prefix(store, "", f, eps)
}

/// [`gradient_check_params`] restricted to parameters whose names start with
/// `prefix`; the rest stay fixed.
pub fn gradient_check_prefix<T, F>(
    store: &mut ParamStore<T>,
    prefix: &str,
    f: F,
    eps: f64,
) -> Result<GradientReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_eps(eps)?;
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    g.accumulate_param_grads(store);

    let step = T::of(eps);
    let mut report = GradientReport {
        max_rel_error: 0.0,
        worst_param: None,
        checked: 0,
    };
    let ids: Vec<_> = store.with_prefix(prefix).collect();
    if ids.is_empty() {
        return Err(Error::Oracle(format!("no parameters named {prefix}*")));
    }
    for id in ids {
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + step;
            let mut gp = Graph::new();
            let o = f(&mut gp, store)?;
            let plus = scalar_value(&gp, o)?;
            store.value_mut(id).data_mut()[e] = orig - step;
            let mut gm = Graph::new();
            let o = f(&mut gm, store)?;
            let minus = scalar_value(&gm, o)?;
            store.value_mut(id).data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(store.grad(id).data()[e].to_f64_lossy(), numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(store.param(id).name.clone());
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = random(3, 2, &mut rng);
        let err = gradient_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add_broadcast(y, v[2])?;
                let p = g.constant(probe.clone());
                let y = g.mul(y, p)?;
                Ok(g.sum(y))
            },
            &[
                random(3, 4, &mut rng),
                random(4, 2, &mut rng),
                random(1, 2, &mut rng),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn softmax_then_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let probe = random(6, 3, &mut rng);
        let err = gradient_check(
            |g, v| {
                let w = g.block_softmax(v[0], 3)?;
                let p = g.constant(probe.clone());
                let y = g.mul(w, p)?;
                Ok(g.sum(y))
            },
            &[random(6, 3, &mut rng)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let err = gradient_check(
            |g, v| {
                let a = g.gelu(v[0]);
                let b = g.sub(a, v[1])?;
                let c = g.scale(b, 0.7);
                let d = g.gather_rows(c, vec![2, 0, 0, 1])?;
                let e = g.concat_rows(&[d, v[1]])?;
                let f = g.reshape(e, 7, 2)?;
                let m = g.mean(f);
                let s = g.mse(v[0], v[1])?;
                let t = g.add(m, s)?;
                Ok(t)
            },
            &[random(3, 2, &mut rng), random(3, 2, &mut rng)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fused_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let probe = random(4, 4, &mut rng);
        let shape = super::super::graph::AttentionShape {
            batch: 2,
            heads: 2,
            seq_q: 2,
            seq_k: 3,
        };
        let err = gradient_check(
            |g, v| {
                let n = g.layer_norm(v[0], v[3], v[4])?;
                let a = g.attention(n, v[1], v[2], shape, None)?;
                let p = g.constant(probe.clone());
                let y = g.mul(a, p)?;
                Ok(g.sum(y))
            },
            &[
                random(4, 4, &mut rng),
                random(6, 4, &mut rng),
                random(6, 4, &mut rng),
                random(1, 4, &mut rng),
                random(1, 4, &mut rng),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn mixture_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let probe = random(2 * 3, 2, &mut rng);
        let err = gradient_check(
            |g, v| {
                let w = g.block_softmax(v[0], 4)?;
                let m = g.mixture(w, v[1], 4, 3)?;
                let p = g.constant(probe.clone());
                let y = g.mul(m, p)?;
                Ok(g.sum(y))
            },
            &[random(2 * 4, 2, &mut rng), random(2 * 4 * 3, 2, &mut rng)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bad_step_and_nan_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1]);
        assert!(matches!(
            gradient_check(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&x), 0.5),
            Err(Error::Domain(_))
        ));
        let nan = Tensor::<f64>::full(&[1, 1], f64::NAN);
        assert!(matches!(
            gradient_check(|g, v| Ok(g.sum(v[0])), &[nan], 1e-4),
            Err(Error::Oracle(_))
        ));
    }
}
