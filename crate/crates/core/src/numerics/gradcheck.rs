use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    Ok(g.scalar(out))
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `h`, over every coordinate of `params`.
///
/// Returns `max |analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    finite_diff_check_sampled(store, params, h, usize::MAX, f)
}

/// Like [`finite_diff_check`] but probes at most `per_param` evenly spaced
/// coordinates of each parameter tensor.
pub fn finite_diff_check_sampled<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    per_param: usize,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::config("h", "step must be positive"));
    }
    let first = evaluate(store, &mut f)?;
    let second = evaluate(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    store.zero_grad();
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    g.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            store
                .grad(id)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.value(id).numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    for (k, &id) in params.iter().enumerate() {
        let n = store.value(id).numel();
        let stride = n.div_ceil(per_param.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (analytic[k][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![0.3, -1.2, 2.5, 4.0]));
        let err = finite_diff_check(&mut store, &[id], 1e-3, |s, g| {
            let x = g.param(s, id)?;
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn perceptron_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::xavier_uniform(3, 5, &mut rng));
        let b1 = store.add("b1", Tensor::row(vec![0.1, -0.2, 0.05, 0.3, -0.1]));
        let w2 = store.add("w2", Tensor::xavier_uniform(5, 1, &mut rng));
        let x = Tensor::matrix(4, 3, (0..12).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap();
        let y = Tensor::matrix(4, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let err = finite_diff_check(&mut store, &[w1, b1, w2], 1e-3, |s, g| {
            let xin = g.constant(x.clone())?;
            let yv = g.constant(y.clone())?;
            let a = g.param(s, w1)?;
            let h = g.matmul(xin, a)?;
            let b = g.param(s, b1)?;
            let h = g.add_row(h, b)?;
            let h = g.relu(h)?;
            let w = g.param(s, w2)?;
            let z = g.matmul(h, w)?;
            let p = g.sigmoid(z)?;
            let p = g.clamp(p, 1e-7, 1.0 - 1e-7)?;
            // y·log p + (1−y)·log(1−p)
            let lp = g.log(p)?;
            let q = g.affine(p, -1.0, 1.0)?;
            let lq = g.log(q)?;
            let ny = g.affine(yv, -1.0, 1.0)?;
            let t1 = g.mul(yv, lp)?;
            let t2 = g.mul(ny, lq)?;
            let t = g.add(t1, t2)?;
            let m = g.mean(t)?;
            g.scale(m, -1.0)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_backward_rule_is_detected() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![0.5, 1.0, -0.7]));
        // forward is sin, "derivative" claims sin too
        let err = finite_diff_check(&mut store, &[id], 1e-3, |s, g| {
            let x = g.param(s, id)?;
            let y = g.custom(x, f64::sin, f64::sin)?;
            g.sum(y)
        })
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn nondeterminism_is_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut calls = 0.0;
        let res = finite_diff_check(&mut store, &[id], 1e-3, |s, g| {
            calls += 1.0;
            let x = g.param(s, id)?;
            g.affine(x, 1.0, calls)
        });
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }
}
