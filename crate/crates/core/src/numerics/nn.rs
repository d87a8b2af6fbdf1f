//! Small layer building blocks on top of [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Whether a forward pass records parameters as trainable leaves or as
/// stop-gradient constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Train,
    Frozen,
}

pub fn read(g: &mut Graph, store: &ParamStore, id: ParamId, access: Access) -> Result<Var> {
    match access {
        Access::Train => g.param(store, id),
        Access::Frozen => g.frozen(store, id),
    }
}

/// Affine map `x·W + b` with Xavier-initialized `W` and zero `b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            Tensor::xavier_uniform(fan_in, fan_out, rng),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        access: Access,
    ) -> Result<Var> {
        let w = read(g, store, self.weight, access)?;
        let b = read(g, store, self.bias, access)?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of [`Linear`] layers with ReLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output, e.g. `[256, 128, 64, 32]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        access: Access,
    ) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: cols,
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, access)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Clip bound applied to probabilities before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities `p` against constant 0/1 `labels`
/// (both `n×1`), with `p` clipped to `[1e-7, 1 − 1e-7]`.
pub fn bce(g: &mut Graph, p: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(p).numel();
    if labels.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    let shape = g.value(p).shape().to_vec();
    let y = g.constant(Tensor::new(shape.clone(), labels.to_vec())?)?;
    let not_y = g.constant(Tensor::new(
        shape,
        labels.iter().map(|v| 1.0 - v).collect(),
    )?)?;
    let pc = g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let log_p = g.log(pc)?;
    let q = g.affine(pc, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g
            .constant(Tensor::matrix(1, 1, vec![0.5]).unwrap())
            .unwrap();
        let l = bce(&mut g, p, &[1.0]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let mut g = Graph::new();
        let p = g
            .constant(Tensor::matrix(1, 1, vec![0.5]).unwrap())
            .unwrap();
        assert!(matches!(
            bce(&mut g, p, &[2.0]),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 6, 3, 1], &mut rng);
        for id in mlp.params() {
            for v in store.get_mut(id).value.data_mut() {
                *v += 0.05;
            }
        }
        let x = Tensor::matrix(5, 4, (0..20).map(|v| (v as f64).cos()).collect()).unwrap();
        let params = mlp.params();
        let err = finite_diff_check(&mut store, &params, 1e-4, |s, g| {
            let xv = g.constant(x.clone())?;
            let z = mlp.forward(g, s, xv, Access::Train)?;
            let p = g.sigmoid(z)?;
            bce(g, p, &[1.0, 0.0, 0.0, 1.0, 1.0])
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
