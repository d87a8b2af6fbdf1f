//! Mutual-information constraints between the two representation spaces.
//!
//! Sufficiency: bilinear discriminators score (item chunk, pattern) pairs,
//! trained cooperatively with a Jensen-Shannon style loss so that patterns
//! keep label-relevant information. Disentanglement: a variational CLUB
//! upper bound between cross-space pattern vectors, with a Gaussian
//! conditional fitted by its own optimizer.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{read, Access, Mlp, PROB_CLIP};
use crate::numerics::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};

/// `σ(aᵀWb + bias)` with `a` of width `d/2` and `b` of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct BilinearDiscriminator {
    pub w: ParamId,
    pub bias: ParamId,
}

impl BilinearDiscriminator {
    /// Zero-initialized, so every pair starts at score 0.5.
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        BilinearDiscriminator {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[d / 2, d])),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, 1])),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.bias]
    }

    /// Scores of row pairs `(a[r], b[r])`, `n×1`.
    pub fn score(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        a: Var,
        b: Var,
        access: Access,
    ) -> Result<Var> {
        let w = read(g, store, self.w, access)?;
        let bias = read(g, store, self.bias, access)?;
        let aw = g.matmul(a, w)?;
        let logit = g.row_dot(aw, b)?;
        let logit = g.add_row(logit, bias)?;
        g.sigmoid(logit)
    }
}

/// In-batch `(anchor, partner)` index pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }
}

/// Uniform draw from `pool` excluding `skip` (which `pool` may contain).
fn draw_excluding<R: Rng>(pool: &[usize], skip: usize, rng: &mut R) -> Option<usize> {
    let at = pool.binary_search(&skip).ok();
    let n = pool.len() - usize::from(at.is_some());
    if n == 0 {
        return None;
    }
    let r = rng.random_range(0..n);
    Some(match at {
        Some(p) if r >= p => pool[r + 1],
        _ => pool[r],
    })
}

/// For every anchor, one same-label partner and one different-label
/// partner, each drawn uniformly from the rest of the batch. Anchors without
/// a partner of some kind are skipped for that kind.
pub fn sample_pairs<R: Rng>(labels: &[u8], rng: &mut R) -> PairSet {
    let by_label: [Vec<usize>; 2] = std::array::from_fn(|y| {
        (0..labels.len())
            .filter(|&i| usize::from(labels[i]) == y)
            .collect()
    });
    let mut out = PairSet::default();
    for (i, &y) in labels.iter().enumerate() {
        let y = usize::from(y.min(1));
        if let Some(j) = draw_excluding(&by_label[y], i, rng) {
            out.positive.push((i, j));
        }
        if let Some(j) = draw_excluding(&by_label[1 - y], i, rng) {
            out.negative.push((i, j));
        }
    }
    out
}

/// `−mean log D(pos)` or `−mean log(1 − D(neg))` over `pairs`.
#[allow(clippy::too_many_arguments)]
fn pair_term(
    g: &mut Graph,
    store: &ParamStore,
    disc: &BilinearDiscriminator,
    anchors: Var,
    patterns: Var,
    pairs: &[(usize, usize)],
    positive: bool,
    access: Access,
) -> Result<Var> {
    let ai: Vec<Option<usize>> = pairs.iter().map(|&(a, _)| Some(a)).collect();
    let bi: Vec<Option<usize>> = pairs.iter().map(|&(_, b)| Some(b)).collect();
    let a = g.gather_rows(anchors, &ai)?;
    let b = g.gather_rows(patterns, &bi)?;
    let s = disc.score(g, store, a, b, access)?;
    let s = g.clamp(s, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let s = if positive { s } else { g.affine(s, -1.0, 1.0)? };
    let l = g.log(s)?;
    let m = g.mean(l)?;
    g.scale(m, -1.0)
}

/// One domain of the sufficiency objective.
#[derive(Debug, Clone, Copy)]
pub struct SufficiencyDomain<'a> {
    pub disc: &'a BilinearDiscriminator,
    /// `n×(d/2)` intra chunks of the candidates.
    pub anchors: Var,
    /// `n×d` pooled pattern representations `H`.
    pub patterns: Var,
    pub pairs: &'a PairSet,
}

/// Sum over domains of the positive and negative pair terms. Empty pair
/// kinds contribute nothing; with no pairs at all the result is a constant 0
/// and the second value is `false`.
pub fn sufficiency_loss(
    g: &mut Graph,
    store: &ParamStore,
    domains: &[SufficiencyDomain<'_>],
    access: Access,
) -> Result<(Var, bool)> {
    let mut total: Option<Var> = None;
    for dom in domains {
        for (pairs, positive) in [(&dom.pairs.positive, true), (&dom.pairs.negative, false)] {
            if pairs.is_empty() {
                continue;
            }
            let t = pair_term(
                g,
                store,
                dom.disc,
                dom.anchors,
                dom.patterns,
                pairs,
                positive,
                access,
            )?;
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
    }
    match total {
        Some(t) => Ok((t, true)),
        None => Ok((g.constant(Tensor::scalar(0.0))?, false)),
    }
}

/// Bound on the predicted log-variance.
pub const LOGVAR_CLAMP: f64 = 8.0;

/// Diagonal Gaussian `q(y|x)` with MLP mean and log-variance heads.
#[derive(Debug, Clone)]
pub struct VclubEstimator {
    pub mean: Mlp,
    pub logvar: Mlp,
}

impl VclubEstimator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        VclubEstimator {
            mean: Mlp::new(store, &format!("{name}.mean"), &[d, hidden, d], rng),
            logvar: Mlp::new(store, &format!("{name}.logvar"), &[d, hidden, d], rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.mean.params();
        p.extend(self.logvar.params());
        p
    }

    /// `(μ(x), clamped log σ²(x))`.
    pub fn moments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        access: Access,
    ) -> Result<(Var, Var)> {
        let mu = self.mean.forward(g, store, x, access)?;
        let lv = self.logvar.forward(g, store, x, access)?;
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok((mu, lv))
    }
}

/// Mean over rows of `Σ_dims [−(y−μ)²/(2σ²) − ½ log σ²]`.
fn gaussian_loglik(g: &mut Graph, mu: Var, lv: Var, y: Var) -> Result<Var> {
    let n = g.value(y).rows();
    let diff = g.sub(y, mu)?;
    let sq = g.mul(diff, diff)?;
    let neg_lv = g.scale(lv, -1.0)?;
    let inv_var = g.exp(neg_lv)?;
    let quad = g.mul(sq, inv_var)?;
    let terms = g.add(quad, lv)?;
    let s = g.sum(terms)?;
    g.scale(s, -0.5 / n as f64)
}

fn check_pair_shapes(g: &Graph, x: Var, y: Var) -> Result<usize> {
    let (tx, ty) = (g.value(x), g.value(y));
    if tx.shape() != ty.shape() {
        return Err(Error::shape(
            "vclub",
            format!("x {:?} vs y {:?}", tx.shape(), ty.shape()),
        ));
    }
    Ok(tx.rows())
}

/// Mean conditional log-likelihood `log q(y_i|x_i)` (the `log 2π` constant dropped).
pub fn vclub_loglik(
    g: &mut Graph,
    store: &ParamStore,
    q: &VclubEstimator,
    x: Var,
    y: Var,
    access: Access,
) -> Result<Var> {
    check_pair_shapes(g, x, y)?;
    let (mu, lv) = q.moments(g, store, x, access)?;
    gaussian_loglik(g, mu, lv, y)
}

/// A random permutation of `0..n`, redrawn once if it came out as the identity.
pub fn shuffle_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    if p.iter().enumerate().all(|(i, &v)| i == v) {
        p.shuffle(rng);
    }
    p
}

/// vCLUB estimate: matched-pair log-likelihood minus the log-likelihood of
/// pairs with `y` shuffled by one random permutation.
pub fn vclub_mi_estimate<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    q: &VclubEstimator,
    x: Var,
    y: Var,
    rng: &mut R,
    access: Access,
) -> Result<Var> {
    let n = check_pair_shapes(g, x, y)?;
    if n < 2 {
        return Err(Error::MarginalPairs(n));
    }
    let perm: Vec<Option<usize>> = shuffle_permutation(n, rng).into_iter().map(Some).collect();
    let (mu, lv) = q.moments(g, store, x, access)?;
    let matched = gaussian_loglik(g, mu, lv, y)?;
    let y_shuf = g.gather_rows(y, &perm)?;
    let shuffled = gaussian_loglik(g, mu, lv, y_shuf)?;
    g.sub(matched, shuffled)
}

/// A vCLUB estimator with its own optimizer.
#[derive(Debug, Clone)]
pub struct VclubFitter {
    pub estimator: VclubEstimator,
    pub adam: AdamState,
}

impl VclubFitter {
    pub fn new(estimator: VclubEstimator, lr: f64, store: &ParamStore) -> Self {
        let adam = AdamState::new(AdamConfig::with_lr(lr), estimator.params(), store);
        VclubFitter { estimator, adam }
    }

    /// One ascent step on `log q(y|x)` over constant `x`, `y`. Only the
    /// estimator's parameters move. Returns the log-likelihood before the step.
    pub fn fit_step(&mut self, store: &mut ParamStore, x: &Tensor, y: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let yv = g.constant(y.clone())?;
        let ll = vclub_loglik(&mut g, store, &self.estimator, xv, yv, Access::Train)?;
        let value = g.scalar(ll);
        let loss = g.scale(ll, -1.0)?;
        store.zero_grad();
        g.backward(loss, store)?;
        self.adam.step(store)?;
        Ok(value)
    }
}

/// `I(H_TT; H_SS) + I(H_TS; H_ST)` under frozen estimators `q1`, `q2`.
/// Each estimate is floored at zero: a negative reading only means the
/// estimator lags, and following its gradient lets the encoder inflate
/// pattern norms without bound.
#[allow(clippy::too_many_arguments)]
pub fn disentanglement_loss<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    q1: &VclubEstimator,
    q2: &VclubEstimator,
    h_tt: Var,
    h_ss: Var,
    h_ts: Var,
    h_st: Var,
    rng: &mut R,
) -> Result<Var> {
    let a = vclub_mi_estimate(g, store, q1, h_tt, h_ss, rng, Access::Frozen)?;
    let b = vclub_mi_estimate(g, store, q2, h_ts, h_st, rng, Access::Frozen)?;
    let (a, b) = (g.relu(a)?, g.relu(b)?);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn rand_t(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| r.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pair_pools_for_balanced_batch() {
        let labels = [1, 1, 0, 0];
        let mut r = rng(0);
        let p = sample_pairs(&labels, &mut r);
        assert_eq!(p.positive.len(), 4);
        assert_eq!(p.negative.len(), 4);
        for &(a, b) in &p.positive {
            assert_eq!(b, a ^ 1, "single same-label partner");
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let p = sample_pairs(&labels, &mut r);
            seen.extend(p.negative.iter().filter(|(a, _)| *a == 0).map(|&(_, b)| b));
        }
        assert_eq!(seen, [2, 3].into_iter().collect());
    }

    #[test]
    fn single_label_batch_has_no_negatives() {
        let p = sample_pairs(&[1, 1, 1], &mut rng(1));
        assert!(p.negative.is_empty());
        assert_eq!(p.positive.len(), 3);
        assert!(sample_pairs(&[0], &mut rng(1)).is_empty());
    }

    proptest! {
        #[test]
        fn pairs_respect_label_agreement(labels in proptest::collection::vec(0u8..2, 0..40), seed in any::<u64>()) {
            let p = sample_pairs(&labels, &mut rng(seed));
            for &(a, b) in &p.positive {
                prop_assert!(a != b && labels[a] == labels[b]);
            }
            for &(a, b) in &p.negative {
                prop_assert!(labels[a] != labels[b]);
            }
            let ones = labels.iter().filter(|&&y| y == 1).count();
            let zeros = labels.len() - ones;
            let expect_pos = if ones > 1 { ones } else { 0 } + if zeros > 1 { zeros } else { 0 };
            prop_assert_eq!(p.positive.len(), expect_pos);
            prop_assert_eq!(p.negative.len(), if ones > 0 && zeros > 0 { labels.len() } else { 0 });
        }
    }

    struct Suff {
        store: ParamStore,
        dt: BilinearDiscriminator,
        ds: BilinearDiscriminator,
    }

    fn suff(d: usize) -> Suff {
        let mut store = ParamStore::new();
        let dt = BilinearDiscriminator::new(&mut store, "suf_disc_t", d);
        let ds = BilinearDiscriminator::new(&mut store, "suf_disc_s", d);
        Suff { store, dt, ds }
    }

    #[test]
    fn zero_discriminators_give_four_ln2() {
        let d = 8;
        let s = suff(d);
        let mut r = rng(2);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let (pt, ps) = (sample_pairs(&labels, &mut r), sample_pairs(&labels, &mut r));
        let mut g = Graph::new();
        let at = g.constant(rand_t(&mut r, 16, d / 2, 1.0)).unwrap();
        let ht = g.constant(rand_t(&mut r, 16, d, 1.0)).unwrap();
        let as_ = g.constant(rand_t(&mut r, 16, d / 2, 1.0)).unwrap();
        let hs = g.constant(rand_t(&mut r, 16, d, 1.0)).unwrap();
        let doms = [
            SufficiencyDomain {
                disc: &s.dt,
                anchors: at,
                patterns: ht,
                pairs: &pt,
            },
            SufficiencyDomain {
                disc: &s.ds,
                anchors: as_,
                patterns: hs,
                pairs: &ps,
            },
        ];
        let (l, any) = sufficiency_loss(&mut g, &s.store, &doms, Access::Frozen).unwrap();
        assert!(any);
        assert!((g.scalar(l) - 4.0 * LN_2).abs() < 1e-9);

        let empty = PairSet::default();
        let doms = [SufficiencyDomain {
            disc: &s.dt,
            anchors: at,
            patterns: ht,
            pairs: &empty,
        }];
        let (l, any) = sufficiency_loss(&mut g, &s.store, &doms, Access::Frozen).unwrap();
        assert!(!any);
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn near_perfect_discriminator_loss_vanishes() {
        let s = suff(2);
        let mut store = s.store;
        store.get_mut(s.dt.w).value = Tensor::matrix(1, 2, vec![50.0, 0.0]).unwrap();
        let pairs = PairSet {
            positive: vec![(0, 0)],
            negative: vec![(1, 1)],
        };
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap())
            .unwrap();
        let h = g
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap())
            .unwrap();
        let doms = [SufficiencyDomain {
            disc: &s.dt,
            anchors: a,
            patterns: h,
            pairs: &pairs,
        }];
        let (l, _) = sufficiency_loss(&mut g, &store, &doms, Access::Frozen).unwrap();
        assert!(g.scalar(l) > 0.0 && g.scalar(l) < 1e-6);
    }

    #[test]
    fn discriminator_scores_in_open_interval() {
        let mut s = suff(4);
        let mut r = rng(3);
        s.store.get_mut(s.dt.w).value = rand_t(&mut r, 2, 4, 100.0);
        let mut g = Graph::new();
        let a = g.constant(rand_t(&mut r, 50, 2, 10.0)).unwrap();
        let b = g.constant(rand_t(&mut r, 50, 4, 10.0)).unwrap();
        let sc = s.dt.score(&mut g, &s.store, a, b, Access::Frozen).unwrap();
        let c = g.clamp(sc, PROB_CLIP, 1.0 - PROB_CLIP).unwrap();
        assert!(g.value(c).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn sufficiency_gradients() {
        let d = 6;
        let mut r = rng(4);
        let mut s = suff(d);
        for id in [s.dt.w, s.ds.w] {
            s.store.get_mut(id).value = rand_t(&mut r, d / 2, d, 0.5);
        }
        let labels: Vec<u8> = (0..10).map(|_| r.random_range(0..2)).collect();
        let (pt, ps) = (sample_pairs(&labels, &mut r), sample_pairs(&labels, &mut r));
        let tabs: Vec<ParamId> = [(d / 2, "at"), (d, "ht"), (d / 2, "as"), (d, "hs")]
            .iter()
            .map(|&(c, n)| s.store.add(n, rand_t(&mut r, 10, c, 1.0)))
            .collect();
        let mut params = vec![s.dt.w, s.dt.bias, s.ds.w, s.ds.bias];
        params.extend(&tabs);
        let (dt, ds) = (s.dt, s.ds);
        let err = finite_diff_check(&mut s.store, &params, 1e-5, |st, g| {
            let v: Vec<Var> = tabs
                .iter()
                .map(|&id| g.param(st, id))
                .collect::<Result<_>>()?;
            let doms = [
                SufficiencyDomain {
                    disc: &dt,
                    anchors: v[0],
                    patterns: v[1],
                    pairs: &pt,
                },
                SufficiencyDomain {
                    disc: &ds,
                    anchors: v[2],
                    patterns: v[3],
                    pairs: &ps,
                },
            ];
            Ok(sufficiency_loss(g, st, &doms, Access::Train)?.0)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn estimator(d: usize, seed: u64) -> (ParamStore, VclubEstimator) {
        let mut store = ParamStore::new();
        let q = VclubEstimator::new(&mut store, "vclub1", d, 16, &mut rng(seed));
        (store, q)
    }

    #[test]
    fn loglik_matches_density_reference() {
        let d = 3;
        let (store, q) = estimator(d, 5);
        let mut r = rng(6);
        let (x, y) = (rand_t(&mut r, 20, d, 2.0), rand_t(&mut r, 20, d, 2.0));
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x).unwrap(), g.constant(y.clone()).unwrap());
        let (mu, lv) = q.moments(&mut g, &store, xv, Access::Frozen).unwrap();
        let ll = vclub_loglik(&mut g, &store, &q, xv, yv, Access::Frozen).unwrap();
        let (mu, lv) = (g.value(mu).data().to_vec(), g.value(lv).data().to_vec());
        let mut total = 0.0;
        for (i, yi) in y.data().iter().enumerate() {
            let var = lv[i].exp();
            // log of the normal density with the 2π factor removed
            let pdf = (-(yi - mu[i]).powi(2) / (2.0 * var)).exp() / var.sqrt();
            total += pdf.ln();
        }
        assert!((g.scalar(ll) - total / 20.0).abs() < 1e-10);
    }

    #[test]
    fn loglik_analytic_cases() {
        let d = 4;
        let mut g = Graph::new();
        let y = g
            .constant(Tensor::matrix(2, d, (0..8).map(f64::from).collect()).unwrap())
            .unwrap();
        let zero = g.constant(Tensor::zeros(&[2, d])).unwrap();
        let ll = gaussian_loglik(&mut g, y, zero, y).unwrap();
        assert_eq!(g.scalar(ll), 0.0);
        let ln2 = g
            .constant(Tensor::matrix(2, d, vec![LN_2; 8]).unwrap())
            .unwrap();
        let ll2 = gaussian_loglik(&mut g, y, ln2, y).unwrap();
        assert!((g.scalar(ll2) + 0.5 * LN_2 * d as f64).abs() < 1e-12);
    }

    #[test]
    fn logvar_is_clamped() {
        let (mut store, q) = estimator(2, 7);
        let last = *q.logvar.layers.last().unwrap();
        store.get_mut(last.bias).value = Tensor::matrix(1, 2, vec![100.0, -100.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let (_, lv) = q.moments(&mut g, &store, x, Access::Frozen).unwrap();
        let v = g.value(lv).data();
        assert!(v[0] <= LOGVAR_CLAMP && v[1] >= -LOGVAR_CLAMP);
    }

    #[test]
    fn mi_estimate_degenerate_cases() {
        let (store, q) = estimator(3, 8);
        let mut r = rng(9);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut r, 10, 3, 1.0)).unwrap();
        let y = g
            .constant(Tensor::matrix(10, 3, [0.3, -0.2, 0.9].repeat(10)).unwrap())
            .unwrap();
        let mi = vclub_mi_estimate(&mut g, &store, &q, x, y, &mut r, Access::Frozen).unwrap();
        assert!(g.scalar(mi).abs() < 1e-12);

        let x1 = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(
            vclub_mi_estimate(&mut g, &store, &q, x1, x1, &mut r, Access::Frozen),
            Err(Error::MarginalPairs(1))
        ));
    }

    #[test]
    fn permutation_never_identity_for_two() {
        let mut r = rng(10);
        let mut hits = 0;
        for _ in 0..200 {
            let p = shuffle_permutation(2, &mut r);
            hits += usize::from(p == [1, 0]);
        }
        // identity survives only when both draws are identity (prob 1/4)
        assert!(hits > 120, "{hits}");
    }

    #[test]
    fn fit_improves_loglik_and_isolates() {
        let d = 4;
        let mut store = ParamStore::new();
        let main = store.add("main", Tensor::row(vec![1.0, 2.0]));
        let est = VclubEstimator::new(&mut store, "vclub1", d, 64, &mut rng(11));
        let mut fitter = VclubFitter::new(est, 1e-3, &store);
        let mut r = rng(12);
        let x = rand_t(&mut r, 256, d, 1.0);
        let before_main = store.value(main).clone();
        let trace: Vec<f64> = (0..50)
            .map(|_| fitter.fit_step(&mut store, &x, &x).unwrap())
            .collect();
        let drops = trace.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops <= 5, "{drops} non-monotone steps");
        assert_eq!(store.value(main), &before_main);
        assert!(store.grad(main).is_none());
        for _ in 0..1950 {
            fitter.fit_step(&mut store, &x, &x).unwrap();
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let (mu, _) = fitter
            .estimator
            .moments(&mut g, &store, xv, Access::Frozen)
            .unwrap();
        let mse = g
            .value(mu)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x.numel() as f64;
        assert!(mse < 1e-2, "{mse}");
    }

    #[test]
    fn disentanglement_grads_skip_estimators() {
        let d = 4;
        let mut store = ParamStore::new();
        let q1 = VclubEstimator::new(&mut store, "vclub1", d, 8, &mut rng(13));
        let q2 = VclubEstimator::new(&mut store, "vclub2", d, 8, &mut rng(14));
        let mut r = rng(15);
        let hs: Vec<ParamId> = (0..4)
            .map(|i| store.add(format!("h{i}"), rand_t(&mut r, 6, d, 1.0)))
            .collect();
        let est: Vec<ParamId> = q1.params().into_iter().chain(q2.params()).collect();

        // Unfloored estimates: gradients reach the inputs only, and match finite differences.
        let raw = |g: &mut Graph, s: &ParamStore, r: &mut ChaCha8Rng| -> Result<(Var, Var, Var)> {
            let v: Vec<Var> = hs.iter().map(|&id| g.param(s, id)).collect::<Result<_>>()?;
            let a = vclub_mi_estimate(g, s, &q1, v[0], v[1], r, Access::Frozen)?;
            let b = vclub_mi_estimate(g, s, &q2, v[2], v[3], r, Access::Frozen)?;
            Ok((g.add(a, b)?, a, b))
        };
        let mut g = Graph::new();
        let (sum, a, b) = raw(&mut g, &store, &mut rng(16)).unwrap();
        let (a, b) = (g.scalar(a), g.scalar(b));
        store.zero_grad();
        g.backward(sum, &mut store).unwrap();
        assert_eq!(store.grad_norm_sq(&est), 0.0);
        assert!(store.grad_norm_sq(&hs) > 0.0);
        let err = finite_diff_check(&mut store, &hs, 1e-5, |s, g| Ok(raw(g, s, &mut rng(16))?.0))
            .unwrap();
        assert!(err < 1e-4, "{err}");

        // The loss floors each estimate at zero.
        let mut g = Graph::new();
        let v: Vec<Var> = hs.iter().map(|&id| g.param(&store, id).unwrap()).collect();
        let l = disentanglement_loss(
            &mut g,
            &store,
            &q1,
            &q2,
            v[0],
            v[1],
            v[2],
            v[3],
            &mut rng(16),
        )
        .unwrap();
        assert_eq!(g.scalar(l), a.max(0.0) + b.max(0.0));
    }
}
