//! Click-probability backbones over raw features, history and pattern vectors.

use rand::Rng;

use crate::config::{BackboneKind, PatternFlags};
use crate::error::{Error, Result};
use crate::numerics::nn::{Access, Mlp};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Per-batch inputs. All feature blocks are `n×d`; `history` holds `n·g`
/// rows with zero rows at padding; patterns are `n×2d` in the fixed order
/// TT, SS, TS, ST.
#[derive(Debug, Clone)]
pub struct BackboneParts {
    pub user: Var,
    pub item: Var,
    pub context: Option<Var>,
    pub history: Var,
    pub mask: Vec<bool>,
    pub patterns: [Option<Var>; 4],
}

/// Width of the assembled input for embedding size `d`.
pub fn input_dim(d: usize, with_context: bool) -> usize {
    (3 + usize::from(with_context)) * d + 8 * d
}

/// Concatenates `[user | item | context | history repr | P_TT | P_SS | P_TS | P_ST]`.
/// Disabled or missing patterns are zero-filled so the width never changes.
pub fn assemble_input(
    g: &mut Graph,
    parts: &BackboneParts,
    history_repr: Var,
    flags: PatternFlags,
    d: usize,
) -> Result<Var> {
    let n = g.value(parts.user).rows();
    let mut cols = vec![parts.user, parts.item];
    cols.extend(parts.context);
    cols.push(history_repr);
    let enabled = [flags.tt, flags.ss, flags.ts, flags.st];
    for (p, on) in parts.patterns.iter().zip(enabled) {
        match p {
            Some(v) if on => {
                let w = g.value(*v).cols();
                if w != 2 * d {
                    return Err(Error::DimMismatch {
                        expected: 2 * d,
                        actual: w,
                    });
                }
                cols.push(*v);
            }
            _ => cols.push(g.constant(Tensor::zeros(&[n, 2 * d]))?),
        }
    }
    for &c in &cols[..cols.len() - 4] {
        let w = g.value(c).cols();
        if w != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: w,
            });
        }
    }
    let x = g.concat_cols(&cols)?;
    let expected = input_dim(d, parts.context.is_some());
    let actual = g.value(x).cols();
    if actual != expected {
        return Err(Error::DimMismatch { expected, actual });
    }
    Ok(x)
}

/// `n×g` constant weights of a masked mean: `1/live` on live slots.
fn mean_weights(mask: &[bool], n: usize) -> Result<Tensor> {
    let g = mask.len() / n;
    let mut w = vec![0.0; mask.len()];
    for b in 0..n {
        let live = &mask[b * g..(b + 1) * g];
        let c = live.iter().filter(|&&m| m).count();
        if c > 0 {
            for (j, _) in live.iter().enumerate().filter(|(_, &m)| m) {
                w[b * g + j] = 1.0 / c as f64;
            }
        }
    }
    Tensor::matrix(n, g, w)
}

#[derive(Debug, Clone)]
pub enum Backbone {
    /// MLP over the assembled input; history is mean-pooled.
    Dnn { head: Mlp },
    /// History pooled by softmax-normalized target attention, then the same head.
    Din { scorer: Mlp, head: Mlp },
}

impl Backbone {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        kind: BackboneKind,
        d: usize,
        with_context: bool,
        hidden: &[usize],
        attention_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![input_dim(d, with_context)];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        match kind {
            BackboneKind::Dnn => Backbone::Dnn {
                head: Mlp::new(store, "backbone.head", &sizes, rng),
            },
            BackboneKind::Din => {
                let scorer = Mlp::new(store, "backbone.scorer", &[4 * d, attention_hidden, 1], rng);
                let head = Mlp::new(store, "backbone.head", &sizes, rng);
                Backbone::Din { scorer, head }
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Backbone::Dnn { head } => head.params(),
            Backbone::Din { scorer, head } => {
                scorer.params().into_iter().chain(head.params()).collect()
            }
        }
    }

    fn head(&self) -> &Mlp {
        match self {
            Backbone::Dnn { head } | Backbone::Din { head, .. } => head,
        }
    }

    /// Pooled history representation, `n×d`. An all-masked history pools to zero.
    pub fn history_repr(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parts: &BackboneParts,
        access: Access,
    ) -> Result<Var> {
        let n = g.value(parts.item).rows();
        let d = g.value(parts.item).cols();
        let rows = g.value(parts.history).rows();
        if rows != parts.mask.len() || n == 0 || !rows.is_multiple_of(n) {
            return Err(Error::shape(
                "history",
                format!(
                    "{rows} history rows, {} mask, {n} samples",
                    parts.mask.len()
                ),
            ));
        }
        let gk = rows / n;
        match self {
            Backbone::Dnn { .. } => {
                let w = g.constant(mean_weights(&parts.mask, n)?)?;
                g.group_weighted_sum(w, parts.history)
            }
            Backbone::Din { scorer, .. } => {
                let rep: Vec<Option<usize>> = (0..n)
                    .flat_map(|b| std::iter::repeat_n(Some(b), gk))
                    .collect();
                let c = g.gather_rows(parts.item, &rep)?;
                let h = parts.history;
                let diff = g.sub(c, h)?;
                let prod = g.mul(c, h)?;
                let feats = g.concat_cols(&[c, h, diff, prod])?;
                debug_assert_eq!(g.value(feats).cols(), 4 * d);
                let s = scorer.forward(g, store, feats, access)?;
                let s = g.reshape(s, &[n, gk])?;
                let a = g.masked_softmax(s, &parts.mask)?;
                g.group_weighted_sum(a, h)
            }
        }
    }

    /// Click logits, `n×1`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parts: &BackboneParts,
        flags: PatternFlags,
        access: Access,
    ) -> Result<Var> {
        let d = g.value(parts.item).cols();
        let hist = self.history_repr(g, store, parts, access)?;
        let x = assemble_input(g, parts, hist, flags, d)?;
        self.head().forward(g, store, x, access)
    }

    /// Click probabilities, `n×1`, strictly inside (0, 1) for finite logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        parts: &BackboneParts,
        flags: PatternFlags,
        access: Access,
    ) -> Result<Var> {
        let z = self.logits(g, store, parts, flags, access)?;
        g.sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 4;

    fn rand_t(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    struct Fixture {
        tensors: Vec<Tensor>,
        mask: Vec<bool>,
    }

    /// user, item, history (masked rows zeroed), then four patterns.
    fn fixture(r: &mut ChaCha8Rng, n: usize, gk: usize) -> Fixture {
        let mask: Vec<bool> = (0..n * gk).map(|_| r.random_bool(0.7)).collect();
        let mut hist = rand_t(r, n * gk, D);
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                hist.data_mut()[i * D..(i + 1) * D].fill(0.0);
            }
        }
        let mut tensors = vec![rand_t(r, n, D), rand_t(r, n, D), hist];
        tensors.extend((0..4).map(|_| rand_t(r, n, 2 * D)));
        Fixture { tensors, mask }
    }

    fn parts(vars: &[Var], mask: &[bool]) -> BackboneParts {
        BackboneParts {
            user: vars[0],
            item: vars[1],
            context: None,
            history: vars[2],
            mask: mask.to_vec(),
            patterns: [Some(vars[3]), Some(vars[4]), Some(vars[5]), Some(vars[6])],
        }
    }

    fn consts(g: &mut Graph, f: &Fixture) -> Vec<Var> {
        f.tensors
            .iter()
            .map(|t| g.constant(t.clone()).unwrap())
            .collect()
    }

    fn backbone(kind: BackboneKind, seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let b = Backbone::new(
            &mut store,
            kind,
            D,
            false,
            &[16, 8],
            8,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        (store, b)
    }

    #[test]
    fn pattern_segment_layout() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let f = fixture(&mut r, 3, 2);
        let mut g = Graph::new();
        let v = consts(&mut g, &f);
        let p = parts(&v, &f.mask);
        let hist = v[1];
        let all = assemble_input(&mut g, &p, hist, PatternFlags::ALL, D).unwrap();
        let none = assemble_input(&mut g, &p, hist, PatternFlags::NONE, D).unwrap();
        let only_ss = PatternFlags {
            ss: false,
            ..PatternFlags::ALL
        };
        let no_ss = assemble_input(&mut g, &p, hist, only_ss, D).unwrap();
        assert_eq!(g.value(all).cols(), 3 * D + 8 * D);
        assert_eq!(g.value(none).cols(), g.value(all).cols());
        let pat_start = 3 * D;
        for r in 0..3 {
            let row_none = g.value(none).row_slice(r);
            assert!(row_none[pat_start..].iter().all(|&x| x == 0.0));
            let (a, b) = (g.value(all).row_slice(r), g.value(no_ss).row_slice(r));
            let ss = pat_start + 2 * D..pat_start + 4 * D;
            for c in 0..a.len() {
                if ss.contains(&c) {
                    assert_eq!(b[c], 0.0);
                } else {
                    assert_eq!(a[c], b[c]);
                }
            }
            // P_SS sits right after P_TT.
            assert_eq!(&a[ss], f.tensors[4].row_slice(r));
        }
        let bad = g.constant(Tensor::zeros(&[3, D])).unwrap();
        let mut p2 = p.clone();
        p2.patterns[0] = Some(bad);
        assert!(matches!(
            assemble_input(&mut g, &p2, hist, PatternFlags::ALL, D),
            Err(Error::DimMismatch {
                expected: 8,
                actual: 4
            })
        ));
    }

    #[test]
    fn probabilities_in_open_interval_and_half_at_zero() {
        for kind in [BackboneKind::Dnn, BackboneKind::Din] {
            let (mut store, bb) = backbone(kind, 1);
            let mut r = ChaCha8Rng::seed_from_u64(2);
            let f = fixture(&mut r, 5, 3);
            let mut g = Graph::new();
            let v = consts(&mut g, &f);
            let p = parts(&v, &f.mask);
            let y = bb
                .forward(&mut g, &store, &p, PatternFlags::ALL, Access::Frozen)
                .unwrap();
            assert!(g.value(y).data().iter().all(|&x| x > 0.0 && x < 1.0));

            for id in bb.params() {
                let shape = store.value(id).shape().to_vec();
                store.get_mut(id).value = Tensor::zeros(&shape);
            }
            let y = bb
                .forward(&mut g, &store, &p, PatternFlags::ALL, Access::Frozen)
                .unwrap();
            assert!(g.value(y).data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn dnn_history_is_masked_mean() {
        let (store, bb) = backbone(BackboneKind::Dnn, 3);
        let mut g = Graph::new();
        let hist = Tensor::matrix(4, D, (0..16).map(f64::from).collect()).unwrap();
        let v = [
            g.constant(Tensor::zeros(&[2, D])).unwrap(),
            g.constant(Tensor::zeros(&[2, D])).unwrap(),
            g.constant(hist).unwrap(),
        ];
        let p = BackboneParts {
            user: v[0],
            item: v[1],
            context: None,
            history: v[2],
            mask: vec![true, true, false, false],
            patterns: [None; 4],
        };
        let h = bb.history_repr(&mut g, &store, &p, Access::Frozen).unwrap();
        assert_eq!(g.value(h).row_slice(0), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g.value(h).row_slice(1), &[0.0; D]);
    }

    #[test]
    fn din_single_item_and_all_masked() {
        let (store, bb) = backbone(BackboneKind::Din, 4);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let hist = rand_t(&mut r, 6, D);
        let v = [
            g.constant(rand_t(&mut r, 2, D)).unwrap(),
            g.constant(rand_t(&mut r, 2, D)).unwrap(),
            g.constant(hist.clone()).unwrap(),
        ];
        let p = BackboneParts {
            user: v[0],
            item: v[1],
            context: None,
            history: v[2],
            mask: vec![false, true, false, false, false, false],
            patterns: [None; 4],
        };
        let h = bb.history_repr(&mut g, &store, &p, Access::Frozen).unwrap();
        assert_eq!(g.value(h).row_slice(0), hist.row_slice(1));
        assert_eq!(g.value(h).row_slice(1), &[0.0; D]);
        let y = bb
            .forward(&mut g, &store, &p, PatternFlags::NONE, Access::Frozen)
            .unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn din_history_permutation_invariant() {
        let (store, bb) = backbone(BackboneKind::Din, 6);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let f = fixture(&mut r, 1, 5);
        let perm = [3, 0, 4, 2, 1];
        let mut g = Graph::new();
        let v = consts(&mut g, &f);
        let p = parts(&v, &f.mask);
        let y1 = bb
            .forward(&mut g, &store, &p, PatternFlags::ALL, Access::Frozen)
            .unwrap();
        let mut hp = Vec::new();
        for &j in &perm {
            hp.extend_from_slice(f.tensors[2].row_slice(j));
        }
        let mut p2 = p.clone();
        p2.history = g.constant(Tensor::matrix(5, D, hp).unwrap()).unwrap();
        p2.mask = perm.iter().map(|&j| f.mask[j]).collect();
        let y2 = bb
            .forward(&mut g, &store, &p2, PatternFlags::ALL, Access::Frozen)
            .unwrap();
        assert!((g.scalar(y1) - g.scalar(y2)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (kind, seed) in [(BackboneKind::Dnn, 8), (BackboneKind::Din, 9)] {
            let (mut store, bb) = backbone(kind, seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
            let f = fixture(&mut r, 3, 3);
            let ids: Vec<ParamId> = f
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| store.add(format!("in{i}"), t.clone()))
                .collect();
            let mut params = bb.params();
            params.extend(&ids);
            let labels = [1.0, 0.0, 1.0];
            let err = finite_diff_check(&mut store, &params, 1e-5, |s, g| {
                let v: Vec<Var> = ids
                    .iter()
                    .map(|&id| g.param(s, id))
                    .collect::<Result<_>>()?;
                let p = BackboneParts {
                    user: v[0],
                    item: v[1],
                    context: None,
                    history: v[2],
                    mask: f.mask.clone(),
                    patterns: [Some(v[3]), Some(v[4]), Some(v[5]), Some(v[6])],
                };
                let y = bb.forward(g, s, &p, PatternFlags::ALL, Access::Train)?;
                crate::numerics::nn::bce(g, y, &labels)
            })
            .unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }
}
