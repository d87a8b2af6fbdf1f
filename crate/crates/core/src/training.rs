//! Loss assembly, the alternating per-iteration schedule, and the epoch
//! loop with early stopping on validation AUC.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{sub_seed, EstimatorSchedule, TrainConfig};
use crate::constraints::{
    disentanglement_loss, sample_pairs, sufficiency_loss, SufficiencyDomain, VclubFitter,
};
use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::model::{Batch, DiscoModel, Features};
use crate::numerics::nn::{bce, Access};
use crate::numerics::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};

pub const LOG_HEADER: &str = "epoch\titer\tl_pred\tl_suf\tl_dis\ttotal\tvalid_auc";

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_suf: f64,
    pub l_dis: f64,
    pub total: f64,
}

/// `BCE(p, y) + α·l_suf + β·l_dis`; absent terms are left out entirely.
/// Returns `(total, l_pred)`.
pub fn total_loss(
    g: &mut Graph,
    p: Var,
    labels: &[f64],
    l_suf: Option<Var>,
    l_dis: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<(Var, Var)> {
    let l_pred = bce(g, p, labels)?;
    let mut total = l_pred;
    for (term, w) in [(l_suf, alpha), (l_dis, beta)] {
        if let Some(t) = term {
            let s = g.scale(t, w)?;
            total = g.add(total, s)?;
        }
    }
    Ok((total, l_pred))
}

/// Gives every listed parameter a gradient, zero where backward did not reach it.
fn fill_missing_grads(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        let p = store.get_mut(id);
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_auc: f64,
    pub valid_aucs: Vec<f64>,
}

/// Model, parameters and optimizer state of one run.
pub struct Trainer {
    pub model: DiscoModel,
    pub store: ParamStore,
    main: AdamState,
    estimators: Option<(VclubFitter, VclubFitter)>,
    rng: ChaCha8Rng,
    iterations: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, features: &Features) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "init"));
        let model = DiscoModel::new(&mut store, config, features, &mut init)?;
        let adam = AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::with_lr(config.learning_rate)
        };
        let main = AdamState::new(adam, model.main_params(), &store);
        let estimators = config.uses_disentanglement().then(|| {
            (
                VclubFitter::new(model.vclub1.clone(), config.estimator_lr, &store),
                VclubFitter::new(model.vclub2.clone(), config.estimator_lr, &store),
            )
        });
        Ok(Trainer {
            model,
            store,
            main,
            estimators,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "sampling")),
            iterations: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Ids managed by the main optimizer.
    pub fn main_params(&self) -> &[ParamId] {
        self.main.params()
    }

    pub fn estimator_params(&self) -> Vec<ParamId> {
        self.model
            .vclub1
            .params()
            .into_iter()
            .chain(self.model.vclub2.params())
            .collect()
    }

    /// One iteration: forward, estimator fitting on detached patterns,
    /// losses, then one main optimizer step.
    pub fn train_iteration(
        &mut self,
        batch: &Batch,
        fit_estimators: bool,
    ) -> Result<LossBreakdown> {
        let cfg = self.model.config.clone();
        if cfg.uses_disentanglement() && batch.n < 2 {
            return Err(Error::MarginalPairs(batch.n));
        }
        let mut g = Graph::new();
        let out = self
            .model
            .forward(&mut g, &self.store, batch, Access::Train)?;

        if let (Some((f1, f2)), Some(pv)) = (&mut self.estimators, out.patterns) {
            if fit_estimators {
                let (tt, ss) = (g.value(pv.tt.h).clone(), g.value(pv.ss.h).clone());
                let (ts, st) = (g.value(pv.ts.h).clone(), g.value(pv.st.h).clone());
                for _ in 0..cfg.estimator_steps_per_iter {
                    f1.fit_step(&mut self.store, &tt, &ss)?;
                    f2.fit_step(&mut self.store, &ts, &st)?;
                }
            }
        }

        let l_suf = match (cfg.uses_sufficiency(), out.patterns, out.h_ti, out.h_si) {
            (true, Some(pv), Some(h_ti), Some(h_si)) => {
                let pt = sample_pairs(&batch.labels, &mut self.rng);
                let ps = sample_pairs(&batch.labels, &mut self.rng);
                let doms = [
                    SufficiencyDomain {
                        disc: &self.model.disc_t,
                        anchors: h_ti,
                        patterns: pv.tt.h,
                        pairs: &pt,
                    },
                    SufficiencyDomain {
                        disc: &self.model.disc_s,
                        anchors: h_si,
                        patterns: pv.ss.h,
                        pairs: &ps,
                    },
                ];
                let (l, any) = sufficiency_loss(&mut g, &self.store, &doms, Access::Train)?;
                if !any {
                    eprintln!("warning: batch without sufficiency pairs; term skipped");
                }
                Some(l)
            }
            _ => None,
        };
        let l_dis = match (cfg.uses_disentanglement(), out.patterns) {
            (true, Some(pv)) => Some(disentanglement_loss(
                &mut g,
                &self.store,
                &self.model.vclub1,
                &self.model.vclub2,
                pv.tt.h,
                pv.ss.h,
                pv.ts.h,
                pv.st.h,
                &mut self.rng,
            )?),
            _ => None,
        };
        let (total, l_pred) = total_loss(
            &mut g,
            out.prob,
            &batch.labels_f64(),
            l_suf,
            l_dis,
            cfg.alpha,
            cfg.beta,
        )?;
        let breakdown = LossBreakdown {
            l_pred: g.scalar(l_pred),
            l_suf: l_suf.map_or(0.0, |v| g.scalar(v)),
            l_dis: l_dis.map_or(0.0, |v| g.scalar(v)),
            total: g.scalar(total),
        };

        self.store.zero_grad();
        g.backward(total, &mut self.store)?;
        debug_assert_eq!(self.store.grad_norm_sq(&self.estimator_params()), 0.0);
        let main: Vec<ParamId> = self.main.params().to_vec();
        fill_missing_grads(&mut self.store, &main);
        self.main.step(&mut self.store)?;
        self.iterations += 1;
        Ok(breakdown)
    }

    pub fn predict(&self, features: &Features, samples: &[SampleWindow]) -> Result<Vec<f64>> {
        let refs: Vec<&SampleWindow> = samples.iter().collect();
        self.model.predict(&self.store, features, &refs)
    }

    /// Shuffled batch index lists for one epoch. A trailing batch of one
    /// sample is merged into its predecessor.
    fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.model.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        batches
    }

    /// Trains until `patience` epochs pass without a validation AUC
    /// improvement or `max_epochs` is reached, then restores the best
    /// parameters. `on_improve` runs with the parameters after every
    /// improving epoch. Writes the tab-separated training log to `log`.
    pub fn fit(
        &mut self,
        features: &Features,
        train: &[SampleWindow],
        valid: &[SampleWindow],
        log: &mut dyn Write,
        on_improve: &mut dyn FnMut(&ParamStore) -> Result<()>,
    ) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        if valid.is_empty() {
            return Err(Error::EmptyInput("validation split"));
        }
        let cfg = self.model.config.clone();
        let io = |e: std::io::Error| Error::Io(e);
        writeln!(log, "{LOG_HEADER}").map_err(io)?;
        let valid_labels: Vec<u8> = valid.iter().map(|s| s.target.label).collect();

        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut since = 0;
        let mut valid_aucs = Vec::new();
        let mut epoch = 0;
        while epoch < cfg.max_epochs {
            epoch += 1;
            let mut sums = LossBreakdown::default();
            let batches = self.epoch_batches(train.len());
            for (bi, idx) in batches.iter().enumerate() {
                let refs: Vec<&SampleWindow> = idx.iter().map(|&i| &train[i]).collect();
                let batch = features.batch(&refs)?;
                let fit_est = cfg.estimator_schedule == EstimatorSchedule::PerBatch || bi == 0;
                let l = self.train_iteration(&batch, fit_est)?;
                writeln!(
                    log,
                    "{epoch}\t{}\t{}\t{}\t{}\t{}\t",
                    self.iterations, l.l_pred, l.l_suf, l.l_dis, l.total
                )
                .map_err(io)?;
                sums.l_pred += l.l_pred;
                sums.l_suf += l.l_suf;
                sums.l_dis += l.l_dis;
                sums.total += l.total;
            }
            let nb = batches.len() as f64;
            let v_auc = auc(&self.predict(features, valid)?, &valid_labels)?;
            valid_aucs.push(v_auc);
            writeln!(
                log,
                "{epoch}\t{}\t{}\t{}\t{}\t{}\t{v_auc}",
                self.iterations,
                sums.l_pred / nb,
                sums.l_suf / nb,
                sums.l_dis / nb,
                sums.total / nb
            )
            .map_err(io)?;

            if best.as_ref().is_none_or(|(b, _, _)| v_auc > *b) {
                best = Some((v_auc, epoch, self.store.clone()));
                since = 0;
                on_improve(&self.store)?;
            } else {
                since += 1;
                if since >= cfg.patience {
                    break;
                }
            }
        }
        let (best_auc, best_epoch, store) = best.expect("at least one epoch");
        self.store = store;
        Ok(FitSummary {
            epochs_run: epoch,
            best_epoch,
            best_auc,
            valid_aucs,
        })
    }
}
