//! Snapshot loop: two-stage optimisation, curriculum gating, early stopping,
//! baselines and run-directory output.

mod config;
mod ewc;
mod loss;
mod selfcheck;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::{save_checkpoint, Bound, EntityBatch, ModelParams};
use crate::curriculum::{build_plan, CurriculumPlan, PlanRecord};
use crate::eval::{evaluate_model, evaluate_triples, FilterIndex, MetricMatrix};
use crate::graph::{compute_graph_stats, EntityId, GraphStats, ModalityStore, SnapshotSequence, Triple};
use crate::numerics::{adam_step, AdamConfig, FreezeMask, OptimizerState, ParamMask, Tape};
use crate::preservation::{CmkpScope, FrozenReference};
use crate::replay::{fill_buffer, ReplayBuffer, ReplayStream};
use crate::seed;
use crate::{Error, Result};

pub use config::{Ablation, Features, Mode, Ordering, TrainConfig};
pub use ewc::{ewc_fisher, EwcAnchor};
pub use loss::{build_loss, kgr_loss, LossBreakdown, LossVars, StepContext};
pub use selfcheck::{grad_suite, GradSuite, TermCheck, TERMS};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimisation stage (1 = old rows frozen, 2 = all free).
    pub stage: u8,
    pub curriculum_stage: Option<usize>,
    pub eligible: usize,
    pub losses: LossBreakdown,
    pub valid_mrr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurriculumLine {
    pub snapshot: usize,
    pub round: usize,
    #[serde(flatten)]
    pub record: PlanRecord,
}

#[derive(Clone, Debug)]
pub struct SnapshotOutcome {
    pub index: usize,
    /// Best-validation parameters (with Q ← P applied).
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub buffer: Option<ReplayBuffer>,
    pub curriculum: Vec<CurriculumLine>,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub matrix: MetricMatrix,
    pub snapshots: Vec<SnapshotOutcome>,
}

/// Benchmark, masked modality store and per-snapshot statistics for one run.
pub struct Trainer<'a> {
    seq: &'a SnapshotSequence,
    store: ModalityStore,
    cfg: TrainConfig,
    features: Features,
    stats: Vec<GraphStats>,
}

fn csv_header() -> &'static str {
    "epoch,stage,L_kgr,L_str,L_mod,L_align,L_remb,L_rpat,L_anc,L_rep_emb,L_rep_score,total,L_ewc,valid_mrr\n"
}

pub fn losses_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(csv_header());
    for e in log {
        let l = &e.losses;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.stage,
            l.l_kgr,
            l.l_str,
            l.l_mod,
            l.l_align,
            l.l_remb,
            l.l_rpat,
            l.l_anc,
            l.l_rep_emb,
            l.l_rep_score,
            l.total,
            l.l_ewc,
            e.valid_mrr
        )
        .unwrap();
    }
    s
}

impl<'a> Trainer<'a> {
    pub fn new(seq: &'a SnapshotSequence, store: &ModalityStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty snapshot sequence".into()));
        }
        let features = cfg.features();
        let store = store.masked(features.keep_visual, features.keep_text);
        if store.d_v() != cfg.model.d_v || store.d_w() != cfg.model.d_w {
            return Err(Error::Shape(format!(
                "store dims ({}, {}) differ from model dims ({}, {})",
                store.d_v(),
                store.d_w(),
                cfg.model.d_v,
                cfg.model.d_w
            )));
        }
        let stats = (0..seq.len())
            .map(|i| compute_graph_stats(seq, i, &store, cfg.curriculum.m_ref, cfg.curriculum.n_ref))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            seq,
            store,
            cfg,
            features,
            stats,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn features(&self) -> Features {
        self.features
    }

    /// The store after modality switches were applied.
    pub fn store(&self) -> &ModalityStore {
        &self.store
    }

    pub fn stats(&self) -> &[GraphStats] {
        &self.stats
    }

    /// θ_i before any step of snapshot `i`: fresh at i = 0, otherwise θ_{i-1}
    /// grown by the new ids, with P ← Q.
    pub fn initial_params(&self, i: usize, prev: Option<&ModelParams>) -> Result<ModelParams> {
        let snap = self.seq.get(i)?;
        match (i, prev) {
            (0, _) => ModelParams::init(
                &self.cfg.model,
                snap.entity_count,
                snap.relation_count,
                seed::derive(self.cfg.seed, "init", 0),
            ),
            (_, None) => Err(Error::Contract(format!("snapshot {i} needs the previous checkpoint"))),
            (_, Some(p)) => {
                let mut p = p.clone();
                let new_e: Vec<u32> = (p.entity_count() as u32..snap.entity_count as u32).collect();
                let new_r: Vec<u32> = (p.relation_count() as u32..snap.relation_count as u32).collect();
                p.register_new_entities(&new_e, &new_r, seed::derive(self.cfg.seed, "grow", i as u64))?;
                let q = p.get(p.ids.q).clone();
                *p.get_mut(p.ids.p) = q;
                Ok(p)
            }
        }
    }

    pub fn frozen_reference(&self, i: usize, prev: &ModelParams) -> FrozenReference {
        FrozenReference::build(prev.clone(), &self.store, &self.stats[i - 1], &self.cfg.preservation)
    }

    pub fn replay_buffer(&self, i: usize) -> Result<ReplayBuffer> {
        let history = self.seq.cumulative_train(i - 1).len();
        let cap = self.cfg.replay.capacity(history);
        fill_buffer(self.seq, i, &self.stats, &self.store, cap, self.cfg.seed)
    }

    pub fn curriculum_plan(&self, i: usize) -> Result<CurriculumPlan> {
        let snap = self.seq.get(i)?;
        build_plan(
            &snap.train,
            self.seq.old_entity_count(i),
            &self.stats[i],
            &self.store,
            &self.cfg.curriculum,
        )
    }

    pub fn entity_batch(&self, params: &ModelParams) -> EntityBatch {
        let all: Vec<EntityId> = (0..params.entity_count() as EntityId).collect();
        EntityBatch::new(&self.store, &all)
    }

    /// Trains snapshot `i` starting from θ_{i-1} (`None` at i = 0).
    pub fn train_snapshot(&self, i: usize, prev: Option<&ModelParams>) -> Result<SnapshotOutcome> {
        let cfg = &self.cfg;
        let f = self.features;
        let snap = self.seq.get(i)?;
        let mut params = self.initial_params(i, prev)?;
        let old_e = self.seq.old_entity_count(i);
        let old_r = self.seq.old_relation_count(i);

        let frozen = match prev {
            Some(p) if i > 0 && (f.cmkp || f.mmcr_losses) => Some(self.frozen_reference(i, p)),
            _ => None,
        };
        let buffer = if i > 0 && f.buffer {
            Some(self.replay_buffer(i)?)
        } else {
            None
        };
        let frozen_scores: HashMap<Triple, f64> = match (&frozen, &buffer) {
            (Some(fr), Some(b)) => {
                let t = b.triples();
                t.iter().copied().zip(fr.scores(&self.store, &t)).collect()
            }
            _ => HashMap::new(),
        };
        let ewc = match prev {
            Some(p) if i > 0 && f.ewc => {
                let fisher = ewc_fisher(p, &self.store, &self.seq.get(i - 1)?.train, cfg.batch_size)?;
                Some(EwcAnchor::new(p, &fisher, &params))
            }
            _ => None,
        };
        let mut plan = if i > 0 && f.ordering != Ordering::Shuffled {
            Some(self.curriculum_plan(i)?)
        } else {
            None
        };
        let mut curriculum = Vec::new();
        let mut round = 0;
        if let Some(p) = &plan {
            curriculum.extend(p.records().into_iter().map(|record| CurriculumLine {
                snapshot: i,
                round,
                record,
            }));
        }
        let static_order = match (&plan, f.ordering) {
            (Some(p), Ordering::Static) => Some(p.ordered()),
            _ => None,
        };

        let entities = self.entity_batch(&params);
        let filter = FilterIndex::new(&self.seq.cumulative_triples(i));
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut opt = OptimizerState::new();
        let stage1 = if f.two_stage && i > 0 { cfg.stage1_epochs() } else { 0 };
        let span = ((cfg.curriculum_span * cfg.epochs as f64).ceil() as usize).max(1);
        let n_replay = match &buffer {
            Some(b) if !b.is_empty() => (cfg.replay.rho * cfg.batch_size as f64).round() as usize,
            _ => 0,
        };
        let n_new = cfg.batch_size.saturating_sub(n_replay).max(1);

        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
        let mut stale = 0usize;
        for epoch in 0..cfg.epochs {
            let mut cur_stage = None;
            if f.ordering == Ordering::Progressive {
                if let Some(p) = plan.as_mut() {
                    let target = (epoch * p.stage_count() / span).min(p.stage_count() - 1);
                    while p.active() < target {
                        p.advance(p.active())?;
                        round += 1;
                        curriculum.extend(p.records().into_iter().map(|record| CurriculumLine {
                            snapshot: i,
                            round,
                            record,
                        }));
                    }
                    cur_stage = Some(p.active());
                }
            }
            let mut rng = seed::rng(cfg.seed, "batches", ((i as u64) << 32) | epoch as u64);
            let pool: Vec<Triple> = match (f.ordering, &plan, &static_order) {
                (_, _, Some(order)) => order.clone(),
                (Ordering::Progressive, Some(p), _) => {
                    let mut v = p.eligible();
                    v.shuffle(&mut rng);
                    v
                }
                _ => {
                    let mut v = snap.train.clone();
                    v.shuffle(&mut rng);
                    v
                }
            };
            let stage: u8 = if epoch < stage1 { 1 } else { 2 };
            let mut mask = if stage == 1 {
                params.freeze_masks(1, old_e, old_r)?
            } else {
                FreezeMask::none()
            };
            mask.set(params.ids.q, ParamMask::All);
            let ctx = StepContext {
                entities: &entities,
                frozen: frozen.as_ref(),
                ewc: ewc.as_ref(),
                cmkp: f.cmkp,
                mmcr: f.mmcr_losses,
                scope: if stage == 1 {
                    CmkpScope::ModalityOnly
                } else {
                    CmkpScope::All
                },
                lambda_cmkp: cfg.lambda_cmkp,
                lambda_rep: cfg.lambda_rep,
                lambda_ewc: cfg.lambda_ewc,
                replay: &cfg.replay,
            };
            let mut stream = buffer
                .as_ref()
                .map(|b| ReplayStream::new(b, cfg.seed, ((i as u64) << 32) | epoch as u64));
            let mut sums = LossBreakdown::default();
            let mut steps = 0usize;
            for chunk in pool.chunks(n_new) {
                let replay = match stream.as_mut() {
                    Some(s) => s.take(n_replay),
                    None => Vec::new(),
                };
                let scores: Vec<f64> = replay
                    .iter()
                    .map(|t| frozen_scores.get(t).copied().unwrap_or(0.0))
                    .collect();
                let br = self
                    .step(&mut params, &mut opt, &adam, &mask, &ctx, chunk, &replay, &scores)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("{m} (snapshot {i}, epoch {epoch})")),
                        other => other,
                    })?;
                sums.accumulate(&br);
                steps += 1;
            }
            let valid_mrr = if snap.valid.is_empty() {
                f64::NAN
            } else {
                evaluate_triples(&params, &self.store, &snap.valid, &filter)?.mrr
            };
            log.push(EpochLog {
                epoch,
                stage,
                curriculum_stage: cur_stage,
                eligible: pool.len(),
                losses: sums.scaled(1.0 / steps.max(1) as f64),
                valid_mrr,
            });
            // without a validation split the last epoch wins
            if valid_mrr.is_nan() || valid_mrr > best.0 {
                best = (valid_mrr, params.clone(), epoch);
                stale = 0;
            } else {
                let gated = plan
                    .as_ref()
                    .is_some_and(|p| f.ordering == Ordering::Progressive && p.active() + 1 < p.stage_count());
                if !gated {
                    stale += 1;
                    if stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
        let (best_valid_mrr, mut params, best_epoch) = best;
        let p = params.get(params.ids.p).clone();
        *params.get_mut(params.ids.q) = p;
        Ok(SnapshotOutcome {
            index: i,
            params,
            log,
            buffer,
            curriculum,
            best_epoch,
            best_valid_mrr,
        })
    }

    /// One forward/backward/Adam step; returns the loss values.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        params: &mut ModelParams,
        opt: &mut OptimizerState,
        adam: &AdamConfig,
        mask: &FreezeMask,
        ctx: &StepContext,
        batch: &[Triple],
        replay: &[Triple],
        frozen_scores: &[f64],
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = Bound::leaves(&mut tape, params);
        let lv = build_loss(&mut tape, &bound, params, ctx, batch, replay, frozen_scores);
        let br = LossBreakdown::read(&tape, &lv);
        if !br.is_finite() {
            return Err(Error::NonFinite(format!("loss {br:?}")));
        }
        let g = tape.backward(lv.total)?;
        let grads: Vec<Vec<f64>> = (0..params.tensors.len())
            .map(|k| g.get_or_zeros(bound.var(k), params.tensors[k].len()))
            .collect();
        adam_step(&mut params.tensors, &params.names, &grads, opt, adam, mask)?;
        Ok(br)
    }

    /// Runs snapshots `0..T`, evaluating after each. With `first`, snapshot 0
    /// is taken from it instead of being trained.
    pub fn run(&self, out: Option<&Path>, first: Option<SnapshotOutcome>) -> Result<RunOutcome> {
        let mut matrix = MetricMatrix::new(self.seq.len());
        let mut outcomes: Vec<SnapshotOutcome> = Vec::with_capacity(self.seq.len());
        if let Some(dir) = out {
            mkdir(dir)?;
            write_json(&dir.join("config.json"), &self.cfg)?;
            write_text(&dir.join("curriculum.jsonl"), "")?;
        }
        for i in 0..self.seq.len() {
            let outcome = match (i, &first) {
                (0, Some(f)) => f.clone(),
                _ => self.train_snapshot(i, outcomes.last().map(|o| &o.params))?,
            };
            let row = evaluate_model(&outcome.params, self.seq, i, &self.store)?;
            matrix.push_row(row)?;
            if let Some(dir) = out {
                self.persist(dir, &outcome, &matrix)?;
            }
            outcomes.push(outcome);
        }
        Ok(RunOutcome {
            matrix,
            snapshots: outcomes,
        })
    }

    fn persist(&self, dir: &Path, o: &SnapshotOutcome, matrix: &MetricMatrix) -> Result<()> {
        let sdir = dir.join(format!("s{}", o.index));
        mkdir(&sdir)?;
        save_checkpoint(&o.params, &sdir.join("checkpoint"), self.cfg.seed, o.index)?;
        write_text(&sdir.join("losses.csv"), &losses_csv(&o.log))?;
        if let Some(b) = &o.buffer {
            b.write_tsv(&sdir.join("replay_buffer.tsv"))?;
            b.write_tsv(&dir.join("replay_buffer.tsv"))?;
        }
        let mut lines = String::new();
        for c in &o.curriculum {
            let p = dir.join("curriculum.jsonl");
            lines.push_str(&serde_json::to_string(c).map_err(|e| Error::json(&p, e))?);
            lines.push('\n');
        }
        append_text(&dir.join("curriculum.jsonl"), &lines)?;
        write_json(&dir.join("metrics.json"), matrix)
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn append_text(p: &Path, s: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(p)
        .map_err(|e| Error::io(p, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::json(p, e))?;
    write_text(p, &s)
}

/// Trains a whole sequence and writes the run directory.
pub fn run_sequence(seq: &SnapshotSequence, store: &ModalityStore, cfg: TrainConfig, out: &Path) -> Result<RunOutcome> {
    Trainer::new(seq, store, cfg)?.run(Some(out), None)
}

/// Path of the checkpoint directory of snapshot `i` inside a run directory.
pub fn checkpoint_dir(run: &Path, i: usize) -> PathBuf {
    run.join(format!("s{i}")).join("checkpoint")
}

#[cfg(test)]
mod tests;
