//! Hypernetwork training over whole edit trajectories.
//!
//! One rollout chains n batched edits on the graph: collect gradient factors
//! under the pre-step weights (detached), transform them into an update,
//! apply it on-graph, then score the step with the three-component reward.
//! The per-step rewards combine into the trajectory return J, and a single
//! backward pass pushes dJ/dtheta through every chained update. The per-edit
//! immediate-optimization baseline (the "no RL" ablation) trains the same
//! hypernetwork one sample at a time against the pristine initial weights.

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::KnowledgeRecord;
use crate::error::{Error, Result};
use crate::hypernet::{self, HyperNetwork, NormMode, StatsObservation, ThetaVars};
use crate::model::{self, ModelWeights, RankOneFactors};
use crate::optim::{clip_global_norm, Adam};
use crate::reward::{
    backtracking_loss_on, batch_base_loss_on, loc_ref_rows, step_reward_on, trajectory_return_on,
    HyperParams, RewardBreakdown,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

/// Which part of the method is switched off, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    None,
    NoRl,
    NoBacktracking,
    NoRegularization,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoRl,
        Ablation::NoBacktracking,
        Ablation::NoRegularization,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoRl => "no_rl",
            Ablation::NoBacktracking => "no_backtracking",
            Ablation::NoRegularization => "no_regularization",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "no_rl" => Ok(Ablation::NoRl),
            "no_backtracking" => Ok(Ablation::NoBacktracking),
            "no_regularization" => Ok(Ablation::NoRegularization),
            other => Err(Error::Config {
                field: "trainer.ablation".into(),
                msg: format!(
                    "unknown ablation `{other}` (expected none, no_rl, no_backtracking, \
                     no_regularization)"
                ),
            }),
        }
    }
}

/// Early-stopping rule on the trajectory return.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Convergence {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            patience: 5,
            min_delta: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub hyper: HyperParams,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub convergence: Convergence,
    /// Write a hypernetwork checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            hyper: HyperParams::default(),
            epochs: 150,
            seed: 0,
            ablation: Ablation::None,
            convergence: Convergence::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config {
                field: "trainer.epochs".into(),
                msg: "at least one epoch is required".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub breakdown: RewardBreakdown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub epoch: usize,
    pub j: f64,
    pub steps: Vec<StepLog>,
    pub wall_secs: f64,
    pub grad_clipped: bool,
}

/// What one rollout step actually touched, recorded as it happens.
#[derive(Clone, Debug, Default)]
pub struct StepAccess {
    pub step: usize,
    /// Indices t of chain states W_t read by this step.
    pub chain_states_read: BTreeSet<usize>,
    /// Whether the immutable pre-edit reference entered the locality term.
    pub w0_reference_used: bool,
    /// 1-based indices of the record batches evaluated by this step.
    pub batches_read: BTreeSet<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct AccessLog {
    pub steps: Vec<StepAccess>,
}

/// A finished rollout: the live graph (for backward), the return node, the
/// mounted parameters, and the diagnostics.
pub struct RolloutResult {
    pub graph: Graph,
    pub j: Var,
    pub theta: ThetaVars,
    pub log: EpisodeLog,
    pub access: AccessLog,
    pub observations: Vec<StatsObservation>,
}

/// Seeded per-epoch shuffling of the training pool into batch streams.
pub struct StreamSampler {
    pool: Vec<KnowledgeRecord>,
    n_batches: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl StreamSampler {
    pub fn new(
        pool: Vec<KnowledgeRecord>,
        n_batches: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if pool.len() < n_batches * batch_size {
            return Err(Error::Config {
                field: "hyper.trajectory_len".into(),
                msg: format!(
                    "pool of {} records cannot fill a {}x{} stream",
                    pool.len(),
                    n_batches,
                    batch_size
                ),
            });
        }
        Ok(StreamSampler {
            pool,
            n_batches,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// A freshly shuffled sequence of batches.
    pub fn next_stream(&mut self) -> Vec<Vec<KnowledgeRecord>> {
        use rand::seq::SliceRandom;
        self.pool.shuffle(&mut self.rng);
        self.pool[..self.n_batches * self.batch_size]
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Locality reference rows under the pre-edit weights, memoized per record.
struct LocRefCache<'a> {
    w0: &'a ModelWeights,
    rows: HashMap<u64, Tensor>,
}

impl<'a> LocRefCache<'a> {
    fn new(w0: &'a ModelWeights) -> Self {
        LocRefCache {
            w0,
            rows: HashMap::new(),
        }
    }

    fn batch_refs(&mut self, batch: &[KnowledgeRecord]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(batch.len());
        for r in batch {
            if !self.rows.contains_key(&r.record_id) {
                let rows = loc_ref_rows(self.w0, r)?;
                self.rows.insert(r.record_id, rows);
            }
            out.push(self.rows[&r.record_id].clone());
        }
        Ok(out)
    }
}

fn collect_batch_factors(
    weights: &ModelWeights,
    batch: &[KnowledgeRecord],
) -> Result<RankOneFactors> {
    let mut parts = Vec::with_capacity(batch.len());
    for record in batch {
        parts.push(model::collect_rank_one_factors(weights, &record.edit_seq())?);
    }
    RankOneFactors::merge(&parts)
}

/// Execute one n-step trajectory; the differentiation path from every update
/// into J stays intact. Weights start from `w0` and never leave the graph.
pub fn rollout(
    w0: &ModelWeights,
    h: &HyperNetwork,
    stream: &[Vec<KnowledgeRecord>],
    cfg: &TrainerConfig,
) -> Result<RolloutResult> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Degenerate("rollout on an empty stream".into()));
    }
    let started = Instant::now();
    let hp = &cfg.hyper;
    let mcfg = &w0.config;
    let mut g = Graph::new();
    let theta = hypernet::mount_theta(&mut g, h, true);
    let base_mount = model::mount_lm(&mut g, w0, |_| false);
    let editable: Vec<String> = mcfg.editable_layers.clone();

    // current editable weight vars; before step 1 they are the pristine state
    let mut current: std::collections::BTreeMap<String, Var> = editable
        .iter()
        .map(|sel| (sel.clone(), base_mount.var(sel)))
        .collect();

    let mut refs = LocRefCache::new(w0);
    let mut history: VecDeque<(usize, Vec<KnowledgeRecord>, Vec<Tensor>)> = VecDeque::new();
    let mut rewards = Vec::with_capacity(stream.len());
    let mut steps = Vec::with_capacity(stream.len());
    let mut access = AccessLog::default();
    let mut observations = Vec::new();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_6532_3431);

    for (idx, batch) in stream.iter().enumerate() {
        let t = idx + 1;
        let mut touched = StepAccess {
            step: t,
            ..Default::default()
        };

        // 1) factors on the edit pairs under W_{t-1}, detached
        let mut w_prev = w0.clone();
        for sel in &editable {
            w_prev.set(sel, g.value(current[sel]).clone());
        }
        touched.chain_states_read.insert(t - 1);
        touched.batches_read.insert(t);
        let factors = collect_batch_factors(&w_prev, batch)?;

        // 2) transform into updates, differentiable w.r.t. theta only
        let (updates, obs) =
            hypernet::transform_on(&mut g, h, &theta, &factors, hp.lr_inner, NormMode::Batch)?;
        observations.extend(obs);

        // 3) W_t = W_{t-1} + update (+ optional transition noise), on-graph
        let lm_prev = base_mount.with_overrides(&current);
        let mut next = current.clone();
        for (sel, upd) in &updates {
            if !g.value(*upd).all_finite() {
                return Err(Error::TrainingFailure {
                    step: t,
                    msg: format!("non-finite update for `{sel}`"),
                });
            }
            let mut new_var = g.add(current[sel], *upd)?;
            if hp.noise_std > 0.0 {
                let shape = g.value(new_var).shape();
                let noise = Tensor::randn(shape.0, shape.1, hp.noise_std, &mut noise_rng);
                let noise_var = g.constant(noise);
                new_var = g.add(new_var, noise_var)?;
            }
            next.insert(sel.clone(), new_var);
        }
        current = next;
        let lm_cur = base_mount.with_overrides(&current);
        touched.chain_states_read.insert(t);

        // 4) reward under W_t, backtracking re-evaluated under W_{t-1}
        let batch_refs = refs.batch_refs(batch)?;
        touched.w0_reference_used = true;
        let (base, l_edit, l_loc) =
            batch_base_loss_on(&mut g, &lm_cur, mcfg, batch, &batch_refs, hp.lambda_loc)?;

        let back = if cfg.ablation == Ablation::NoBacktracking || history.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let view: Vec<(&[KnowledgeRecord], &[Tensor])> = history
                .iter()
                .map(|(i, b, r)| {
                    touched.batches_read.insert(*i);
                    (b.as_slice(), r.as_slice())
                })
                .collect();
            backtracking_loss_on(&mut g, &lm_prev, mcfg, &view, hp.mu, hp.lambda_loc)?
        };

        let eta = if cfg.ablation == Ablation::NoRegularization {
            0.0
        } else {
            hp.eta
        };
        let (r, mut breakdown) = step_reward_on(&mut g, base, back, &updates, eta)?;
        breakdown.l_edit = l_edit;
        breakdown.l_loc = l_loc;
        if !breakdown.all_finite() {
            return Err(Error::TrainingFailure {
                step: t,
                msg: format!("non-finite loss; breakdown: {breakdown:?}"),
            });
        }
        rewards.push(r);
        steps.push(StepLog { step: t, breakdown });
        access.steps.push(touched);

        // the step's own batch joins the backtracking window
        if hp.k > 0 {
            history.push_back((t, batch.clone(), batch_refs));
            while history.len() > hp.k {
                history.pop_front();
            }
        }
    }

    let j = trajectory_return_on(&mut g, &rewards, hp.gamma)?;
    let log = EpisodeLog {
        epoch: 0,
        j: g.value(j).item(),
        steps,
        wall_secs: started.elapsed().as_secs_f64(),
        grad_clipped: false,
    };
    Ok(RolloutResult {
        graph: g,
        j,
        theta,
        log,
        access,
        observations,
    })
}

fn apply_theta_step(
    h: &mut HyperNetwork,
    adam: &mut Adam,
    named_grads: Vec<(String, Vec<f64>)>,
) -> bool {
    let mut grads = named_grads;
    let clipped = clip_global_norm(&mut grads, 1.0);
    let grad_map: HashMap<String, Vec<f64>> = grads.into_iter().collect();
    let mut triples: Vec<(String, &mut [f64], &[f64])> = Vec::new();
    for (name, params) in h.params_mut() {
        if let Some(gv) = grad_map.get(&name) {
            triples.push((name, params, gv.as_slice()));
        }
    }
    adam.step(&mut triples);
    clipped
}

fn extract_theta_grads(g: &Graph, theta: &ThetaVars) -> Vec<(String, Vec<f64>)> {
    theta
        .iter_named()
        .map(|(name, var)| (name, g.grad_or_zero(var).data().to_vec()))
        .collect()
}

fn check_divergence(epoch: usize, j: f64) -> Result<()> {
    if !j.is_finite() || j.abs() > 1e6 {
        return Err(Error::TrainingFailure {
            step: epoch,
            msg: format!("trajectory return diverged (J = {j})"),
        });
    }
    Ok(())
}

fn maybe_checkpoint(cfg: &TrainerConfig, epoch: usize, h: &HyperNetwork) -> Result<()> {
    if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            hypernet::save_hypernet(&dir.join(format!("hypernet_epoch{epoch}.ckpt")), h)?;
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub hypernet: HyperNetwork,
    pub episodes: Vec<EpisodeLog>,
}

/// Gradient ascent on the trajectory return: one rollout, one parameter
/// update per epoch, fresh stream each epoch, early stop on stale J.
pub fn train(
    w0: &ModelWeights,
    h: HyperNetwork,
    sampler: &mut StreamSampler,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.ablation == Ablation::NoRl {
        return train_no_rl_baseline(w0, h, sampler, cfg);
    }
    let mut h = h;
    let mut adam = Adam::new(cfg.hyper.lr_meta);
    let mut episodes = Vec::with_capacity(cfg.epochs);
    let mut best_j = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let stream = sampler.next_stream();
        let mut ro = rollout(w0, &h, &stream, cfg)?;
        let neg_j = ro.graph.neg(ro.j);
        ro.graph.backward(neg_j)?;
        let grads = extract_theta_grads(&ro.graph, &ro.theta);
        let clipped = apply_theta_step(&mut h, &mut adam, grads);
        h.absorb_stats(&ro.observations);

        let mut log = ro.log;
        log.epoch = epoch;
        log.grad_clipped = clipped;
        let j = log.j;
        episodes.push(log);
        check_divergence(epoch, j)?;
        maybe_checkpoint(cfg, epoch, &h)?;

        if j > best_j + cfg.convergence.min_delta {
            best_j = j;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.convergence.patience {
                break;
            }
        }
    }
    h.freeze();
    Ok(TrainOutcome {
        hypernet: h,
        episodes,
    })
}

/// Per-sample immediate optimization against the pristine weights: after each
/// single batched edit the sample's negative reward is backpropagated into
/// theta and the model is reset to W_0. No trajectory, no backtracking.
pub fn train_no_rl_baseline(
    w0: &ModelWeights,
    h: HyperNetwork,
    sampler: &mut StreamSampler,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut h = h;
    let hp = cfg.hyper.clone();
    let mcfg = &w0.config;
    let mut adam = Adam::new(hp.lr_meta);
    let mut episodes = Vec::with_capacity(cfg.epochs);
    let mut best_j = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut refs = LocRefCache::new(w0);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let stream = sampler.next_stream();
        let mut steps = Vec::with_capacity(stream.len());
        let mut rewards = Vec::with_capacity(stream.len());
        let mut any_clipped = false;

        for (idx, batch) in stream.iter().enumerate() {
            let t = idx + 1;
            let factors = collect_batch_factors(w0, batch)?;
            let mut g = Graph::new();
            let theta = hypernet::mount_theta(&mut g, &h, true);
            let base_mount = model::mount_lm(&mut g, w0, |_| false);
            let (updates, obs) =
                hypernet::transform_on(&mut g, &h, &theta, &factors, hp.lr_inner, NormMode::Batch)?;
            let mut overrides = std::collections::BTreeMap::new();
            for (sel, upd) in &updates {
                overrides.insert(sel.clone(), g.add(base_mount.var(sel), *upd)?);
            }
            let lm_cur = base_mount.with_overrides(&overrides);
            let batch_refs = refs.batch_refs(batch)?;
            let (base, l_edit, l_loc) =
                batch_base_loss_on(&mut g, &lm_cur, mcfg, batch, &batch_refs, hp.lambda_loc)?;
            let back = g.constant(Tensor::scalar(0.0));
            let eta = if cfg.ablation == Ablation::NoRegularization {
                0.0
            } else {
                hp.eta
            };
            let (r, mut breakdown) = step_reward_on(&mut g, base, back, &updates, eta)?;
            breakdown.l_edit = l_edit;
            breakdown.l_loc = l_loc;
            if !breakdown.all_finite() {
                return Err(Error::TrainingFailure {
                    step: t,
                    msg: format!("non-finite loss; breakdown: {breakdown:?}"),
                });
            }
            let neg_r = g.neg(r);
            g.backward(neg_r)?;
            let grads = extract_theta_grads(&g, &theta);
            any_clipped |= apply_theta_step(&mut h, &mut adam, grads);
            h.absorb_stats(&obs);
            rewards.push(breakdown.r);
            steps.push(StepLog { step: t, breakdown });
        }

        let j: f64 = rewards
            .iter()
            .enumerate()
            .map(|(i, r)| hp.gamma.powi(i as i32 + 1) * r)
            .sum();
        episodes.push(EpisodeLog {
            epoch,
            j,
            steps,
            wall_secs: started.elapsed().as_secs_f64(),
            grad_clipped: any_clipped,
        });
        check_divergence(epoch, j)?;
        maybe_checkpoint(cfg, epoch, &h)?;

        if j > best_j + cfg.convergence.min_delta {
            best_j = j;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.convergence.patience {
                break;
            }
        }
    }
    h.freeze();
    Ok(TrainOutcome {
        hypernet: h,
        episodes,
    })
}

/// Training log CSV: the per-step reward columns prefixed by the epoch.
pub fn write_train_log(path: &std::path::Path, episodes: &[EpisodeLog]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,{}", RewardBreakdown::CSV_HEADER)?;
    for ep in episodes {
        for s in &ep.steps {
            writeln!(f, "{},{}", ep.epoch, s.breakdown.csv_row(s.step))?;
        }
    }
    f.flush()?;
    Ok(())
}
