//! Per-step reward: an edit/locality base term on the current record, an
//! exponentially decayed backtracking term over the previous records, and a
//! squared-norm penalty on the update. The trajectory return is the
//! discounted sum of step rewards and is what training maximizes.

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::KnowledgeRecord;
use crate::error::{Error, Result};
use crate::logfmt::format_sig;
use crate::model::{self, ModelConfig, ModelWeights, MountedLm};
use serde::{Deserialize, Serialize};

/// Every scalar knob of the reward and the training loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    /// Backtracking depth, in record batches.
    pub k: usize,
    /// Backtracking decay factor.
    pub mu: f64,
    /// Discount on the trajectory return.
    pub gamma: f64,
    /// Weight of the locality KL inside the base loss.
    pub lambda_loc: f64,
    /// Regularization coefficient on the squared update norm.
    pub eta: f64,
    /// Scalar on the raw factors along the hypernetwork's residual path.
    pub lr_inner: f64,
    /// Step size for hypernetwork parameter updates.
    pub lr_meta: f64,
    /// Trajectory length n, in batches.
    pub trajectory_len: usize,
    pub batch_size: usize,
    /// Std of the optional Gaussian transition noise (0 disables it).
    pub noise_std: f64,
    /// Hidden width of the hypernetwork MLPs.
    pub rank: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            k: 10,
            mu: 0.95,
            gamma: 1.0,
            lambda_loc: 0.6,
            eta: 1e-4,
            lr_inner: 1.0,
            lr_meta: 1e-3,
            trajectory_len: 20,
            batch_size: 4,
            noise_std: 0.0,
            rank: 32,
        }
    }
}

impl HyperParams {
    /// The full-scale hyperparameter set, kept as a selectable preset.
    pub fn paper() -> Self {
        HyperParams {
            lr_inner: 1e-6,
            lr_meta: 1e-5,
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    field: field.into(),
                    msg,
                })
            }
        };
        check(
            self.mu > 0.0 && self.mu <= 1.0,
            "hyper.mu",
            format!("mu {} must lie in (0, 1]", self.mu),
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "hyper.gamma",
            format!("gamma {} must lie in [0, 1]", self.gamma),
        )?;
        check(
            self.lambda_loc >= 0.0,
            "hyper.lambda_loc",
            "lambda_loc must be nonnegative".into(),
        )?;
        check(self.eta >= 0.0, "hyper.eta", "eta must be nonnegative".into())?;
        check(
            self.noise_std >= 0.0,
            "hyper.noise_std",
            "noise_std must be nonnegative".into(),
        )?;
        check(
            self.trajectory_len >= 1,
            "hyper.trajectory_len",
            "trajectory length must be at least 1".into(),
        )?;
        check(
            self.batch_size >= 1,
            "hyper.batch_size",
            "batch size must be at least 1".into(),
        )?;
        check(self.rank >= 1, "hyper.rank", "rank must be positive".into())?;
        Ok(())
    }
}

/// Detached numeric view of one step's reward, for logs and assertions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub l_edit: f64,
    pub l_loc: f64,
    pub l_base: f64,
    pub l_back: f64,
    pub reg: f64,
    pub r: f64,
}

impl RewardBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_edit,l_loc,l_base,l_back,reg,r";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            format_sig(self.l_edit, 10),
            format_sig(self.l_loc, 10),
            format_sig(self.l_base, 10),
            format_sig(self.l_back, 10),
            format_sig(self.reg, 10),
            format_sig(self.r, 10),
        )
    }

    pub fn all_finite(&self) -> bool {
        [self.l_edit, self.l_loc, self.l_base, self.l_back, self.reg, self.r]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Reference next-token log-probabilities of a record's locality sequence
/// under the pre-edit weights. Constant through training.
pub fn loc_ref_rows(w0: &ModelWeights, record: &KnowledgeRecord) -> Result<Tensor> {
    let seq = record.loc_seq();
    let inputs = &seq.tokens[..seq.tokens.len() - 1];
    model::sequence_log_probs(w0, inputs)
}

/// Base loss of one record under the mounted current weights:
/// edit NLL on the paraphrase pair plus lambda_loc times the locality KL.
pub fn base_loss_on(
    g: &mut Graph,
    lm_cur: &MountedLm,
    cfg: &ModelConfig,
    record: &KnowledgeRecord,
    loc_ref: &Tensor,
    lambda_loc: f64,
) -> Result<(Var, f64, f64)> {
    record.validate(cfg)?;
    let l_e = model::answer_nll_on(g, lm_cur, cfg, &record.para_seq())?;
    let l_loc = model::sequence_kl_on(g, lm_cur, cfg, loc_ref, &record.loc_seq())?;
    let scaled = g.scale(l_loc, lambda_loc);
    let base = g.add(l_e, scaled)?;
    Ok((base, g.value(l_e).item(), g.value(l_loc).item()))
}

/// Mean base loss over a batch. Returns the graph node plus the numeric means
/// of the edit and locality components.
pub fn batch_base_loss_on(
    g: &mut Graph,
    lm_cur: &MountedLm,
    cfg: &ModelConfig,
    batch: &[KnowledgeRecord],
    loc_refs: &[Tensor],
    lambda_loc: f64,
) -> Result<(Var, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty record batch".into()));
    }
    if batch.len() != loc_refs.len() {
        return Err(Error::Contract(format!(
            "batch of {} records but {} locality references",
            batch.len(),
            loc_refs.len()
        )));
    }
    let mut acc: Option<Var> = None;
    let mut edit_sum = 0.0;
    let mut loc_sum = 0.0;
    for (record, loc_ref) in batch.iter().zip(loc_refs) {
        let (base, l_e, l_loc) = base_loss_on(g, lm_cur, cfg, record, loc_ref, lambda_loc)?;
        edit_sum += l_e;
        loc_sum += l_loc;
        acc = Some(match acc {
            Some(a) => g.add(a, base)?,
            None => base,
        });
    }
    let n = batch.len() as f64;
    let mean = g.scale(acc.expect("nonempty batch"), 1.0 / n);
    Ok((mean, edit_sum / n, loc_sum / n))
}

/// Decay weights over a history of `len` entries, oldest first: mu^len .. mu^1.
pub fn backtracking_weights(len: usize, mu: f64) -> Vec<f64> {
    (0..len).map(|i| mu.powi((len - i) as i32)).collect()
}

/// Backtracking loss at step t: the decayed base losses of the previous
/// (up to k) batches, re-evaluated under the weights the step started from.
/// `history` holds those batches oldest-first, paired with their locality
/// references. An empty history yields an exact zero.
pub fn backtracking_loss_on(
    g: &mut Graph,
    lm_prev: &MountedLm,
    cfg: &ModelConfig,
    history: &[(&[KnowledgeRecord], &[Tensor])],
    mu: f64,
    lambda_loc: f64,
) -> Result<Var> {
    if history.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let weights = backtracking_weights(history.len(), mu);
    let mut acc: Option<Var> = None;
    for ((batch, refs), w) in history.iter().zip(&weights) {
        let (base, _, _) = batch_base_loss_on(g, lm_prev, cfg, batch, refs, lambda_loc)?;
        let term = g.scale(base, *w);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty history"))
}

/// r = -(base + back + eta * sum of squared update norms). Returns the reward
/// node and its detached breakdown; `l_edit`/`l_loc` are filled by the caller.
pub fn step_reward_on(
    g: &mut Graph,
    base: Var,
    back: Var,
    updates: &[(String, Var)],
    eta: f64,
) -> Result<(Var, RewardBreakdown)> {
    let mut reg: Option<Var> = None;
    for (_, u) in updates {
        let f = g.frobenius_norm_sq(*u);
        reg = Some(match reg {
            Some(r) => g.add(r, f)?,
            None => f,
        });
    }
    let reg = reg.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let penalty = g.scale(reg, eta);
    let partial = g.add(base, back)?;
    let total = g.add(partial, penalty)?;
    let r = g.neg(total);
    let breakdown = RewardBreakdown {
        l_edit: 0.0,
        l_loc: 0.0,
        l_base: g.value(base).item(),
        l_back: g.value(back).item(),
        reg: g.value(reg).item(),
        r: g.value(r).item(),
    };
    Ok((r, breakdown))
}

/// J = sum over i of gamma^i * r_i, with i starting at 1.
pub fn trajectory_return_on(g: &mut Graph, rewards: &[Var], gamma: f64) -> Result<Var> {
    if rewards.is_empty() {
        return Err(Error::Degenerate("trajectory with no rewards".into()));
    }
    let mut acc: Option<Var> = None;
    for (i, &r) in rewards.iter().enumerate() {
        let term = g.scale(r, gamma.powi(i as i32 + 1));
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty rewards"))
}

/// Host-level base loss for one record: (base, l_edit, l_loc).
pub fn base_loss(
    w_cur: &ModelWeights,
    w0: &ModelWeights,
    record: &KnowledgeRecord,
    lambda_loc: f64,
) -> Result<(f64, f64, f64)> {
    let loc_ref = loc_ref_rows(w0, record)?;
    let mut g = Graph::new();
    let lm = model::mount_lm(&mut g, w_cur, |_| false);
    let (base, l_e, l_loc) = base_loss_on(&mut g, &lm, &w_cur.config, record, &loc_ref, lambda_loc)?;
    Ok((g.value(base).item(), l_e, l_loc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests_support::toy_record;
    use crate::model::ModelWeights;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 2,
            d_ff: 32,
            n_heads: 2,
            max_seq_len: 8,
            editable_layers: vec!["ffn_up@1".into(), "ffn_down@1".into()],
        }
    }

    #[test]
    fn defaults_validate_and_paper_preset_pins_lrs() {
        HyperParams::default().validate().unwrap();
        let p = HyperParams::paper();
        p.validate().unwrap();
        assert_eq!(p.mu, 0.95);
        assert_eq!(p.k, 10);
        assert_eq!(p.eta, 1e-4);
        assert_eq!(p.gamma, 1.0);
        assert_eq!(p.lr_inner, 1e-6);
        assert_eq!(p.lr_meta, 1e-5);
    }

    #[test]
    fn invalid_mu_is_config_error() {
        let mut p = HyperParams::default();
        p.mu = 0.0;
        let err = p.validate().unwrap_err();
        assert!(err.to_string().contains("hyper.mu"));
    }

    #[test]
    fn base_loss_composes_answer_nll_and_kl() {
        let c = cfg();
        let w0 = ModelWeights::init(&c, 3).unwrap();
        let w_cur = ModelWeights::init(&c, 4).unwrap();
        let record = toy_record();
        let lambda = 0.7;
        let (base, l_e, l_loc) = base_loss(&w_cur, &w0, &record, lambda).unwrap();

        let manual_e = model::answer_nll(&w_cur, &record.para_seq()).unwrap();
        let manual_loc = model::answer_kl(&w0, &w_cur, &record.loc_seq()).unwrap();
        assert!((l_e - manual_e).abs() < 1e-12);
        assert!((l_loc - manual_loc).abs() < 1e-12);
        assert!((base - (manual_e + lambda * manual_loc)).abs() < 1e-12);
    }

    #[test]
    fn base_loss_with_zero_lambda_is_edit_only() {
        let c = cfg();
        let w0 = ModelWeights::init(&c, 3).unwrap();
        let record = toy_record();
        let (base, l_e, _) = base_loss(&w0, &w0, &record, 0.0).unwrap();
        assert_eq!(base, l_e);
    }

    #[test]
    fn base_loss_at_w0_has_zero_locality() {
        let c = cfg();
        let w0 = ModelWeights::init(&c, 3).unwrap();
        let record = toy_record();
        let (_, _, l_loc) = base_loss(&w0, &w0, &record, 0.6).unwrap();
        assert!(l_loc.abs() < 1e-9);
    }

    #[test]
    fn backtracking_weight_vector() {
        let w = backtracking_weights(2, 0.5);
        assert_eq!(w, vec![0.25, 0.5]);
        let ones = backtracking_weights(3, 1.0);
        assert_eq!(ones, vec![1.0, 1.0, 1.0]);
        assert!(backtracking_weights(0, 0.9).is_empty());
    }

    #[test]
    fn backtracking_empty_history_is_exact_zero() {
        let c = cfg();
        let w0 = ModelWeights::init(&c, 3).unwrap();
        let mut g = Graph::new();
        let lm = model::mount_lm(&mut g, &w0, |_| false);
        let back = backtracking_loss_on(&mut g, &lm, &c, &[], 0.95, 0.6).unwrap();
        assert_eq!(g.value(back).item(), 0.0);
    }

    #[test]
    fn backtracking_matches_manual_decay() {
        let c = cfg();
        let w0 = ModelWeights::init(&c, 3).unwrap();
        let r1 = toy_record();
        let mut r2 = toy_record();
        r2.record_id = 1;
        r2.x = vec![5, 6, 0];
        r2.y = vec![9];
        r2.x_e = vec![6, 5, 0];
        r2.y_e = vec![9];
        let ref1 = loc_ref_rows(&w0, &r1).unwrap();
        let ref2 = loc_ref_rows(&w0, &r2).unwrap();

        let mu = 0.5;
        let lambda = 0.6;
        let b1 = std::slice::from_ref(&r1);
        let b2 = std::slice::from_ref(&r2);
        let refs1 = std::slice::from_ref(&ref1);
        let refs2 = std::slice::from_ref(&ref2);

        let mut g = Graph::new();
        let lm = model::mount_lm(&mut g, &w0, |_| false);
        let history: Vec<(&[KnowledgeRecord], &[Tensor])> = vec![(b1, refs1), (b2, refs2)];
        let back = backtracking_loss_on(&mut g, &lm, &c, &history, mu, lambda).unwrap();

        let (a, _, _) = base_loss(&w0, &w0, &r1, lambda).unwrap();
        let (b, _, _) = base_loss(&w0, &w0, &r2, lambda).unwrap();
        let expect = 0.25 * a + 0.5 * b;
        assert!((g.value(back).item() - expect).abs() < 1e-10);

        // mu = 1: plain sum
        let mut g2 = Graph::new();
        let lm2 = model::mount_lm(&mut g2, &w0, |_| false);
        let history2: Vec<(&[KnowledgeRecord], &[Tensor])> = vec![(b1, refs1), (b2, refs2)];
        let back2 = backtracking_loss_on(&mut g2, &lm2, &c, &history2, 1.0, lambda).unwrap();
        assert!((g2.value(back2).item() - (a + b)).abs() < 1e-10);
    }

    #[test]
    fn step_reward_identities() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::scalar(0.0));
        let back = g.constant(Tensor::scalar(0.0));
        let (r, _) = step_reward_on(&mut g, base, back, &[], 1e-4).unwrap();
        assert_eq!(g.value(r).item(), 0.0);

        let base = g.constant(Tensor::scalar(1.25));
        let back = g.constant(Tensor::scalar(0.5));
        let upd = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let updates = vec![("ffn_up@1".to_string(), upd)];
        // eta = 0: r = -(base + back)
        let (r0, _) = step_reward_on(&mut g, base, back, &updates, 0.0).unwrap();
        assert!((g.value(r0).item() + 1.75).abs() < 1e-12);
        // breakdown identity with eta > 0
        let eta = 0.3;
        let (r1, bd) = step_reward_on(&mut g, base, back, &updates, eta).unwrap();
        assert_eq!(bd.reg, 25.0);
        assert!((g.value(r1).item() - -(1.25 + 0.5 + eta * 25.0)).abs() < 1e-12);
        assert!((bd.r - -(bd.l_base + bd.l_back + eta * bd.reg)).abs() < 1e-12);
    }

    #[test]
    fn reward_decreases_when_any_component_grows() {
        let mut g = Graph::new();
        let eval = |g: &mut Graph, base: f64, back: f64, reg_entry: f64| -> f64 {
            let b = g.constant(Tensor::scalar(base));
            let k = g.constant(Tensor::scalar(back));
            let u = g.constant(Tensor::from_rows(&[vec![reg_entry]]).unwrap());
            let updates = vec![("x".to_string(), u)];
            let (r, _) = step_reward_on(g, b, k, &updates, 0.1).unwrap();
            g.value(r).item()
        };
        let r0 = eval(&mut g, 1.0, 1.0, 1.0);
        assert!(eval(&mut g, 1.5, 1.0, 1.0) < r0);
        assert!(eval(&mut g, 1.0, 1.5, 1.0) < r0);
        assert!(eval(&mut g, 1.0, 1.0, 1.5) < r0);
    }

    #[test]
    fn trajectory_return_cases() {
        let mut g = Graph::new();
        let r1 = g.constant(Tensor::scalar(-1.0));
        let r2 = g.constant(Tensor::scalar(-2.0));
        let r3 = g.constant(Tensor::scalar(0.5));

        let j1 = trajectory_return_on(&mut g, &[r1, r2, r3], 1.0).unwrap();
        assert!((g.value(j1).item() - (-2.5)).abs() < 1e-12);

        // gamma = 0 under the i-from-1 indexing: everything vanishes
        let j0 = trajectory_return_on(&mut g, &[r1, r2], 0.0).unwrap();
        assert_eq!(g.value(j0).item(), 0.0);

        let jh = trajectory_return_on(&mut g, &[r1], 0.5).unwrap();
        assert!((g.value(jh).item() - (-0.5)).abs() < 1e-12);

        assert!(trajectory_return_on(&mut g, &[], 1.0).is_err());
    }
}
