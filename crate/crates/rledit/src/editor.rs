//! Training-free sequential editing and post-hoc evaluation.
//!
//! Editing replays the trained policy: per batch, collect gradient factors
//! under the current weights, transform, add. No reward, no parameter
//! updates, no trajectory graph. Evaluation decodes greedily and scores
//! the three fractions: edited prompts (efficacy), their paraphrases
//! (generalization) and unrelated prompts against the pre-edit decode
//! (specificity). A probability-comparison variant of the metrics is
//! available as a secondary report.

use crate::data::KnowledgeRecord;
use crate::error::{Error, Result};
use crate::hypernet::{self, HyperNetwork};
use crate::logfmt::format_sig;
use crate::model::{self, ModelWeights, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditSessionState {
    pub steps: usize,
    pub per_step_secs: Vec<f64>,
    /// Accumulated squared update norm per edited layer.
    pub cum_update_norm_sq: BTreeMap<String, f64>,
}

impl EditSessionState {
    pub fn mean_edit_secs(&self) -> Option<f64> {
        if self.per_step_secs.is_empty() {
            None
        } else {
            Some(self.per_step_secs.iter().sum::<f64>() / self.per_step_secs.len() as f64)
        }
    }
}

/// Apply the hypernetwork to an arbitrary-length stream of record batches.
/// The hypernetwork is read-only; factor collection is detached; noise is off.
pub fn edit_stream(
    w0: &ModelWeights,
    h: &HyperNetwork,
    stream: &[Vec<KnowledgeRecord>],
    lr_inner: f64,
) -> Result<(ModelWeights, EditSessionState)> {
    if stream.is_empty() {
        return Err(Error::Degenerate("edit stream is empty".into()));
    }
    let mut weights = w0.clone();
    let mut session = EditSessionState {
        steps: 0,
        per_step_secs: Vec::with_capacity(stream.len()),
        cum_update_norm_sq: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: editing adds no noise

    for (idx, batch) in stream.iter().enumerate() {
        let t = idx + 1;
        let started = Instant::now();
        let factors = crate::trainer::collect_batch_factors(&weights, batch)?;
        let (update, _) = hypernet::transform(h, &factors, lr_inner, t)?;
        if !update.all_finite() {
            return Err(Error::TrainingFailure {
                step: t,
                msg: "non-finite edit update".into(),
            });
        }
        weights = hypernet::apply_update(&weights, &update, 0.0, &mut rng)?;
        session.per_step_secs.push(started.elapsed().as_secs_f64());
        session.steps += 1;
        for (sel, tensor) in &update.layers {
            *session.cum_update_norm_sq.entry(sel.clone()).or_insert(0.0) +=
                tensor.frob_norm_sq();
        }
    }
    Ok((weights, session))
}

/// Per-batch plain gradient descent on the edit NLL, restricted to the
/// editable layers. The forgetting-prone baseline editor.
pub fn fine_tune_baseline(
    w0: &ModelWeights,
    stream: &[Vec<KnowledgeRecord>],
    steps_per_edit: usize,
    lr: f64,
) -> Result<ModelWeights> {
    let mut weights = w0.clone();
    let editable = weights.config.editable_layers.clone();
    for batch in stream {
        for _ in 0..steps_per_edit {
            let mut g = crate::autodiff::Graph::new();
            let lm = model::mount_lm(&mut g, &weights, |name| {
                editable.iter().any(|s| s == name)
            });
            let mut acc = None;
            for record in batch {
                let nll = model::answer_nll_on(&mut g, &lm, &weights.config, &record.edit_seq())?;
                acc = Some(match acc {
                    Some(a) => g.add(a, nll)?,
                    None => nll,
                });
            }
            let total = acc.ok_or_else(|| Error::Degenerate("empty batch".into()))?;
            let loss = g.scale(total, 1.0 / batch.len() as f64);
            g.backward(loss)?;
            for sel in &editable {
                let grad = g.grad_or_zero(lm.var(sel));
                let cur = weights.get(sel).expect("editable layer exists");
                weights.set(sel, cur.add(&grad.scale(-lr))?);
            }
        }
    }
    Ok(weights)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: u64,
    pub efficacy: bool,
    pub generalization: bool,
    pub specificity: bool,
}

/// Probability-comparison variants of the three metrics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CfMetrics {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub n_edited: usize,
    pub n_unrelated: usize,
    pub per_record: Vec<RecordOutcome>,
    pub mean_edit_secs: Option<f64>,
    pub counterfact: Option<CfMetrics>,
}

impl MetricsReport {
    pub fn with_timing(mut self, secs: Option<f64>) -> Self {
        self.mean_edit_secs = secs;
        self
    }
}

/// Exact-match metrics over the full answer span.
pub fn evaluate(
    w_final: &ModelWeights,
    w0: &ModelWeights,
    edited: &[KnowledgeRecord],
    unrelated: &[TokenSequence],
) -> Result<MetricsReport> {
    if edited.is_empty() || unrelated.is_empty() {
        return Err(Error::Degenerate(
            "evaluate requires nonempty edited and unrelated sets".into(),
        ));
    }
    let mut per_record = Vec::with_capacity(edited.len());
    let mut eff = 0usize;
    let mut gen = 0usize;
    for r in edited {
        let efficacy = model::greedy_decode(w_final, &r.x, r.y.len())? == r.y;
        let generalization = model::greedy_decode(w_final, &r.x_e, r.y_e.len())? == r.y_e;
        let loc_now = model::greedy_decode(w_final, &r.x_loc, r.y_loc.len())?;
        let loc_before = model::greedy_decode(w0, &r.x_loc, r.y_loc.len())?;
        let specificity = loc_now == loc_before;
        eff += efficacy as usize;
        gen += generalization as usize;
        per_record.push(RecordOutcome {
            record_id: r.record_id,
            efficacy,
            generalization,
            specificity,
        });
    }
    // headline specificity over the held-out unrelated prompts, judged
    // against the pristine snapshot's own decode
    let mut spec = 0usize;
    for seq in unrelated {
        let now = model::greedy_decode(w_final, seq.prompt(), seq.answer().len())?;
        let before = model::greedy_decode(w0, seq.prompt(), seq.answer().len())?;
        spec += (now == before) as usize;
    }
    Ok(MetricsReport {
        efficacy: eff as f64 / edited.len() as f64,
        generalization: gen as f64 / edited.len() as f64,
        specificity: spec as f64 / unrelated.len() as f64,
        n_edited: edited.len(),
        n_unrelated: unrelated.len(),
        per_record,
        mean_edit_secs: None,
        counterfact: None,
    })
}

/// Total log-probability of `answer` continuing `prompt`.
pub fn answer_log_prob(w: &ModelWeights, prompt: &[u32], answer: &[u32]) -> Result<f64> {
    if prompt.is_empty() || answer.is_empty() {
        return Err(Error::Degenerate("scoring needs prompt and answer".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(answer);
    let inputs = &tokens[..tokens.len() - 1];
    let lp = model::sequence_log_probs(w, inputs)?;
    let mut total = 0.0;
    for (i, &a) in answer.iter().enumerate() {
        let row = prompt.len() - 1 + i;
        total += lp.get(row, a as usize);
    }
    Ok(total)
}

/// Probability-comparison metrics: the edited answer must outscore the
/// pre-edit answer on the edit and paraphrase prompts, and the unrelated
/// answer must keep outscoring the edited one on the locality prompt.
pub fn evaluate_counterfact(
    w_final: &ModelWeights,
    w0: &ModelWeights,
    edited: &[KnowledgeRecord],
) -> Result<CfMetrics> {
    if edited.is_empty() {
        return Err(Error::Degenerate("evaluate on an empty record set".into()));
    }
    let mut eff = 0usize;
    let mut gen = 0usize;
    let mut spec = 0usize;
    for r in edited {
        // the pre-edit model's own continuation stands in for the old answer
        let y0 = model::greedy_decode(w0, &r.x, r.y.len())?;
        let p_new = answer_log_prob(w_final, &r.x, &r.y)?;
        let p_old = answer_log_prob(w_final, &r.x, &y0)?;
        eff += (p_new > p_old) as usize;
        let p_new_e = answer_log_prob(w_final, &r.x_e, &r.y_e)?;
        let p_old_e = answer_log_prob(w_final, &r.x_e, &y0)?;
        gen += (p_new_e > p_old_e) as usize;
        let p_loc = answer_log_prob(w_final, &r.x_loc, &r.y_loc)?;
        let p_intruder = answer_log_prob(w_final, &r.x_loc, &r.y)?;
        spec += (p_loc > p_intruder) as usize;
    }
    let n = edited.len() as f64;
    Ok(CfMetrics {
        efficacy: eff as f64 / n,
        generalization: gen as f64 / n,
        specificity: spec as f64 / n,
    })
}

/// metric,value,n_records rows. Wall-time rows are only present when the
/// caller measured them, so checkpoint-only evaluations stay byte-stable.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,value,n_records")?;
    writeln!(
        f,
        "efficacy,{},{}",
        format_sig(report.efficacy, 10),
        report.n_edited
    )?;
    writeln!(
        f,
        "generalization,{},{}",
        format_sig(report.generalization, 10),
        report.n_edited
    )?;
    writeln!(
        f,
        "specificity,{},{}",
        format_sig(report.specificity, 10),
        report.n_unrelated
    )?;
    if let Some(cf) = &report.counterfact {
        writeln!(
            f,
            "cf_efficacy,{},{}",
            format_sig(cf.efficacy, 10),
            report.n_edited
        )?;
        writeln!(
            f,
            "cf_generalization,{},{}",
            format_sig(cf.generalization, 10),
            report.n_edited
        )?;
        writeln!(
            f,
            "cf_specificity,{},{}",
            format_sig(cf.specificity, 10),
            report.n_edited
        )?;
    }
    if let Some(secs) = report.mean_edit_secs {
        writeln!(f, "mean_edit_seconds,{},{}", format_sig(secs, 10), report.n_edited)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_metrics_table(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{:<18} {:>10} {:>10}", "metric", "value", "n")?;
    writeln!(f, "{:-<40}", "")?;
    writeln!(
        f,
        "{:<18} {:>10.4} {:>10}",
        "efficacy", report.efficacy, report.n_edited
    )?;
    writeln!(
        f,
        "{:<18} {:>10.4} {:>10}",
        "generalization", report.generalization, report.n_edited
    )?;
    writeln!(
        f,
        "{:<18} {:>10.4} {:>10}",
        "specificity", report.specificity, report.n_unrelated
    )?;
    if let Some(cf) = &report.counterfact {
        writeln!(
            f,
            "{:<18} {:>10.4} {:>10}",
            "cf_efficacy", cf.efficacy, report.n_edited
        )?;
        writeln!(
            f,
            "{:<18} {:>10.4} {:>10}",
            "cf_generalization", cf.generalization, report.n_edited
        )?;
        writeln!(
            f,
            "{:<18} {:>10.4} {:>10}",
            "cf_specificity", cf.specificity, report.n_edited
        )?;
    }
    if let Some(secs) = report.mean_edit_secs {
        writeln!(f, "{:<18} {:>10.6} {:>10}", "sec_per_edit", secs, report.n_edited)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_per_record_jsonl(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &report.per_record {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Contract(format!("outcome serialization failed: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Per-step timing and cumulative norms of an edit session.
pub fn write_session_csv(path: &Path, session: &EditSessionState) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,seconds")?;
    for (i, s) in session.per_step_secs.iter().enumerate() {
        writeln!(f, "{},{}", i + 1, format_sig(*s, 10))?;
    }
    f.flush()?;
    Ok(())
}
