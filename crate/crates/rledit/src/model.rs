//! The editable toy language model: a 2-layer pre-norm transformer over a
//! synthetic integer vocabulary, with learned positional embeddings, causal
//! attention and GELU feed-forward blocks.
//!
//! Weight matrices are stored (fan_out x fan_in) and applied as `x @ W^T`, so
//! a layer's weight gradient is the sum over token positions of the outer
//! product of the pre-activation gradient row and the input activation row.
//! `collect_rank_one_factors` extracts exactly those rows.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Weight selectors the editor is allowed to touch, e.g. "ffn_up@1".
    pub editable_layers: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            d_ff: 64,
            n_heads: 2,
            max_seq_len: 24,
            editable_layers: vec!["ffn_up@1".into(), "ffn_down@1".into()],
        }
    }
}

impl ModelConfig {
    /// Micro configuration for gradient-check style tests.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_layers: 1,
            d_ff: 8,
            n_heads: 1,
            max_seq_len: 8,
            editable_layers: vec!["ffn_up@0".into(), "ffn_down@0".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config {
                field: "model.d_model".into(),
                msg: format!(
                    "d_model {} must be a positive multiple of n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.editable_layers.is_empty() {
            return Err(Error::Config {
                field: "model.editable_layers".into(),
                msg: "at least one editable layer is required".into(),
            });
        }
        for sel in &self.editable_layers {
            self.editable_shape(sel)?;
        }
        Ok(())
    }

    /// (fan_in, fan_out) of an editable selector; contract error for selectors
    /// that do not name a linear layer.
    pub fn editable_shape(&self, selector: &str) -> Result<(usize, usize)> {
        let (kind, layer) = match selector.split_once('@') {
            Some((k, l)) => {
                let idx: usize = l.parse().map_err(|_| {
                    Error::Contract(format!("bad layer index in selector `{selector}`"))
                })?;
                (k, Some(idx))
            }
            None => (selector, None),
        };
        if let Some(idx) = layer {
            if idx >= self.n_layers {
                return Err(Error::Contract(format!(
                    "selector `{selector}` addresses layer {idx} but the model has {}",
                    self.n_layers
                )));
            }
        }
        match (kind, layer) {
            ("attn_q" | "attn_k" | "attn_v" | "attn_o", Some(_)) => {
                Ok((self.d_model, self.d_model))
            }
            ("ffn_up", Some(_)) => Ok((self.d_model, self.d_ff)),
            ("ffn_down", Some(_)) => Ok((self.d_ff, self.d_model)),
            ("head", None) => Ok((self.d_model, self.vocab_size)),
            _ => Err(Error::Contract(format!(
                "selector `{selector}` does not resolve to a linear layer"
            ))),
        }
    }
}

/// Named weight map. A value-type: cloning snapshots the full parameter state,
/// which is how the immutable pre-edit reference is kept around.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let ff = config.d_ff;
        let mut tensors = BTreeMap::new();
        tensors.insert("embed".into(), Tensor::randn(v, d, 0.02, &mut rng));
        tensors.insert(
            "pos".into(),
            Tensor::randn(config.max_seq_len, d, 0.02, &mut rng),
        );
        let proj = (2.0 / (d + d) as f64).sqrt();
        let up = (2.0 / (d + ff) as f64).sqrt();
        for l in 0..config.n_layers {
            for name in ["attn_q", "attn_k", "attn_v", "attn_o"] {
                tensors.insert(format!("{name}@{l}"), Tensor::randn(d, d, proj, &mut rng));
            }
            tensors.insert(format!("ln1_g@{l}"), Tensor::filled(1, d, 1.0));
            tensors.insert(format!("ln1_b@{l}"), Tensor::zeros(1, d));
            tensors.insert(format!("ln2_g@{l}"), Tensor::filled(1, d, 1.0));
            tensors.insert(format!("ln2_b@{l}"), Tensor::zeros(1, d));
            tensors.insert(format!("ffn_up@{l}"), Tensor::randn(ff, d, up, &mut rng));
            tensors.insert(format!("ffn_down@{l}"), Tensor::randn(d, ff, up, &mut rng));
        }
        tensors.insert("lnf_g".into(), Tensor::filled(1, d, 1.0));
        tensors.insert("lnf_b".into(), Tensor::zeros(1, d));
        tensors.insert(
            "head".into(),
            Tensor::randn(v, d, (1.0 / d as f64).sqrt(), &mut rng),
        );
        Ok(ModelWeights {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }
}

/// One scored sequence: tokens plus the boundary where the answer span begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, prompt_len: usize) -> Self {
        TokenSequence { tokens, prompt_len }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.prompt_len == 0
            || self.prompt_len >= self.tokens.len()
            || self.tokens.len() > config.max_seq_len
        {
            return Err(Error::Degenerate(format!(
                "token sequence of length {} with prompt_len {} violates 0 < prompt < len <= {}",
                self.tokens.len(),
                self.prompt_len,
                config.max_seq_len
            )));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Contract(format!(
                "token {t} out of vocabulary {}",
                config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Weight handles mounted on a specific graph.
#[derive(Clone)]
pub struct MountedLm {
    vars: BTreeMap<String, Var>,
}

impl MountedLm {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("weight `{name}` not mounted"))
    }

    /// Same weight set with some entries replaced (an edited state).
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Var>) -> MountedLm {
        let mut vars = self.vars.clone();
        for (k, v) in overrides {
            vars.insert(k.clone(), *v);
        }
        MountedLm { vars: vars.clone() }
    }
}

/// Mount all weights on `g`; `trainable` decides which get gradient tracking.
pub fn mount_lm(g: &mut Graph, w: &ModelWeights, trainable: impl Fn(&str) -> bool) -> MountedLm {
    let mut vars = BTreeMap::new();
    for (name, t) in w.iter() {
        let var = if trainable(name) {
            g.leaf(t.clone())
        } else {
            g.constant(t.clone())
        };
        vars.insert(name.clone(), var);
    }
    MountedLm { vars }
}

/// Input activation and pre-activation handles of a linear layer, recorded
/// during the forward pass for gradient-factor extraction.
pub struct LayerTap {
    pub input: Var,
    pub preact: Var,
}

pub struct ForwardTrace {
    pub logits: Var,
    pub log_probs: Var,
    pub taps: BTreeMap<String, LayerTap>,
}

fn linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w);
    g.matmul(x, wt)
}

fn layer_norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let scaled = g.elementwise_mul(n, gain)?;
    g.add(scaled, bias)
}

/// Score `input_tokens` and return per-position next-token log-probabilities.
/// `taps` names linear selectors whose (input, preact) handles are recorded.
pub fn forward_lm(
    g: &mut Graph,
    lm: &MountedLm,
    cfg: &ModelConfig,
    input_tokens: &[u32],
    taps: &[&str],
) -> Result<ForwardTrace> {
    let t_len = input_tokens.len();
    if t_len == 0 {
        return Err(Error::Degenerate("forward on empty token sequence".into()));
    }
    if t_len > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            t_len, cfg.max_seq_len
        )));
    }
    let ids: Vec<usize> = input_tokens.iter().map(|&t| t as usize).collect();
    let pos_ids: Vec<usize> = (0..t_len).collect();
    let tok_emb = g.embed(lm.var("embed"), &ids)?;
    let pos_emb = g.embed(lm.var("pos"), &pos_ids)?;
    let mut x = g.add(tok_emb, pos_emb)?;

    // causal mask, shared by every layer of this forward
    let mut mask = Tensor::zeros(t_len, t_len);
    for r in 0..t_len {
        for c in (r + 1)..t_len {
            mask.set(r, c, MASK_NEG);
        }
    }
    let mask = g.constant(mask);

    let head_dim = cfg.d_model / cfg.n_heads;
    let mut tap_map = BTreeMap::new();
    let wants = |name: &String| taps.iter().any(|t| t == name);

    for l in 0..cfg.n_layers {
        let h = layer_norm_affine(g, x, lm.var(&format!("ln1_g@{l}")), lm.var(&format!("ln1_b@{l}")))?;
        let mut proj = BTreeMap::new();
        for kind in ["attn_q", "attn_k", "attn_v"] {
            let name = format!("{kind}@{l}");
            let p = linear(g, h, lm.var(&name))?;
            if wants(&name) {
                tap_map.insert(name.clone(), LayerTap { input: h, preact: p });
            }
            proj.insert(kind, p);
        }
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let q = g.slice_cols(proj["attn_q"], hd * head_dim, head_dim)?;
            let k = g.slice_cols(proj["attn_k"], hd * head_dim, head_dim)?;
            let v = g.slice_cols(proj["attn_v"], hd * head_dim, head_dim)?;
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
            let masked = g.add(scaled, mask)?;
            let probs = g.softmax_rows(masked);
            heads.push(g.matmul(probs, v)?);
        }
        let attn = g.concat_cols(&heads)?;
        let o_name = format!("attn_o@{l}");
        let attn_out = linear(g, attn, lm.var(&o_name))?;
        if wants(&o_name) {
            tap_map.insert(o_name, LayerTap { input: attn, preact: attn_out });
        }
        x = g.add(x, attn_out)?;

        let h2 = layer_norm_affine(g, x, lm.var(&format!("ln2_g@{l}")), lm.var(&format!("ln2_b@{l}")))?;
        let up_name = format!("ffn_up@{l}");
        let up = linear(g, h2, lm.var(&up_name))?;
        if wants(&up_name) {
            tap_map.insert(up_name, LayerTap { input: h2, preact: up });
        }
        let act = g.gelu(up);
        let down_name = format!("ffn_down@{l}");
        let down = linear(g, act, lm.var(&down_name))?;
        if wants(&down_name) {
            tap_map.insert(down_name, LayerTap { input: act, preact: down });
        }
        x = g.add(x, down)?;
    }

    let hf = layer_norm_affine(g, x, lm.var("lnf_g"), lm.var("lnf_b"))?;
    let logits = linear(g, hf, lm.var("head"))?;
    if taps.contains(&"head") {
        tap_map.insert("head".into(), LayerTap { input: hf, preact: logits });
    }
    let log_probs = g.log_softmax(logits);
    Ok(ForwardTrace {
        logits,
        log_probs,
        taps: tap_map,
    })
}

/// Next-token supervision view of a sequence: inputs are all but the last
/// token, row j predicts token j+1. The answer mask selects exactly the rows
/// whose predicted token lies in the answer span.
pub fn supervision(seq: &TokenSequence) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
    let n = seq.tokens.len();
    let inputs = seq.tokens[..n - 1].to_vec();
    let targets: Vec<usize> = seq.tokens[1..].iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = (0..n - 1).map(|j| j + 1 >= seq.prompt_len).collect();
    (inputs, targets, mask)
}

/// Mean NLL over the answer span, built on an existing graph.
pub fn answer_nll_on(
    g: &mut Graph,
    lm: &MountedLm,
    cfg: &ModelConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    seq.validate(cfg)?;
    let (inputs, targets, mask) = supervision(seq);
    let trace = forward_lm(g, lm, cfg, &inputs, &[])?;
    g.nll_loss(trace.log_probs, &targets, &mask)
}

/// Mean NLL over the answer span; prompt positions are masked out.
pub fn answer_nll(w: &ModelWeights, seq: &TokenSequence) -> Result<f64> {
    let mut g = Graph::new();
    let lm = mount_lm(&mut g, w, |_| false);
    let v = answer_nll_on(&mut g, &lm, &w.config, seq)?;
    Ok(g.value(v).item())
}

/// Full-sequence mean NLL (every next-token position), for pretraining.
pub fn full_nll_on(
    g: &mut Graph,
    lm: &MountedLm,
    cfg: &ModelConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    seq.validate(cfg)?;
    let (inputs, targets, _) = supervision(seq);
    let trace = forward_lm(g, lm, cfg, &inputs, &[])?;
    let mask = vec![true; targets.len()];
    g.nll_loss(trace.log_probs, &targets, &mask)
}

/// Per-position log-probabilities of a sequence under `w`, host-side.
pub fn sequence_log_probs(w: &ModelWeights, tokens: &[u32]) -> Result<Tensor> {
    let mut g = Graph::new();
    let lm = mount_lm(&mut g, w, |_| false);
    let trace = forward_lm(&mut g, &lm, &w.config, tokens, &[])?;
    Ok(g.value(trace.log_probs).clone())
}

/// Token-level KL between a constant reference distribution and the current
/// model over all positions of the sequence, built on an existing graph.
pub fn sequence_kl_on(
    g: &mut Graph,
    lm: &MountedLm,
    cfg: &ModelConfig,
    ref_log_probs: &Tensor,
    seq: &TokenSequence,
) -> Result<Var> {
    seq.validate(cfg)?;
    let inputs = &seq.tokens[..seq.tokens.len() - 1];
    let trace = forward_lm(g, lm, cfg, inputs, &[])?;
    let ref_var = g.constant(ref_log_probs.clone());
    let mask = vec![true; inputs.len()];
    g.kl_divergence(ref_var, trace.log_probs, &mask)
}

/// Mean token-level KL between the reference and current weights on `seq`.
/// The reference side carries no gradient.
pub fn answer_kl(w_ref: &ModelWeights, w_cur: &ModelWeights, seq: &TokenSequence) -> Result<f64> {
    let inputs = &seq.tokens[..seq.tokens.len() - 1];
    let ref_rows = sequence_log_probs(w_ref, inputs)?;
    let mut g = Graph::new();
    let lm = mount_lm(&mut g, w_cur, |_| false);
    let v = sequence_kl_on(&mut g, &lm, &w_cur.config, &ref_rows, seq)?;
    Ok(g.value(v).item())
}

/// Iterated argmax continuation; ties resolve to the lowest token index.
pub fn greedy_decode(w: &ModelWeights, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Degenerate("greedy_decode on empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        if tokens.len() >= w.config.max_seq_len {
            break;
        }
        let mut g = Graph::new();
        let lm = mount_lm(&mut g, w, |_| false);
        let trace = forward_lm(&mut g, &lm, &w.config, &tokens, &[])?;
        let lp = g.value(trace.log_probs);
        let last = lp.row(lp.rows() - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}

/// Per-layer, per-token rank-1 gradient factors: `u` rows are the layer's
/// input activations, `delta` rows the answer-loss gradient of its
/// pre-activations, both restricted to the answer-span positions. Factors are
/// plain tensors: nothing links back to the graph that produced them.
#[derive(Clone, Debug)]
pub struct LayerFactors {
    pub selector: String,
    /// tokens x fan_in
    pub u: Tensor,
    /// tokens x fan_out
    pub delta: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct RankOneFactors {
    pub layers: Vec<LayerFactors>,
}

impl RankOneFactors {
    /// Row-concatenate factors from several records.
    pub fn merge(parts: &[RankOneFactors]) -> Result<RankOneFactors> {
        let mut layers: Vec<LayerFactors> = Vec::new();
        for part in parts {
            for lf in &part.layers {
                match layers.iter_mut().find(|x| x.selector == lf.selector) {
                    Some(acc) => {
                        acc.u = acc.u.vstack(&lf.u)?;
                        acc.delta = acc.delta.vstack(&lf.delta)?;
                    }
                    None => layers.push(lf.clone()),
                }
            }
        }
        Ok(RankOneFactors { layers })
    }

    /// Dense gradient reconstruction: sum over token rows of delta ub^T.
    pub fn reconstruct(&self, selector: &str) -> Option<Tensor> {
        let lf = self.layers.iter().find(|l| l.selector == selector)?;
        let fan_out = lf.delta.cols();
        let fan_in = lf.u.cols();
        let mut out = Tensor::zeros(fan_out, fan_in);
        for p in 0..lf.u.rows() {
            for r in 0..fan_out {
                let d = lf.delta.get(p, r);
                for c in 0..fan_in {
                    out.set(r, c, out.get(r, c) + d * lf.u.get(p, c));
                }
            }
        }
        Some(out)
    }
}

/// Collect (u, delta) for every editable layer of `w` on one record, by one
/// forward/backward of the answer NLL. The returned factors are detached.
pub fn collect_rank_one_factors(w: &ModelWeights, seq: &TokenSequence) -> Result<RankOneFactors> {
    seq.validate(&w.config)?;
    for sel in &w.config.editable_layers {
        w.config.editable_shape(sel)?;
    }
    let mut g = Graph::new();
    let editable: Vec<&str> = w.config.editable_layers.iter().map(|s| s.as_str()).collect();
    let lm = mount_lm(&mut g, w, |name| editable.contains(&name));
    let (inputs, targets, mask) = supervision(seq);
    let trace = forward_lm(&mut g, &lm, &w.config, &inputs, &editable)?;
    let loss = g.nll_loss(trace.log_probs, &targets, &mask)?;
    g.backward(loss)?;

    let active_rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i) } else { None })
        .collect();

    let mut layers = Vec::new();
    for sel in &w.config.editable_layers {
        let tap = trace
            .taps
            .get(sel)
            .ok_or_else(|| Error::Contract(format!("no tap recorded for `{sel}`")))?;
        let u = g.value(tap.input).select_rows(&active_rows);
        let delta = g.grad_or_zero(tap.preact).select_rows(&active_rows);
        layers.push(LayerFactors {
            selector: sel.clone(),
            u,
            delta,
        });
    }
    Ok(RankOneFactors { layers })
}

/// Full autodiff weight gradient of the answer NLL for one selector; the
/// oracle side of the rank-1 reconstruction check.
pub fn full_weight_gradient(w: &ModelWeights, seq: &TokenSequence, selector: &str) -> Result<Tensor> {
    w.config.editable_shape(selector)?;
    let mut g = Graph::new();
    let lm = mount_lm(&mut g, w, |name| name == selector);
    let (inputs, targets, mask) = supervision(seq);
    let trace = forward_lm(&mut g, &lm, &w.config, &inputs, &[])?;
    let loss = g.nll_loss(trace.log_probs, &targets, &mask)?;
    g.backward(loss)?;
    Ok(g.grad_or_zero(lm.var(selector)))
}

pub struct PretrainReport {
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Next-token training on the corpus; deterministic under `seed`.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[TokenSequence],
    steps: usize,
    seed: u64,
    lr: f64,
) -> Result<(ModelWeights, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("pretrain on an empty corpus".into()));
    }
    let mut w = ModelWeights::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(lr);
    let batch = corpus.len().min(16);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();

    for step in 0..steps {
        let mut g = Graph::new();
        let lm = mount_lm(&mut g, &w, |_| true);
        let mut losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &corpus[order[cursor]];
            cursor += 1;
            losses.push(full_nll_on(&mut g, &lm, config, seq)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, 1.0 / losses.len() as f64);
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                msg: format!("pretraining loss became non-finite ({loss_val})"),
            });
        }
        g.backward(loss)?;
        let grads: BTreeMap<String, Tensor> = w
            .names()
            .map(|n| (n.clone(), g.grad_or_zero(lm.var(n))))
            .collect();
        let mut triples: Vec<(String, &mut [f64], &[f64])> = Vec::new();
        for (name, t) in w.iter_mut() {
            let gslice = grads[name].data();
            triples.push((name.clone(), t.data_mut(), gslice));
        }
        adam.step(&mut triples);
    }

    // recorded loss: full-corpus mean, also the steps=0 value
    let mut g = Graph::new();
    let lm = mount_lm(&mut g, &w, |_| false);
    let mut total = 0.0;
    for seq in corpus {
        let l = full_nll_on(&mut g, &lm, config, seq)?;
        total += g.value(l).item();
    }
    let final_loss = total / corpus.len() as f64;
    Ok((
        w,
        PretrainReport {
            final_loss,
            steps_run: steps,
        },
    ))
}

/// Fraction of sequences whose greedy decode of the prompt reproduces the
/// answer span exactly.
pub fn exact_match_rate(w: &ModelWeights, seqs: &[TokenSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for seq in seqs {
        let decoded = greedy_decode(w, seq.prompt(), seq.answer().len())?;
        if decoded == seq.answer() {
            hits += 1;
        }
    }
    Ok(hits as f64 / seqs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact_seq(prompt: &[u32], answer: &[u32]) -> TokenSequence {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(answer);
        TokenSequence::new(tokens, prompt.len())
    }

    fn tiny_cfg() -> ModelConfig {
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
    fn pretrain_same_seed_is_bitwise_identical() {
        let cfg = tiny_cfg();
        let corpus = vec![fact_seq(&[1, 2, 3], &[4])];
        let (w1, _) = pretrain(&cfg, &corpus, 20, 7, 1e-2).unwrap();
        let (w2, _) = pretrain(&cfg, &corpus, 20, 7, 1e-2).unwrap();
        for (name, t) in w1.iter() {
            assert_eq!(Some(t), w2.get(name), "mismatch in {name}");
        }
    }

    #[test]
    fn pretrain_zero_steps_keeps_init() {
        let cfg = tiny_cfg();
        let corpus = vec![fact_seq(&[1, 2, 3], &[4])];
        let (w, report) = pretrain(&cfg, &corpus, 0, 3, 1e-2).unwrap();
        let init = ModelWeights::init(&cfg, 3).unwrap();
        for (name, t) in w.iter() {
            assert_eq!(Some(t), init.get(name));
        }
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn pretrain_memorizes_single_fact() {
        let cfg = tiny_cfg();
        let corpus = vec![fact_seq(&[1, 2, 3], &[4])];
        let (w, report) = pretrain(&cfg, &corpus, 500, 11, 1e-2).unwrap();
        let decoded = greedy_decode(&w, &[1, 2, 3], 1).unwrap();
        assert_eq!(decoded, vec![4]);
        // fine-tuned-to-the-fact model scores its own fact confidently
        let nll = answer_nll(&w, &corpus[0]).unwrap();
        assert!(nll < 0.05, "nll = {nll}");
        assert!(report.final_loss < 1.0);
    }

    #[test]
    fn answer_nll_uniform_logits_is_ln_vocab() {
        let cfg = ModelConfig::default();
        let mut w = ModelWeights::init(&cfg, 1).unwrap();
        let names: Vec<String> = w.names().cloned().collect();
        for name in names {
            let shape = w.get(&name).unwrap().shape();
            w.set(&name, Tensor::zeros(shape.0, shape.1));
        }
        let seq = fact_seq(&[1, 2, 3], &[4]);
        let nll = answer_nll(&w, &seq).unwrap();
        assert!((nll - 64.0f64.ln()).abs() < 1e-9, "nll = {nll}");
    }

    #[test]
    fn answer_nll_matches_manual_composition() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let seq = fact_seq(&[3, 1, 2], &[9, 6]);
        let nll = answer_nll(&w, &seq).unwrap();

        let (inputs, targets, mask) = supervision(&seq);
        let lp = sequence_log_probs(&w, &inputs).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for (r, (&tgt, &m)) in targets.iter().zip(&mask).enumerate() {
            if m {
                total -= lp.get(r, tgt);
                count += 1;
            }
        }
        assert!((nll - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn answer_nll_rejects_empty_answer() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let bad = TokenSequence::new(vec![1, 2, 3], 3);
        assert!(answer_nll(&w, &bad).is_err());
    }

    #[test]
    fn answer_kl_zero_on_same_weights_and_positive_after_perturbation() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let seq = fact_seq(&[3, 1, 2], &[9]);
        let same = answer_kl(&w, &w, &seq).unwrap();
        assert!(same.abs() < 1e-9);

        let mut w2 = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let shape = w2.get("head").unwrap().shape();
        let noise = Tensor::randn(shape.0, shape.1, 0.5, &mut rng);
        let bumped = w2.get("head").unwrap().add(&noise).unwrap();
        w2.set("head", bumped);
        let moved = answer_kl(&w, &w2, &seq).unwrap();
        assert!(moved > 1e-4, "kl = {moved}");
    }

    #[test]
    fn answer_kl_matches_manual_rows() {
        let cfg = tiny_cfg();
        let w_ref = ModelWeights::init(&cfg, 5).unwrap();
        let w_cur = ModelWeights::init(&cfg, 6).unwrap();
        let seq = fact_seq(&[3, 1, 2], &[9]);
        let kl = answer_kl(&w_ref, &w_cur, &seq).unwrap();

        let inputs = &seq.tokens[..seq.tokens.len() - 1];
        let lr = sequence_log_probs(&w_ref, inputs).unwrap();
        let lc = sequence_log_probs(&w_cur, inputs).unwrap();
        let mut expect = 0.0;
        for r in 0..lr.rows() {
            for c in 0..lr.cols() {
                expect += lr.get(r, c).exp() * (lr.get(r, c) - lc.get(r, c));
            }
        }
        expect /= lr.rows() as f64;
        assert!((kl - expect).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_contracts() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 5).unwrap();
        let a = greedy_decode(&w, &[1, 2], 3).unwrap();
        let b = greedy_decode(&w, &[1, 2], 3).unwrap();
        assert_eq!(a, b);
        assert!(greedy_decode(&w, &[1, 2], 0).unwrap().is_empty());
        assert!(greedy_decode(&w, &[], 2).is_err());
    }

    #[test]
    fn rank_one_reconstruction_matches_full_gradient() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 17).unwrap();
        let seq = fact_seq(&[3, 1, 2], &[9, 4]);
        let factors = collect_rank_one_factors(&w, &seq).unwrap();
        for sel in &cfg.editable_layers {
            let rec = factors.reconstruct(sel).unwrap();
            let full = full_weight_gradient(&w, &seq, sel).unwrap();
            assert_eq!(rec.shape(), full.shape());
            for (a, b) in rec.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-8, "{sel}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn factor_shapes_follow_layer_fan() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 17).unwrap();
        let seq = fact_seq(&[3, 1, 2], &[9, 4]);
        let factors = collect_rank_one_factors(&w, &seq).unwrap();
        let up = factors.layers.iter().find(|l| l.selector == "ffn_up@1").unwrap();
        assert_eq!(up.u.cols(), cfg.d_model);
        assert_eq!(up.delta.cols(), cfg.d_ff);
        assert_eq!(up.u.rows(), 2); // answer length
        let down = factors
            .layers
            .iter()
            .find(|l| l.selector == "ffn_down@1")
            .unwrap();
        assert_eq!(down.u.cols(), cfg.d_ff);
        assert_eq!(down.delta.cols(), cfg.d_model);
    }

    #[test]
    fn near_zero_loss_gives_near_zero_factors() {
        let cfg = tiny_cfg();
        let corpus = vec![fact_seq(&[1, 2, 3], &[4])];
        let (w, _) = pretrain(&cfg, &corpus, 800, 11, 1e-2).unwrap();
        let factors = collect_rank_one_factors(&w, &corpus[0]).unwrap();
        for lf in &factors.layers {
            let norm = lf.delta.frob_norm_sq().sqrt();
            assert!(norm < 0.25, "{}: delta norm {}", lf.selector, norm);
        }
    }

    #[test]
    fn non_linear_selector_is_contract_error() {
        let mut cfg = tiny_cfg();
        cfg.editable_layers = vec!["ln1_g@0".into()];
        assert!(cfg.validate().is_err());
        cfg.editable_layers = vec!["embed".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nll_is_order_independent_across_records() {
        let cfg = tiny_cfg();
        let w = ModelWeights::init(&cfg, 23).unwrap();
        let seqs = vec![
            fact_seq(&[1, 2, 3], &[4]),
            fact_seq(&[5, 6, 7], &[8]),
            fact_seq(&[9, 10, 11], &[12]),
        ];
        let forward: Vec<f64> = seqs.iter().map(|s| answer_nll(&w, s).unwrap()).collect();
        let backward: Vec<f64> = seqs
            .iter()
            .rev()
            .map(|s| answer_nll(&w, s).unwrap())
            .collect();
        for (f, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(f.to_bits(), b.to_bits());
        }
    }
}
