//! The editor hypernetwork: maps per-token rank-1 gradient factors (u, delta)
//! of an editable layer to pseudo-factors whose summed outer products form the
//! weight update.
//!
//! One parameter group exists per distinct (fan_in, fan_out) shape; layers of
//! equal shape share parameters. Each group is a 4-layer MLP over the
//! normalized concatenated factor rows, added residually to the raw factors,
//! followed by a learned scalar gate on the assembled update. The MLP's output
//! layer and the gate start at exact zero, so an untrained hypernetwork is a
//! no-op policy: it emits the raw-gradient outer product scaled by zero.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, RankOneFactors};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;

const NORM_EPS: f64 = 1e-6;
/// EMA coefficient for running feature statistics.
const STATS_MOMENTUM: f64 = 0.1;

/// Per-feature running statistics, frozen for editing after training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningNorm {
    fn new(dim: usize) -> Self {
        RunningNorm {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            initialized: false,
        }
    }

    fn absorb(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            self.mean = mean.to_vec();
            self.var = var.to_vec();
            self.initialized = true;
        } else {
            for i in 0..self.mean.len() {
                self.mean[i] += STATS_MOMENTUM * (mean[i] - self.mean[i]);
                self.var[i] += STATS_MOMENTUM * (var[i] - self.var[i]);
            }
        }
    }
}

/// Parameters for one (fan_in, fan_out) shape.
#[derive(Clone, Debug)]
pub struct ShapeGroup {
    pub fan_in: usize,
    pub fan_out: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub norm_u: RunningNorm,
    pub norm_delta: RunningNorm,
}

impl ShapeGroup {
    fn init(fan_in: usize, fan_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let io = fan_in + fan_out;
        let hidden_std = (2.0 / (io + rank) as f64).sqrt();
        let mid_std = (2.0 / (2 * rank) as f64).sqrt();
        let mut tensors = BTreeMap::new();
        tensors.insert("w1".into(), Tensor::randn(rank, io, hidden_std, rng));
        tensors.insert("b1".into(), Tensor::zeros(1, rank));
        tensors.insert("w2".into(), Tensor::randn(rank, rank, mid_std, rng));
        tensors.insert("b2".into(), Tensor::zeros(1, rank));
        tensors.insert("w3".into(), Tensor::randn(rank, rank, mid_std, rng));
        tensors.insert("b3".into(), Tensor::zeros(1, rank));
        // residual branch: exact zeros, so the initial policy is a no-op
        tensors.insert("w4".into(), Tensor::zeros(io, rank));
        tensors.insert("b4".into(), Tensor::zeros(1, io));
        tensors.insert("scale".into(), Tensor::zeros(1, 1));
        ShapeGroup {
            fan_in,
            fan_out,
            tensors,
            norm_u: RunningNorm::new(fan_in),
            norm_delta: RunningNorm::new(fan_out),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// Analytic parameter count of one group for the given dimensions.
pub fn group_param_count(fan_in: usize, fan_out: usize, rank: usize) -> usize {
    let io = fan_in + fan_out;
    2 * rank * io + 2 * rank * rank + 3 * rank + io + 1
}

#[derive(Clone, Debug)]
pub struct HyperNetwork {
    pub rank: usize,
    pub frozen: bool,
    pub groups: BTreeMap<(usize, usize), ShapeGroup>,
}

/// Which feature statistics `transform` normalizes with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Statistics of the incoming token batch (training).
    Batch,
    /// The stored running statistics (editing with a trained network).
    Frozen,
}

/// Dense per-layer updates; the action applied to the model at one step.
#[derive(Clone, Debug)]
pub struct EditUpdate {
    pub step: usize,
    pub layers: Vec<(String, Tensor)>,
}

impl EditUpdate {
    pub fn negated(&self) -> EditUpdate {
        EditUpdate {
            step: self.step,
            layers: self
                .layers
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(-1.0)))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|(_, t)| t.all_finite())
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.layers.iter().map(|(_, t)| t.frob_norm_sq()).sum()
    }
}

/// Graph handles of all hypernetwork parameters.
pub struct ThetaVars {
    pub groups: BTreeMap<(usize, usize), BTreeMap<String, Var>>,
}

impl ThetaVars {
    pub fn iter_named(&self) -> impl Iterator<Item = (String, Var)> + '_ {
        self.groups.iter().flat_map(|((fi, fo), vars)| {
            vars.iter()
                .map(move |(n, v)| (format!("g{fi}x{fo}.{n}"), *v))
        })
    }
}

/// Batch statistics observed by one transform call, to be folded into the
/// running statistics by the training loop.
pub struct StatsObservation {
    pub shape: (usize, usize),
    pub u_mean: Vec<f64>,
    pub u_var: Vec<f64>,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}

pub fn init_hypernetwork(config: &ModelConfig, rank: usize, seed: u64) -> Result<HyperNetwork> {
    if rank == 0 {
        return Err(Error::Config {
            field: "hyper.rank".into(),
            msg: "rank must be positive".into(),
        });
    }
    config.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = BTreeMap::new();
    for sel in &config.editable_layers {
        let shape = config.editable_shape(sel)?;
        groups
            .entry(shape)
            .or_insert_with(|| ShapeGroup::init(shape.0, shape.1, rank, &mut rng));
    }
    Ok(HyperNetwork {
        rank,
        frozen: false,
        groups,
    })
}

impl HyperNetwork {
    pub fn param_count(&self) -> usize {
        self.groups.values().map(|g| g.param_count()).sum()
    }

    /// Flat named views over every parameter, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for ((fi, fo), group) in self.groups.iter_mut() {
            for (n, t) in group.tensors.iter_mut() {
                out.push((format!("g{fi}x{fo}.{n}"), t.data_mut()));
            }
        }
        out
    }

    pub fn absorb_stats(&mut self, observations: &[StatsObservation]) {
        for obs in observations {
            if let Some(group) = self.groups.get_mut(&obs.shape) {
                group.norm_u.absorb(&obs.u_mean, &obs.u_var);
                group.norm_delta.absorb(&obs.d_mean, &obs.d_var);
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// Mount every hypernetwork parameter on `g`.
pub fn mount_theta(g: &mut Graph, h: &HyperNetwork, trainable: bool) -> ThetaVars {
    let mut groups = BTreeMap::new();
    for (shape, group) in &h.groups {
        let mut vars = BTreeMap::new();
        for (n, t) in &group.tensors {
            let v = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(n.clone(), v);
        }
        groups.insert(*shape, vars);
    }
    ThetaVars { groups }
}

fn feature_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = t.shape();
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += t.get(r, c);
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = t.get(r, c) - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rows as f64;
    }
    (mean, var)
}

fn normalize(t: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let (rows, cols) = t.shape();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, (t.get(r, c) - mean[c]) / (var[c] + NORM_EPS).sqrt());
        }
    }
    out
}

/// Build the per-layer updates on `g`, differentiable with respect to theta
/// and constant with respect to the input factors.
pub fn transform_on(
    g: &mut Graph,
    h: &HyperNetwork,
    theta: &ThetaVars,
    factors: &RankOneFactors,
    lr_inner: f64,
    mode: NormMode,
) -> Result<(Vec<(String, Var)>, Vec<StatsObservation>)> {
    let mut updates = Vec::new();
    let mut observations = Vec::new();
    for lf in &factors.layers {
        let shape = (lf.u.cols(), lf.delta.cols());
        let group = h.groups.get(&shape).ok_or_else(|| {
            Error::Contract(format!(
                "no hypernetwork group for layer shape {}x{} (selector `{}`)",
                shape.0, shape.1, lf.selector
            ))
        })?;
        let vars = &theta.groups[&shape];
        if lf.u.rows() != lf.delta.rows() {
            return Err(Error::dim("factors", lf.u.shape(), lf.delta.shape()));
        }

        let (u_mean, u_var) = feature_stats(&lf.u);
        let (d_mean, d_var) = feature_stats(&lf.delta);
        let (norm_u, norm_d) = match mode {
            NormMode::Batch => (
                normalize(&lf.u, &u_mean, &u_var),
                normalize(&lf.delta, &d_mean, &d_var),
            ),
            NormMode::Frozen if group.norm_u.initialized => (
                normalize(&lf.u, &group.norm_u.mean, &group.norm_u.var),
                normalize(&lf.delta, &group.norm_delta.mean, &group.norm_delta.var),
            ),
            NormMode::Frozen => (
                normalize(&lf.u, &u_mean, &u_var),
                normalize(&lf.delta, &d_mean, &d_var),
            ),
        };
        if mode == NormMode::Batch {
            observations.push(StatsObservation {
                shape,
                u_mean,
                u_var,
                d_mean,
                d_var,
            });
        }

        // factors enter as constants: the stop-gradient boundary
        let mut norm_in = Tensor::zeros(norm_u.rows(), shape.0 + shape.1);
        for r in 0..norm_u.rows() {
            for c in 0..shape.0 {
                norm_in.set(r, c, norm_u.get(r, c));
            }
            for c in 0..shape.1 {
                norm_in.set(r, shape.0 + c, norm_d.get(r, c));
            }
        }
        let x = g.constant(norm_in);
        let raw_u = g.constant(lf.u.clone());
        let raw_d = g.constant(lf.delta.clone());

        let mut hvar = x;
        for layer in ["w1", "w2", "w3"] {
            let wt = g.transpose(vars[layer]);
            let lin = g.matmul(hvar, wt)?;
            let biased = g.add(lin, vars[&format!("b{}", &layer[1..])])?;
            hvar = g.gelu(biased);
        }
        let w4t = g.transpose(vars["w4"]);
        let out_lin = g.matmul(hvar, w4t)?;
        let out = g.add(out_lin, vars["b4"])?;

        let du = g.slice_cols(out, 0, shape.0)?;
        let dd = g.slice_cols(out, shape.0, shape.1)?;
        let res_u = g.scale(raw_u, lr_inner);
        let res_d = g.scale(raw_d, lr_inner);
        let pseudo_u = g.add(res_u, du)?;
        let pseudo_d = g.add(res_d, dd)?;
        let pdt = g.transpose(pseudo_d);
        let outer = g.matmul(pdt, pseudo_u)?;
        let update = g.elementwise_mul(outer, vars["scale"])?;
        updates.push((lf.selector.clone(), update));
    }
    Ok((updates, observations))
}

/// Host-level transform: returns the dense updates for one step.
pub fn transform(
    h: &HyperNetwork,
    factors: &RankOneFactors,
    lr_inner: f64,
    step: usize,
) -> Result<(EditUpdate, Vec<StatsObservation>)> {
    let mode = if h.frozen {
        NormMode::Frozen
    } else {
        NormMode::Batch
    };
    let mut g = Graph::new();
    let theta = mount_theta(&mut g, h, false);
    let (updates, obs) = transform_on(&mut g, h, &theta, factors, lr_inner, mode)?;
    let layers = updates
        .into_iter()
        .map(|(sel, v)| (sel, g.value(v).clone()))
        .collect();
    Ok((EditUpdate { step, layers }, obs))
}

/// W <- W + update (+ optional zero-mean Gaussian noise with std `noise_std`).
/// Non-edited layers are untouched.
pub fn apply_update(
    weights: &ModelWeights,
    update: &EditUpdate,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelWeights> {
    let mut out = weights.clone();
    for (sel, delta) in &update.layers {
        let cur = out
            .get(sel)
            .ok_or_else(|| Error::Contract(format!("update targets unknown layer `{sel}`")))?;
        if cur.shape() != delta.shape() {
            return Err(Error::dim("apply_update", cur.shape(), delta.shape()));
        }
        let mut next = cur.add(delta)?;
        if noise_std > 0.0 {
            let normal = Normal::new(0.0, noise_std).map_err(|e| {
                Error::Config {
                    field: "hyper.noise_std".into(),
                    msg: e.to_string(),
                }
            })?;
            for v in next.data_mut() {
                *v += normal.sample(rng);
            }
        }
        out.set(sel, next);
    }
    Ok(out)
}

pub fn save_hypernet(path: &Path, h: &HyperNetwork) -> Result<()> {
    use crate::checkpoint::{write_container, HYPERNET_MAGIC};
    let header = [h.rank as u32, h.frozen as u32];
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for ((fi, fo), group) in &h.groups {
        let prefix = format!("g{fi}x{fo}");
        for (n, t) in &group.tensors {
            tensors.push((format!("{prefix}.{n}"), t.clone()));
        }
        tensors.push((
            format!("{prefix}.norm_u_mean"),
            Tensor::from_vec(1, group.norm_u.mean.len(), group.norm_u.mean.clone())?,
        ));
        tensors.push((
            format!("{prefix}.norm_u_var"),
            Tensor::from_vec(1, group.norm_u.var.len(), group.norm_u.var.clone())?,
        ));
        tensors.push((
            format!("{prefix}.norm_d_mean"),
            Tensor::from_vec(1, group.norm_delta.mean.len(), group.norm_delta.mean.clone())?,
        ));
        tensors.push((
            format!("{prefix}.norm_d_var"),
            Tensor::from_vec(1, group.norm_delta.var.len(), group.norm_delta.var.clone())?,
        ));
        tensors.push((
            format!("{prefix}.norm_init"),
            Tensor::scalar(if group.norm_u.initialized { 1.0 } else { 0.0 }),
        ));
    }
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, HYPERNET_MAGIC, &header, &refs)
}

pub fn load_hypernet(path: &Path) -> Result<HyperNetwork> {
    use crate::checkpoint::{read_container, HYPERNET_MAGIC};
    let (header, tensors) = read_container(path, HYPERNET_MAGIC, 2)?;
    let rank = header[0] as usize;
    let frozen = header[1] != 0;
    let mut groups: BTreeMap<(usize, usize), ShapeGroup> = BTreeMap::new();
    for (name, t) in tensors {
        let (prefix, field) = name
            .split_once('.')
            .ok_or_else(|| Error::Contract(format!("bad hypernet tensor name `{name}`")))?;
        let dims = prefix
            .strip_prefix('g')
            .and_then(|s| s.split_once('x'))
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::Contract(format!("bad hypernet group name `{prefix}`")))?;
        let group = groups.entry(dims).or_insert_with(|| ShapeGroup {
            fan_in: dims.0,
            fan_out: dims.1,
            tensors: BTreeMap::new(),
            norm_u: RunningNorm::new(dims.0),
            norm_delta: RunningNorm::new(dims.1),
        });
        match field {
            "norm_u_mean" => group.norm_u.mean = t.data().to_vec(),
            "norm_u_var" => group.norm_u.var = t.data().to_vec(),
            "norm_d_mean" => group.norm_delta.mean = t.data().to_vec(),
            "norm_d_var" => group.norm_delta.var = t.data().to_vec(),
            "norm_init" => {
                let on = t.item() != 0.0;
                group.norm_u.initialized = on;
                group.norm_delta.initialized = on;
            }
            _ => {
                group.tensors.insert(field.to_string(), t);
            }
        }
    }
    for (shape, group) in &groups {
        for required in ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "scale"] {
            if !group.tensors.contains_key(required) {
                return Err(Error::Contract(format!(
                    "hypernet checkpoint group {shape:?} is missing `{required}`"
                )));
            }
        }
    }
    Ok(HyperNetwork {
        rank,
        frozen,
        groups,
    })
}

/// Draw standard-normal factors for testing.
pub fn random_factors<R: Rng>(
    config: &ModelConfig,
    tokens: usize,
    rng: &mut R,
) -> Result<RankOneFactors> {
    use crate::model::LayerFactors;
    let mut layers = Vec::new();
    for sel in &config.editable_layers {
        let (fi, fo) = config.editable_shape(sel)?;
        layers.push(LayerFactors {
            selector: sel.clone(),
            u: Tensor::randn(tokens, fi, 1.0, rng),
            delta: Tensor::randn(tokens, fo, 1.0, rng),
        });
    }
    Ok(RankOneFactors { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig::micro()
    }

    #[test]
    fn zero_init_transform_is_all_zero() {
        let h = init_hypernetwork(&cfg(), 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors = random_factors(&cfg(), 3, &mut rng).unwrap();
        let (update, _) = transform(&h, &factors, 1.0, 0).unwrap();
        for (sel, t) in &update.layers {
            assert!(t.data().iter().all(|v| *v == 0.0), "{sel} not zero");
        }
    }

    #[test]
    fn zero_factors_give_zero_update_even_when_trained() {
        let mut h = init_hypernetwork(&cfg(), 8, 1).unwrap();
        // make the network non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, p) in h.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let mut factors = random_factors(&cfg(), 2, &mut rng).unwrap();
        for lf in factors.layers.iter_mut() {
            lf.u = Tensor::zeros(lf.u.rows(), lf.u.cols());
            lf.delta = Tensor::zeros(lf.delta.rows(), lf.delta.cols());
        }
        let (update, _) = transform(&h, &factors, 1.0, 0).unwrap();
        // zero factors: residual is zero, MLP sees zero-normalized input with
        // biases only; the outer product of the residual-plus-corrections is
        // formed from pseudo-factors whose raw part vanished
        for (_, t) in &update.layers {
            for v in t.data() {
                assert!(v.is_finite());
            }
        }
        let raw_zero = {
            let z = init_hypernetwork(&cfg(), 8, 1).unwrap();
            let (u, _) = transform(&z, &factors, 1.0, 0).unwrap();
            u
        };
        for (_, t) in &raw_zero.layers {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn same_shape_layers_share_one_group() {
        let mut c = cfg();
        c.editable_layers = vec!["attn_q@0".into(), "attn_k@0".into()];
        let h = init_hypernetwork(&c, 8, 1).unwrap();
        assert_eq!(h.groups.len(), 1);
    }

    #[test]
    fn param_count_matches_formula() {
        let c = cfg();
        let h = init_hypernetwork(&c, 8, 1).unwrap();
        let expect: usize = h
            .groups
            .keys()
            .map(|&(fi, fo)| group_param_count(fi, fo, 8))
            .sum();
        assert_eq!(h.param_count(), expect);
    }

    #[test]
    fn single_token_update_has_rank_at_most_one() {
        let mut h = init_hypernetwork(&cfg(), 8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (_, p) in h.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let factors = random_factors(&cfg(), 1, &mut rng).unwrap();
        let (update, _) = transform(&h, &factors, 1.0, 0).unwrap();
        for (_, t) in &update.layers {
            // every 2x2 minor of a rank-<=1 matrix vanishes
            for r1 in 0..t.rows() {
                for r2 in (r1 + 1)..t.rows() {
                    for c1 in 0..t.cols() {
                        for c2 in (c1 + 1)..t.cols() {
                            let det = t.get(r1, c1) * t.get(r2, c2)
                                - t.get(r1, c2) * t.get(r2, c1);
                            assert!(det.abs() < 1e-10, "minor {det}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_layer_shape_is_contract_error() {
        let h = init_hypernetwork(&cfg(), 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut other = ModelConfig::micro();
        other.d_ff = 6; // different ffn shape than the groups were built for
        let factors = random_factors(&other, 2, &mut rng).unwrap();
        assert!(transform(&h, &factors, 1.0, 0).is_err());
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let c = cfg();
        let mut h = init_hypernetwork(&c, 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (_, p) in h.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let factors = random_factors(&c, 3, &mut rng).unwrap();

        // analytic: d(sum of all update entries)/d theta
        let mut g = Graph::new();
        let theta = mount_theta(&mut g, &h, true);
        let (updates, _) =
            transform_on(&mut g, &h, &theta, &factors, 1.0, NormMode::Batch).unwrap();
        let mut sums: Vec<Var> = updates.iter().map(|(_, v)| g.sum(*v)).collect();
        let mut total = sums.remove(0);
        for s in sums {
            total = g.add(total, s).unwrap();
        }
        g.backward(total).unwrap();

        let names: Vec<(String, Var)> = theta.iter_named().collect();
        for (name, var) in names.iter().take(6) {
            let analytic = g.grad_or_zero(*var);
            // numeric: perturb that tensor's entries
            let base = analytic.clone();
            let mut probe = h.clone();
            let flat_name = name.clone();
            let current: Vec<f64> = probe
                .params_mut()
                .into_iter()
                .find(|(n, _)| *n == flat_name)
                .map(|(_, p)| p.to_vec())
                .unwrap();
            let eval = |vals: &[f64]| -> f64 {
                let mut probe2 = probe.clone();
                for (n, p) in probe2.params_mut() {
                    if n == flat_name {
                        p.copy_from_slice(vals);
                    }
                }
                let mut gg = Graph::new();
                let th = mount_theta(&mut gg, &probe2, false);
                let (ups, _) =
                    transform_on(&mut gg, &probe2, &th, &factors, 1.0, NormMode::Batch).unwrap();
                let mut total = 0.0;
                for (_, v) in &ups {
                    let s = gg.sum(*v);
                    total += gg.value(s).item();
                }
                total
            };
            let fd = central_diff(eval, &current, 1e-5);
            for (a, n) in base.data().iter().zip(&fd) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-4, "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn apply_update_contracts() {
        let c = cfg();
        let w = ModelWeights::init(&c, 3).unwrap();
        let h = init_hypernetwork(&c, 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors = random_factors(&c, 2, &mut rng).unwrap();
        let (zero_update, _) = transform(&h, &factors, 1.0, 0).unwrap();

        // zero update, zero noise: bitwise unchanged
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let w2 = apply_update(&w, &zero_update, 0.0, &mut rng2).unwrap();
        for (name, t) in w.iter() {
            for (a, b) in t.data().iter().zip(w2.get(name).unwrap().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // apply then subtract: back within 1e-12
        let mut update = zero_update.clone();
        for (_, t) in update.layers.iter_mut() {
            *t = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
        }
        let fwd = apply_update(&w, &update, 0.0, &mut rng2).unwrap();
        let back = apply_update(&fwd, &update.negated(), 0.0, &mut rng2).unwrap();
        for (name, t) in w.iter() {
            for (a, b) in t.data().iter().zip(back.get(name).unwrap().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // seeded noise is reproducible
        let mut ra = ChaCha8Rng::seed_from_u64(77);
        let mut rb = ChaCha8Rng::seed_from_u64(77);
        let na = apply_update(&w, &update, 0.01, &mut ra).unwrap();
        let nb = apply_update(&w, &update, 0.01, &mut rb).unwrap();
        for (name, t) in na.iter() {
            for (a, b) in t.data().iter().zip(nb.get(name).unwrap().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn factors_are_stop_gradient_leaves() {
        let c = cfg();
        let h = init_hypernetwork(&c, 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let factors = random_factors(&c, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let theta = mount_theta(&mut g, &h, true);
        let (updates, _) =
            transform_on(&mut g, &h, &theta, &factors, 1.0, NormMode::Batch).unwrap();
        let s = g.sum(updates[0].1);
        g.backward(s).unwrap();
        // theta gradients exist (scale at least), factor constants have none
        let any_theta_grad = theta
            .iter_named()
            .any(|(_, v)| g.grad(v).is_some());
        assert!(any_theta_grad);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = cfg();
        let mut h = init_hypernetwork(&c, 4, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for (_, p) in h.params_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        h.absorb_stats(&[StatsObservation {
            shape: *h.groups.keys().next().unwrap(),
            u_mean: vec![0.5; h.groups.values().next().unwrap().fan_in],
            u_var: vec![2.0; h.groups.values().next().unwrap().fan_in],
            d_mean: vec![-0.5; h.groups.values().next().unwrap().fan_out],
            d_var: vec![0.1; h.groups.values().next().unwrap().fan_out],
        }]);
        h.freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        save_hypernet(&path, &h).unwrap();
        let loaded = load_hypernet(&path).unwrap();
        assert_eq!(loaded.rank, h.rank);
        assert_eq!(loaded.frozen, h.frozen);
        for (shape, group) in &h.groups {
            let lg = &loaded.groups[shape];
            assert_eq!(group.norm_u, lg.norm_u);
            for (n, t) in &group.tensors {
                for (a, b) in t.data().iter().zip(lg.tensors[n].data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{shape:?}.{n}");
                }
            }
        }
    }
}
