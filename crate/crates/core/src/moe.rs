//! Feed-forward experts, the softmax router and top-k routing with capacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Two-layer FFN `w2 * act(w1 * x + b1) + b2` with `w1: h x d`, `w2: d x h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFfn {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Intermediate values of one FFN forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct FfnTrace {
    pub input: DenseMatrix,
    pub pre: DenseMatrix,
    pub output: DenseMatrix,
}

impl DenseFfn {
    pub fn new(w1: DenseMatrix, b1: Vec<f64>, w2: DenseMatrix, b2: Vec<f64>) -> Result<Self> {
        let (h, d) = w1.shape();
        if w2.shape() != (d, h) || b1.len() != h || b2.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "ffn w1 {h}x{d}, b1 {}, w2 {}x{}, b2 {}",
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        if b1.iter().chain(&b2).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation: Activation::Relu,
        })
    }

    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(h, d),
            b1: vec![0.0; h],
            w2: DenseMatrix::zeros(d, h),
            b2: vec![0.0; d],
            activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_traced(x)?.output)
    }

    pub fn forward_traced(&self, x: &DenseMatrix) -> Result<FfnTrace> {
        if x.rows() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "ffn expects {} input rows, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        let mut pre = self.w1.matmul(x)?;
        pre.add_column_vector(&self.b1);
        let act = self.activation;
        let hidden = pre.map(|v| act.apply(v));
        let mut output = self.w2.matmul(&hidden)?;
        output.add_column_vector(&self.b2);
        Ok(FfnTrace {
            input: x.clone(),
            pre,
            output,
        })
    }

    /// Parameters in a fixed order: w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn same_shape(&self, other: &DenseFfn) -> bool {
        self.w1.shape() == other.w1.shape() && self.w2.shape() == other.w2.shape()
    }
}

pub const TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<DenseFfn>,
    /// `n_experts x d`, no bias.
    pub router: DenseMatrix,
    pub k: usize,
    pub capacity_factor: f64,
}

impl MoeLayer {
    pub fn new(
        experts: Vec<DenseFfn>,
        router: DenseMatrix,
        k: usize,
        capacity_factor: f64,
    ) -> Result<Self> {
        let n = experts.len();
        if n == 0 {
            return Err(Error::InvalidArgument("MoE layer needs an expert".into()));
        }
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!("k = {k} with {n} experts")));
        }
        if !(capacity_factor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "capacity factor {capacity_factor}"
            )));
        }
        if experts.iter().any(|e| !e.same_shape(&experts[0])) {
            return Err(Error::ShapeMismatch("experts differ in shape".into()));
        }
        if router.shape() != (n, experts[0].input_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "router {}x{} for {n} experts of input dim {}",
                router.rows(),
                router.cols(),
                experts[0].input_dim()
            )));
        }
        Ok(Self {
            experts,
            router,
            k,
            capacity_factor,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.router.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.experts[0].hidden_dim()
    }

    pub fn same_shape(&self, other: &MoeLayer) -> bool {
        self.n_experts() == other.n_experts()
            && self.router.shape() == other.router.shape()
            && self
                .experts
                .iter()
                .zip(&other.experts)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Every parameter slice: router first, then each expert's w1, b1, w2, b2.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.router.as_slice()];
        for e in &self.experts {
            out.extend(e.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.router.as_mut_slice()];
        for e in &mut self.experts {
            out.extend(e.tensors_mut());
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["router".to_string()];
        for i in 0..self.n_experts() {
            out.extend(TENSOR_NAMES.iter().map(|t| format!("experts.{i}.{t}")));
        }
        out
    }

    /// Slots each expert may accept for a batch of `tokens`.
    pub fn capacity(&self, tokens: usize) -> usize {
        expert_capacity(self.capacity_factor, tokens, self.k, self.n_experts())
    }
}

/// `ceil(factor * tokens * k / n_experts)`; unbounded for a non-finite factor.
pub fn expert_capacity(factor: f64, tokens: usize, k: usize, n_experts: usize) -> usize {
    if !factor.is_finite() {
        return usize::MAX;
    }
    (factor * (tokens * k) as f64 / n_experts as f64).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// `T x n_experts` softmax probabilities.
    pub probs: DenseMatrix,
    /// Selected experts per token, highest probability first.
    pub topk_indices: Vec<Vec<usize>>,
    /// Selected probabilities renormalized over the top-k.
    pub gates: Vec<Vec<f64>>,
    pub dropped: Vec<Vec<bool>>,
    /// Fraction of all `T * k` slots that selected each expert (dropped
    /// slots included).
    pub per_expert_fraction: Vec<f64>,
    pub per_expert_mean_prob: Vec<f64>,
    pub capacity: usize,
}

impl RoutingRecord {
    pub fn n_tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn k(&self) -> usize {
        self.topk_indices.first().map_or(0, Vec::len)
    }

    pub fn selected_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for row in &self.topk_indices {
            for &e in row {
                counts[e] += 1;
            }
        }
        counts
    }

    pub fn dropped_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts()];
        for (row, drops) in self.topk_indices.iter().zip(&self.dropped) {
            for (&e, &d) in row.iter().zip(drops) {
                if d {
                    counts[e] += 1;
                }
            }
        }
        counts
    }

    /// Dropped slots over all slots.
    pub fn drop_rate(&self) -> f64 {
        let total = self.n_tokens() * self.k();
        if total == 0 {
            return 0.0;
        }
        self.dropped_counts().iter().sum::<usize>() as f64 / total as f64
    }

    /// CSV with columns `expert,fraction,mean_prob,drop_rate`.
    pub fn summary_csv(&self) -> String {
        let selected = self.selected_counts();
        let dropped = self.dropped_counts();
        let mut out = String::from("expert,fraction,mean_prob,drop_rate\n");
        for e in 0..self.n_experts() {
            let rate = if selected[e] == 0 {
                0.0
            } else {
                dropped[e] as f64 / selected[e] as f64
            };
            out.push_str(&format!(
                "{e},{},{},{rate}\n",
                self.per_expert_fraction[e], self.per_expert_mean_prob[e]
            ));
        }
        out
    }
}

/// Row `t` is `softmax(router * x_t)`.
pub fn router_probs(router: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut logits = router.matmul(x)?.transpose();
    for t in 0..logits.rows() {
        softmax_in_place(logits.row_mut(t));
    }
    Ok(logits)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Top-k experts (ties to the lowest index) and their renormalized gates.
pub fn top_k_gates(probs_row: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..probs_row.len()).collect();
    order.sort_by(|&a, &b| probs_row[b].total_cmp(&probs_row[a]));
    order.truncate(k);
    let mass: f64 = order.iter().map(|&i| probs_row[i]).sum();
    let gates = order
        .iter()
        .map(|&i| {
            if mass > 0.0 {
                probs_row[i] / mass
            } else {
                1.0 / k as f64
            }
        })
        .collect();
    (order, gates)
}

/// Routing decisions for a batch: top-k selection followed by token-order
/// capacity filling.
pub fn route(layer: &MoeLayer, x: &DenseMatrix) -> Result<RoutingRecord> {
    if x.rows() != layer.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "moe expects {} input rows, got {}",
            layer.input_dim(),
            x.rows()
        )));
    }
    let probs = router_probs(&layer.router, x)?;
    let (t_count, n) = probs.shape();
    let capacity = layer.capacity(t_count);
    let mut load = vec![0usize; n];
    let mut topk_indices = Vec::with_capacity(t_count);
    let mut gates = Vec::with_capacity(t_count);
    let mut dropped = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let (idx, g) = top_k_gates(probs.row(t), layer.k);
        let drops = idx
            .iter()
            .map(|&e| {
                if load[e] < capacity {
                    load[e] += 1;
                    false
                } else {
                    true
                }
            })
            .collect();
        topk_indices.push(idx);
        gates.push(g);
        dropped.push(drops);
    }
    let slots = (t_count * layer.k).max(1) as f64;
    let mut per_expert_fraction = vec![0.0; n];
    for row in &topk_indices {
        for &e in row {
            per_expert_fraction[e] += 1.0;
        }
    }
    per_expert_fraction.iter_mut().for_each(|f| *f /= slots);
    let per_expert_mean_prob = (0..n)
        .map(|e| (0..t_count).map(|t| probs[(t, e)]).sum::<f64>() / t_count.max(1) as f64)
        .collect();
    Ok(RoutingRecord {
        probs,
        topk_indices,
        gates,
        dropped,
        per_expert_fraction,
        per_expert_mean_prob,
        capacity,
    })
}

/// Tokens handled by one expert in a batch.
#[derive(Clone, Debug)]
pub struct ExpertBatch {
    /// `(token, slot)` pairs in token order.
    pub slots: Vec<(usize, usize)>,
    pub trace: FfnTrace,
}

#[derive(Clone, Debug)]
pub struct MoeTrace {
    pub routing: RoutingRecord,
    pub batches: Vec<ExpertBatch>,
    pub output: DenseMatrix,
}

impl MoeTrace {
    /// Output of the expert in `(token, slot)`, if that slot was accepted.
    pub fn slot_output(&self, token: usize, slot: usize) -> Option<Vec<f64>> {
        let e = self.routing.topk_indices[token][slot];
        let b = &self.batches[e];
        b.slots
            .iter()
            .position(|&s| s == (token, slot))
            .map(|p| b.trace.output.column(p))
    }
}

/// Sparse MoE forward with the full routing record.
pub fn moe_forward(layer: &MoeLayer, x: &DenseMatrix) -> Result<(DenseMatrix, RoutingRecord)> {
    let trace = moe_forward_traced(layer, x)?;
    Ok((trace.output, trace.routing))
}

pub fn moe_forward_traced(layer: &MoeLayer, x: &DenseMatrix) -> Result<MoeTrace> {
    let routing = route(layer, x)?;
    let (d, t_count) = x.shape();
    let k = layer.k;
    let mut per_expert: Vec<Vec<(usize, usize)>> = vec![Vec::new(); layer.n_experts()];
    for t in 0..t_count {
        for s in 0..k {
            if !routing.dropped[t][s] {
                per_expert[routing.topk_indices[t][s]].push((t, s));
            }
        }
    }
    // slot_out[t * k + s] = (expert, column in that expert's batch)
    let mut slot_out: Vec<Option<(usize, usize)>> = vec![None; t_count * k];
    let mut batches = Vec::with_capacity(layer.n_experts());
    for (e, slots) in per_expert.into_iter().enumerate() {
        let tokens: Vec<usize> = slots.iter().map(|&(t, _)| t).collect();
        let input = x.select_columns(&tokens);
        let trace = layer.experts[e].forward_traced(&input)?;
        for (col, &(t, s)) in slots.iter().enumerate() {
            slot_out[t * k + s] = Some((e, col));
        }
        batches.push(ExpertBatch { slots, trace });
    }
    let mut output = DenseMatrix::zeros(d, t_count);
    for t in 0..t_count {
        for s in 0..k {
            if let Some((e, col)) = slot_out[t * k + s] {
                let g = routing.gates[t][s];
                let out = &batches[e].trace.output;
                for r in 0..d {
                    output[(r, t)] += g * out[(r, col)];
                }
            }
        }
    }
    Ok(MoeTrace {
        routing,
        batches,
        output,
    })
}

/// Soft mixture over every expert with the full softmax weights; no top-k and
/// no capacity limit.
pub fn dense_ensemble_forward(layer: &MoeLayer, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != layer.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "moe expects {} input rows, got {}",
            layer.input_dim(),
            x.rows()
        )));
    }
    let probs = router_probs(&layer.router, x)?;
    let (d, t_count) = x.shape();
    let mut output = DenseMatrix::zeros(d, t_count);
    for (e, expert) in layer.experts.iter().enumerate() {
        let out = expert.forward(x)?;
        for r in 0..d {
            for t in 0..t_count {
                output[(r, t)] += probs[(t, e)] * out[(r, t)];
            }
        }
    }
    Ok(output)
}

/// `sum_i a_i * mean_t g_i(x_t)`.
pub fn load_balance_loss(routing: &RoutingRecord) -> f64 {
    routing
        .per_expert_fraction
        .iter()
        .zip(&routing.per_expert_mean_prob)
        .map(|(a, p)| a * p)
        .sum()
}
