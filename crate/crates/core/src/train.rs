//! Toy residual model, synthetic clustered data, the combined objective and
//! its reverse-mode gradient.
//!
//! Top-k selection, capacity drops and ReLU patterns are treated as locally
//! constant; gradients reach the router only through the softmax
//! probabilities that feed the renormalized gates and the load-balancing
//! term.


use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{eesd_grad, eesd_loss, EmaTeacher, TeacherSet};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, DenseMatrix};
use crate::moe::{
    load_balance_loss, moe_forward_traced, softmax_in_place, DenseFfn, FfnTrace, MoeLayer,
    MoeTrace, RoutingRecord, TENSOR_NAMES,
};
use crate::rng::{self, normal};

pub const DEFAULT_LAMBDA_LB: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Dense(DenseFfn),
    Moe(MoeLayer),
}

impl Block {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Block::Dense(f) => f.tensors().to_vec(),
            Block::Moe(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Block::Dense(f) => f.tensors_mut().into_iter().collect(),
            Block::Moe(m) => m.tensors_mut(),
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        match self {
            Block::Dense(_) => TENSOR_NAMES.iter().map(|t| format!("ffn.{t}")).collect(),
            Block::Moe(m) => m
                .tensor_names()
                .into_iter()
                .map(|t| format!("moe.{t}"))
                .collect(),
        }
    }

    fn zeros_like(&self) -> Block {
        let mut b = self.clone();
        for t in b.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        b
    }
}

/// Residual stack `h <- h + block(h)` followed by a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_dim: usize,
    pub blocks: Vec<Block>,
    /// `n_classes x d`.
    pub head: DenseMatrix,
}

/// Odd block indices: every other FFN becomes an MoE layer.
pub fn default_moe_sites(n_blocks: usize) -> Vec<usize> {
    (1..n_blocks).step_by(2).collect()
}

impl ToyModel {
    /// Dense model with He-scaled first layers and small output layers.
    pub fn new_dense(d: usize, h: usize, n_blocks: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::streams::MODEL);
        let blocks = (0..n_blocks)
            .map(|_| {
                let s1 = (2.0 / d as f64).sqrt();
                let s2 = 0.5 / (h as f64).sqrt();
                let w1 = DenseMatrix::from_fn(h, d, |_, _| normal(&mut rng) * s1);
                let w2 = DenseMatrix::from_fn(d, h, |_, _| normal(&mut rng) * s2);
                Block::Dense(DenseFfn::new(w1, vec![0.0; h], w2, vec![0.0; d]).expect("shapes"))
            })
            .collect();
        let sh = 1.0 / (d as f64).sqrt();
        let head = DenseMatrix::from_fn(n_classes, d, |_, _| normal(&mut rng) * sh);
        Self {
            input_dim: d,
            blocks,
            head,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.rows()
    }

    pub fn moe_sites(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b, Block::Moe(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn moe_layer(&self, site: usize) -> Option<&MoeLayer> {
        match self.blocks.get(site) {
            Some(Block::Moe(m)) => Some(m),
            _ => None,
        }
    }

    pub fn dense_block(&self, site: usize) -> Option<&DenseFfn> {
        match self.blocks.get(site) {
            Some(Block::Dense(f)) => Some(f),
            _ => None,
        }
    }

    /// Sets the capacity factor of every MoE layer.
    pub fn set_capacity_factor(&mut self, factor: f64) {
        for b in &mut self.blocks {
            if let Block::Moe(m) = b {
                m.capacity_factor = factor;
            }
        }
    }

    /// Fresh EMA teachers for every MoE site.
    pub fn teachers(&self, beta: f64) -> Result<TeacherSet> {
        let sites = self.moe_sites();
        let teachers = sites
            .iter()
            .map(|&s| EmaTeacher::new(self.moe_layer(s).expect("moe site"), beta))
            .collect::<Result<_>>()?;
        Ok(TeacherSet { sites, teachers })
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.blocks.iter().flat_map(Block::tensors).collect();
        out.push(self.head.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .blocks
            .iter_mut()
            .flat_map(Block::tensors_mut)
            .collect();
        out.push(self.head.as_mut_slice());
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.tensor_names()
                    .into_iter()
                    .map(move |t| format!("blocks.{i}.{t}"))
            })
            .collect();
        out.push("head".into());
        out
    }

    pub fn zeros_like(&self) -> ToyModel {
        ToyModel {
            input_dim: self.input_dim,
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            head: DenseMatrix::zeros(self.head.rows(), self.head.cols()),
        }
    }

    /// Inputs to every block plus the final hidden state (`blocks + 1`
    /// matrices).
    pub fn hidden_states(&self, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        Ok(self.trace(x)?.hidden)
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let trace = self.trace(x)?;
        self.head.matmul(trace.hidden.last().expect("final state"))
    }

    /// Routing records per MoE site for a batch.
    pub fn routing(&self, x: &DenseMatrix) -> Result<Vec<(usize, RoutingRecord)>> {
        let trace = self.trace(x)?;
        Ok(trace
            .blocks
            .into_iter()
            .enumerate()
            .filter_map(|(i, b)| match b {
                BlockTrace::Moe(m) => Some((i, m.routing)),
                BlockTrace::Dense(_) => None,
            })
            .collect())
    }

    /// Fraction of tokens whose argmax logit equals the label.
    pub fn accuracy(&self, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let correct = (0..logits.cols())
            .filter(|&t| {
                let col = logits.column(t);
                let best = (0..col.len())
                    .fold(0, |b, c| if col[c] > col[b] { c } else { b });
                best == labels[t]
            })
            .count();
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    fn trace(&self, x: &DenseMatrix) -> Result<ModelTrace> {
        if x.rows() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input rows, got {}",
                self.input_dim,
                x.rows()
            )));
        }
        let mut hidden = vec![x.clone()];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = hidden.last().expect("input");
            let (out, bt) = match b {
                Block::Dense(f) => {
                    let t = f.forward_traced(h)?;
                    (t.output.clone(), BlockTrace::Dense(t))
                }
                Block::Moe(m) => {
                    let t = moe_forward_traced(m, h)?;
                    (t.output.clone(), BlockTrace::Moe(t))
                }
            };
            hidden.push(h.add(&out)?);
            blocks.push(bt);
        }
        Ok(ModelTrace { hidden, blocks })
    }
}

enum BlockTrace {
    Dense(FfnTrace),
    Moe(MoeTrace),
}

struct ModelTrace {
    hidden: Vec<DenseMatrix>,
    blocks: Vec<BlockTrace>,
}

impl ModelTrace {
    /// Hash-free fingerprint of every discrete decision in the forward pass.
    fn decisions(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut bits = |pre: &DenseMatrix| {
            let mut word = 0u64;
            for (i, &v) in pre.as_slice().iter().enumerate() {
                if v > 0.0 {
                    word |= 1 << (i % 64);
                }
                if i % 64 == 63 {
                    out.push(word);
                    word = 0;
                }
            }
            out.push(word);
        };
        let mut routing_words = Vec::new();
        for b in &self.blocks {
            match b {
                BlockTrace::Dense(t) => bits(&t.pre),
                BlockTrace::Moe(m) => {
                    for batch in &m.batches {
                        bits(&batch.trace.pre);
                    }
                    for (idx, drops) in m.routing.topk_indices.iter().zip(&m.routing.dropped) {
                        for (&e, &d) in idx.iter().zip(drops) {
                            routing_words.push(((e as u64) << 1) | d as u64);
                        }
                    }
                }
            }
        }
        out.extend(routing_words);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    /// `d x N`, one sample per column.
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub clusters: Vec<usize>,
    pub directions: DenseMatrix,
    pub n_classes: usize,
    pub n_clusters: usize,
    pub separation: f64,
    pub seed: u64,
}

pub const DIRECTION_ATTEMPTS: usize = 10_000;

/// Clustered classification data: unit cluster directions with pairwise
/// cosine below `1 / separation`, samples `direction + N(0, I) / separation`,
/// class `cluster mod n_classes`. Samples cycle through the clusters.
pub fn make_synthetic_dataset(
    d: usize,
    n_classes: usize,
    n_clusters: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if n_classes < 2 || n_clusters < n_classes {
        return Err(Error::InvalidArgument(format!(
            "need n_clusters >= n_classes >= 2, got {n_clusters} and {n_classes}"
        )));
    }
    if !(separation > 0.0) || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "separation {separation}, dimension {d}"
        )));
    }
    let mut rng = rng::stream(seed, rng::streams::DATA);
    let limit = 1.0 / separation;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        let mut placed = false;
        for _ in 0..DIRECTION_ATTEMPTS {
            let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let nv = norm(&v);
            if nv == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= nv);
            if directions.iter().all(|u| dot(u, &v) < limit) {
                directions.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SeparationInfeasible {
                clusters: n_clusters,
                separation,
                attempts: DIRECTION_ATTEMPTS,
            });
        }
    }
    let noise = 1.0 / separation;
    let mut inputs = DenseMatrix::zeros(d, n);
    let mut clusters = Vec::with_capacity(n);
    for j in 0..n {
        let c = j % n_clusters;
        for r in 0..d {
            inputs[(r, j)] = directions[c][r] + noise * normal(&mut rng);
        }
        clusters.push(c);
    }
    let labels = clusters.iter().map(|c| c % n_classes).collect();
    Ok(SyntheticDataset {
        inputs,
        labels,
        clusters,
        directions: DenseMatrix::from_rows(&directions)?,
        n_classes,
        n_clusters,
        separation,
        seed,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
        (
            self.inputs.select_columns(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Uniformly sampled batch of distinct indices.
    pub fn sample_batch(&self, size: usize, rng: &mut impl Rng) -> (DenseMatrix, Vec<usize>) {
        let size = size.min(self.len());
        let mut idx = sample(rng, self.len(), size).into_vec();
        idx.sort_unstable();
        self.batch(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lb: f64,
    pub eesd: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            lb: DEFAULT_LAMBDA_LB,
            eesd: crate::distill::DEFAULT_LAMBDA_EESD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub lb: f64,
    pub eesd: f64,
    pub lambda_lb: f64,
    pub lambda_eesd: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(task: f64, lb: f64, eesd: f64, lambdas: Lambdas) -> Self {
        Self {
            task,
            lb,
            eesd,
            lambda_lb: lambdas.lb,
            lambda_eesd: lambdas.eesd,
            total: task + lambdas.lb * lb + lambdas.eesd * eesd,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.task, self.lb, self.eesd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Where EESD targets come from.
#[derive(Clone, Copy)]
pub enum Targets<'a> {
    None,
    /// Teachers are run on the student's site inputs; outputs are detached.
    Teacher(&'a TeacherSet),
    /// Precomputed detached targets, one per MoE site in site order.
    Fixed(&'a [DenseMatrix]),
}

/// Loss, gradient and side information from one evaluation.
pub struct Evaluation {
    pub report: LossReport,
    pub grads: ToyModel,
    /// Detached EESD targets that were used, per MoE site.
    pub targets: Vec<DenseMatrix>,
    pub routing: Vec<(usize, RoutingRecord)>,
    decisions: Vec<u64>,
}

/// Combined objective with gradients. Without a teacher the EESD term is 0.
pub fn total_loss(
    model: &ToyModel,
    teacher: Option<&TeacherSet>,
    x: &DenseMatrix,
    labels: &[usize],
    lambdas: Lambdas,
) -> Result<(LossReport, ToyModel)> {
    let targets = teacher.map_or(Targets::None, Targets::Teacher);
    let e = evaluate(model, x, labels, lambdas, targets, None)?;
    Ok((e.report, e.grads))
}

/// Full evaluation with an optional EESD token mask (`true` = valid).
pub fn evaluate(
    model: &ToyModel,
    x: &DenseMatrix,
    labels: &[usize],
    lambdas: Lambdas,
    targets: Targets<'_>,
    mask: Option<&[bool]>,
) -> Result<Evaluation> {
    let t_count = x.cols();
    if labels.len() != t_count {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {t_count} tokens",
            labels.len()
        )));
    }
    let n_classes = model.n_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} >= {n_classes}")));
    }
    let all_valid = vec![true; t_count];
    let mask = mask.unwrap_or(&all_valid);

    let trace = model.trace(x)?;
    let sites = model.moe_sites();

    // detached targets per site
    let site_targets: Vec<DenseMatrix> = match targets {
        Targets::None => Vec::new(),
        Targets::Teacher(set) => sites
            .iter()
            .map(|&s| {
                let teacher = set.get(s).ok_or_else(|| {
                    Error::ShapeMismatch(format!("no teacher for MoE site {s}"))
                })?;
                teacher.predict(&trace.hidden[s])
            })
            .collect::<Result<_>>()?,
        Targets::Fixed(t) => {
            if t.len() != sites.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} targets for {} MoE sites",
                    t.len(),
                    sites.len()
                )));
            }
            t.to_vec()
        }
    };
    let use_eesd = !site_targets.is_empty();

    // task loss
    let final_h = trace.hidden.last().expect("final state");
    let mut dlogits = model.head.matmul(final_h)?.transpose(); // T x C
    let mut task = 0.0;
    for (t, &label) in labels.iter().enumerate() {
        let row = dlogits.row_mut(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        task += lse - row[label];
        softmax_in_place(row);
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= t_count as f64);
    }
    task /= t_count as f64;
    let dlogits = dlogits.transpose(); // C x T

    let mut lb = 0.0;
    let mut eesd = 0.0;
    let mut site_pos = 0;
    let mut eesd_grads: Vec<Option<DenseMatrix>> = vec![None; model.blocks.len()];
    for (i, bt) in trace.blocks.iter().enumerate() {
        if let BlockTrace::Moe(m) = bt {
            lb += load_balance_loss(&m.routing);
            if use_eesd {
                let target = &site_targets[site_pos];
                eesd += eesd_loss(&m.output, target, mask)?;
                let g = eesd_grad(&m.output, target, mask)?;
                eesd_grads[i] = Some(g.scale(lambdas.eesd / sites.len() as f64));
            }
            site_pos += 1;
        }
    }
    if use_eesd {
        eesd /= sites.len() as f64;
    }
    let report = LossReport::new(task, lb, eesd, lambdas);

    // backward
    let mut grads = model.zeros_like();
    grads.head = dlogits.matmul_t(final_h)?;
    let mut dh = model.head.t_matmul(&dlogits)?;
    for (i, (block, bt)) in model.blocks.iter().zip(&trace.blocks).enumerate().rev() {
        let branch_dx = match (block, bt, &mut grads.blocks[i]) {
            (Block::Dense(f), BlockTrace::Dense(t), Block::Dense(g)) => ffn_backward(f, t, &dh, g)?,
            (Block::Moe(m), BlockTrace::Moe(t), Block::Moe(g)) => {
                let dy = match &eesd_grads[i] {
                    Some(e) => dh.add(e)?,
                    None => dh.clone(),
                };
                moe_backward(m, t, &trace.hidden[i], &dy, lambdas.lb, g)?
            }
            _ => unreachable!("trace mirrors model structure"),
        };
        dh.axpy(1.0, &branch_dx)?;
    }

    let decisions = trace.decisions();
    let routing = trace
        .blocks
        .into_iter()
        .enumerate()
        .filter_map(|(i, b)| match b {
            BlockTrace::Moe(m) => Some((i, m.routing)),
            BlockTrace::Dense(_) => None,
        })
        .collect();
    Ok(Evaluation {
        report,
        grads,
        targets: site_targets,
        routing,
        decisions,
    })
}

/// Accumulates parameter gradients into `g`; returns the input gradient.
fn ffn_backward(
    ffn: &DenseFfn,
    trace: &FfnTrace,
    dy: &DenseMatrix,
    g: &mut DenseFfn,
) -> Result<DenseMatrix> {
    let act = ffn.activation;
    let hidden = trace.pre.map(|v| act.apply(v));
    g.w2.axpy(1.0, &dy.matmul_t(&hidden)?)?;
    for (b, s) in g.b2.iter_mut().zip(dy.row_sums()) {
        *b += s;
    }
    let da = ffn.w2.t_matmul(dy)?;
    let dz = da.zip_with(&trace.pre, |a, p| a * act.derivative(p))?;
    g.w1.axpy(1.0, &dz.matmul_t(&trace.input)?)?;
    for (b, s) in g.b1.iter_mut().zip(dz.row_sums()) {
        *b += s;
    }
    ffn.w1.t_matmul(&dz)
}

fn moe_backward(
    layer: &MoeLayer,
    trace: &MoeTrace,
    x: &DenseMatrix,
    dy: &DenseMatrix,
    lambda_lb: f64,
    g: &mut MoeLayer,
) -> Result<DenseMatrix> {
    let routing = &trace.routing;
    let (d, t_count) = x.shape();
    let k = layer.k;
    let n = layer.n_experts();
    let mut dx = DenseMatrix::zeros(d, t_count);
    let mut dgate = vec![0.0; t_count * k];

    for (e, batch) in trace.batches.iter().enumerate() {
        if batch.slots.is_empty() {
            continue;
        }
        let out = &batch.trace.output;
        let mut dy_sub = DenseMatrix::zeros(d, batch.slots.len());
        for (col, &(t, s)) in batch.slots.iter().enumerate() {
            let gate = routing.gates[t][s];
            let mut acc = 0.0;
            for r in 0..d {
                dy_sub[(r, col)] = gate * dy[(r, t)];
                acc += dy[(r, t)] * out[(r, col)];
            }
            dgate[t * k + s] = acc;
        }
        let dx_sub = ffn_backward(&layer.experts[e], &batch.trace, &dy_sub, &mut g.experts[e])?;
        for (col, &(t, _)) in batch.slots.iter().enumerate() {
            for r in 0..d {
                dx[(r, t)] += dx_sub[(r, col)];
            }
        }
    }

    // gates -> probabilities -> logits
    let probs = &routing.probs;
    let mut dlogits = DenseMatrix::zeros(t_count, n);
    let lb_scale = lambda_lb / t_count as f64;
    for t in 0..t_count {
        let p = probs.row(t);
        let mut dp: Vec<f64> = routing
            .per_expert_fraction
            .iter()
            .map(|a| lb_scale * a)
            .collect();
        let sel = &routing.topk_indices[t];
        let mass: f64 = sel.iter().map(|&i| p[i]).sum();
        if mass > 0.0 {
            let gate_dot: f64 = (0..k)
                .map(|s| dgate[t * k + s] * routing.gates[t][s])
                .sum();
            for (s, &i) in sel.iter().enumerate() {
                dp[i] += (dgate[t * k + s] - gate_dot) / mass;
            }
        }
        let pd = dot(p, &dp);
        for (i, out) in dlogits.row_mut(t).iter_mut().enumerate() {
            *out = p[i] * (dp[i] - pd);
        }
    }
    g.router.axpy(1.0, &dlogits.t_matmul(&x.transpose())?)?;
    dx.axpy(1.0, &layer.router.t_matmul(&dlogits.transpose())?)?;
    Ok(dx)
}

/// One plain gradient-descent step followed by EMA teacher updates.
pub fn train_step(
    model: &mut ToyModel,
    teacher: Option<&mut TeacherSet>,
    x: &DenseMatrix,
    labels: &[usize],
    lr: f64,
    lambdas: Lambdas,
    step: usize,
) -> Result<(LossReport, Vec<(usize, RoutingRecord)>)> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let targets = match &teacher {
        Some(t) => Targets::Teacher(t),
        None => Targets::None,
    };
    let eval = evaluate(model, x, labels, lambdas, targets, None)?;
    if !eval.report.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            report: serde_json::to_string(&eval.report).unwrap_or_default(),
        });
    }
    if lr > 0.0 {
        for (p, g) in model.tensors_mut().into_iter().zip(eval.grads.tensors()) {
            for (a, &b) in p.iter_mut().zip(g) {
                *a -= lr * b;
            }
        }
    }
    if let Some(set) = teacher {
        for (site, t) in set.sites.iter().zip(set.teachers.iter_mut()) {
            let student = model
                .moe_layer(*site)
                .ok_or_else(|| Error::ShapeMismatch(format!("site {site} is not MoE")))?;
            t.update(student)?;
        }
    }
    Ok((eval.report, eval.routing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: Option<String>,
    pub checked: usize,
    pub skipped_flips: usize,
    /// Largest analytic gradient entry over teacher parameters. Targets are
    /// detached, so backpropagation never reaches the teacher.
    pub teacher_max_abs_analytic: f64,
    /// Largest difference quotient when the teacher is re-run under the
    /// perturbation. Non-zero in general: stop-gradient changes gradients,
    /// not forward values.
    pub teacher_value_sensitivity: f64,
    pub teacher_checked: usize,
    pub epsilon: f64,
}

pub const GRADCHECK_SAMPLES_PER_TENSOR: usize = 50;
pub const GRADCHECK_TEACHER_SAMPLES_PER_TENSOR: usize = 10;

/// Central-difference check of the analytic gradient on up to 50 sampled
/// entries per tensor, skipping perturbations that change any top-k,
/// capacity or ReLU decision.
pub fn grad_check(
    model: &ToyModel,
    teacher: Option<&TeacherSet>,
    x: &DenseMatrix,
    labels: &[usize],
    lambdas: Lambdas,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let targets = teacher.map_or(Targets::None, Targets::Teacher);
    let base = evaluate(model, x, labels, lambdas, targets, None)?;
    let fixed = if teacher.is_some() {
        Targets::Fixed(&base.targets)
    } else {
        Targets::None
    };
    let mut rng = rng::stream(seed, rng::streams::GRADCHECK);

    let names = model.tensor_names();
    let analytic: Vec<Vec<f64>> = base.grads.tensors().iter().map(|t| t.to_vec()).collect();
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0;
    let mut worst_tensor = None;
    let mut checked = 0;
    let mut skipped = 0;

    for (ti, &len) in sizes.iter().enumerate() {
        let count = len.min(GRADCHECK_SAMPLES_PER_TENSOR);
        let mut picks = sample(&mut rng, len, count).into_vec();
        picks.sort_unstable();
        for j in picks {
            let original = model.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = original + epsilon;
            let plus = evaluate(&probe, x, labels, lambdas, fixed, None)?;
            probe.tensors_mut()[ti][j] = original - epsilon;
            let minus = evaluate(&probe, x, labels, lambdas, fixed, None)?;
            probe.tensors_mut()[ti][j] = original;
            if plus.decisions != base.decisions || minus.decisions != base.decisions {
                skipped += 1;
                continue;
            }
            let numeric = (plus.report.total - minus.report.total) / (2.0 * epsilon);
            let err = (analytic[ti][j] - numeric).abs() / numeric.abs().max(1.0);
            checked += 1;
            if err > worst {
                worst = err;
                worst_tensor = Some(names[ti].clone());
            }
        }
    }

    let mut teacher_sensitivity: f64 = 0.0;
    let mut teacher_checked = 0;
    if let Some(set) = teacher {
        let mut perturbed = set.clone();
        for (ti, teacher) in set.teachers.iter().enumerate() {
            let tensors = teacher.mirror.tensors();
            for (pi, tensor) in tensors.iter().enumerate() {
                let count = tensor.len().min(GRADCHECK_TEACHER_SAMPLES_PER_TENSOR);
                let mut picks = sample(&mut rng, tensor.len(), count).into_vec();
                picks.sort_unstable();
                for j in picks {
                    let original = tensor[j];
                    let mut value = |delta: f64| -> Result<f64> {
                        perturbed.teachers[ti].mirror.tensors_mut()[pi][j] = original + delta;
                        let v = evaluate(model, x, labels, lambdas, Targets::Teacher(&perturbed), None)?
                            .report
                            .total;
                        perturbed.teachers[ti].mirror.tensors_mut()[pi][j] = original;
                        Ok(v)
                    };
                    let q = (value(epsilon)? - value(-epsilon)?) / (2.0 * epsilon);
                    teacher_sensitivity = teacher_sensitivity.max(q.abs());
                    teacher_checked += 1;
                }
            }
        }
    }

    Ok(GradCheckReport {
        max_relative_error: worst,
        worst_tensor,
        checked,
        skipped_flips: skipped,
        teacher_max_abs_analytic: 0.0,
        teacher_value_sensitivity: teacher_sensitivity,
        teacher_checked,
        epsilon,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over the first fraction of steps, then linear decay to 0.
    WarmupLinear { warmup_fraction: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Constant => Ok(()),
            Self::WarmupLinear { warmup_fraction: f } if (0.0..1.0).contains(f) => Ok(()),
            Self::WarmupLinear { warmup_fraction } => Err(Error::InvalidArgument(format!(
                "warmup fraction {warmup_fraction}"
            ))),
        }
    }

    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            Self::Constant => base,
            Self::WarmupLinear { warmup_fraction } => {
                let warm = (warmup_fraction * total as f64).ceil() as usize;
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    base * (total - step) as f64 / (total - warm).max(1) as f64
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub lambdas: Lambdas,
    pub seed: u64,
    /// 0 logs only the first and last step.
    pub log_every: usize,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_lb: f64,
    pub loss_eesd: f64,
    pub drop_rate: Option<f64>,
    pub min_utilization: Option<f64>,
    pub max_utilization: Option<f64>,
}

impl TrainLogRecord {
    fn new(step: usize, lr: f64, r: &LossReport, routing: &[(usize, RoutingRecord)]) -> Self {
        let (mut drop, mut min, mut max) = (None, None, None);
        if !routing.is_empty() {
            let rates: Vec<f64> = routing.iter().map(|(_, r)| r.drop_rate()).collect();
            drop = Some(rates.iter().sum::<f64>() / rates.len() as f64);
            let utils = routing
                .iter()
                .flat_map(|(_, r)| crate::analysis::expert_utilization(r));
            let (lo, hi) = utils.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), u| {
                (a.min(u), b.max(u))
            });
            min = Some(lo);
            max = Some(hi);
        }
        Self {
            step,
            lr,
            loss_total: r.total,
            loss_task: r.task,
            loss_lb: r.lb,
            loss_eesd: r.eesd,
            drop_rate: drop,
            min_utilization: min,
            max_utilization: max,
        }
    }
}

/// Minibatch gradient descent. Batches come from the `batches` stream of
/// `opts.seed`, so runs sharing a seed see the same batches.
pub fn fit(
    model: &mut ToyModel,
    mut teachers: Option<&mut TeacherSet>,
    data: &SyntheticDataset,
    opts: &TrainOptions,
    log: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<Option<TrainLogRecord>> {
    opts.schedule.validate()?;
    let mut rng = rng::stream(opts.seed, rng::streams::BATCHES);
    let mut last = None;
    for step in 0..opts.steps {
        let (x, labels) = data.sample_batch(opts.batch_size, &mut rng);
        let lr = opts.schedule.lr_at(opts.lr, step, opts.steps);
        let (report, routing) =
            train_step(model, teachers.as_deref_mut(), &x, &labels, lr, opts.lambdas, step)?;
        let due = step == 0
            || step + 1 == opts.steps
            || (opts.log_every > 0 && step % opts.log_every == 0);
        if due {
            let rec = TrainLogRecord::new(step, lr, &report, &routing);
            log(&rec)?;
            last = Some(rec);
        }
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task_loss: f64,
    pub accuracy: f64,
    pub routing: Vec<(usize, RoutingRecord)>,
}

/// Task loss and accuracy on a full set with the given capacity factor.
pub fn evaluate_task(model: &ToyModel, x: &DenseMatrix, labels: &[usize], capacity: f64) -> Result<EvalMetrics> {
    let mut m = model.clone();
    m.set_capacity_factor(capacity);
    let none = Lambdas { lb: 0.0, eesd: 0.0 };
    let e = evaluate(&m, x, labels, none, Targets::None, None)?;
    Ok(EvalMetrics {
        task_loss: e.report.task,
        accuracy: m.accuracy(x, labels)?,
        routing: e.routing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::spherical_kmeans;

    fn small_dense(seed: u64) -> ToyModel {
        ToyModel::new_dense(6, 10, 3, 3, seed)
    }

    fn upcycle_copies(model: &ToyModel, n: usize, k: usize, seed: u64) -> ToyModel {
        let mut out = model.clone();
        let mut rng = rng::stream(seed, "router");
        for s in default_moe_sites(model.blocks.len()) {
            let dense = model.dense_block(s).unwrap().clone();
            let router = DenseMatrix::from_fn(n, model.input_dim, |_, _| normal(&mut rng));
            out.blocks[s] = Block::Moe(MoeLayer::new(vec![dense; n], router, k, 2.0).unwrap());
        }
        out
    }

    #[test]
    fn dataset_is_reproducible_and_labelled() {
        let a = make_synthetic_dataset(16, 4, 8, 64, 5.0, 3).unwrap();
        let b = make_synthetic_dataset(16, 4, 8, 64, 5.0, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| l < 4));
        assert_eq!(a.labels[5], 5 % 8 % 4);
        for i in 0..8 {
            for j in 0..i {
                assert!(dot(a.directions.row(i), a.directions.row(j)) < 0.2);
            }
        }
        assert!(make_synthetic_dataset(4, 5, 4, 10, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_infeasible_separation() {
        // 6 directions in 2-D cannot all have pairwise cosine < 0.5 below -0.2
        let r = make_synthetic_dataset(2, 2, 6, 10, -1.0, 0);
        assert!(r.is_err());
        let r = make_synthetic_dataset(2, 2, 6, 10, 1e9, 0);
        assert!(matches!(r, Err(Error::SeparationInfeasible { .. })));
    }

    #[test]
    fn noiseless_limit_nearest_centroid_is_exact() {
        let data = make_synthetic_dataset(8, 2, 4, 40, 1e12, 1).unwrap();
        for j in 0..40 {
            let col = data.inputs.column(j);
            let best = (0..4)
                .max_by(|&a, &b| {
                    dot(data.directions.row(a), &col).total_cmp(&dot(data.directions.row(b), &col))
                })
                .unwrap();
            assert_eq!(best, data.clusters[j]);
            assert!(norm(
                &col.iter()
                    .zip(data.directions.row(data.clusters[j]))
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>()
            ) < 1e-9);
        }
    }

    #[test]
    fn kmeans_recovers_generated_clusters() {
        let data = make_synthetic_dataset(16, 4, 8, 400, 5.0, 2).unwrap();
        let (x, _) = crate::clustering::normalize_columns(&data.inputs);
        let model = crate::clustering::spherical_kmeans_restarts(&x, 8, 100, 4, 5).unwrap();
        let acc = matched_accuracy(&model.assignments, &data.clusters, 8);
        assert!(acc >= 0.95, "{acc}");
        let single = spherical_kmeans(&x, 8, 100, 5).unwrap();
        assert_eq!(single.assignments.len(), 400);
    }

    /// Best accuracy over label permutations, by greedy majority matching.
    fn matched_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
        let mut table = vec![vec![0usize; k]; k];
        for (&p, &t) in pred.iter().zip(truth) {
            table[p][t] += 1;
        }
        let correct: usize = table.iter().map(|row| *row.iter().max().unwrap()).sum();
        correct as f64 / pred.len() as f64
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut model = small_dense(1);
        model.head = DenseMatrix::zeros(3, 6);
        let x = DenseMatrix::from_fn(6, 5, |r, c| (r + c) as f64 * 0.1);
        let (report, _) = total_loss(&model, None, &x, &[0, 1, 2, 0, 1], Lambdas { lb: 0.0, eesd: 0.0 })
            .unwrap();
        assert!((report.task - 3.0_f64.ln()).abs() < 1e-10);
        assert_eq!(report.total, report.task);
    }

    #[test]
    fn loss_report_decomposition() {
        let r = LossReport::new(0.7, 0.125, 0.3, Lambdas { lb: 0.001, eesd: 1.0 });
        assert!((r.total - (0.7 + 1.25e-4 + 0.3)).abs() < 1e-12);
        assert!((0.001 * 0.125 - 1.25e-4_f64).abs() < 1e-18);
    }

    #[test]
    fn copies_match_dense_forward() {
        let dense = small_dense(2);
        let moe = upcycle_copies(&dense, 4, 2, 3);
        let x = DenseMatrix::from_fn(6, 50, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.1 - 0.5);
        assert!(moe.logits(&x).unwrap().max_abs_diff(&dense.logits(&x).unwrap()) < 1e-6);
    }

    #[test]
    fn dense_gradcheck() {
        let model = small_dense(4);
        let data = make_synthetic_dataset(6, 3, 3, 24, 3.0, 1).unwrap();
        let r = grad_check(&model, None, &data.inputs, &data.labels, Lambdas { lb: 0.0, eesd: 0.0 }, 1e-6, 0)
            .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
        assert!(r.checked > 100);
    }

    #[test]
    fn moe_gradcheck_with_teacher() {
        let dense = small_dense(5);
        let mut moe = upcycle_copies(&dense, 4, 2, 6);
        // make experts differ
        if let Block::Moe(m) = &mut moe.blocks[1] {
            for (i, e) in m.experts.iter_mut().enumerate() {
                e.w1.as_mut_slice().iter_mut().enumerate().for_each(|(j, v)| {
                    *v += 0.05 * (((i * 31 + j * 7) % 13) as f64 - 6.0) / 6.0
                });
            }
        }
        let data = make_synthetic_dataset(6, 3, 3, 24, 3.0, 2).unwrap();
        let mut teacher = moe.teachers(0.9).unwrap();
        // move the teacher away from the student
        for t in &mut teacher.teachers {
            t.mirror.router = t.mirror.router.scale(0.5);
        }
        let lambdas = Lambdas { lb: 0.01, eesd: 1.0 };
        let r = grad_check(&moe, Some(&teacher), &data.inputs, &data.labels, lambdas, 1e-6, 1).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert_eq!(r.teacher_max_abs_analytic, 0.0);
        assert!(r.teacher_value_sensitivity > 0.0);
        assert!(r.checked > 200);
    }

    #[test]
    fn gradcheck_rejects_bad_epsilon() {
        let model = small_dense(1);
        let x = DenseMatrix::zeros(6, 2);
        assert!(grad_check(&model, None, &x, &[0, 1], Lambdas::default(), 1e-2, 0).is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters_but_moves_teacher() {
        let dense = small_dense(7);
        let mut moe = upcycle_copies(&dense, 3, 2, 8);
        let mut teacher = moe.teachers(0.5).unwrap();
        for t in &mut teacher.teachers {
            t.mirror.router = DenseMatrix::zeros(3, 6);
        }
        let before = moe.clone();
        let data = make_synthetic_dataset(6, 3, 3, 12, 3.0, 3).unwrap();
        train_step(&mut moe, Some(&mut teacher), &data.inputs, &data.labels, 0.0, Lambdas::default(), 0)
            .unwrap();
        assert_eq!(moe, before);
        assert_eq!(teacher.teachers[0].step_count, 1);
        assert_ne!(teacher.teachers[0].mirror.router, DenseMatrix::zeros(3, 6));
    }

    #[test]
    fn sgd_step_matches_manual_update() {
        let mut model = small_dense(9);
        let data = make_synthetic_dataset(6, 3, 3, 12, 3.0, 4).unwrap();
        let lambdas = Lambdas { lb: 0.0, eesd: 0.0 };
        let (_, grads) = total_loss(&model, None, &data.inputs, &data.labels, lambdas).unwrap();
        let mut expected = model.clone();
        for (p, g) in expected.tensors_mut().into_iter().zip(grads.tensors()) {
            for (a, b) in p.iter_mut().zip(g) {
                *a -= 0.1 * b;
            }
        }
        train_step(&mut model, None, &data.inputs, &data.labels, 0.1, lambdas, 0).unwrap();
        assert_eq!(model, expected);
    }

    #[test]
    fn loss_decreases_on_noiseless_data() {
        let mut model = small_dense(10);
        let data = make_synthetic_dataset(6, 3, 3, 30, 1e9, 5);
        let data = match data {
            Ok(d) => d,
            // three directions with negative pairwise cosine in 6-D
            Err(_) => make_synthetic_dataset(6, 3, 3, 30, 100.0, 5).unwrap(),
        };
        let lambdas = Lambdas { lb: 0.0, eesd: 0.0 };
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let (r, _) = train_step(&mut model, None, &data.inputs, &data.labels, 0.05, lambdas, step).unwrap();
            assert!(r.total <= last + 1e-6, "step {step}: {} > {last}", r.total);
            last = r.total;
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut model = small_dense(11);
        model.head = DenseMatrix::from_fn(3, 6, |_, _| 1e300);
        let x = DenseMatrix::from_fn(6, 2, |_, _| 1e10);
        let r = train_step(&mut model, None, &x, &[0, 1], 0.1, Lambdas::default(), 7);
        assert!(matches!(r, Err(Error::NonFiniteLoss { step: 7, .. })));
    }

    #[test]
    fn eesd_mask_path() {
        let dense = small_dense(12);
        let moe = upcycle_copies(&dense, 3, 1, 13);
        let mut teacher = moe.teachers(0.9).unwrap();
        for t in &mut teacher.teachers {
            t.mirror.experts[0].b2.iter_mut().for_each(|v| *v += 1.0);
        }
        let data = make_synthetic_dataset(6, 3, 3, 6, 3.0, 6).unwrap();
        let lambdas = Lambdas { lb: 0.0, eesd: 1.0 };
        let all = evaluate(&moe, &data.inputs, &data.labels, lambdas, Targets::Teacher(&teacher), None)
            .unwrap();
        let none = evaluate(
            &moe,
            &data.inputs,
            &data.labels,
            lambdas,
            Targets::Teacher(&teacher),
            Some(&[false; 6]),
        );
        assert!(matches!(none, Err(Error::AllMasked)));
        let some = evaluate(
            &moe,
            &data.inputs,
            &data.labels,
            lambdas,
            Targets::Teacher(&teacher),
            Some(&[true, false, true, false, true, false]),
        )
        .unwrap();
        assert!(all.report.eesd > 0.0 && some.report.eesd > 0.0);
        assert_eq!(all.report.task, some.report.task);
    }
}
