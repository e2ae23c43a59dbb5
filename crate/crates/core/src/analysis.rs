//! Expert specialization metrics per MoE site.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, pseudoinverse, DenseMatrix};
use crate::moe::{route, MoeLayer, RoutingRecord};
use crate::train::ToyModel;

/// `Tr(S_W * pinv(S_B))` over per-expert output sets (`d x T_i` each).
///
/// Experts with fewer than two tokens are skipped. `None` when the
/// between-expert covariance vanishes.
pub fn relative_compactness(expert_outputs: &[DenseMatrix]) -> Result<Option<f64>> {
    let used: Vec<&DenseMatrix> = expert_outputs.iter().filter(|y| y.cols() >= 2).collect();
    if used.len() < 2 {
        return Err(Error::InsufficientTokens(format!(
            "{} experts with at least two tokens",
            used.len()
        )));
    }
    let d = used[0].rows();
    if used.iter().any(|y| y.rows() != d) {
        return Err(Error::ShapeMismatch("expert outputs differ in dimension".into()));
    }
    let mut within = DenseMatrix::zeros(d, d);
    let mut tokens = 0usize;
    let mut means = Vec::with_capacity(used.len());
    for y in &used {
        let mean = y.column_mean();
        let mut centered = (*y).clone();
        centered.add_column_vector(&mean.iter().map(|v| -v).collect::<Vec<_>>());
        within.axpy(1.0, &centered.matmul_t(&centered)?)?;
        tokens += y.cols();
        means.push(mean);
    }
    let within = within.scale(1.0 / tokens as f64);

    let mut m = DenseMatrix::from_columns(&means)?;
    let grand = m.column_mean();
    m.add_column_vector(&grand.iter().map(|v| -v).collect::<Vec<_>>());
    let between = m.matmul_t(&m)?.scale(1.0 / used.len() as f64);
    let scale = grand.iter().chain(means.iter().flatten()).fold(0.0_f64, |a, v| a.max(v.abs()));
    if between.max_abs() <= 1e-12 * scale.max(1.0).powi(2) {
        return Ok(None);
    }
    Ok(Some(within.matmul(&pseudoinverse(&between)?)?.trace()))
}

fn similarity_of(vectors: &[Vec<f64>]) -> Result<DenseMatrix> {
    let sq: Vec<f64> = vectors.iter().map(|v| dot(v, v)).collect();
    if let Some(i) = sq.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroWeights(i));
    }
    let n = vectors.len();
    let mut out = DenseMatrix::identity(n);
    for i in 0..n {
        for j in 0..i {
            // sqrt(s * s) == s exactly, so identical vectors give exactly 1
            let c = (dot(&vectors[i], &vectors[j]) / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    Ok(out)
}

/// Cosine similarity between concatenated `(w1, b1, w2, b2)` of each pair.
pub fn expert_weight_similarity(layer: &MoeLayer) -> Result<DenseMatrix> {
    similarity_of(&layer.experts.iter().map(|e| e.flatten()).collect::<Vec<_>>())
}

/// Same as [`expert_weight_similarity`] restricted to w1.
pub fn expert_w1_similarity(layer: &MoeLayer) -> Result<DenseMatrix> {
    similarity_of(
        &layer
            .experts
            .iter()
            .map(|e| e.w1.as_slice().to_vec())
            .collect::<Vec<_>>(),
    )
}

/// Mean of the off-diagonal entries.
pub fn mean_off_diagonal(sim: &DenseMatrix) -> f64 {
    let n = sim.rows();
    if n < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += sim[(i, j)];
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Mean per-token Shannon entropy in nats.
pub fn routing_entropy(probs: &DenseMatrix) -> f64 {
    if probs.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..probs.rows())
        .map(|t| {
            probs
                .row(t)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / probs.rows() as f64
}

/// Share of top-k slots selecting each expert, dropped slots included.
pub fn expert_utilization(routing: &RoutingRecord) -> Vec<f64> {
    let slots = (routing.n_tokens() * routing.k()).max(1) as f64;
    routing
        .selected_counts()
        .into_iter()
        .map(|c| c as f64 / slots)
        .collect()
}

/// Expert outputs grouped by each token's top-1 expert.
pub fn outputs_by_top_expert(layer: &MoeLayer, x: &DenseMatrix, routing: &RoutingRecord) -> Result<Vec<DenseMatrix>> {
    let mut groups = vec![Vec::new(); layer.n_experts()];
    for (t, sel) in routing.topk_indices.iter().enumerate() {
        groups[sel[0]].push(t);
    }
    groups
        .iter()
        .zip(&layer.experts)
        .map(|(idx, e)| e.forward(&x.select_columns(idx)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteAnalysis {
    pub rc: Option<f64>,
    pub mean_pairwise_similarity: f64,
    pub mean_pairwise_similarity_w1: f64,
    pub similarity_matrix: DenseMatrix,
    pub mean_routing_entropy: f64,
    pub utilization: Vec<f64>,
    pub drop_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub per_site: BTreeMap<usize, SiteAnalysis>,
}

pub const SUMMARY_CSV_HEADER: &str = "site,rc,mean_pairwise_similarity,mean_pairwise_similarity_w1,mean_routing_entropy,min_utilization,max_utilization,drop_rate";
pub const METRICS_CSV_HEADER: &str = "site,metric,i,j,value";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl SiteAnalysis {
    pub fn analyze(layer: &MoeLayer, x: &DenseMatrix) -> Result<Self> {
        let routing = route(layer, x)?;
        let outputs = outputs_by_top_expert(layer, x, &routing)?;
        let rc = match relative_compactness(&outputs) {
            Ok(v) => v,
            Err(Error::InsufficientTokens(_)) => None,
            Err(e) => return Err(e),
        };
        let similarity_matrix = expert_weight_similarity(layer)?;
        Ok(Self {
            rc,
            mean_pairwise_similarity: mean_off_diagonal(&similarity_matrix),
            mean_pairwise_similarity_w1: mean_off_diagonal(&expert_w1_similarity(layer)?),
            similarity_matrix,
            mean_routing_entropy: routing_entropy(&routing.probs),
            utilization: expert_utilization(&routing),
            drop_rate: routing.drop_rate(),
        })
    }
}

impl AnalysisReport {
    /// Analyzes every MoE site on the site inputs produced by `x`.
    pub fn for_model(model: &ToyModel, x: &DenseMatrix) -> Result<Self> {
        let hidden = model.hidden_states(x)?;
        let per_site = model
            .moe_sites()
            .into_iter()
            .map(|s| {
                let layer = model.moe_layer(s).expect("moe site");
                Ok((s, SiteAnalysis::analyze(layer, &hidden[s])?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_site })
    }

    /// One row per site; `rc` is empty when undefined.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_CSV_HEADER}\n");
        for (site, a) in &self.per_site {
            let min = a.utilization.iter().copied().fold(f64::INFINITY, f64::min);
            let max = a.utilization.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(
                out,
                "{site},{},{},{},{},{min},{max},{}",
                fmt_opt(a.rc),
                a.mean_pairwise_similarity,
                a.mean_pairwise_similarity_w1,
                a.mean_routing_entropy,
                a.drop_rate
            )
            .expect("write to string");
        }
        out
    }

    /// Long format: one row per site per metric entry.
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_CSV_HEADER}\n");
        for (site, a) in &self.per_site {
            let mut row = |metric: &str, i: String, j: String, v: String| {
                writeln!(out, "{site},{metric},{i},{j},{v}").expect("write to string");
            };
            row("rc", String::new(), String::new(), fmt_opt(a.rc));
            row("mean_pairwise_similarity", String::new(), String::new(), a.mean_pairwise_similarity.to_string());
            row("mean_pairwise_similarity_w1", String::new(), String::new(), a.mean_pairwise_similarity_w1.to_string());
            row("mean_routing_entropy", String::new(), String::new(), a.mean_routing_entropy.to_string());
            row("drop_rate", String::new(), String::new(), a.drop_rate.to_string());
            for (e, u) in a.utilization.iter().enumerate() {
                row("utilization", e.to_string(), String::new(), u.to_string());
            }
            let n = a.similarity_matrix.rows();
            for i in 0..n {
                for j in 0..n {
                    row("similarity", i.to_string(), j.to_string(), a.similarity_matrix[(i, j)].to_string());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::DenseFfn;

    fn layer_of(experts: Vec<DenseFfn>, k: usize) -> MoeLayer {
        let d = experts[0].input_dim();
        let n = experts.len();
        MoeLayer::new(experts, DenseMatrix::from_fn(n, d, |i, c| (i + c) as f64 * 0.1), k, f64::INFINITY)
            .unwrap()
    }

    fn record(selections: Vec<Vec<usize>>, n: usize) -> RoutingRecord {
        let t = selections.len();
        let k = selections[0].len();
        RoutingRecord {
            probs: DenseMatrix::from_fn(t, n, |_, _| 1.0 / n as f64),
            gates: vec![vec![1.0 / k as f64; k]; t],
            dropped: vec![vec![false; k]; t],
            topk_indices: selections,
            per_expert_fraction: vec![0.0; n],
            per_expert_mean_prob: vec![1.0 / n as f64; n],
            capacity: usize::MAX,
        }
    }

    #[test]
    fn rc_identity_case() {
        // two experts; within variance 1 on both axes, means at +-1 on both axes
        let within = [[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let make = |shift: f64| {
            DenseMatrix::from_columns(
                &within.iter().map(|p| vec![p[0] + shift, p[1] - shift]).collect::<Vec<_>>(),
            )
            .unwrap()
        };
        // means (1, -1) and (-1, 1) lie on one axis: rank-1 between covariance
        let rc = relative_compactness(&[make(1.0), make(-1.0)]).unwrap().unwrap();
        // within = I, between = [[1,-1],[-1,1]], pinv = between / 4, trace = 0.5
        assert!((rc - 0.5).abs() < 1e-10, "{rc}");

        // means at +-sqrt(2) e1 and +-sqrt(2) e2 make both covariances I, so RC = d
        let means = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let sets: Vec<DenseMatrix> = means
            .iter()
            .map(|m| {
                DenseMatrix::from_columns(
                    &within
                        .iter()
                        .map(|p| vec![m[0] * 2f64.sqrt() + p[0], m[1] * 2f64.sqrt() + p[1]])
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let rc = relative_compactness(&sets).unwrap().unwrap();
        assert!((rc - 2.0).abs() < 1e-10, "{rc}");
    }

    #[test]
    fn rc_orthogonal_and_degenerate() {
        let a = DenseMatrix::from_columns(&[vec![1.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        let b = DenseMatrix::from_columns(&[vec![1.0, -1.0], vec![-1.0, -1.0]]).unwrap();
        assert!(relative_compactness(&[a, b]).unwrap().unwrap().abs() < 1e-8);

        let c = DenseMatrix::from_fn(3, 4, |_, _| 2.0);
        assert_eq!(relative_compactness(&[c.clone(), c]).unwrap(), None);

        let one = DenseMatrix::zeros(3, 1);
        assert!(matches!(
            relative_compactness(&[one, DenseMatrix::zeros(3, 5)]),
            Err(Error::InsufficientTokens(_))
        ));
    }

    #[test]
    fn similarity_examples() {
        let base = DenseFfn::new(
            DenseMatrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64 + 0.37),
            vec![0.1, 0.2, 0.3],
            DenseMatrix::from_fn(2, 3, |r, c| (r * c) as f64 - 0.71),
            vec![0.5, -0.25],
        )
        .unwrap();
        let copies = layer_of(vec![base.clone(); 5], 2);
        let s = expert_weight_similarity(&copies).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 1.0));

        let mut a = DenseFfn::zeros(2, 2);
        a.w1[(0, 0)] = 1.0;
        let mut b = DenseFfn::zeros(2, 2);
        b.w1[(1, 1)] = 3.0;
        let s = expert_weight_similarity(&layer_of(vec![a.clone(), b], 1)).unwrap();
        assert_eq!(s[(0, 1)], 0.0);

        let mut scaled = base.clone();
        for t in scaled.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= 2.0);
        }
        let s = expert_weight_similarity(&layer_of(vec![base, scaled], 1)).unwrap();
        assert!((s[(0, 1)] - 1.0).abs() < 1e-15);

        let zero = DenseFfn::zeros(2, 2);
        assert_eq!(
            expert_weight_similarity(&layer_of(vec![a, zero], 1)),
            Err(Error::ZeroWeights(1))
        );
    }

    #[test]
    fn entropy_examples() {
        let uniform = DenseMatrix::from_fn(4, 8, |_, _| 0.125);
        assert!((routing_entropy(&uniform) - 8f64.ln()).abs() < 1e-12);
        assert_eq!(routing_entropy(&DenseMatrix::identity(3)), 0.0);
        let row = DenseMatrix::new(1, 2, vec![0.75, 0.25]).unwrap();
        let want = -0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((routing_entropy(&row) - want).abs() < 1e-15);
        assert!((want - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn utilization_examples() {
        let u = expert_utilization(&record(vec![vec![0]; 6], 4));
        assert_eq!(u, vec![1.0, 0.0, 0.0, 0.0]);

        let balanced: Vec<Vec<usize>> = (0..8).map(|t| vec![t, (t + 1) % 8]).collect();
        assert!(expert_utilization(&record(balanced, 8)).iter().all(|&v| v == 0.125));

        let u = expert_utilization(&record(vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![2, 3]], 4));
        assert_eq!(u, vec![0.25; 4]);
    }

    #[test]
    fn report_csv_schema() {
        let model = {
            let dense = ToyModel::new_dense(4, 6, 2, 2, 1);
            crate::upcycle::upcycle_model(
                &dense,
                &[1],
                None,
                crate::upcycle::LayerLayout::new(3),
                &crate::upcycle::UpcycleMethod::Sparse,
                0.02,
                1,
            )
            .unwrap()
            .model
        };
        let x = DenseMatrix::from_fn(4, 30, |r, c| ((r * 5 + c * 3) % 7) as f64 - 3.0);
        let report = AnalysisReport::for_model(&model, &x).unwrap();
        let summary = report.summary_csv();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines[0], SUMMARY_CSV_HEADER);
        assert_eq!(lines.len(), 2);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[2], "1");
        let site = &report.per_site[&1];
        assert!((site.utilization.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(site.mean_routing_entropy <= 3f64.ln() + 1e-12);
        let metrics = report.metrics_csv();
        assert_eq!(metrics.lines().next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(metrics.lines().count(), 1 + 5 + 3 + 9);
    }
}
