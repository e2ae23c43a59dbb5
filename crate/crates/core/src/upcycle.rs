//! Dense-to-MoE initializers and calibration capture.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{normalize_columns, spherical_kmeans_restarts, ClusterModel};
use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_escalating, dot, effective_rank, norm, pca_fit_transform, right_solve_lower, svd_full,
    DenseMatrix,
};
use crate::moe::{DenseFfn, MoeLayer};
use crate::rng::{self, derive_seed, normal, streams};
use crate::train::{Block, ToyModel};

pub const DEFAULT_ROUTER_SCALE: f64 = 0.02;
pub const DEFAULT_TAU: f64 = 0.95;
pub const DEFAULT_KMEANS_RESTARTS: usize = 4;

/// Expert count, top-k and capacity of a layer being built.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub n_experts: usize,
    pub k: usize,
    pub capacity_factor: f64,
}

impl LayerLayout {
    /// Top-2 (or top-1 for a single expert) with unbounded capacity.
    pub fn new(n_experts: usize) -> Self {
        Self {
            n_experts,
            k: n_experts.clamp(1, 2),
            capacity_factor: f64::INFINITY,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    fn build(&self, experts: Vec<DenseFfn>, router: DenseMatrix) -> Result<MoeLayer> {
        MoeLayer::new(experts, router, self.k, self.capacity_factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationBank {
    /// Site id to `d x M` FFN inputs.
    pub per_site: BTreeMap<usize, DenseMatrix>,
    pub token_cap: usize,
}

impl ActivationBank {
    pub fn site(&self, site: usize) -> Result<&DenseMatrix> {
        self.per_site
            .get(&site)
            .ok_or_else(|| Error::InvalidArgument(format!("no activations for site {site}")))
    }
}

/// Records the input of each listed block when running the dense model,
/// subsampled uniformly (order preserved) to at most `token_cap` columns.
pub fn capture_activations(
    model: &ToyModel,
    data: &DenseMatrix,
    sites: &[usize],
    token_cap: usize,
    seed: u64,
) -> Result<ActivationBank> {
    if data.cols() == 0 || token_cap == 0 {
        return Err(Error::EmptyCalibration);
    }
    if let Some(&bad) = sites.iter().find(|&&s| s >= model.blocks.len()) {
        return Err(Error::InvalidArgument(format!(
            "site {bad} beyond {} blocks",
            model.blocks.len()
        )));
    }
    let hidden = model.hidden_states(data)?;
    let mut rng = rng::stream(seed, streams::CALIBRATION);
    let idx: Option<Vec<usize>> = (data.cols() > token_cap).then(|| {
        let mut v = sample(&mut rng, data.cols(), token_cap).into_vec();
        v.sort_unstable();
        v
    });
    let per_site = sites
        .iter()
        .map(|&s| {
            let x = &hidden[s];
            let x = match &idx {
                Some(i) => x.select_columns(i),
                None => x.clone(),
            };
            if !x.is_finite() {
                return Err(Error::NonFinite);
            }
            Ok((s, x))
        })
        .collect::<Result<_>>()?;
    Ok(ActivationBank {
        per_site,
        token_cap,
    })
}

/// `n x d` router with i.i.d. `N(0, scale^2)` entries.
pub fn random_router(n: usize, d: usize, seed: u64, scale: f64) -> DenseMatrix {
    let mut rng = rng::stream(seed, streams::ROUTER);
    DenseMatrix::from_fn(n, d, |_, _| scale * normal(&mut rng))
}

/// Every expert an exact copy of `dense`; random router.
pub fn sparse_init(
    dense: &DenseFfn,
    layout: LayerLayout,
    router_seed: u64,
    router_scale: f64,
) -> Result<MoeLayer> {
    let router = random_router(layout.n_experts, dense.input_dim(), router_seed, router_scale);
    layout.build(vec![dense.clone(); layout.n_experts], router)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Resamples `floor(ratio * h)` intermediate channels per expert (w1 row,
/// b1 entry and w2 column together) from per-tensor Gaussian statistics of
/// the dense weights.
pub fn drop_init(
    dense: &DenseFfn,
    layout: LayerLayout,
    ratio: f64,
    seed: u64,
    router_scale: f64,
) -> Result<MoeLayer> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("drop ratio {ratio}")));
    }
    let h = dense.hidden_dim();
    let count = (ratio * h as f64).floor() as usize;
    let (m1, s1) = mean_std(dense.w1.as_slice());
    let (mb, sb) = mean_std(&dense.b1);
    let (m2, s2) = mean_std(dense.w2.as_slice());
    let experts = (0..layout.n_experts)
        .map(|i| {
            let mut rng = rng::stream(derive_seed(seed, "drop-expert", i as u64), streams::DROP);
            let mut e = dense.clone();
            let mut channels = sample(&mut rng, h, count).into_vec();
            channels.sort_unstable();
            for c in channels {
                for v in e.w1.row_mut(c) {
                    *v = m1 + s1 * normal(&mut rng);
                }
                e.b1[c] = mb + sb * normal(&mut rng);
                for r in 0..e.w2.rows() {
                    e.w2[(r, c)] = m2 + s2 * normal(&mut rng);
                }
            }
            e
        })
        .collect();
    let router = random_router(layout.n_experts, dense.input_dim(), seed, router_scale);
    layout.build(experts, router)
}

/// Unit vector orthogonal to every vector in `basis`.
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for b in basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Keeps the top `ceil((1 - fraction) * r)` singular triplets of w1 and gives
/// the remaining singular values fresh random orthonormal directions.
pub fn drop_svd_init(
    dense: &DenseFfn,
    layout: LayerLayout,
    fraction: f64,
    seed: u64,
    router_scale: f64,
) -> Result<MoeLayer> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("drop-svd fraction {fraction}")));
    }
    let f = svd_full(&dense.w1)?;
    let r = f.sigma.len();
    let keep = ((1.0 - fraction) * r as f64).ceil() as usize;
    let (h, d) = dense.w1.shape();
    let kept_u: Vec<Vec<f64>> = (0..keep).map(|j| f.u.column(j)).collect();
    let kept_v: Vec<Vec<f64>> = (0..keep).map(|j| f.v_t.row(j).to_vec()).collect();
    let base = f.reconstruct(keep);

    let experts = (0..layout.n_experts)
        .map(|i| {
            let mut e = dense.clone();
            if keep >= r {
                return e;
            }
            let mut rng = rng::stream(derive_seed(seed, "drop-svd-expert", i as u64), streams::DROP);
            let mut us = kept_u.clone();
            let mut vs = kept_v.clone();
            let mut w1 = base.clone();
            for &s in &f.sigma[keep..] {
                let u = random_orthogonal(&mut rng, h, &us);
                let v = random_orthogonal(&mut rng, d, &vs);
                for a in 0..h {
                    for (o, &b) in w1.row_mut(a).iter_mut().zip(&v) {
                        *o += s * u[a] * b;
                    }
                }
                us.push(u);
                vs.push(v);
            }
            e.w1 = w1;
            e
        })
        .collect();
    let router = random_router(layout.n_experts, dense.input_dim(), seed, router_scale);
    layout.build(experts, router)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningFactor {
    /// Lower-triangular, `s * s^T = x * x^T + jitter * I`.
    pub s: DenseMatrix,
    pub jitter_used: f64,
}

pub fn whitening_matrix(x_cluster: &DenseMatrix) -> Result<WhiteningFactor> {
    if x_cluster.cols() == 0 {
        return Err(Error::EmptyCalibration);
    }
    let gram = x_cluster.matmul_t(x_cluster)?;
    let (s, jitter_used) = cholesky_escalating(&gram)?;
    Ok(WhiteningFactor { s, jitter_used })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Sparse,
    Drop,
    DropSvd,
    ClusterAware,
}

impl InitMethod {
    pub const ALL: [InitMethod; 4] = [Self::Sparse, Self::Drop, Self::DropSvd, Self::ClusterAware];

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Drop => "drop",
            Self::DropSvd => "drop-svd",
            Self::ClusterAware => "cluster",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub method: InitMethod,
    pub site: Option<usize>,
    pub per_expert_rank: Vec<usize>,
    /// Sum of squared discarded singular values per expert.
    pub per_expert_truncation_loss: Vec<f64>,
    /// `||w1 X_i - w1_i X_i||_F^2` measured on each expert's own cluster.
    pub per_expert_data_loss: Vec<f64>,
    pub per_expert_jitter: Vec<f64>,
    pub per_expert_sigma: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
    pub joint_objective: Option<f64>,
    pub gamma: f64,
    pub tau: Option<f64>,
}

impl InitReport {
    fn baseline(method: InitMethod, layer: &MoeLayer, dense: &DenseFfn) -> Self {
        let full = dense.w1.rows().min(dense.w1.cols());
        let n = layer.n_experts();
        Self {
            method,
            site: None,
            per_expert_rank: vec![full; n],
            per_expert_truncation_loss: vec![0.0; n],
            per_expert_data_loss: Vec::new(),
            per_expert_jitter: Vec::new(),
            per_expert_sigma: Vec::new(),
            cluster_sizes: Vec::new(),
            joint_objective: None,
            gamma: gamma(n),
            tau: None,
        }
    }
}

fn gamma(n: usize) -> f64 {
    if n > 1 {
        1.0 / (n - 1) as f64
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterInitOptions {
    pub tau: f64,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    /// Defaults to `max(2, ceil(d / 8))`.
    pub pca_dim: Option<usize>,
    pub threads: usize,
}

impl Default for ClusterInitOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            kmeans_restarts: DEFAULT_KMEANS_RESTARTS,
            kmeans_max_iters: crate::clustering::DEFAULT_MAX_ITERS,
            pca_dim: None,
            threads: 1,
        }
    }
}

pub fn default_pca_dim(d: usize) -> usize {
    d.div_ceil(8).max(2).min(d)
}

/// Cluster-aware upcycling with default options and the given `tau`.
pub fn cluster_aware_init(
    dense: &DenseFfn,
    bank_site: &DenseMatrix,
    layout: LayerLayout,
    tau: f64,
    seed: u64,
) -> Result<(MoeLayer, ClusterModel, InitReport)> {
    let opts = ClusterInitOptions {
        tau,
        ..Default::default()
    };
    cluster_aware_init_with(dense, bank_site, layout, &opts, seed)
}

struct ExpertFit {
    w1: DenseMatrix,
    rank: usize,
    truncation: f64,
    data_loss: f64,
    jitter: f64,
    sigma: Vec<f64>,
}

fn fit_expert(w1: &DenseMatrix, x: &DenseMatrix, tau: f64) -> Result<ExpertFit> {
    let white = whitening_matrix(x)?;
    let ws = w1.matmul(&white.s)?;
    let f = svd_full(&ws)?;
    let profile = effective_rank(&f.sigma, tau, f.sigma.len())?;
    let truncated = f.reconstruct(profile.chosen_rank);
    let w1_i = right_solve_lower(&truncated, &white.s)?;
    let data_loss = w1.sub(&w1_i)?.matmul(x)?.frobenius_sq();
    Ok(ExpertFit {
        w1: w1_i,
        rank: profile.chosen_rank,
        truncation: profile.discarded_energy(),
        data_loss,
        jitter: white.jitter_used,
        sigma: f.sigma,
    })
}

/// Clusters the site activations, builds one whitened truncated-SVD w1 per
/// cluster and points the router at the cluster centroids.
pub fn cluster_aware_init_with(
    dense: &DenseFfn,
    bank_site: &DenseMatrix,
    layout: LayerLayout,
    opts: &ClusterInitOptions,
    seed: u64,
) -> Result<(MoeLayer, ClusterModel, InitReport)> {
    let (d, m) = bank_site.shape();
    let n = layout.n_experts;
    if d != dense.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "activations of dim {d} for FFN input dim {}",
            dense.input_dim()
        )));
    }
    if m < n {
        return Err(Error::InsufficientData {
            points: m,
            clusters: n,
        });
    }

    let (unit, _) = normalize_columns(bank_site);
    let pca = pca_fit_transform(&unit, opts.pca_dim.unwrap_or_else(|| default_pca_dim(d)))?;
    let (reduced, _) = normalize_columns(&pca.projected);
    let cluster_seed = derive_seed(seed, streams::CLUSTERING, 0);
    let mut clusters = spherical_kmeans_restarts(
        &reduced,
        n,
        opts.kmeans_max_iters,
        opts.kmeans_restarts,
        cluster_seed,
    )?;
    clusters.pca_projection = Some(pca.projection.clone());
    clusters.pca_mean = Some(pca.mean.clone());

    let members = clusters.members();
    let mut router = DenseMatrix::zeros(n, d);
    for (i, idx) in members.iter().enumerate() {
        let mut c = vec![0.0; d];
        for &j in idx {
            for (acc, r) in c.iter_mut().zip(0..d) {
                *acc += unit[(r, j)];
            }
        }
        let nc = norm(&c);
        if nc == 0.0 {
            return Err(Error::DegenerateData(format!("cluster {i} has a zero centroid")));
        }
        router.row_mut(i).iter_mut().zip(&c).for_each(|(o, v)| *o = v / nc);
    }

    let xs: Vec<DenseMatrix> = members.iter().map(|idx| bank_site.select_columns(idx)).collect();
    let fits = fit_all(&dense.w1, &xs, opts.tau, opts.threads)?;

    let experts: Vec<DenseFfn> = fits
        .iter()
        .map(|f| DenseFfn {
            w1: f.w1.clone(),
            ..dense.clone()
        })
        .collect();
    let expert_w1: Vec<DenseMatrix> = fits.iter().map(|f| f.w1.clone()).collect();
    let g = gamma(n);
    let joint = joint_objective_eval(&expert_w1, &dense.w1, &xs, g)?;
    let layer = layout.build(experts, router)?;
    let report = InitReport {
        method: InitMethod::ClusterAware,
        site: None,
        per_expert_rank: fits.iter().map(|f| f.rank).collect(),
        per_expert_truncation_loss: fits.iter().map(|f| f.truncation).collect(),
        per_expert_data_loss: fits.iter().map(|f| f.data_loss).collect(),
        per_expert_jitter: fits.iter().map(|f| f.jitter).collect(),
        per_expert_sigma: fits.into_iter().map(|f| f.sigma).collect(),
        cluster_sizes: members.iter().map(Vec::len).collect(),
        joint_objective: Some(joint),
        gamma: g,
        tau: Some(opts.tau),
    };
    Ok((layer, clusters, report))
}

fn fit_all(w1: &DenseMatrix, xs: &[DenseMatrix], tau: f64, threads: usize) -> Result<Vec<ExpertFit>> {
    if threads <= 1 || xs.len() <= 1 {
        return xs.iter().map(|x| fit_expert(w1, x, tau)).collect();
    }
    let chunk = xs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = xs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|x| fit_expert(w1, x, tau))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(xs.len());
        for h in handles {
            out.extend(h.join().expect("expert fit thread panicked")?);
        }
        Ok(out)
    })
}

/// `sum_i ||W X_i - W_i X_i||^2 - gamma * sum_{j != i} ||W X_i - W_j X_i||^2`.
pub fn joint_objective_eval(
    experts_w1: &[DenseMatrix],
    dense_w1: &DenseMatrix,
    clusters: &[DenseMatrix],
    gamma: f64,
) -> Result<f64> {
    if experts_w1.len() != clusters.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} experts for {} clusters",
            experts_w1.len(),
            clusters.len()
        )));
    }
    let mut total = 0.0;
    for (i, x) in clusters.iter().enumerate() {
        let wx = dense_w1.matmul(x)?;
        for (j, wj) in experts_w1.iter().enumerate() {
            let err = wx.sub(&wj.matmul(x)?)?.frobenius_sq();
            if i == j {
                total += err;
            } else {
                total -= gamma * err;
            }
        }
    }
    Ok(total)
}

/// Initializer and its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum UpcycleMethod {
    Sparse,
    Drop { ratio: f64 },
    DropSvd { fraction: f64 },
    ClusterAware(ClusterInitOptions),
}

impl UpcycleMethod {
    pub fn kind(&self) -> InitMethod {
        match self {
            Self::Sparse => InitMethod::Sparse,
            Self::Drop { .. } => InitMethod::Drop,
            Self::DropSvd { .. } => InitMethod::DropSvd,
            Self::ClusterAware(_) => InitMethod::ClusterAware,
        }
    }
}

/// Upcycled model with one report per site and, for cluster-aware
/// initialization, the clustering behind each site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpcycleOutput {
    pub model: ToyModel,
    pub reports: Vec<InitReport>,
    pub clusters: BTreeMap<usize, ClusterModel>,
}

/// Replaces the dense blocks at `sites` with MoE layers. Routers and
/// per-expert randomness are drawn from the same per-site seeds for every
/// method.
pub fn upcycle_model(
    dense: &ToyModel,
    sites: &[usize],
    bank: Option<&ActivationBank>,
    layout: LayerLayout,
    method: &UpcycleMethod,
    router_scale: f64,
    seed: u64,
) -> Result<UpcycleOutput> {
    let mut model = dense.clone();
    let mut reports = Vec::with_capacity(sites.len());
    let mut clusters = BTreeMap::new();
    for &site in sites {
        let ffn = dense.dense_block(site).ok_or_else(|| {
            Error::InvalidArgument(format!("block {site} is not a dense FFN"))
        })?;
        let site_seed = derive_seed(seed, "site", site as u64);
        let (layer, mut report) = match method {
            UpcycleMethod::Sparse => {
                let l = sparse_init(ffn, layout, site_seed, router_scale)?;
                let r = InitReport::baseline(InitMethod::Sparse, &l, ffn);
                (l, r)
            }
            UpcycleMethod::Drop { ratio } => {
                let l = drop_init(ffn, layout, *ratio, site_seed, router_scale)?;
                let r = InitReport::baseline(InitMethod::Drop, &l, ffn);
                (l, r)
            }
            UpcycleMethod::DropSvd { fraction } => {
                let l = drop_svd_init(ffn, layout, *fraction, site_seed, router_scale)?;
                let mut r = InitReport::baseline(InitMethod::DropSvd, &l, ffn);
                let full = r.per_expert_rank[0];
                let keep = ((1.0 - fraction) * full as f64).ceil() as usize;
                r.per_expert_rank = vec![keep.min(full); layout.n_experts];
                (l, r)
            }
            UpcycleMethod::ClusterAware(opts) => {
                let bank = bank.ok_or(Error::EmptyCalibration)?;
                let (l, c, r) =
                    cluster_aware_init_with(ffn, bank.site(site)?, layout, opts, site_seed)?;
                clusters.insert(site, c);
                (l, r)
            }
        };
        report.site = Some(site);
        model.blocks[site] = Block::Moe(layer);
        reports.push(report);
    }
    Ok(UpcycleOutput {
        model,
        reports,
        clusters,
    })
}
