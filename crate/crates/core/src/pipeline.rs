//! End-to-end stages driven by a [`PipelineConfig`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisReport;
use crate::config::PipelineConfig;
use crate::distill::TeacherSet;
use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::rng::derive_seed;
use crate::train::{
    evaluate_task, fit, grad_check, make_synthetic_dataset, GradCheckReport, SyntheticDataset,
    ToyModel, TrainLogRecord, TrainOptions,
};
use crate::upcycle::{capture_activations, upcycle_model, ActivationBank, InitMethod, UpcycleOutput};

/// Train and held-out splits sharing one set of cluster directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datasets {
    pub train: SyntheticDataset,
    pub eval: SyntheticDataset,
}

impl SyntheticDataset {
    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (SyntheticDataset, SyntheticDataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let part = |idx: &[usize]| SyntheticDataset {
            inputs: self.inputs.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            clusters: idx.iter().map(|&i| self.clusters[i]).collect(),
            ..self.clone()
        };
        (part(&head), part(&tail))
    }
}

pub fn make_datasets(cfg: &PipelineConfig) -> Result<Datasets> {
    let all = make_synthetic_dataset(
        cfg.model.d,
        cfg.model.n_classes,
        cfg.data.n_clusters,
        cfg.data.n_train + cfg.data.n_eval,
        cfg.data.separation,
        cfg.seed,
    )?;
    let (train, eval) = all.split(cfg.data.n_train);
    Ok(Datasets { train, eval })
}

pub type LogSink<'a> = &'a mut dyn FnMut(&TrainLogRecord) -> Result<()>;

pub fn train_dense(cfg: &PipelineConfig, data: &Datasets, log: LogSink<'_>) -> Result<ToyModel> {
    let m = &cfg.model;
    let mut model = ToyModel::new_dense(m.d, m.h, m.blocks, m.n_classes, cfg.seed);
    let t = &cfg.dense_train;
    let opts = TrainOptions {
        steps: t.steps,
        lr: t.lr,
        batch_size: t.batch_size,
        schedule: t.schedule,
        lambdas: cfg.lambdas(false),
        seed: derive_seed(cfg.seed, "dense-train", 0),
        log_every: t.log_every,
    };
    fit(&mut model, None, &data.train, &opts, log)?;
    Ok(model)
}

/// Calibration inputs: the first `n_samples` training columns.
pub fn calibration_inputs(cfg: &PipelineConfig, data: &Datasets) -> DenseMatrix {
    let n = cfg.calibration.n_samples.min(data.train.len());
    data.train.inputs.take_columns(n)
}

pub fn capture(cfg: &PipelineConfig, dense: &ToyModel, data: &Datasets) -> Result<ActivationBank> {
    capture_activations(
        dense,
        &calibration_inputs(cfg, data),
        &cfg.sites(),
        cfg.calibration.token_cap,
        cfg.seed,
    )
}

pub fn upcycle(
    cfg: &PipelineConfig,
    dense: &ToyModel,
    bank: Option<&ActivationBank>,
    method: InitMethod,
) -> Result<UpcycleOutput> {
    upcycle_model(
        dense,
        &cfg.sites(),
        bank,
        cfg.layout(),
        &cfg.upcycle_method(method),
        cfg.moe.router_scale,
        cfg.seed,
    )
}

/// Trains an upcycled model; returns the EMA teachers when `eesd` is set.
pub fn train_moe(
    cfg: &PipelineConfig,
    model: &mut ToyModel,
    teachers: Option<TeacherSet>,
    data: &Datasets,
    eesd: bool,
    log: LogSink<'_>,
) -> Result<Option<TeacherSet>> {
    model.set_capacity_factor(cfg.moe.capacity_train);
    let mut teachers = match (eesd, teachers) {
        (false, _) => None,
        (true, Some(t)) => Some(t),
        (true, None) => Some(model.teachers(cfg.moe_train.beta)?),
    };
    let t = &cfg.moe_train;
    let opts = TrainOptions {
        steps: t.steps,
        lr: t.lr,
        batch_size: t.batch_size,
        schedule: t.schedule,
        lambdas: cfg.lambdas(eesd),
        seed: derive_seed(cfg.seed, "moe-train", 0),
        log_every: t.log_every,
    };
    fit(model, teachers.as_mut(), &data.train, &opts, log)?;
    Ok(teachers)
}

/// Gradient check on the first `gradcheck.tokens` training samples.
pub fn gradcheck(
    cfg: &PipelineConfig,
    model: &ToyModel,
    teachers: Option<&TeacherSet>,
    data: &Datasets,
) -> Result<GradCheckReport> {
    let n = cfg.gradcheck.tokens.min(data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, labels) = data.train.batch(&idx);
    grad_check(
        model,
        teachers,
        &x,
        &labels,
        cfg.lambdas(teachers.is_some()),
        cfg.gradcheck.epsilon,
        cfg.seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub seed: u64,
    pub method: InitMethod,
    pub eesd: bool,
    pub init_eval_task_loss: f64,
    pub init_mean_similarity: f64,
    pub init_mean_routing_entropy: f64,
    pub final_train_loss: f64,
    pub final_eval_task_loss: f64,
    pub final_eval_accuracy: f64,
    pub final_mean_similarity: f64,
    pub final_mean_routing_entropy: f64,
    pub final_rc: Option<f64>,
    pub final_min_utilization: f64,
    pub final_max_utilization: f64,
    pub final_drop_rate: f64,
}

pub const COMPARE_CSV_HEADER: &str = "seed,method,eesd,init_eval_task_loss,init_mean_similarity,init_mean_routing_entropy,final_train_loss,final_eval_task_loss,final_eval_accuracy,final_mean_similarity,final_mean_routing_entropy,final_rc,final_min_utilization,final_max_utilization,final_drop_rate";

fn site_means(report: &AnalysisReport) -> (f64, f64, Option<f64>, f64, f64, f64) {
    let n = report.per_site.len().max(1) as f64;
    let sites = report.per_site.values();
    let sim = sites.clone().map(|s| s.mean_pairwise_similarity).sum::<f64>() / n;
    let ent = sites.clone().map(|s| s.mean_routing_entropy).sum::<f64>() / n;
    let rcs: Option<Vec<f64>> = sites.clone().map(|s| s.rc).collect();
    let rc = rcs.map(|v| v.iter().sum::<f64>() / n);
    let min = sites
        .clone()
        .flat_map(|s| s.utilization.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let max = sites
        .clone()
        .flat_map(|s| s.utilization.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let drop = sites.map(|s| s.drop_rate).sum::<f64>() / n;
    (sim, ent, rc, min, max, drop)
}

/// Eval-capacity copy of a model for analysis.
fn at_eval_capacity(cfg: &PipelineConfig, model: &ToyModel) -> ToyModel {
    let mut m = model.clone();
    m.set_capacity_factor(cfg.moe.capacity_eval);
    m
}

/// Upcycles one dense model with `method`, trains it and measures it.
pub fn run_method(
    cfg: &PipelineConfig,
    dense: &ToyModel,
    bank: &ActivationBank,
    data: &Datasets,
    method: InitMethod,
    eesd: bool,
) -> Result<CompareRow> {
    let mut model = upcycle(cfg, dense, Some(bank), method)?.model;
    let eval = &data.eval;
    let init_metrics = evaluate_task(&model, &eval.inputs, &eval.labels, cfg.moe.capacity_eval)?;
    let init = site_means(&AnalysisReport::for_model(&at_eval_capacity(cfg, &model), &eval.inputs)?);
    let mut last = None;
    train_moe(cfg, &mut model, None, data, eesd, &mut |r| {
        last = Some(r.clone());
        Ok(())
    })?;
    let fin = evaluate_task(&model, &eval.inputs, &eval.labels, cfg.moe.capacity_eval)?;
    let after = site_means(&AnalysisReport::for_model(&at_eval_capacity(cfg, &model), &eval.inputs)?);
    Ok(CompareRow {
        seed: cfg.seed,
        method,
        eesd,
        init_eval_task_loss: init_metrics.task_loss,
        init_mean_similarity: init.0,
        init_mean_routing_entropy: init.1,
        final_train_loss: last.map_or(f64::NAN, |r| r.loss_task),
        final_eval_task_loss: fin.task_loss,
        final_eval_accuracy: fin.accuracy,
        final_mean_similarity: after.0,
        final_mean_routing_entropy: after.1,
        final_rc: after.2,
        final_min_utilization: after.3,
        final_max_utilization: after.4,
        final_drop_rate: after.5,
    })
}

/// All four initializers on `n_seeds` consecutive seeds starting at
/// `cfg.seed`. Each seed trains one dense model shared by every method.
pub fn compare(cfg: &PipelineConfig, n_seeds: usize) -> Result<Vec<CompareRow>> {
    let mut jobs = Vec::new();
    for s in 0..n_seeds as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + s;
        jobs.push(c);
    }
    let per_seed = |c: &PipelineConfig| -> Result<Vec<CompareRow>> {
        let data = make_datasets(c)?;
        let dense = train_dense(c, &data, &mut |_| Ok(()))?;
        let bank = capture(c, &dense, &data)?;
        InitMethod::ALL
            .iter()
            .map(|&m| {
                let eesd = m == InitMethod::ClusterAware && c.compare.cluster_eesd;
                run_method(c, &dense, &bank, &data, m, eesd)
            })
            .collect()
    };
    let threads = cfg.threads.max(1);
    let mut rows = Vec::new();
    if threads == 1 {
        for c in &jobs {
            rows.extend(per_seed(c)?);
        }
    } else {
        for chunk in jobs.chunks(threads) {
            let results: Vec<Result<Vec<CompareRow>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk.iter().map(|c| scope.spawn(move || per_seed(c))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("compare worker panicked"))
                    .collect()
            });
            for r in results {
                rows.extend(r?);
            }
        }
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.method.cli_name(),
            r.eesd,
            r.init_eval_task_loss,
            r.init_mean_similarity,
            r.init_mean_routing_entropy,
            r.final_train_loss,
            r.final_eval_task_loss,
            r.final_eval_accuracy,
            r.final_mean_similarity,
            r.final_mean_routing_entropy,
            r.final_rc.map_or_else(String::new, |v| v.to_string()),
            r.final_min_utilization,
            r.final_max_utilization,
            r.final_drop_rate
        )
        .expect("write to string");
    }
    out
}
