//! Training loop, metric computation, the ablation harness, and the
//! preprocessing pipeline shared by training and evaluation.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{window_starts, Dataset, Normalizer, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::{build_spatial_graph, epsilon_from_knn_quantile, SpatialGraph, StationSet};
use crate::harmonics::{build_basis, HarmonicBasis};
use crate::model::{
    self, AblationFlags, ModelConfig, ModelParams, ModelPlan,
};
use crate::optim::Adam;
use crate::partition::{
    build_hierarchy, build_hierarchy_from_level1, random_balanced_partition, PartitionHierarchy,
};
use crate::tensor::{Real, Tensor};

/// Everything a run needs: model shape, partitioning, optimization and
/// data-handling knobs. One seed drives all randomness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    pub levels: usize,
    pub p0: usize,
    pub l_max: usize,
    pub t_in: usize,
    pub f_out: usize,
    pub heads: usize,
    pub d_max: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_windows: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub imbalance: f64,
    /// Graph threshold in km. Exactly one of this and `epsilon_quantile`
    /// must be set.
    pub epsilon_km: Option<f64>,
    /// Convenience alternative: the q-th quantile of k-nearest-neighbor
    /// distances (with `knn_k` neighbors) picks the threshold.
    pub epsilon_quantile: Option<f64>,
    pub knn_k: usize,
    pub split: SplitSpec,
    pub stride: usize,
    /// Cap on train windows visited per epoch (subsampled by the shuffle).
    pub windows_per_epoch: Option<usize>,
    /// Cap on validation windows per epoch (evenly spaced subsample).
    pub val_windows: Option<usize>,
    pub rms_norm: bool,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 32,
            levels: 2,
            p0: 32,
            l_max: 3,
            t_in: 48,
            f_out: 24,
            heads: 1,
            d_max: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_windows: 8,
            epochs: 24,
            patience: 10,
            seed: 0,
            imbalance: 0.03,
            epsilon_km: None,
            epsilon_quantile: Some(0.9),
            knn_k: 4,
            split: SplitSpec::default(),
            stride: 1,
            windows_per_epoch: Some(224),
            val_windows: Some(64),
            rms_norm: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.p0 == 0 || self.p0 > n {
            return Err(Error::invalid(format!("p0 = {} out of range for {} stations", self.p0, n)));
        }
        if self.levels == 0 {
            return Err(Error::invalid("levels must be >= 1"));
        }
        if self.levels > 1 && self.p0 % (1usize << (self.levels - 1)) != 0 {
            return Err(Error::invalid(format!(
                "p0 = {} not divisible by 2^{}",
                self.p0,
                self.levels - 1
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid("dim must be divisible by heads"));
        }
        if self.dim <= (self.l_max + 1) * (self.l_max + 1) {
            return Err(Error::invalid(format!(
                "dim = {} must exceed the {} location features",
                self.dim,
                (self.l_max + 1) * (self.l_max + 1)
            )));
        }
        match (self.epsilon_km, self.epsilon_quantile) {
            (Some(e), None) if e >= 0.0 => {}
            (None, Some(q)) if (0.0..=1.0).contains(&q) => {}
            _ => {
                return Err(Error::invalid(
                    "exactly one of epsilon_km (>= 0) and epsilon_quantile (in [0,1]) must be set",
                ))
            }
        }
        if self.lr <= 0.0 || self.batch_windows == 0 || self.stride == 0 || self.epochs == 0 {
            return Err(Error::invalid("lr, batch_windows, stride and epochs must be positive"));
        }
        self.split.validate()
    }

    pub fn model_config(&self, n: usize, c: usize) -> ModelConfig {
        ModelConfig {
            n,
            c,
            t_in: self.t_in,
            f_out: self.f_out,
            dim: self.dim,
            levels: self.levels,
            l_max: self.l_max,
            heads: self.heads,
            d_max: self.d_max,
            rms_norm: self.rms_norm,
            ablation: self.ablation,
        }
    }
}

/// Spatial preprocessing products shared by train, eval and export.
pub struct Preprocessed {
    pub epsilon_km: f64,
    pub graph: SpatialGraph,
    pub hierarchy: PartitionHierarchy,
    pub basis: HarmonicBasis,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessTimings {
    pub epsilon_ms: u128,
    pub graph_ms: u128,
    pub hierarchy_ms: u128,
    pub basis_ms: u128,
    pub total_ms: u128,
}

/// Threshold resolution, graph build, hierarchy (partitions, layouts, hop
/// tables) and the harmonic basis, with per-stage wall times.
pub fn preprocess(stations: &StationSet, cfg: &TrainConfig) -> Result<(Preprocessed, PreprocessTimings)> {
    cfg.validate(stations.len())?;
    let t0 = std::time::Instant::now();
    let epsilon_km = match (cfg.epsilon_km, cfg.epsilon_quantile) {
        (Some(e), _) => e,
        (None, Some(q)) => epsilon_from_knn_quantile(stations, cfg.knn_k.min(stations.len() - 1), q)?,
        _ => unreachable!("validated"),
    };
    let t1 = std::time::Instant::now();
    let graph = build_spatial_graph(stations, epsilon_km)?;
    let t2 = std::time::Instant::now();
    let hierarchy = if cfg.ablation.no_partitioner {
        let level1 = random_balanced_partition(graph.n(), cfg.p0, cfg.seed)?;
        build_hierarchy_from_level1(&graph, level1, cfg.levels, cfg.imbalance)?
    } else {
        build_hierarchy(&graph, cfg.p0, cfg.levels, cfg.imbalance, cfg.seed)?
    };
    let t3 = std::time::Instant::now();
    let basis = build_basis(stations, cfg.l_max)?;
    let t4 = std::time::Instant::now();
    Ok((
        Preprocessed { epsilon_km, graph, hierarchy, basis },
        PreprocessTimings {
            epsilon_ms: (t1 - t0).as_millis(),
            graph_ms: (t2 - t1).as_millis(),
            hierarchy_ms: (t3 - t2).as_millis(),
            basis_ms: (t4 - t3).as_millis(),
            total_ms: (t4 - t0).as_millis(),
        },
    ))
}

/// Metrics on inverse-normalized values, plus training traces.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub channels: Vec<String>,
    /// Per-channel MAE/MSE in original units.
    pub mae: Vec<f64>,
    pub mse: Vec<f64>,
    pub overall_mae: f64,
    pub overall_mse: f64,
    /// Repeat-last-frame reference computed alongside.
    pub persistence_mae: Vec<f64>,
    pub persistence_mse: Vec<f64>,
    pub overall_persistence_mae: f64,
    pub windows_evaluated: usize,
    pub train_loss_curve: Vec<f64>,
    pub val_mae_curve: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub diverged: bool,
    pub score_entries_per_forward: u64,
    pub trainable_params: usize,
    /// FNV-1a hash of the window order seen during training; equal digests
    /// mean identical data order.
    pub data_order_digest: u64,
}

fn fnv1a(digest: &mut u64, value: u64) {
    const PRIME: u64 = 0x100000001b3;
    for byte in value.to_le_bytes() {
        *digest ^= byte as u64;
        *digest = digest.wrapping_mul(PRIME);
    }
}

/// Accumulates per-channel absolute and squared errors in original units.
struct ErrorAccum {
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

impl ErrorAccum {
    fn new(c: usize) -> Self {
        ErrorAccum { abs: vec![0.0; c], sq: vec![0.0; c], count: 0 }
    }

    fn add(&mut self, normalizer: &Normalizer, pred: &Tensor, target: &Tensor) {
        let c = self.abs.len();
        for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
            let ch = i % c;
            let err = normalizer.invert_value(ch, p) - normalizer.invert_value(ch, t);
            self.abs[ch] += err.abs();
            self.sq[ch] += err * err;
        }
        self.count += pred.numel() / c;
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let n = self.count.max(1) as f64;
        let mae: Vec<f64> = self.abs.iter().map(|a| a / n).collect();
        let mse: Vec<f64> = self.sq.iter().map(|s| s / n).collect();
        let c = mae.len() as f64;
        let overall_mae = mae.iter().sum::<f64>() / c;
        let overall_mse = mse.iter().sum::<f64>() / c;
        (mae, mse, overall_mae, overall_mse)
    }
}

/// Evaluation products for one split.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub mae: Vec<f64>,
    pub mse: Vec<f64>,
    pub overall_mae: f64,
    pub overall_mse: f64,
    pub persistence_mae: Vec<f64>,
    pub persistence_mse: Vec<f64>,
    pub overall_persistence_mae: f64,
    pub windows: usize,
}

/// Repeat-last-input-frame prediction for one window.
fn persistence_prediction(input: &Tensor, f_out: usize) -> Tensor {
    let (n, t_in, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    Tensor::from_fn(vec![n, f_out, c], |i| {
        let ch = i % c;
        let station = i / (f_out * c);
        input.data()[(station * t_in + (t_in - 1)) * c + ch]
    })
}

/// Metrics over every window of `range` (subject to `stride`), computed on
/// inverse-normalized values, with the persistence reference alongside.
pub fn evaluate(
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    normalized: &Dataset,
    normalizer: &Normalizer,
    range: (usize, usize),
    stride: usize,
) -> Result<EvalMetrics> {
    let cfg = &params.config;
    let starts = window_starts(range, cfg.t_in, cfg.f_out, stride)?;
    let mut acc = ErrorAccum::new(cfg.c);
    let mut pacc = ErrorAccum::new(cfg.c);
    for &s in &starts {
        let batch = normalized.window(s, cfg.t_in, cfg.f_out)?;
        let pred = model::predict(params, plan, basis, &batch.input)?;
        acc.add(normalizer, &pred, &batch.target);
        let persist = persistence_prediction(&batch.input, cfg.f_out);
        pacc.add(normalizer, &persist, &batch.target);
    }
    let (mae, mse, overall_mae, overall_mse) = acc.finish();
    let (persistence_mae, persistence_mse, overall_persistence_mae, _) = pacc.finish();
    Ok(EvalMetrics {
        mae,
        mse,
        overall_mae,
        overall_mse,
        persistence_mae,
        persistence_mse,
        overall_persistence_mae,
        windows: starts.len(),
    })
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub report: MetricsReport,
    pub normalizer: Normalizer,
    pub preprocessed: Preprocessed,
}

/// Mean z-scored MAE over a window subset; the early-stopping signal.
fn validation_mae(
    params: &ModelParams,
    plan: &ModelPlan,
    basis: &HarmonicBasis,
    normalized: &Dataset,
    starts: &[usize],
) -> Result<f64> {
    let cfg = &params.config;
    let mut total = 0.0f64;
    for &s in starts {
        let batch = normalized.window(s, cfg.t_in, cfg.f_out)?;
        let pred = model::predict(params, plan, basis, &batch.input)?;
        total += model::mae_loss(&pred, &batch.target)? as f64;
    }
    Ok(total / starts.len().max(1) as f64)
}

/// Evenly spaced subsample of the window starts, keeping endpoints.
fn subsample(starts: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap > 0 && starts.len() > cap => {
            (0..cap).map(|i| starts[i * (starts.len() - 1) / (cap - 1).max(1)]).collect()
        }
        _ => starts.to_vec(),
    }
}

/// Train with Adam on the mean-absolute-error objective, early-stopping on
/// validation MAE, and return the best-on-validation parameters with test
/// metrics. Deterministic for a fixed (config, dataset, seed).
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    cfg.validate(dataset.n())?;
    let (pre, _timings) = preprocess(&dataset.stations, cfg)?;
    let model_cfg = cfg.model_config(dataset.n(), dataset.c());
    let plan = ModelPlan::new(&model_cfg, &pre.hierarchy)?;
    let mut params = ModelParams::init(model_cfg.clone(), cfg.seed)?;

    let train_range = cfg.split.range(dataset.t_total, Split::Train);
    let val_range = cfg.split.range(dataset.t_total, Split::Val);
    let test_range = cfg.split.range(dataset.t_total, Split::Test);
    let normalizer = Normalizer::fit(dataset, train_range)?;
    let normalized = normalizer.apply_dataset(dataset)?;

    let train_starts_all = window_starts(train_range, cfg.t_in, cfg.f_out, cfg.stride)?;
    let val_starts_all = window_starts(val_range, cfg.t_in, cfg.f_out, cfg.stride)?;
    let val_starts = subsample(&val_starts_all, cfg.val_windows);

    let mut opt = Adam::new(cfg.lr as Real, cfg.beta1 as Real, cfg.beta2 as Real, 1e-8);
    // Data order comes from its own stream so every ablation variant sees
    // the identical shuffle regardless of model wiring.
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut bad_epochs = 0usize;
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut diverged = false;
    let mut digest: u64 = 0xcbf2_9ce4_8422_2325;
    let mut score_entries = 0u64;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order = train_starts_all.clone();
        order.shuffle(&mut data_rng);
        if let Some(cap) = cfg.windows_per_epoch {
            order.truncate(cap.max(cfg.batch_windows));
        }
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_windows) {
            params.zero_grads();
            let mut ok = true;
            for &s in chunk {
                fnv1a(&mut digest, s as u64);
                let batch = normalized.window(s, cfg.t_in, cfg.f_out)?;
                match model::batch_loss(&params, &plan, &pre.basis, &batch) {
                    Ok((mut tape, loss, value)) => {
                        score_entries = tape.score_entries();
                        epoch_loss += value as f64;
                        seen += 1;
                        let grads = tape.backward(loss, 1.0 / chunk.len() as Real)?;
                        grads.accumulate_into(&mut params.params_mut())?;
                    }
                    Err(e) if e.is_numerical() => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !ok {
                diverged = true;
                break 'epochs;
            }
            opt.step(&mut params.params_mut())?;
        }
        train_curve.push(epoch_loss / seen.max(1) as f64);

        let val = match validation_mae(&params, &plan, &pre.basis, &normalized, &val_starts) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                diverged = true;
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        val_curve.push(val);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    let test = evaluate(&best_params, &plan, &pre.basis, &normalized, &normalizer, test_range, cfg.stride)?;
    let epochs_run = val_curve.len();
    let report = MetricsReport {
        channels: dataset.channels.clone(),
        mae: test.mae,
        mse: test.mse,
        overall_mae: test.overall_mae,
        overall_mse: test.overall_mse,
        persistence_mae: test.persistence_mae,
        persistence_mse: test.persistence_mse,
        overall_persistence_mae: test.overall_persistence_mae,
        windows_evaluated: test.windows,
        train_loss_curve: train_curve,
        val_mae_curve: val_curve,
        best_epoch,
        epochs_run,
        diverged,
        score_entries_per_forward: score_entries,
        trainable_params: best_params.trainable_param_count(),
        data_order_digest: digest,
    };
    Ok(TrainOutput { params: best_params, report, normalizer, preprocessed: pre })
}

/// One named ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPartitioner,
    NoSh,
    NoIntraAtt,
    NoInterAtt,
    NoSpatialBias,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoPartitioner,
        Variant::NoSh,
        Variant::NoIntraAtt,
        Variant::NoInterAtt,
        Variant::NoSpatialBias,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPartitioner => "wo_partitioner",
            Variant::NoSh => "wo_sh",
            Variant::NoIntraAtt => "wo_intra_att",
            Variant::NoInterAtt => "wo_inter_att",
            Variant::NoSpatialBias => "wo_spatial_bias",
        }
    }

    pub fn flags(&self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::NoPartitioner => f.no_partitioner = true,
            Variant::NoSh => f.no_sh = true,
            Variant::NoIntraAtt => f.no_intra = true,
            Variant::NoInterAtt => f.no_inter = true,
            Variant::NoSpatialBias => f.no_spatial_bias = true,
        }
        f
    }
}

/// Train every variant under identical seed and data order.
pub fn run_ablations(cfg: &TrainConfig, dataset: &Dataset) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    let mut digest = None;
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.ablation = variant.flags();
        let out = train(&vcfg, dataset)?;
        match digest {
            None => digest = Some(out.report.data_order_digest),
            Some(d) => {
                if d != out.report.data_order_digest {
                    return Err(Error::invalid("ablation variants saw different data orders"));
                }
            }
        }
        rows.push((variant.name().to_string(), out.report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthConfig};

    fn tiny_dataset(n: usize, steps: usize, seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            n_stations: n,
            steps,
            seed,
            length_scale_km: 1200.0,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 16,
            levels: 2,
            p0: 4,
            l_max: 1,
            t_in: 12,
            f_out: 4,
            epochs: 3,
            patience: 2,
            batch_windows: 4,
            windows_per_epoch: Some(12),
            val_windows: Some(6),
            epsilon_km: None,
            epsilon_quantile: Some(0.9),
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_combos() {
        let ok = tiny_config();
        assert!(ok.validate(24).is_ok());
        assert!(TrainConfig { p0: 100, ..ok.clone() }.validate(24).is_err());
        assert!(TrainConfig { p0: 6, levels: 3, ..ok.clone() }.validate(24).is_err());
        assert!(TrainConfig { dim: 4, l_max: 3, ..ok.clone() }.validate(24).is_err());
        assert!(TrainConfig { epsilon_km: Some(1.0), ..ok.clone() }.validate(24).is_err());
        assert!(TrainConfig { epsilon_km: None, epsilon_quantile: None, ..ok.clone() }
            .validate(24)
            .is_err());
        assert!(TrainConfig { heads: 3, ..ok }.validate(24).is_err());
    }

    #[test]
    fn one_batch_memorization() {
        // A single batch trained for 500 steps must be memorized to well
        // under 0.05 mean absolute error in z-scored units.
        let ds = tiny_dataset(12, 40, 2);
        let cfg = TrainConfig { t_in: 8, f_out: 2, lr: 3e-3, ..tiny_config() };
        let (pre, _) = preprocess(&ds.stations, &cfg).unwrap();
        let model_cfg = cfg.model_config(ds.n(), ds.c());
        let plan = ModelPlan::new(&model_cfg, &pre.hierarchy).unwrap();
        let mut params = ModelParams::init(model_cfg, cfg.seed).unwrap();
        let normalizer = Normalizer::fit(&ds, (0, 32)).unwrap();
        let normalized = normalizer.apply_dataset(&ds).unwrap();
        let batch = normalized.window(0, 8, 2).unwrap();

        let mut opt = Adam::new(cfg.lr as Real, 0.9, 0.999, 1e-8);
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            params.zero_grads();
            let (mut tape, loss, value) =
                model::batch_loss(&params, &plan, &pre.basis, &batch).unwrap();
            let grads = tape.backward(loss, 1.0).unwrap();
            grads.accumulate_into(&mut params.params_mut()).unwrap();
            opt.step(&mut params.params_mut()).unwrap();
            last = value as f64;
        }
        assert!(last < 0.05, "train MAE after 500 steps: {}", last);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = tiny_dataset(16, 200, 3);
        let cfg = tiny_config();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.report, b.report);
        for (x, y) in a.params.params().iter().zip(b.params.params()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.report.val_mae_curve, b.report.val_mae_curve);
    }

    #[test]
    fn early_stopping_returns_best_on_validation() {
        let ds = tiny_dataset(16, 240, 5);
        let cfg = TrainConfig { epochs: 6, patience: 2, ..tiny_config() };
        let out = train(&cfg, &ds).unwrap();
        let curve = &out.report.val_mae_curve;
        let best = curve.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(curve[out.report.best_epoch], best);
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let ds = tiny_dataset(8, 60, 7);
        let normalizer = Normalizer::fit(&ds, (0, 48)).unwrap();
        let normalized = normalizer.apply_dataset(&ds).unwrap();
        let batch = normalized.window(0, 8, 4).unwrap();
        let mut acc = ErrorAccum::new(1);
        acc.add(&normalizer, &batch.target, &batch.target);
        let (mae, mse, omae, omse) = acc.finish();
        assert_eq!(mae, vec![0.0]);
        assert_eq!(mse, vec![0.0]);
        assert_eq!((omae, omse), (0.0, 0.0));
    }

    #[test]
    fn constant_predictor_matches_direct_computation() {
        let ds = tiny_dataset(8, 60, 9);
        let normalizer = Normalizer::fit(&ds, (0, 48)).unwrap();
        let normalized = normalizer.apply_dataset(&ds).unwrap();
        let batch = normalized.window(3, 8, 4).unwrap();
        let constant = 0.25 as Real;
        let pred = Tensor::full(vec![8, 4, 1], constant);
        let mut acc = ErrorAccum::new(1);
        acc.add(&normalizer, &pred, &batch.target);
        let (mae, mse, _, _) = acc.finish();
        // direct oracle in original units
        let mut abs = 0.0f64;
        let mut sq = 0.0f64;
        for &t in batch.target.data() {
            let err = normalizer.invert_value(0, constant) - normalizer.invert_value(0, t);
            abs += err.abs();
            sq += err * err;
        }
        let count = batch.target.numel() as f64;
        assert!((mae[0] - abs / count).abs() < 1e-12);
        assert!((mse[0] - sq / count).abs() < 1e-12);
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let input = Tensor::from_fn(vec![3, 4, 2], |i| i as Real);
        let p = persistence_prediction(&input, 3);
        assert_eq!(p.shape(), &[3, 3, 2]);
        for station in 0..3 {
            for f in 0..3 {
                for ch in 0..2 {
                    let want = input.data()[(station * 4 + 3) * 2 + ch];
                    assert_eq!(p.data()[(station * 3 + f) * 2 + ch], want);
                }
            }
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let ds = tiny_dataset(12, 200, 11);
        let cfg = TrainConfig { lr: 1e12, epochs: 4, ..tiny_config() };
        let out = train(&cfg, &ds).unwrap();
        assert!(out.report.diverged);
        assert!(out.params.params().iter().all(|p| p.value.is_finite()));
    }

    #[test]
    fn ablation_harness_rows_and_audits() {
        let ds = tiny_dataset(16, 200, 13);
        let cfg = TrainConfig { epochs: 1, windows_per_epoch: Some(4), ..tiny_config() };
        let rows = run_ablations(&cfg, &ds).unwrap();
        assert_eq!(rows.len(), 6);
        let digest = rows[0].1.data_order_digest;
        let full_trainable = rows[0].1.trainable_params;
        for (name, report) in &rows {
            assert_eq!(report.data_order_digest, digest, "{}", name);
            assert!(report.overall_mae >= 0.0 && report.overall_mse >= 0.0);
            match name.as_str() {
                "wo_spatial_bias" => {
                    // frozen tables are exactly the parameter-count difference
                    assert_eq!(full_trainable - report.trainable_params, 2 * (cfg.d_max + 2));
                }
                _ => assert_eq!(report.trainable_params, full_trainable, "{}", name),
            }
        }
    }

    #[test]
    fn preprocess_reports_stage_timings() {
        let ds = tiny_dataset(16, 60, 15);
        let cfg = tiny_config();
        let (pre, timings) = preprocess(&ds.stations, &cfg).unwrap();
        assert!(pre.epsilon_km > 0.0);
        assert_eq!(pre.hierarchy.depth(), cfg.levels);
        assert!(timings.total_ms >= timings.graph_ms);
    }
}
