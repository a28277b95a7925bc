//! Optimisation, evaluation and reporting: Adam with decoupled weight decay, the
//! minibatch training loop, confusion matrices with OA/AA/kappa, and the end-to-end
//! experiment pipeline used by the command-line front end.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{
    apply_descriptor, compute_band_stats, make_split, normalize, DatasetDescriptor, HsiCube, LabelRaster, SplitSpec,
};
use crate::models::{ModelSpec, TpoNet, Variant};
use crate::nn::{cross_entropy_labels, Mode};
use crate::sampler::{build_dataset, epoch_order, SamplerConfig, TpoDataset, TpoExtractor};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar};

/// Independent seed for one purpose (`stream`) derived from a run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `θ ← θ − η·λ·θ` alongside the adaptive step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros = |id: &ParamId| vec![T::zero(); store.value(*id).len()];
        Self {
            cfg,
            t: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }
}

/// One Adam update from the gradients held in `store`. A non-finite gradient aborts
/// before any parameter changes.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    for &id in &state.ids {
        if !store.grad(id).all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {}",
                store.entry(id).name
            )));
        }
    }
    state.t += 1;
    let c = state.cfg;
    let f = T::from_f64_lossy;
    let (b1, b2) = (f(c.beta1), f(c.beta2));
    let bc1 = f(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = f(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps, wd) = (f(c.lr), f(c.eps), f(c.weight_decay));
    for (k, &id) in state.ids.iter().enumerate() {
        let grad = store.grad(id).data().to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.value_mut(id).data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(())
}

/// Stop when the mean epoch loss improved by less than `min_delta` over `window` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub window: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            window: 20,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            adam: AdamConfig::default(),
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config(
                "Adam eps must be positive and weight decay non-negative".into(),
            ));
        }
        if self.early_stop.is_some_and(|e| e.window == 0) {
            return Err(Error::Config("early-stop window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Mean per-sample loss of every optimiser step.
    pub loss_trace: Vec<f64>,
    /// Mean per-sample loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Batches for one epoch. A trailing single-sample batch is folded into the previous
/// one, since batch statistics of one sample are degenerate.
fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let order = epoch_order(len, Some(seed), epoch);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Minibatch training with train-mode batch norm and the summed cross-entropy loss.
///
/// On a non-finite loss or gradient the parameters of the last good step are restored
/// and a numerical error is returned.
pub fn train(
    net: &TpoNet,
    store: &mut ParamStore<f32>,
    data: &TpoDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = AdamState::new(store, cfg.adam);
    let mut last_good = store.clone();
    let mut out = TrainOutcome {
        loss_trace: Vec::new(),
        epoch_losses: Vec::new(),
        steps: 0,
        stopped_early: false,
    };
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(data.len(), cfg.batch_size, seed, epoch as u64) {
            let batch = data.batch(&idx)?;
            let mut g = Graph::new();
            let x = g.constant(batch.inputs);
            let z = net.logits(&mut g, store, x, Mode::Train)?;
            let loss = cross_entropy_labels(&mut g, z, &batch.labels)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                *store = last_good;
                return Err(Error::Numerical(format!(
                    "loss became {value} at epoch {epoch}, step {}",
                    out.steps
                )));
            }
            g.backward(loss)?;
            store.zero_grads();
            g.accumulate_param_grads(store);
            let stats = g.take_stat_updates();
            if let Err(e) = adam_step(store, &mut adam) {
                *store = last_good;
                return Err(e.context(format!("epoch {epoch}, step {}", out.steps)));
            }
            store.apply_stat_updates(stats);
            store.zero_grads();
            last_good.clone_from(store);
            out.steps += 1;
            out.loss_trace.push(value / idx.len() as f64);
            total += value;
        }
        out.epoch_losses.push(total / data.len() as f64);
        if let Some(es) = cfg.early_stop {
            let e = out.epoch_losses.len();
            if e > es.window && out.epoch_losses[e - 1 - es.window] - out.epoch_losses[e - 1] < es.min_delta {
                out.stopped_early = true;
                break;
            }
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class predictions (zero-based) for `targets`, in order. Work is split
/// into contiguous shards over at most `threads` workers; results do not depend on it.
pub fn predict(
    net: &TpoNet,
    store: &ParamStore<f32>,
    extractor: &TpoExtractor,
    targets: &[(usize, usize)],
    batch_size: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let run = |chunk: &[(usize, usize)]| -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(chunk.len());
        for b in chunk.chunks(batch_size) {
            let mut g = Graph::new();
            let x = g.constant(extractor.stack(b)?);
            let z = net.logits(&mut g, store, x, Mode::Eval)?;
            let classes = net.spec.classes;
            preds.extend(g.value(z).data().chunks(classes).map(argmax));
        }
        Ok(preds)
    };
    let threads = threads.max(1).min(targets.len().div_ceil(batch_size).max(1));
    if threads == 1 {
        return run(targets);
    }
    let shard = targets.len().div_ceil(threads);
    let results: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = targets.chunks(shard).map(|c| s.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(targets.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn evaluate(
    net: &TpoNet,
    store: &ParamStore<f32>,
    data: &TpoDataset,
    batch_size: usize,
    threads: usize,
) -> Result<ConfusionMatrix> {
    let targets: Vec<(usize, usize)> = data.pixels().iter().map(|p| (p.row, p.col)).collect();
    let preds = predict(net, store, data.extractor(), &targets, batch_size, threads)?;
    let mut cm = ConfusionMatrix::new(net.spec.classes);
    for (p, &pred) in data.pixels().iter().zip(&preds) {
        cm.add(p.class as usize - 1, pred)?;
    }
    Ok(cm)
}

/// Counts indexed `[true][predicted]` over zero-based classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Index(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::UndefinedMetric("confusion matrix is empty".into())),
            n => Ok(n as f64),
        }
    }

    /// 100 · trace / total.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok(100.0 * self.trace() as f64 / n)
    }

    /// Recall of every class in percent; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| match self.row_sum(i) {
                0 => None,
                n => Some(100.0 * self.get(i, i) as f64 / n as f64),
            })
            .collect()
    }

    /// Mean per-class recall in percent.
    pub fn average_accuracy(&self) -> Result<f64> {
        if self.classes == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let mut sum = 0.0;
        for (i, acc) in self.per_class_accuracy().into_iter().enumerate() {
            sum += acc.ok_or_else(|| Error::UndefinedMetric(format!("class {} has no samples", i + 1)))?;
        }
        Ok(sum / self.classes as f64)
    }

    /// Cohen's kappa `(p_o − p_e)/(1 − p_e)`.
    pub fn kappa(&self) -> Result<f64> {
        let n = self.nonempty()?;
        let po = self.trace() as f64 / n;
        let pe = (0..self.classes)
            .map(|c| self.row_sum(c) as f64 * self.col_sum(c) as f64)
            .sum::<f64>()
            / (n * n);
        if pe == 1.0 {
            return Err(Error::UndefinedMetric("chance agreement is 1, kappa undefined".into()));
        }
        Ok((po - pe) / (1.0 - pe))
    }

    /// Rows are true classes, columns predictions; ids are 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 1..=self.classes {
            write!(s, ",{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.classes {
            write!(s, "{}", i + 1).unwrap();
            for j in 0..self.classes {
                write!(s, ",{}", self.get(i, j)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`ConfusionMatrix::to_csv`] output; blank lines and `#` comments are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        lines.next();
        for (n, line) in lines {
            let row = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("confusion CSV line {}: {e}", n + 1)))?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Metrics and provenance of one train/evaluate run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub dataset: String,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub class_names: Vec<String>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub steps: usize,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
    pub train_accuracy: f64,
    pub loss_trace: Vec<f64>,
    /// Kept out of [`RunReport::to_text`] so that reports of identical runs are byte-identical.
    pub wall_clock_secs: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

impl RunReport {
    /// Line-oriented `key=value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("dataset", self.dataset.clone());
        kv("variant", self.variant.to_string());
        kv("seed", self.seed.to_string());
        kv("config_hash", self.config_hash.clone());
        kv("train_samples", self.train_samples.to_string());
        kv("test_samples", self.test_samples.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps", self.steps.to_string());
        kv("oa", self.overall_accuracy.to_string());
        kv("aa", self.average_accuracy.to_string());
        kv("kappa", self.kappa.to_string());
        kv("train_oa", self.train_accuracy.to_string());
        for (i, acc) in self.per_class_accuracy.iter().enumerate() {
            let name = self.class_names.get(i).cloned().unwrap_or_default();
            kv(&format!("class.{}", i + 1), format!("{}\t{name}", fmt_opt(*acc)));
        }
        let trace: Vec<String> = self.loss_trace.iter().map(f64::to_string).collect();
        kv("loss_trace", trace.join(","));
        s
    }

    pub fn timing_text(&self) -> String {
        format!(
            "config_hash={}\nwall_clock_secs={:.3}\n",
            self.config_hash, self.wall_clock_secs
        )
    }

    /// Step losses as CSV.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            writeln!(s, "{i},{l}").unwrap();
        }
        s
    }

    /// Reads back the metric lines of [`RunReport::to_text`] as `(key, value)` pairs.
    pub fn parse_text(text: &str) -> Vec<(String, String)> {
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

/// Cube and labels after descriptor filtering and per-band standardisation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub cube: HsiCube,
    pub labels: LabelRaster,
    pub descriptor: DatasetDescriptor,
    /// Names of the surviving classes, indexed by new id − 1.
    pub class_names: Vec<String>,
}

impl PreparedData {
    pub fn prepare(cube: &HsiCube, labels: &LabelRaster, descriptor: DatasetDescriptor) -> Result<Self> {
        let (reduced, relabeled) = apply_descriptor(cube, labels, &descriptor)?;
        let cube = normalize(&reduced, &compute_band_stats(&reduced))?;
        if relabeled.max_label() == 0 {
            return Err(Error::Data("no labeled pixels survive the descriptor".into()));
        }
        let mut names = vec![String::new(); relabeled.max_label() as usize];
        for (&old, &new) in labels.labels().iter().zip(relabeled.labels()) {
            if new != 0 {
                names[new as usize - 1] = descriptor
                    .class_names
                    .get(old as usize - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class_{old}"));
            }
        }
        Ok(Self {
            cube,
            labels: relabeled,
            descriptor,
            class_names: names,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Network hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub variant: Variant,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    #[serde(default = "default_branch_channels")]
    pub branch_channels: usize,
}

fn default_branch_channels() -> usize {
    32
}

impl ModelSettings {
    pub fn spec(&self, bands: usize, classes: usize, sampler: &SamplerConfig) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            p: self.p,
            q: self.q,
            r: self.r,
            input_bands: bands,
            patch_size: sampler.patch_size,
            views: sampler.views.count(),
            branch_channels: self.branch_channels,
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub model: ModelSettings,
    pub sampler: SamplerConfig,
    pub samples_per_class: usize,
    pub train: TrainConfig,
    pub eval_batch: usize,
    pub threads: usize,
}

/// Everything a run produces.
pub struct RunOutput {
    pub net: TpoNet,
    pub store: ParamStore<f32>,
    pub split: SplitSpec,
    pub confusion: ConfusionMatrix,
    pub report: RunReport,
}

/// Split, train and evaluate once. The split, initialisation and shuffling draw
/// independent sub-seeds of `seed`.
pub fn run_experiment(data: &PreparedData, exp: &Experiment, seed: u64, config_hash: &str) -> Result<RunOutput> {
    let split = make_split(&data.labels, exp.samples_per_class, sub_seed(seed, 1))?;
    run_experiment_with_split(data, exp, split, seed, config_hash)
}

/// [`run_experiment`] on a given split; `exp.samples_per_class` is not consulted.
pub fn run_experiment_with_split(
    data: &PreparedData,
    exp: &Experiment,
    split: SplitSpec,
    seed: u64,
    config_hash: &str,
) -> Result<RunOutput> {
    let start = Instant::now();
    split.validate(&data.labels)?;
    let spec = exp.model.spec(data.cube.bands(), data.classes(), &exp.sampler);
    let extractor = Arc::new(TpoExtractor::new(&data.cube, exp.sampler)?);
    let train_ds = build_dataset(extractor.clone(), &data.labels, &split.train)?;
    let test_ds = build_dataset(extractor, &data.labels, &split.test)?;
    let (net, mut store) = TpoNet::build::<f32>(spec, sub_seed(seed, 2))?;
    let outcome = train(&net, &mut store, &train_ds, &exp.train, sub_seed(seed, 3))?;
    let confusion = evaluate(&net, &store, &test_ds, exp.eval_batch, exp.threads)?;
    let train_cm = evaluate(&net, &store, &train_ds, exp.eval_batch, exp.threads)?;
    let report = RunReport {
        dataset: data.descriptor.name.clone(),
        variant: exp.model.variant,
        seed,
        config_hash: config_hash.to_string(),
        class_names: data.class_names.clone(),
        train_samples: train_ds.len(),
        test_samples: test_ds.len(),
        epochs: outcome.epoch_losses.len(),
        steps: outcome.steps,
        per_class_accuracy: confusion.per_class_accuracy(),
        overall_accuracy: confusion.overall_accuracy()?,
        average_accuracy: confusion.average_accuracy()?,
        kappa: confusion.kappa()?,
        train_accuracy: train_cm.overall_accuracy()?,
        loss_trace: outcome.loss_trace,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        net,
        store,
        split,
        confusion,
        report,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    pub reports: Vec<RunReport>,
    pub oa: (f64, f64),
    pub aa: (f64, f64),
    pub kappa: (f64, f64),
}

impl RepeatSummary {
    pub fn from_reports(reports: Vec<RunReport>) -> Self {
        let col = |f: fn(&RunReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            oa: col(|r| r.overall_accuracy),
            aa: col(|r| r.average_accuracy),
            kappa: col(|r| r.kappa),
            reports,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "runs={}", self.reports.len()).unwrap();
        for (name, (m, sd)) in [("oa", self.oa), ("aa", self.aa), ("kappa", self.kappa)] {
            writeln!(s, "{name}_mean={m}\n{name}_std={sd}").unwrap();
        }
        for r in &self.reports {
            writeln!(
                s,
                "run.{}={},{},{}",
                r.seed, r.overall_accuracy, r.average_accuracy, r.kappa
            )
            .unwrap();
        }
        s
    }
}

/// `runs` independent runs with seeds `seed, seed+1, …`, each with its own split.
pub fn repeat_experiment(
    data: &PreparedData,
    exp: &Experiment,
    seed: u64,
    runs: usize,
    config_hash: &str,
) -> Result<RepeatSummary> {
    if runs < 2 {
        return Err(Error::Config(format!(
            "repeated experiments need at least 2 runs, got {runs}"
        )));
    }
    let mut reports = Vec::with_capacity(runs);
    for i in 0..runs {
        let out = run_experiment(data, exp, seed + i as u64, config_hash).map_err(|e| e.context(format!("run {i}")))?;
        reports.push(out.report);
    }
    Ok(RepeatSummary::from_reports(reports))
}

/// Zero-based predictions for every pixel of the scene, row-major.
pub fn classify_scene(
    net: &TpoNet,
    store: &ParamStore<f32>,
    extractor: &TpoExtractor,
    batch_size: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    let targets: Vec<(usize, usize)> = (0..extractor.height())
        .flat_map(|r| (0..extractor.width()).map(move |c| (r, c)))
        .collect();
    predict(net, store, extractor, &targets, batch_size, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::generate_synthetic_cube;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn metric_hand_values() {
        let d = cm(&[&[5, 0], &[0, 5]]);
        assert!(close(d.overall_accuracy().unwrap(), 100.0));
        assert!(close(d.kappa().unwrap(), 1.0));
        let s = cm(&[&[3, 1], &[1, 3]]);
        assert!(close(s.overall_accuracy().unwrap(), 75.0));
        assert!(close(s.average_accuracy().unwrap(), 75.0));
        assert!(close(cm(&[&[9, 1], &[0, 10]]).average_accuracy().unwrap(), 95.0));
        assert!(close(cm(&[&[1, 1], &[1, 1]]).kappa().unwrap(), 0.0));
        assert!(close(cm(&[&[20, 5], &[10, 15]]).kappa().unwrap(), 0.4));
        assert!(close(cm(&[&[7, 0, 0], &[0, 2, 0], &[0, 0, 11]]).kappa().unwrap(), 1.0));
    }

    #[test]
    fn metric_errors() {
        let empty = ConfusionMatrix::new(3);
        assert!(matches!(empty.overall_accuracy(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(empty.kappa(), Err(Error::UndefinedMetric(_))));
        match cm(&[&[3, 1], &[0, 0]]).average_accuracy() {
            Err(Error::UndefinedMetric(m)) => assert!(m.contains("class 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            cm(&[&[4, 0], &[0, 0]]).kappa(),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn random_cm(rng: &mut ChaCha8Rng, c: usize) -> ConfusionMatrix {
        let rows: Vec<Vec<u64>> = (0..c)
            .map(|_| (0..c).map(|_| rng.gen_range(0..20) + 1).collect())
            .collect();
        ConfusionMatrix::from_rows(&rows).unwrap()
    }

    fn permuted(m: &ConfusionMatrix, perm: &[usize]) -> ConfusionMatrix {
        let c = m.classes();
        let rows: Vec<Vec<u64>> = (0..c)
            .map(|i| (0..c).map(|j| m.get(perm[i], perm[j])).collect())
            .collect();
        ConfusionMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn oa_is_support_weighted_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = random_cm(&mut rng, 4);
            let weighted: f64 = m
                .per_class_accuracy()
                .iter()
                .enumerate()
                .map(|(i, a)| a.unwrap() * m.row_sum(i) as f64)
                .sum::<f64>()
                / m.total() as f64;
            assert!(close(weighted, m.overall_accuracy().unwrap()));
        }
    }

    #[test]
    fn metrics_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = random_cm(&mut rng, 4);
            let p = permuted(&m, &[2, 0, 3, 1]);
            assert!(close(m.overall_accuracy().unwrap(), p.overall_accuracy().unwrap()));
            assert!(close(m.average_accuracy().unwrap(), p.average_accuracy().unwrap()));
            assert!(close(m.kappa().unwrap(), p.kappa().unwrap()));
        }
    }

    #[test]
    fn aa_equals_oa_with_equal_support_and_recall() {
        for (n, hit) in [(10u64, 7u64), (4, 4), (9, 1)] {
            let c = 3;
            let rows: Vec<Vec<u64>> = (0..c)
                .map(|i| {
                    (0..c)
                        .map(|j| {
                            if i == j {
                                hit
                            } else if j == (i + 1) % c {
                                n - hit
                            } else {
                                0
                            }
                        })
                        .collect()
                })
                .collect();
            let m = ConfusionMatrix::from_rows(&rows).unwrap();
            assert!(close(m.average_accuracy().unwrap(), m.overall_accuracy().unwrap()));
        }
    }

    #[test]
    fn confusion_csv_round_trip() {
        let m = cm(&[&[20, 5], &[10, 15]]);
        let csv = m.to_csv();
        assert_eq!(csv, "true\\pred,1,2\n1,20,5\n2,10,15\n");
        assert_eq!(ConfusionMatrix::from_csv(&csv).unwrap(), m);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[-3.0, -1.0, -2.0]), 1);
    }

    fn single(theta: f64, grad: f64, cfg: AdamConfig) -> (ParamStore<f64>, AdamState<f64>) {
        let mut store = ParamStore::new();
        let id = store.add_param("x", Tensor::scalar(theta));
        store.grad_mut(id).data_mut()[0] = grad;
        let state = AdamState::new(&store, cfg);
        (store, state)
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (mut store, mut st) = single(0.7, 0.0, cfg);
        adam_step(&mut store, &mut st).unwrap();
        assert_eq!(store.entries()[0].value.data()[0], 0.7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 150.0] {
            let cfg = AdamConfig {
                lr: 0.01,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            let (mut store, mut st) = single(1.0, g, cfg);
            adam_step(&mut store, &mut st).unwrap();
            let moved = store.entries()[0].value.data()[0] - 1.0;
            // m̂/√v̂ = g/|g| up to eps
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expect).abs() < 1e-12, "{moved} vs {expect}");
        }
    }

    #[test]
    fn adam_decoupled_decay_term() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let (mut store, mut st) = single(2.0, 0.0, cfg);
        adam_step(&mut store, &mut st).unwrap();
        assert!((store.entries()[0].value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn adam_solves_quadratic_bowl() {
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let (mut store, mut st) = single(1.0, 0.0, cfg);
        let id = store.ids().next().unwrap();
        for _ in 0..500 {
            let theta = store.value(id).data()[0];
            store.grad_mut(id).data_mut()[0] = 2.0 * theta;
            adam_step(&mut store, &mut st).unwrap();
        }
        assert!(store.value(id).data()[0].abs() < 1e-3, "{}", store.value(id).data()[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let (mut store, mut st) = single(1.0, f64::NAN, AdamConfig::default());
        assert!(matches!(adam_step(&mut store, &mut st), Err(Error::Numerical(_))));
        assert_eq!(store.entries()[0].value.data()[0], 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[98.0, 100.0]);
        assert!(close(m, 99.0));
        assert!(close(s, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0, 5.0, 5.0]), (5.0, 0.0));
    }

    #[test]
    fn epoch_batches_fold_singletons() {
        let b = epoch_batches(5, 2, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
        let b = epoch_batches(6, 4, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 2]);
        assert_eq!(epoch_batches(1, 4, 0, 0), vec![vec![0]]);
    }

    fn tiny_setup(variant: Variant) -> (TpoNet, ParamStore<f32>, TpoDataset) {
        let (cube, labels) = generate_synthetic_cube(10, 10, 6, 2, 3).unwrap();
        let data = PreparedData::prepare(&cube, &labels, DatasetDescriptor::unnamed("t", 2)).unwrap();
        let split = make_split(&data.labels, 10, 0).unwrap();
        let ex = Arc::new(TpoExtractor::new(&data.cube, SamplerConfig::new(3)).unwrap());
        let ds = build_dataset(ex, &data.labels, &split.train).unwrap();
        let settings = ModelSettings {
            variant,
            p: 2,
            q: 2,
            r: 2,
            branch_channels: 4,
        };
        let spec = settings.spec(6, 2, &SamplerConfig::new(3));
        let (net, store) = TpoNet::build::<f32>(spec, 1).unwrap();
        (net, store, ds)
    }

    #[test]
    fn one_epoch_below_batch_size_is_one_step() {
        let (net, mut store, ds) = tiny_setup(Variant::TpoCnn1);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&net, &mut store, &ds, &cfg, 0).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.loss_trace.len(), 1);
    }

    #[test]
    fn uniform_predictions_cost_ln_c() {
        let (net, mut store, ds) = tiny_setup(Variant::TpoCnn2);
        // zeroing the head makes every logit equal
        for id in store.ids().collect::<Vec<_>>() {
            if store.entry(id).name.starts_with("head.") && store.entry(id).name.ends_with("gamma") {
                *store.value_mut(id) = Tensor::zeros(store.value(id).shape());
            }
        }
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&net, &mut store, &ds, &cfg, 0).unwrap();
        assert!((out.loss_trace[0] - 2f64.ln()).abs() < 1e-6, "{}", out.loss_trace[0]);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = TrainConfig {
            epochs: 80,
            batch_size: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            early_stop: None,
        };
        let (net, mut a, ds) = tiny_setup(Variant::TpoCnn1);
        let mut b = a.clone();
        let oa = train(&net, &mut a, &ds, &cfg, 5).unwrap();
        let ob = train(&net, &mut b, &ds, &cfg, 5).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a, b);
        let w = 20;
        let first: f64 = oa.loss_trace[..w].iter().sum::<f64>() / w as f64;
        let last: f64 = oa.loss_trace[oa.loss_trace.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn early_stop_triggers_on_plateau() {
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            early_stop: Some(EarlyStop {
                window: 3,
                min_delta: 10.0,
            }),
        };
        let (net, mut store, ds) = tiny_setup(Variant::TpoCnn1);
        let out = train(&net, &mut store, &ds, &cfg, 0).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.epoch_losses.len(), 4);
    }

    #[test]
    fn non_finite_loss_restores_parameters() {
        let (net, mut store, ds) = tiny_setup(Variant::TpoCnn1);
        let id = store.find("head.fc.weight").unwrap();
        store.value_mut(id).data_mut()[0] = f32::INFINITY;
        let before = store.clone();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&net, &mut store, &ds, &cfg, 0),
            Err(Error::Numerical(_))
        ));
        assert_eq!(store.entries()[id.index()].value.data()[0], f32::INFINITY);
        assert_eq!(store.len(), before.len());
    }

    #[test]
    fn evaluation_matches_single_sample_loop_and_thread_count() {
        let (net, store, ds) = tiny_setup(Variant::TpoCnn2);
        let cm = evaluate(&net, &store, &ds, 7, 1).unwrap();
        assert_eq!(cm.total() as usize, ds.len());
        assert_eq!(evaluate(&net, &store, &ds, 3, 4).unwrap(), cm);
        let mut reference = ConfusionMatrix::new(2);
        for s in ds.iter() {
            let s = s.unwrap();
            let mut g = Graph::new();
            let mut shape = vec![1];
            shape.extend_from_slice(s.views.shape());
            let x = g.constant(s.views.clone().reshape(&shape).unwrap());
            let p = net.forward(&mut g, &store, x, Mode::Eval).unwrap();
            reference.add(s.label as usize - 1, argmax(g.value(p).data())).unwrap();
        }
        assert_eq!(cm, reference);
    }

    #[test]
    fn report_text_is_line_oriented() {
        let r = RunReport {
            dataset: "synthetic".into(),
            variant: Variant::TpoCnn2,
            seed: 4,
            config_hash: "abc".into(),
            class_names: vec!["a".into(), "b".into()],
            train_samples: 10,
            test_samples: 20,
            epochs: 3,
            steps: 3,
            per_class_accuracy: vec![Some(90.0), None],
            overall_accuracy: 90.0,
            average_accuracy: 90.0,
            kappa: 0.5,
            train_accuracy: 100.0,
            loss_trace: vec![0.5, 0.25],
            wall_clock_secs: 1.5,
        };
        let text = r.to_text();
        assert!(!text.contains("wall_clock"));
        let kv = RunReport::parse_text(&text);
        let get = |k: &str| kv.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone()).unwrap();
        assert_eq!(get("oa"), "90");
        assert_eq!(get("class.2"), "nan\tb");
        assert_eq!(get("loss_trace"), "0.5,0.25");
        assert!(r.timing_text().contains("wall_clock_secs=1.500"));
    }

    #[test]
    fn repeat_needs_two_runs() {
        let (cube, labels) = generate_synthetic_cube(8, 8, 4, 2, 0).unwrap();
        let data = PreparedData::prepare(&cube, &labels, DatasetDescriptor::unnamed("t", 2)).unwrap();
        let exp = Experiment {
            model: ModelSettings {
                variant: Variant::TpoCnn1,
                p: 1,
                q: 1,
                r: 1,
                branch_channels: 2,
            },
            sampler: SamplerConfig::new(3),
            samples_per_class: 4,
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            eval_batch: 64,
            threads: 1,
        };
        assert!(matches!(
            repeat_experiment(&data, &exp, 0, 1, ""),
            Err(Error::Config(_))
        ));
        let s = repeat_experiment(&data, &exp, 3, 2, "h").unwrap();
        assert_eq!(s.reports.len(), 2);
        assert_eq!(s.reports[1].seed, 4);
        let oas: Vec<f64> = s.reports.iter().map(|r| r.overall_accuracy).collect();
        assert_eq!(s.oa, mean_std(&oas));
    }
}
