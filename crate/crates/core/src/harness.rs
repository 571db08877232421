//! Experiment orchestration: value curves, mislabel detection, ranking
//! quality and timing, with JSON/CSV report emission.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{flip_labels, gen_synthetic, load_csv, round_half_up, save_csv, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{loss_and_grad, MlpParams};
use crate::trainer::{
    extract_selection, final_column_mass, run, value, value_ranking, TrainLog, TrainerConfig,
    TrainerState, INIT_STD,
};

/// Offset separating random-baseline seeds from method seeds.
pub const BASELINE_SEED_OFFSET: u64 = 1_000_000;
/// Shuffles used to estimate the NDCG of a random ranking.
pub const NDCG_NULL_SHUFFLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Addition,
    Removal,
    Mislabel,
    Ndcg,
    Timing,
    Train,
    GenData,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Addition => "addition",
            ExperimentKind::Removal => "removal",
            ExperimentKind::Mislabel => "mislabel",
            ExperimentKind::Ndcg => "ndcg",
            ExperimentKind::Timing => "timing",
            ExperimentKind::Train => "train",
            ExperimentKind::GenData => "gen-data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated data; the test set is drawn from the same generator.
    Synthetic { n: usize, d: usize, seed: u64 },
    /// Labeled CSV; the test set is a seeded hold-out.
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 1000,
            d: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub source: DataSource,
    /// Selection, removal, inspection or NDCG cut-off fractions, ascending.
    pub fractions: Vec<f64>,
    pub flip_fraction: f64,
    pub seeds: Vec<u64>,
    pub trainer: TrainerConfig,
    pub output_dir: Option<PathBuf>,
    pub test_size: usize,
    pub retrain_epochs: usize,
    pub retrain_batch_size: usize,
    pub retrain_lr: f64,
    /// Training-set sizes for the timing experiment.
    pub timing_sizes: Vec<usize>,
    pub timing_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: None,
            source: DataSource::default(),
            fractions: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            flip_fraction: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            trainer: TrainerConfig::default(),
            output_dir: None,
            test_size: 250,
            retrain_epochs: 50,
            retrain_batch_size: 32,
            retrain_lr: 0.1,
            timing_sizes: vec![500, 1000, 2000, 4000],
            timing_batch_size: 25,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fractions must lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("fractions must be sorted ascending".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(Error::Config("flip_fraction must lie in [0, 1]".into()));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test_size must be positive".into()));
        }
        if self.retrain_batch_size == 0 || !(self.retrain_lr > 0.0) {
            return Err(Error::Config("retraining needs a positive batch size and learning rate".into()));
        }
        if self.timing_batch_size == 0 || self.timing_sizes.iter().any(|&n| n < self.timing_batch_size) {
            return Err(Error::Config("timing sizes must be at least one minibatch".into()));
        }
        if let DataSource::Synthetic { n, d, .. } = self.source {
            if n < 2 || d == 0 {
                return Err(Error::Config("synthetic source needs n >= 2 and d >= 1".into()));
            }
        }
        Ok(())
    }

    fn kind(&self) -> Result<ExperimentKind> {
        self.experiment
            .ok_or_else(|| Error::Config("no experiment kind given".into()))
    }

    /// Train/test data for one seed.
    pub fn load_data(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.source {
            DataSource::Synthetic { n, d, seed: base } => {
                let all = gen_synthetic(n + self.test_size, *d, base.wrapping_add(seed))?;
                all.split(self.test_size, seed)
            }
            DataSource::Csv { path } => load_csv(path)?.split(self.test_size, seed),
        }
    }

    pub fn trainer_for(&self, seed: u64, gamma: Option<f64>) -> TrainerConfig {
        let mut t = self.trainer.clone();
        t.seed = t.seed.wrapping_add(seed);
        if let Some(g) = gamma {
            t.gamma = g;
        }
        t
    }
}

/// One `(fraction, seed)` cell. Metrics absent for an experiment are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub fraction: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_fixed_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ndcg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver_calls: Option<usize>,
}

impl ReportRow {
    fn new(fraction: f64, seed: u64) -> Self {
        ReportRow {
            fraction,
            seed,
            accuracy: None,
            loss: None,
            baseline_accuracy: None,
            baseline_loss: None,
            fixed_fraction: None,
            baseline_fixed_fraction: None,
            ndcg: None,
            baseline_ndcg: None,
            train_size: None,
            solver_calls: None,
        }
    }

    /// The metric plotted for `kind`, with its random-baseline counterpart.
    fn headline(&self, kind: ExperimentKind) -> (Option<f64>, Option<f64>) {
        match kind {
            ExperimentKind::Mislabel => (self.fixed_fraction, self.baseline_fixed_fraction),
            ExperimentKind::Ndcg => (self.ndcg, self.baseline_ndcg),
            ExperimentKind::Timing => (self.solver_calls.map(|c| c as f64), None),
            _ => (self.accuracy, self.baseline_accuracy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub fraction: f64,
    pub mean: f64,
    pub stddev: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_stddev: Option<f64>,
}

/// Wall-clock measurements. Kept out of `report.json` so that reports are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// `(training size, seed, one-epoch seconds, per-step seconds)`.
    pub runs: Vec<TimingRun>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRun {
    pub n: usize,
    pub seed: u64,
    pub epoch_seconds: f64,
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    #[serde(skip)]
    pub timings: Option<Timings>,
}

impl Report {
    fn assemble(kind: ExperimentKind, config: &ExperimentConfig, rows: Vec<ReportRow>) -> Report {
        let mut fractions: Vec<f64> = Vec::new();
        for r in &rows {
            if !fractions.contains(&r.fraction) {
                fractions.push(r.fraction);
            }
        }
        let aggregates = fractions
            .iter()
            .map(|&f| {
                let cell: Vec<&ReportRow> = rows.iter().filter(|r| r.fraction == f).collect();
                let main: Vec<f64> = cell.iter().filter_map(|r| r.headline(kind).0).collect();
                let base: Vec<f64> = cell.iter().filter_map(|r| r.headline(kind).1).collect();
                let (mean, stddev) = mean_std(&main);
                let baseline = (!base.is_empty()).then(|| mean_std(&base));
                Aggregate {
                    fraction: f,
                    mean,
                    stddev,
                    baseline_mean: baseline.map(|b| b.0),
                    baseline_stddev: baseline.map(|b| b.1),
                }
            })
            .collect();
        let mut config = config.clone();
        config.experiment = Some(kind);
        Report {
            experiment: kind,
            config,
            rows,
            aggregates,
            timings: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and sample standard deviation; the deviation of fewer than two values is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains a fresh predictor on `train` with plain minibatch SGD and reports
/// `(test loss, test accuracy)`. An empty training set leaves the
/// initialization untouched.
pub fn retrain(
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![test.d()];
    widths.extend(&config.trainer.predictor_arch);
    widths.push(test.num_classes());
    let mut theta = MlpParams::gaussian(&widths, INIT_STD, &mut rng)?;
    let mut order: Vec<usize> = (0..train.n()).collect();
    for _ in 0..config.retrain_epochs {
        if train.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.retrain_batch_size) {
            let (x, y) = train.batch(chunk);
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let (_, g) = loss_and_grad(&theta, &x, &y, &w)?;
            theta.add_scaled(&g, -config.retrain_lr)?;
        }
        if !theta.is_finite() {
            return Err(Error::NonFinite("retraining parameters".into()));
        }
    }
    value(&theta, test)
}

fn retrain_seed(seed: u64) -> u64 {
    seed.wrapping_add(2 * BASELINE_SEED_OFFSET)
}

fn random_ids(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(BASELINE_SEED_OFFSET));
    sample(&mut rng, n, count).into_vec()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

fn complement(n: usize, ids: &[usize]) -> Vec<usize> {
    let drop: BTreeSet<usize> = ids.iter().copied().collect();
    (0..n).filter(|i| !drop.contains(i)).collect()
}

fn curve(config: &ExperimentConfig, kind: ExperimentKind, keep_selected: bool) -> Result<Report> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let (train, test) = config.load_data(seed)?;
        let n = train.n();
        for &fraction in &config.fractions {
            let count = round_half_up(fraction * n as f64).min(n);
            let log = run(&train, &test, &config.trainer_for(seed, Some(fraction)))
                .map_err(|e| e.context(format!("seed {seed} fraction {fraction}")))?;
            let chosen = extract_selection(&log, fraction)?;
            let random = random_ids(n, count, seed);
            let (ids, base_ids) = if keep_selected {
                (sorted(chosen), sorted(random))
            } else {
                (complement(n, &chosen), complement(n, &random))
            };
            let rs = retrain_seed(seed);
            let (loss, acc) = retrain(&train.subset(&ids), &test, config, rs)?;
            let (bloss, bacc) = retrain(&train.subset(&base_ids), &test, config, rs)?;
            let mut row = ReportRow::new(fraction, seed);
            row.accuracy = Some(acc);
            row.loss = Some(loss);
            row.baseline_accuracy = Some(bacc);
            row.baseline_loss = Some(bloss);
            row.train_size = Some(ids.len());
            rows.push(row);
        }
    }
    Ok(Report::assemble(kind, config, rows))
}

/// Retrains on the top-valued fraction and on a random subset of equal size.
pub fn run_addition_curve(config: &ExperimentConfig) -> Result<Report> {
    curve(config, ExperimentKind::Addition, true)
}

/// Retrains on everything except the top-valued fraction, and except a
/// random subset of equal size.
pub fn run_removal_curve(config: &ExperimentConfig) -> Result<Report> {
    curve(config, ExperimentKind::Removal, false)
}

/// Least valuable ids first.
pub fn inspection_order(log: &TrainLog) -> Vec<usize> {
    let mut r = value_ranking(log);
    r.reverse();
    r
}

fn found_fraction(inspected: &[usize], flipped: &[bool], total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    inspected.iter().filter(|&&i| flipped[i]).count() as f64 / total as f64
}

/// Flips labels, ranks the corrupted training set, and inspects the least
/// valuable fraction: reports the share of flips found and the accuracy
/// after retraining with the found flips repaired.
pub fn run_mislabel(config: &ExperimentConfig) -> Result<Report> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let (clean, test) = config.load_data(seed)?;
        let (noisy, mask) = flip_labels(&clean, config.flip_fraction, seed)?;
        let n = noisy.n();
        let log = run(&noisy, &test, &config.trainer_for(seed, None))
            .map_err(|e| e.context(format!("seed {seed}")))?;
        let order = inspection_order(&log);
        let mut null_order: Vec<usize> = (0..n).collect();
        null_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(BASELINE_SEED_OFFSET)));
        let rs = retrain_seed(seed);
        for &fraction in &config.fractions {
            let count = round_half_up(fraction * n as f64).min(n);
            let inspected = &order[..count];
            let base_inspected = &null_order[..count];
            let (loss, acc) = retrain(&mask.restore_subset(&noisy, inspected), &test, config, rs)?;
            let (bloss, bacc) = retrain(&mask.restore_subset(&noisy, base_inspected), &test, config, rs)?;
            let mut row = ReportRow::new(fraction, seed);
            row.fixed_fraction = Some(found_fraction(inspected, &mask.flipped, mask.count()));
            row.baseline_fixed_fraction = Some(found_fraction(base_inspected, &mask.flipped, mask.count()));
            row.accuracy = Some(acc);
            row.loss = Some(loss);
            row.baseline_accuracy = Some(bacc);
            row.baseline_loss = Some(bloss);
            row.train_size = Some(n);
            rows.push(row);
        }
    }
    Ok(Report::assemble(ExperimentKind::Mislabel, config, rows))
}

/// NDCG over the top `k` ids by descending score (ties to the smaller id)
/// with binary relevance and a `log2(rank + 1)` discount.
pub fn ndcg_at_k(scores: &[f64], relevance: &[bool], k: usize) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(Error::dim("ndcg relevance", scores.len(), relevance.len()));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "ndcg cut-off {k} outside 1..={}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("ndcg scores contain NaN".into()));
    }
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return Err(Error::InvalidArgument("ndcg needs at least one relevant id".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = order[..k]
        .iter()
        .enumerate()
        .filter(|(_, &i)| relevance[i])
        .map(|(r, _)| discount(r))
        .sum();
    let ideal: f64 = (0..relevant.min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// Ranks training ids by negative final column mass and scores how well
/// flipped ids concentrate at the top, against the mean over seeded random
/// rankings.
pub fn run_ndcg(config: &ExperimentConfig) -> Result<Report> {
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let (clean, test) = config.load_data(seed)?;
        let (noisy, mask) = flip_labels(&clean, config.flip_fraction, seed)?;
        let n = noisy.n();
        let log = run(&noisy, &test, &config.trainer_for(seed, None))
            .map_err(|e| e.context(format!("seed {seed}")))?;
        let scores: Vec<f64> = final_column_mass(&log).iter().map(|m| -m).collect();
        let mut null_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(BASELINE_SEED_OFFSET));
        let null_scores: Vec<Vec<f64>> = (0..NDCG_NULL_SHUFFLES)
            .map(|_| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut null_rng);
                let mut s = vec![0.0; n];
                for (rank, &i) in perm.iter().enumerate() {
                    s[i] = -(rank as f64);
                }
                s
            })
            .collect();
        for &fraction in &config.fractions {
            let k = round_half_up(fraction * n as f64).clamp(1, n);
            let mut row = ReportRow::new(fraction, seed);
            row.ndcg = Some(ndcg_at_k(&scores, &mask.flipped, k)?);
            let null = null_scores
                .iter()
                .map(|s| ndcg_at_k(s, &mask.flipped, k))
                .collect::<Result<Vec<f64>>>()?;
            row.baseline_ndcg = Some(null.iter().sum::<f64>() / null.len() as f64);
            row.train_size = Some(n);
            rows.push(row);
        }
    }
    Ok(Report::assemble(ExperimentKind::Ndcg, config, rows))
}

/// Least-squares line `y = slope x + intercept` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// One training epoch per size with a fixed minibatch size.
pub fn run_timing(config: &ExperimentConfig) -> Result<Report> {
    let d = match config.source {
        DataSource::Synthetic { d, .. } => d,
        DataSource::Csv { .. } => {
            return Err(Error::Config("the timing experiment needs a synthetic source".into()))
        }
    };
    let base_seed = match config.source {
        DataSource::Synthetic { seed, .. } => seed,
        DataSource::Csv { .. } => 0,
    };
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for &n in &config.timing_sizes {
            let all = gen_synthetic(n + config.test_size, d, base_seed.wrapping_add(seed))?;
            let (train, test) = all.split(config.test_size, seed)?;
            let mut tc = config.trainer_for(seed, None);
            tc.k = n / config.timing_batch_size;
            tc.epochs = 1;
            let mut state = TrainerState::new(&train, &test, &tc)?;
            let start = Instant::now();
            state.epoch().map_err(|e| e.context(format!("timing n={n}")))?;
            let epoch_seconds = start.elapsed().as_secs_f64();
            let mut row = ReportRow::new(n as f64, seed);
            row.train_size = Some(n);
            row.solver_calls = Some(state.records.len());
            rows.push(row);
            runs.push(TimingRun {
                n,
                seed,
                epoch_seconds,
                step_seconds: state.records.iter().map(|r| r.wall_seconds).collect(),
            });
        }
    }
    let x: Vec<f64> = runs.iter().map(|r| r.n as f64).collect();
    let y: Vec<f64> = runs.iter().map(|r| r.epoch_seconds).collect();
    let (slope, intercept, r_squared) = linear_fit(&x, &y);
    let mut report = Report::assemble(ExperimentKind::Timing, config, rows);
    report.timings = Some(Timings {
        runs,
        slope,
        intercept,
        r_squared,
    });
    Ok(report)
}

/// Plain joint training, one row per seed with the final test metrics.
pub fn run_train(config: &ExperimentConfig) -> Result<(Report, Vec<TrainLog>)> {
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &seed in &config.seeds {
        let (train, test) = config.load_data(seed)?;
        let log = run(&train, &test, &config.trainer_for(seed, None))?;
        let mut row = ReportRow::new(config.trainer.gamma, seed);
        row.accuracy = Some(log.final_test_accuracy);
        row.loss = Some(log.final_test_loss);
        row.train_size = Some(train.n());
        rows.push(row);
        logs.push(log);
    }
    Ok((Report::assemble(ExperimentKind::Train, config, rows), logs))
}

/// Runs the experiment named in `config`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    match config.kind()? {
        ExperimentKind::Addition => run_addition_curve(config),
        ExperimentKind::Removal => run_removal_curve(config),
        ExperimentKind::Mislabel => run_mislabel(config),
        ExperimentKind::Ndcg => run_ndcg(config),
        ExperimentKind::Timing => run_timing(config),
        ExperimentKind::Train => run_train(config).map(|r| r.0),
        ExperimentKind::GenData => Err(Error::Config(
            "gen-data writes a dataset, not a report".into(),
        )),
    }
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `curve.csv` and `curve.dat` into `dir`, plus
/// `timings.json` when the report carries wall-clock measurements.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let json = dir.join("report.json");
    write(json.clone(), &(report.to_json()? + "\n"))?;
    written.push(json);

    let csv_path = dir.join("curve.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::io(&csv_path, std::io::Error::other(e));
    w.write_record(["fraction", "mean", "stddev"]).map_err(io_err)?;
    for a in &report.aggregates {
        w.write_record([a.fraction.to_string(), a.mean.to_string(), a.stddev.to_string()])
            .map_err(io_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    let dat = dir.join("curve.dat");
    let mut text = String::from("# fraction mean\n");
    for a in &report.aggregates {
        text.push_str(&format!("{} {}\n", a.fraction, a.mean));
    }
    write(dat.clone(), &text)?;
    written.push(dat);

    if let Some(t) = &report.timings {
        let p = dir.join("timings.json");
        write(p.clone(), &(serde_json::to_string_pretty(t)? + "\n"))?;
        written.push(p);
    }
    Ok(written)
}

/// Writes a synthetic dataset as CSV.
pub fn gen_data(n: usize, d: usize, seed: u64, out: impl AsRef<Path>) -> Result<()> {
    let ds = gen_synthetic(n, d, seed)?;
    save_csv(&ds, out)
}
