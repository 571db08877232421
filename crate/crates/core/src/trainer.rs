//! Joint online training of the predictor `theta` and the selection embedder
//! `phi`.
//!
//! Each step embeds the minibatch and the old set, solves the selection
//! program, trains `theta` on the softly selected points and moves `phi`
//! along the gradient of the test loss after a one-step lookahead.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{make_minibatches, LabeledDataset};
use crate::difflayer::differentiate_selection;
use crate::embedder::{distance_backward, distance_blocks, embed, l1};
use crate::error::{Error, Result};
use crate::select::{hard_select, solve_selection, SelectionProblem, SelectionSolution};
use crate::tensor::{
    axpy_params, loss_and_grad, mean_loss_and_accuracy, mlp_forward, per_sample_grads,
    ForwardTrace, Matrix, MlpParams,
};

/// Standard deviation of the Gaussian parameter initialization.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Predictor step size.
    pub alpha: f64,
    /// Embedder step size.
    pub beta: f64,
    /// Fraction of each minibatch selected.
    pub gamma: f64,
    /// Column-mass threshold for hard selection.
    pub xi: f64,
    /// Regularization of the selection program.
    pub epsilon: f64,
    pub epochs: usize,
    /// Minibatches per epoch.
    pub k: usize,
    pub old_cap: usize,
    pub seed: u64,
    /// Hidden widths of the predictor.
    pub predictor_arch: Vec<usize>,
    /// Hidden widths of the embedder followed by the embedding dimension.
    pub embedder_arch: Vec<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            alpha: 2.0,
            beta: 2.0,
            gamma: 0.2,
            xi: 0.5,
            epsilon: 1e-2,
            epochs: 5,
            k: 40,
            old_cap: 20,
            seed: 0,
            predictor_arch: vec![32, 32],
            embedder_arch: vec![16, 8],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return bad(format!("xi must lie in (0, 1], got {}", self.xi));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.embedder_arch.is_empty() {
            return bad("embedder_arch needs at least the embedding dimension".into());
        }
        if self.predictor_arch.iter().chain(&self.embedder_arch).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// Embedder input: features followed by a one-hot encoding of the label.
pub fn embedder_input(ds: &LabeledDataset, ids: &[usize]) -> Matrix {
    let (d, c) = (ds.d(), ds.num_classes());
    let mut out = Matrix::zeros(ids.len(), d + c);
    for (r, &i) in ids.iter().enumerate() {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(ds.features().row(i));
        row[d + ds.labels()[i]] = 1.0;
    }
    out
}

/// Previously selected points kept as candidate representatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OldSet {
    /// Embedder inputs of the retained points.
    pub rows: Vec<Vec<f64>>,
    /// Training-set index of each row.
    pub source_ids: Vec<usize>,
    pub capacity: usize,
    /// Insertion stamp of each row; larger is more recent.
    stamps: Vec<u64>,
    clock: u64,
}

impl OldSet {
    pub fn new(capacity: usize) -> Self {
        OldSet {
            rows: Vec::new(),
            source_ids: Vec::new(),
            capacity,
            stamps: Vec::new(),
            clock: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds a point, or refreshes its recency if it is already present.
    pub fn insert(&mut self, source_id: usize, row: Vec<f64>) {
        self.clock += 1;
        match self.source_ids.iter().position(|&s| s == source_id) {
            Some(p) => {
                self.rows[p] = row;
                self.stamps[p] = self.clock;
            }
            None => {
                self.rows.push(row);
                self.source_ids.push(source_id);
                self.stamps.push(self.clock);
            }
        }
    }

    /// Rows whose source id is not in `exclude`, with their positions.
    pub fn rows_excluding(&self, exclude: &[usize], width: usize) -> (Matrix, Vec<usize>) {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&p| !exclude.contains(&self.source_ids[p]))
            .collect();
        let mut m = Matrix::zeros(keep.len(), width);
        for (r, &p) in keep.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.rows[p]);
        }
        (m, keep)
    }

    /// Trims to capacity, keeping the points with the smallest mean L1
    /// distance to `h_new` under `phi`; ties keep the more recent insertion.
    pub fn enforce_capacity(&mut self, phi: &MlpParams, h_new: &Matrix) -> Result<()> {
        if self.len() <= self.capacity {
            return Ok(());
        }
        if self.capacity == 0 || h_new.rows() == 0 {
            self.retain_positions(&[]);
            return Ok(());
        }
        let width = self.rows[0].len();
        let (all, _) = self.rows_excluding(&[], width);
        let (h_old, _) = embed(phi, &all)?;
        let b = h_new.rows() as f64;
        let mean_dist: Vec<f64> = (0..self.len())
            .map(|p| (0..h_new.rows()).map(|i| l1(h_old.row(p), h_new.row(i))).sum::<f64>() / b)
            .collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &c| {
            mean_dist[a]
                .total_cmp(&mean_dist[c])
                .then(self.stamps[c].cmp(&self.stamps[a]))
        });
        order.truncate(self.capacity);
        order.sort_unstable();
        self.retain_positions(&order);
        Ok(())
    }

    fn retain_positions(&mut self, keep: &[usize]) {
        self.rows = keep.iter().map(|&p| self.rows[p].clone()).collect();
        self.source_ids = keep.iter().map(|&p| self.source_ids[p]).collect();
        self.stamps = keep.iter().map(|&p| self.stamps[p]).collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub minibatch: usize,
    /// Training ids of the minibatch, ascending.
    pub batch_ids: Vec<usize>,
    /// Soft column mass of each minibatch point, aligned with `batch_ids`.
    pub column_mass: Vec<f64>,
    /// Hard-selected training ids, ascending.
    pub selected_ids: Vec<usize>,
    pub selected_loss: f64,
    /// Test loss after the lookahead step.
    pub value: f64,
    pub solver_iterations: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainerConfig,
    pub n_train: usize,
    pub records: Vec<StepRecord>,
    pub final_theta: MlpParams,
    pub final_phi: MlpParams,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    /// How many times each training id was hard-selected.
    pub selection_counts: Vec<usize>,
}

impl TrainLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> TrainLog {
        let mut out = self.clone();
        for r in &mut out.records {
            r.wall_seconds = 0.0;
        }
        out
    }
}

/// `(1 / (gamma |D|)) sum_j u_j L_j` and its gradient in `theta`.
pub fn selected_loss(
    theta: &MlpParams,
    x: &Matrix,
    y: &[usize],
    u: &[f64],
    gamma: f64,
) -> Result<(f64, MlpParams)> {
    if u.len() != x.rows() {
        return Err(Error::dim("selection scores", x.rows(), u.len()));
    }
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::InvalidArgument(format!("selection score {v} outside [0, 1]")));
    }
    let scale = 1.0 / (gamma * x.rows() as f64);
    let weights: Vec<f64> = u.iter().map(|v| v * scale).collect();
    loss_and_grad(theta, x, y, &weights)
}

/// `theta - alpha grad`; `theta` is left untouched.
pub fn lookahead(theta: &MlpParams, grad: &MlpParams, alpha: f64) -> Result<MlpParams> {
    axpy_params(theta, grad, alpha)
}

/// Mean test cross-entropy and accuracy.
pub fn value(theta: &MlpParams, test: &LabeledDataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("value needs a non-empty test set".into()));
    }
    mean_loss_and_accuracy(theta, test.features(), test.labels())
}

/// Everything the backward pass needs from one selection.
#[derive(Debug, Clone)]
pub struct SelectionForward {
    pub problem: SelectionProblem,
    /// `None` when the budget covers the whole minibatch and every point is
    /// selected outright.
    pub solution: Option<SelectionSolution>,
    pub trace_new: ForwardTrace,
    pub trace_old: Option<ForwardTrace>,
    /// Soft scores `u`.
    pub u: Vec<f64>,
    pub column_mass: Vec<f64>,
    /// Selected minibatch positions, ascending.
    pub selected: Vec<usize>,
}

/// Embeds the minibatch and old set, solves the selection program and reads
/// off the hard selection.
pub fn select_forward(
    phi: &MlpParams,
    new_input: &Matrix,
    old_input: &Matrix,
    gamma: f64,
    epsilon: f64,
    xi: f64,
) -> Result<SelectionForward> {
    let (h_new, trace_new) = mlp_forward(phi, new_input)?;
    let trace_old = if old_input.rows() > 0 {
        Some(mlp_forward(phi, old_input)?.1)
    } else {
        None
    };
    let empty = Matrix::zeros(0, h_new.cols());
    let h_old = trace_old.as_ref().map_or(&empty, |t| t.output());
    let blocks = distance_blocks(&h_new, h_old)?;
    let problem = SelectionProblem::new(blocks, gamma, epsilon, xi)?;
    let b = problem.num_new();
    if problem.budget == b {
        return Ok(SelectionForward {
            problem,
            solution: None,
            trace_new,
            trace_old,
            u: vec![1.0; b],
            column_mass: vec![1.0; b],
            selected: (0..b).collect(),
        });
    }
    let solution = solve_selection(&problem).map_err(|e| e.context("selection solve"))?;
    let selected = hard_select(&solution, &problem).indices;
    // Interior-point iterates sit within solver tolerance of the box.
    let u = solution.u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let column_mass = solution.column_mass();
    Ok(SelectionForward {
        problem,
        solution: Some(solution),
        trace_new,
        trace_old,
        u,
        column_mass,
        selected,
    })
}

#[derive(Debug, Clone)]
pub struct ValueGradient {
    pub grad: MlpParams,
    /// Test loss at the lookahead parameters.
    pub value: f64,
}

/// Gradient in `phi` of the test loss after one lookahead step on the
/// softly selected minibatch.
#[allow(clippy::too_many_arguments)]
pub fn value_grad_phi(
    theta: &MlpParams,
    phi: &MlpParams,
    fwd: &SelectionForward,
    x: &Matrix,
    y: &[usize],
    test: &LabeledDataset,
    alpha: f64,
    gamma: f64,
) -> Result<ValueGradient> {
    let (_, grad_l) = selected_loss(theta, x, y, &fwd.u, gamma)?;
    let theta_hat = lookahead(theta, &grad_l, alpha)?;
    let n_test = test.n() as f64;
    let (test_loss, g_test) =
        loss_and_grad(&theta_hat, test.features(), test.labels(), &vec![1.0 / n_test; test.n()])?;
    let zero = phi.zeros_like();
    let Some(solution) = &fwd.solution else {
        return Ok(ValueGradient {
            grad: zero,
            value: test_loss,
        });
    };
    let per_sample = per_sample_grads(theta, x, y)?;
    let scale = alpha / (gamma * x.rows() as f64);
    let dj_du = per_sample
        .iter()
        .map(|g| g_test.dot(g).map(|v| -scale * v))
        .collect::<Result<Vec<f64>>>()?;
    if dj_du.iter().all(|&v| v == 0.0) {
        return Ok(ValueGradient {
            grad: zero,
            value: test_loss,
        });
    }
    let g = differentiate_selection(&fwd.problem, solution, &dj_du, None)
        .map_err(|e| e.context("selection backward"))?;
    let grad = distance_backward(
        phi,
        &fwd.trace_new,
        fwd.trace_old.as_ref(),
        &g.d_new_new,
        &g.d_new_old,
    )?;
    Ok(ValueGradient {
        grad,
        value: test_loss,
    })
}

/// Mutable training state: parameters, old set and the log so far.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub config: TrainerConfig,
    pub theta: MlpParams,
    pub phi: MlpParams,
    pub old_set: OldSet,
    pub records: Vec<StepRecord>,
    pub selection_counts: Vec<usize>,
    train: LabeledDataset,
    test: LabeledDataset,
    epoch: usize,
}

impl TrainerState {
    pub fn new(train: &LabeledDataset, test: &LabeledDataset, config: &TrainerConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
        }
        if train.d() != test.d() || train.num_classes() != test.num_classes() {
            return Err(Error::InvalidArgument(
                "training and test sets disagree on feature count or classes".into(),
            ));
        }
        if config.k > train.n() {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} training rows",
                config.k,
                train.n()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, c) = (train.d(), train.num_classes());
        let mut pw = vec![d];
        pw.extend(&config.predictor_arch);
        pw.push(c);
        let theta = MlpParams::gaussian(&pw, INIT_STD, &mut rng)?;
        let mut ew = vec![d + c];
        ew.extend(&config.embedder_arch);
        let phi = MlpParams::gaussian(&ew, INIT_STD, &mut rng)?;
        Ok(TrainerState {
            config: config.clone(),
            theta,
            phi,
            old_set: OldSet::new(config.old_cap),
            records: Vec::new(),
            selection_counts: vec![0; train.n()],
            train: train.clone(),
            test: test.clone(),
            epoch: 0,
        })
    }

    pub fn train_set(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    /// One step of joint training on the training rows `batch_ids`.
    pub fn step(&mut self, minibatch: usize, batch_ids: &[usize]) -> Result<()> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let (x, y) = self.train.batch(batch_ids);
        let new_input = embedder_input(&self.train, batch_ids);
        let (old_input, _) = self.old_set.rows_excluding(batch_ids, new_input.cols());
        let fwd = select_forward(&self.phi, &new_input, &old_input, cfg.gamma, cfg.epsilon, cfg.xi)?;

        for &p in &fwd.selected {
            self.old_set.insert(batch_ids[p], new_input.row(p).to_vec());
            self.selection_counts[batch_ids[p]] += 1;
        }
        self.old_set.enforce_capacity(&self.phi, fwd.trace_new.output())?;

        let (sel_loss, grad_l) = selected_loss(&self.theta, &x, &y, &fwd.u, cfg.gamma)?;
        let k = cfg.k as f64;
        let next_theta = axpy_params(&self.theta, &grad_l, cfg.alpha / k)?;
        let vg = value_grad_phi(&self.theta, &self.phi, &fwd, &x, &y, &self.test, cfg.alpha, cfg.gamma)?;
        let next_phi = axpy_params(&self.phi, &vg.grad, cfg.beta / k)?;
        if !next_theta.is_finite() || !next_phi.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.records.len())));
        }
        self.theta = next_theta;
        self.phi = next_phi;

        self.records.push(StepRecord {
            step: self.records.len(),
            epoch: self.epoch,
            minibatch,
            batch_ids: batch_ids.to_vec(),
            column_mass: fwd.column_mass,
            selected_ids: fwd.selected.iter().map(|&p| batch_ids[p]).collect(),
            selected_loss: sel_loss,
            value: vg.value,
            solver_iterations: fwd.solution.as_ref().map_or(0, |s| s.iterations),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// One pass over a freshly shuffled partition into `k` minibatches.
    pub fn epoch(&mut self) -> Result<()> {
        let plan = make_minibatches(self.train.n(), self.config.k, epoch_seed(self.config.seed, self.epoch))?;
        for &b in &plan.order {
            let step = self.records.len();
            self.step(b, plan.batch(b))
                .map_err(|e| e.context(format!("epoch {} step {step}", self.epoch)))?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<TrainLog> {
        let (loss, acc) = value(&self.theta, &self.test)?;
        Ok(TrainLog {
            config: self.config,
            n_train: self.train.n(),
            records: self.records,
            final_theta: self.theta,
            final_phi: self.phi,
            final_test_loss: loss,
            final_test_accuracy: acc,
            selection_counts: self.selection_counts,
        })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the configured number of epochs from a seeded initialization.
pub fn run(train: &LabeledDataset, test: &LabeledDataset, config: &TrainerConfig) -> Result<TrainLog> {
    let mut state = TrainerState::new(train, test, config)?;
    for _ in 0..config.epochs {
        state.epoch()?;
    }
    state.finish()
}

/// Training ids ordered from most to least valuable: ids hard-selected in the
/// final epoch first, then the rest, each group by descending final-epoch
/// column mass with ties to the smaller id. Ids never visited in the final
/// epoch rank last.
pub fn value_ranking(log: &TrainLog) -> Vec<usize> {
    let n = log.n_train;
    let mut mass = vec![f64::NEG_INFINITY; n];
    let mut selected = vec![false; n];
    if let Some(last) = log.records.iter().map(|r| r.epoch).max() {
        for r in log.records.iter().filter(|r| r.epoch == last) {
            for (&id, &m) in r.batch_ids.iter().zip(&r.column_mass) {
                mass[id] = m;
            }
            for &id in &r.selected_ids {
                selected[id] = true;
            }
        }
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| {
        selected[b]
            .cmp(&selected[a])
            .then(mass[b].total_cmp(&mass[a]))
            .then(a.cmp(&b))
    });
    ids
}

fn count_for(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    Ok(crate::dataset::round_half_up(fraction * n as f64).min(n))
}

/// The top `round(fraction * n)` ids of [`value_ranking`].
pub fn extract_selection(log: &TrainLog, fraction: f64) -> Result<Vec<usize>> {
    let count = count_for(log.n_train, fraction)?;
    let mut ranking = value_ranking(log);
    ranking.truncate(count);
    Ok(ranking)
}

/// Complement of [`extract_selection`], least valuable first.
pub fn reverse_selection(log: &TrainLog, fraction: f64) -> Result<Vec<usize>> {
    let count = count_for(log.n_train, fraction)?;
    let ranking = value_ranking(log);
    Ok(ranking[count..].iter().rev().copied().collect())
}

/// Final-epoch column mass per training id; ids not visited map to 0.
pub fn final_column_mass(log: &TrainLog) -> Vec<f64> {
    let mut mass = vec![0.0; log.n_train];
    if let Some(last) = log.records.iter().map(|r| r.epoch).max() {
        for r in log.records.iter().filter(|r| r.epoch == last) {
            for (&id, &m) in r.batch_ids.iter().zip(&r.column_mass) {
                mass[id] = m;
            }
        }
    }
    mass
}
