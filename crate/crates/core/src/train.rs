//! Dataset splitting, five-fold cross-validation, the training loop with
//! per-epoch validation, metrics, and table-style experiment reports.
//!
//! Everything here is a deterministic function of `(data, hyperparams,
//! seed)`: shuffles, fold assignment, dropout masks, and model
//! initialization all draw from streams derived from the run seed.

use std::collections::BTreeMap;

use thiserror::Error;

use pbci_nn::ops::softmax_rows;
use pbci_nn::rng::SplitMix64;
use pbci_nn::{Adam, AdamConfig, Mode, NnError, Tape};

use crate::data::{Epoch, ImageryLabel, Paradigm};
use crate::decoder::{epoch_batch, DecoderError, ModelSpec, ShallowConvNet, TaskKind};

const STREAM_SHUFFLE: u64 = 0x10;
const STREAM_DROPOUT: u64 = 0x11;
const STREAM_FOLD_VAL: u64 = 0x12;
const STREAM_MODEL: u64 = 0x13;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("stratum {stratum} has {len} records, fewer than k = {k}")]
    StratumTooSmall {
        stratum: String,
        len: usize,
        k: usize,
    },
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Training-loop settings. Defaults are the canonical protocol's.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadHyperparams("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadHyperparams("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(TrainError::BadHyperparams(
                "lr, eps must be positive; weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::BadHyperparams("betas must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Index lists over a record set: disjoint, covering train/val/test.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation split 70:10:20 (floors at the boundaries, remainder
/// to test).
pub fn split_identification(n_records: usize, seed: u64) -> Result<SplitPlan, TrainError> {
    if n_records == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    SplitMix64::derive(seed, &[STREAM_SHUFFLE]).shuffle(&mut order);
    let n_train = n_records * 70 / 100;
    let n_val = n_records * 10 / 100;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok(SplitPlan { train, val, test })
}

/// One cross-validation fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Stratified k-fold plan: within each stratum, records are shuffled
/// (seeded) and dealt round-robin to folds, so per-stratum test counts
/// differ by at most one across folds. Each fold's inner validation set is
/// a seeded 12.5% of its non-test records.
pub fn kfold<K: Ord + std::fmt::Debug>(
    strata: &[K],
    k: usize,
    seed: u64,
) -> Result<FoldPlan, TrainError> {
    if strata.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if k < 2 {
        return Err(TrainError::BadHyperparams(format!("k = {k} must be >= 2")));
    }
    let mut groups: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, key) in strata.iter().enumerate() {
        groups.entry(key).or_default().push(i);
    }
    let mut partitions: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (stratum_idx, (key, mut members)) in groups.into_iter().enumerate() {
        if members.len() < k {
            return Err(TrainError::StratumTooSmall {
                stratum: format!("{key:?}"),
                len: members.len(),
                k,
            });
        }
        SplitMix64::derive(seed, &[STREAM_SHUFFLE, stratum_idx as u64]).shuffle(&mut members);
        for (j, idx) in members.into_iter().enumerate() {
            partitions[j % k].push(idx);
        }
    }
    let folds = (0..k)
        .map(|i| {
            let test = partitions[i].clone();
            let mut rest: Vec<usize> = partitions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            SplitMix64::derive(seed, &[STREAM_FOLD_VAL, i as u64]).shuffle(&mut rest);
            let n_val = rest.len() / 8; // 12.5% inner validation
            let val = rest[..n_val].to_vec();
            let train = rest[n_val..].to_vec();
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}

fn target_of(task: TaskKind, epoch: &Epoch) -> usize {
    match task {
        TaskKind::Identification => epoch.subject.class_index(),
        TaskKind::Intention => epoch.label.ordinal(),
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Train a model: per epoch, a seeded shuffle into minibatches (the last
/// partial batch is kept), forward/loss/backward/Adam, then a validation
/// pass. Returns the parameters of the epoch with the highest validation
/// accuracy (ties: lower validation loss, then earlier epoch).
pub fn train(
    mut model: ShallowConvNet<f32>,
    train_set: &[&Epoch],
    val_set: &[&Epoch],
    hp: &Hyperparams,
) -> Result<(ShallowConvNet<f32>, TrainHistory), TrainError> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let task = model.task;
    let mut optimizer = Adam::new(hp.adam(), model.parameters());
    let mut dropout_stream = SplitMix64::derive(hp.seed, &[STREAM_DROPOUT]);

    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<(usize, f64, f64, ShallowConvNet<f32>)> = None;

    for epoch_idx in 0..hp.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        SplitMix64::derive(hp.seed, &[STREAM_SHUFFLE, epoch_idx as u64]).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for batch_indices in order.chunks(hp.batch_size) {
            let epochs: Vec<Epoch> = batch_indices
                .iter()
                .map(|&i| train_set[i].clone())
                .collect();
            let targets: Vec<usize> = epochs.iter().map(|e| target_of(task, e)).collect();
            let batch = epoch_batch::<f32>(&epochs)?;

            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, batch, Mode::Train, Some(&mut dropout_stream))?;
            let loss = pbci_nn::ops::softmax_cross_entropy(&mut tape, pass.logits, &targets)?;
            let loss_value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            model.absorb_gradients(&pass, &mut grads);
            optimizer.step(model.parameters_mut());
            loss_sum += loss_value * batch_indices.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let (val_accuracy, val_loss) = if val_set.is_empty() {
            (0.0, f64::INFINITY)
        } else {
            let report = evaluate(&model, val_set)?;
            (report.accuracy, report.mean_loss)
        };
        history.push(EpochStats {
            train_loss,
            val_accuracy,
            val_loss,
        });

        let better = match &best {
            None => true,
            Some((_, best_acc, best_loss, _)) => {
                val_accuracy > *best_acc
                    || (val_accuracy == *best_acc && val_loss < *best_loss)
            }
        };
        if better {
            best = Some((epoch_idx, val_accuracy, val_loss, model.clone()));
        }
    }

    let (best_epoch, _, _, best_model) = best.expect("epochs >= 1");
    Ok((
        best_model,
        TrainHistory {
            epochs: history,
            best_epoch,
        },
    ))
}

/// Accuracy plus a full confusion matrix (`confusion[true][predicted]`).
#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

impl EvalReport {
    pub fn from_predictions(truths: &[usize], predictions: &[usize], n_classes: usize) -> Self {
        Self::from_predictions_with_loss(truths, predictions, n_classes, f64::NAN)
    }

    fn from_predictions_with_loss(
        truths: &[usize],
        predictions: &[usize],
        n_classes: usize,
        mean_loss: f64,
    ) -> Self {
        assert_eq!(truths.len(), predictions.len());
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&t, &p) in truths.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
        EvalReport {
            n_classes,
            accuracy: correct as f64 / truths.len().max(1) as f64,
            mean_loss,
            confusion,
            total: truths.len(),
        }
    }

    pub fn trace(&self) -> usize {
        (0..self.n_classes).map(|i| self.confusion[i][i]).sum()
    }
}

const EVAL_BATCH: usize = 64;

/// Eval-mode accuracy, loss, and confusion matrix over a test set.
pub fn evaluate(model: &ShallowConvNet<f32>, test_set: &[&Epoch]) -> Result<EvalReport, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let task = model.task;
    let k = model.spec.n_outputs;
    let mut truths = Vec::with_capacity(test_set.len());
    let mut predictions = Vec::with_capacity(test_set.len());
    let mut loss_sum = 0.0f64;
    for chunk in test_set.chunks(EVAL_BATCH) {
        let epochs: Vec<Epoch> = chunk.iter().map(|&e| e.clone()).collect();
        let logits = model.eval_logits(epoch_batch::<f32>(&epochs)?)?;
        let probs = softmax_rows(&logits);
        for (row, epoch) in probs.data().chunks(k).zip(chunk) {
            let truth = target_of(task, epoch);
            truths.push(truth);
            predictions.push(crate::decoder::argmax_lowest(row));
            loss_sum -= (row[truth] as f64).max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(EvalReport::from_predictions_with_loss(
        &truths,
        &predictions,
        k,
        loss_sum / test_set.len() as f64,
    ))
}

/// One row of a per-subject, per-paradigm accuracy table.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SubjectRow {
    pub subject: u8,
    /// Accuracy per paradigm, `None` when the cell had no test trials.
    pub mi: Option<f64>,
    pub si: Option<f64>,
    pub vi: Option<f64>,
    pub overall: Option<f64>,
}

fn paradigm_slot(row: &mut SubjectRow, paradigm: Paradigm) -> &mut Option<f64> {
    match paradigm {
        Paradigm::Mi => &mut row.mi,
        Paradigm::Si => &mut row.si,
        Paradigm::Vi => &mut row.vi,
    }
}

/// Table-shaped experiment result: one row per subject, a mean row, and a
/// grand mean, plus per-fold accuracies and the run configuration.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ExperimentReport {
    pub task: TaskKind,
    pub hp: Hyperparams,
    pub k_folds: usize,
    pub rows: Vec<SubjectRow>,
    pub mean_row: SubjectRow,
    pub grand_mean: f64,
    pub fold_accuracies: Vec<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = values.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn build_table(
    task: TaskKind,
    hp: &Hyperparams,
    k: usize,
    cells: &BTreeMap<(u8, Paradigm), (usize, usize)>,
    fold_accuracies: Vec<f64>,
) -> ExperimentReport {
    let subjects: Vec<u8> = {
        let mut s: Vec<u8> = cells.keys().map(|&(subj, _)| subj).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut rows = Vec::new();
    for &subject in &subjects {
        let mut row = SubjectRow {
            subject,
            mi: None,
            si: None,
            vi: None,
            overall: None,
        };
        let (mut correct_total, mut count_total) = (0usize, 0usize);
        for paradigm in Paradigm::ALL {
            if let Some(&(correct, count)) = cells.get(&(subject, paradigm)) {
                if count > 0 {
                    *paradigm_slot(&mut row, paradigm) = Some(correct as f64 / count as f64);
                    correct_total += correct;
                    count_total += count;
                }
            }
        }
        if count_total > 0 {
            row.overall = Some(correct_total as f64 / count_total as f64);
        }
        rows.push(row);
    }
    let mean_row = SubjectRow {
        subject: 0,
        mi: mean_of(rows.iter().map(|r| r.mi)),
        si: mean_of(rows.iter().map(|r| r.si)),
        vi: mean_of(rows.iter().map(|r| r.vi)),
        overall: mean_of(rows.iter().map(|r| r.overall)),
    };
    let grand_mean = mean_row.overall.unwrap_or(f64::NAN);
    ExperimentReport {
        task,
        hp: *hp,
        k_folds: k,
        rows,
        mean_row,
        grand_mean,
        fold_accuracies,
    }
}

impl ExperimentReport {
    pub fn render_text(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:7.3}"),
                None => format!("{:>7}", "-"),
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "task: {:?}   folds: {}   epochs: {}   lr: {}   weight_decay: {}   batch: {}   seed: {}\n",
            self.task,
            self.k_folds,
            self.hp.epochs,
            self.hp.lr,
            self.hp.weight_decay,
            self.hp.batch_size,
            self.hp.seed
        ));
        out.push_str(&format!(
            "{:<8}{:>7}{:>8}{:>8}{:>9}\n",
            "subject", "MI", "SI", "VI", "overall"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "S{:<7}{} {} {}  {}\n",
                row.subject,
                cell(row.mi),
                cell(row.si),
                cell(row.vi),
                cell(row.overall)
            ));
        }
        out.push_str(&format!(
            "{:<8}{} {} {}  {}\n",
            "mean",
            cell(self.mean_row.mi),
            cell(self.mean_row.si),
            cell(self.mean_row.vi),
            cell(self.mean_row.overall)
        ));
        out.push_str(&format!("grand mean: {:.4}\n", self.grand_mean));
        out
    }

    pub fn render_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| format!("{x:.4}")).unwrap_or_default()
        }
        let mut out = String::from("subject,mi,si,vi,overall\n");
        for row in &self.rows {
            out.push_str(&format!(
                "S{},{},{},{},{}\n",
                row.subject,
                cell(row.mi),
                cell(row.si),
                cell(row.vi),
                cell(row.overall)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            cell(self.mean_row.mi),
            cell(self.mean_row.si),
            cell(self.mean_row.vi),
            cell(self.mean_row.overall)
        ));
        out
    }
}

fn infer_n_subjects(epochs: &[Epoch]) -> usize {
    epochs
        .iter()
        .map(|e| e.subject.index() as usize)
        .max()
        .unwrap_or(0)
}

/// Subject-identification experiment: one model over all paradigms,
/// stratified five-fold cross-validation over every record; reports
/// per-subject recall per paradigm (pooled over folds), the usual mean row,
/// and the grand mean of per-subject overall recalls.
pub fn run_identification_experiment(
    epochs: &[Epoch],
    hp: &Hyperparams,
    k: usize,
) -> Result<ExperimentReport, TrainError> {
    if epochs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_subjects = infer_n_subjects(epochs);
    let strata: Vec<u8> = epochs.iter().map(|e| e.subject.index()).collect();
    let plan = kfold(&strata, k, hp.seed)?;

    let mut spec = ModelSpec::new(n_subjects);
    spec.n_channels = epochs[0].n_channels;
    spec.n_samples = epochs[0].n_samples;

    let mut cells: BTreeMap<(u8, Paradigm), (usize, usize)> = BTreeMap::new();
    let mut fold_accuracies = Vec::with_capacity(k);
    for (fold_idx, fold) in plan.folds.iter().enumerate() {
        let model = ShallowConvNet::build(
            spec,
            TaskKind::Identification,
            SplitMix64::derive(hp.seed, &[STREAM_MODEL, fold_idx as u64]).next_u64(),
        )?;
        let train_set: Vec<&Epoch> = fold.train.iter().map(|&i| &epochs[i]).collect();
        let val_set: Vec<&Epoch> = fold.val.iter().map(|&i| &epochs[i]).collect();
        let fold_hp = Hyperparams {
            seed: SplitMix64::derive(hp.seed, &[STREAM_MODEL, fold_idx as u64, 1]).next_u64(),
            ..*hp
        };
        let (trained, _history) = train(model, &train_set, &val_set, &fold_hp)?;

        let test_set: Vec<&Epoch> = fold.test.iter().map(|&i| &epochs[i]).collect();
        let mut fold_correct = 0usize;
        for chunk in test_set.chunks(EVAL_BATCH) {
            let batch_epochs: Vec<Epoch> = chunk.iter().map(|&e| e.clone()).collect();
            let logits = trained.eval_logits(epoch_batch::<f32>(&batch_epochs)?)?;
            for (row, epoch) in logits.data().chunks(n_subjects).zip(chunk) {
                let predicted = crate::decoder::argmax_lowest(row);
                let correct = predicted == epoch.subject.class_index();
                let cell = cells
                    .entry((epoch.subject.index(), epoch.paradigm))
                    .or_insert((0, 0));
                cell.0 += correct as usize;
                cell.1 += 1;
                fold_correct += correct as usize;
            }
        }
        fold_accuracies.push(fold_correct as f64 / test_set.len().max(1) as f64);
    }
    Ok(build_table(
        TaskKind::Identification,
        hp,
        k,
        &cells,
        fold_accuracies,
    ))
}

/// Subject-dependent intention experiment: for every (subject, paradigm)
/// cell, label-stratified five-fold cross-validation with a fresh 4-way
/// model per fold; cell accuracy pools the fold test predictions.
pub fn run_intention_experiment(
    epochs: &[Epoch],
    hp: &Hyperparams,
    k: usize,
) -> Result<ExperimentReport, TrainError> {
    if epochs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut spec = ModelSpec::new(ImageryLabel::COUNT);
    spec.n_channels = epochs[0].n_channels;
    spec.n_samples = epochs[0].n_samples;

    let mut cell_map: BTreeMap<(u8, Paradigm), Vec<&Epoch>> = BTreeMap::new();
    for e in epochs {
        cell_map
            .entry((e.subject.index(), e.paradigm))
            .or_default()
            .push(e);
    }

    let mut cells: BTreeMap<(u8, Paradigm), (usize, usize)> = BTreeMap::new();
    let mut fold_accuracies = Vec::new();
    for (&(subject, paradigm), members) in &cell_map {
        let strata: Vec<usize> = members.iter().map(|e| e.label.ordinal()).collect();
        let cell_seed = SplitMix64::derive(
            hp.seed,
            &[STREAM_MODEL, subject as u64, paradigm.code() as u64],
        )
        .next_u64();
        let plan = kfold(&strata, k, cell_seed)?;
        let mut correct = 0usize;
        let mut count = 0usize;
        for (fold_idx, fold) in plan.folds.iter().enumerate() {
            let model = ShallowConvNet::build(
                spec,
                TaskKind::Intention,
                SplitMix64::derive(cell_seed, &[fold_idx as u64]).next_u64(),
            )?;
            let train_set: Vec<&Epoch> = fold.train.iter().map(|&i| members[i]).collect();
            let val_set: Vec<&Epoch> = fold.val.iter().map(|&i| members[i]).collect();
            let fold_hp = Hyperparams {
                seed: SplitMix64::derive(cell_seed, &[fold_idx as u64, 1]).next_u64(),
                ..*hp
            };
            let (trained, _history) = train(model, &train_set, &val_set, &fold_hp)?;
            let test_set: Vec<&Epoch> = fold.test.iter().map(|&i| members[i]).collect();
            let report = evaluate(&trained, &test_set)?;
            correct += report.trace();
            count += report.total;
            fold_accuracies.push(report.accuracy);
        }
        cells.insert((subject, paradigm), (correct, count));
    }
    Ok(build_table(
        TaskKind::Intention,
        hp,
        k,
        &cells,
        fold_accuracies,
    ))
}

/// Cross-subject intention split: subjects are permuted by seed, the first
/// six train, the next validates, the last tests; one model per paradigm.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CrossSubjectReport {
    pub hp: Hyperparams,
    pub train_subjects: Vec<u8>,
    pub val_subject: u8,
    pub test_subject: u8,
    pub per_paradigm: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn run_intention_cross_subject(
    epochs: &[Epoch],
    hp: &Hyperparams,
) -> Result<CrossSubjectReport, TrainError> {
    if epochs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut subjects: Vec<u8> = epochs.iter().map(|e| e.subject.index()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 3 {
        return Err(TrainError::BadHyperparams(format!(
            "cross-subject split needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    SplitMix64::derive(hp.seed, &[STREAM_SHUFFLE, 0xC5]).shuffle(&mut subjects);
    let test_subject = subjects[subjects.len() - 1];
    let val_subject = subjects[subjects.len() - 2];
    let train_subjects: Vec<u8> = subjects[..subjects.len() - 2].to_vec();

    let mut spec = ModelSpec::new(ImageryLabel::COUNT);
    spec.n_channels = epochs[0].n_channels;
    spec.n_samples = epochs[0].n_samples;

    let mut per_paradigm = BTreeMap::new();
    for paradigm in Paradigm::ALL {
        let of = |pred: &dyn Fn(u8) -> bool| -> Vec<&Epoch> {
            epochs
                .iter()
                .filter(|e| e.paradigm == paradigm && pred(e.subject.index()))
                .collect()
        };
        let train_set = of(&|s| train_subjects.contains(&s));
        let val_set = of(&|s| s == val_subject);
        let test_set = of(&|s| s == test_subject);
        if train_set.is_empty() || test_set.is_empty() {
            continue;
        }
        let model = ShallowConvNet::build(
            spec,
            TaskKind::Intention,
            SplitMix64::derive(hp.seed, &[STREAM_MODEL, paradigm.code() as u64]).next_u64(),
        )?;
        let (trained, _) = train(model, &train_set, &val_set, hp)?;
        let report = evaluate(&trained, &test_set)?;
        per_paradigm.insert(paradigm.name().to_string(), report.accuracy);
    }
    let mean = per_paradigm.values().sum::<f64>() / per_paradigm.len().max(1) as f64;
    Ok(CrossSubjectReport {
        hp: *hp,
        train_subjects,
        val_subject,
        test_subject,
        per_paradigm,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectId;
    use proptest::prelude::*;

    #[test]
    fn split_ratios() {
        let plan = split_identification(4800, 1).unwrap();
        assert_eq!(plan.train.len(), 3360);
        assert_eq!(plan.val.len(), 480);
        assert_eq!(plan.test.len(), 960);

        let plan = split_identification(10, 1).unwrap();
        assert_eq!(
            (plan.train.len(), plan.val.len(), plan.test.len()),
            (7, 1, 2)
        );

        assert!(split_identification(0, 1).is_err());
    }

    #[test]
    fn split_is_seed_deterministic() {
        assert_eq!(
            split_identification(100, 7).unwrap(),
            split_identification(100, 7).unwrap()
        );
        assert_ne!(
            split_identification(100, 7).unwrap().train,
            split_identification(100, 8).unwrap().train
        );
    }

    #[test]
    fn kfold_balanced_strata() {
        // 200 records, 50 per each of 4 labels
        let strata: Vec<usize> = (0..200).map(|i| i / 50).collect();
        let plan = kfold(&strata, 5, 3).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 40);
            for label in 0..4 {
                let in_label = fold.test.iter().filter(|&&i| strata[i] == label).count();
                assert_eq!(in_label, 10);
            }
            // inner validation is 12.5% of the remaining 160
            assert_eq!(fold.val.len(), 20);
            assert_eq!(fold.train.len(), 140);
        }
        // identical seeds identical folds
        assert_eq!(plan, kfold(&strata, 5, 3).unwrap());
    }

    #[test]
    fn kfold_rejects_small_stratum() {
        let strata = vec![0usize, 0, 0, 1, 1]; // stratum 1 has 2 < 5
        assert!(matches!(
            kfold(&strata, 5, 0),
            Err(TrainError::StratumTooSmall { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn split_disjoint_and_covering(n in 1usize..600, seed in 0u64..u64::MAX) {
            let plan = split_identification(n, seed).unwrap();
            let mut all: Vec<usize> = plan
                .train
                .iter()
                .chain(&plan.val)
                .chain(&plan.test)
                .copied()
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(plan.train.len(), n * 70 / 100);
            prop_assert_eq!(plan.val.len(), n * 10 / 100);
        }

        #[test]
        fn kfold_partitions_and_balance(seed in 0u64..u64::MAX, per_label in 5usize..40) {
            let strata: Vec<usize> = (0..4 * per_label).map(|i| i / per_label).collect();
            let plan = kfold(&strata, 5, seed).unwrap();
            // test partitions are disjoint and cover everything
            let mut seen = vec![false; strata.len()];
            for fold in &plan.folds {
                for &i in &fold.test {
                    prop_assert!(!seen[i], "record {} in two test folds", i);
                    seen[i] = true;
                }
                // train/val/test disjoint and covering within the fold
                let mut union: Vec<usize> = fold
                    .train
                    .iter()
                    .chain(&fold.val)
                    .chain(&fold.test)
                    .copied()
                    .collect();
                union.sort_unstable();
                prop_assert_eq!(union, (0..strata.len()).collect::<Vec<_>>());
            }
            prop_assert!(seen.into_iter().all(|s| s));
            // per-label test counts differ by at most 1 across folds
            for label in 0..4 {
                let counts: Vec<usize> = plan
                    .folds
                    .iter()
                    .map(|f| f.test.iter().filter(|&&i| strata[i] == label).count())
                    .collect();
                let (lo, hi) = (
                    counts.iter().min().unwrap(),
                    counts.iter().max().unwrap(),
                );
                prop_assert!(hi - lo <= 1, "label {} counts {:?}", label, counts);
            }
        }
    }

    #[test]
    fn eval_report_identities() {
        // perfect predictor
        let truths = [0usize, 1, 2, 3, 1, 2];
        let report = EvalReport::from_predictions(&truths, &truths, 4);
        assert_eq!(report.accuracy, 1.0);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v != 0, i == j && truths.contains(&i));
            }
        }

        // constant predictor on a balanced set: chance accuracy
        let truths: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let preds = vec![2usize; 100];
        let report = EvalReport::from_predictions(&truths, &preds, 4);
        assert_eq!(report.accuracy, 0.25);

        // accuracy == trace / total always
        assert_eq!(
            report.accuracy,
            report.trace() as f64 / report.total as f64
        );
        // row sums = per-class counts
        for (i, row) in report.confusion.iter().enumerate() {
            assert_eq!(
                row.iter().sum::<usize>(),
                truths.iter().filter(|&&t| t == i).count()
            );
        }
    }

    fn toy_epoch(subject: u8, label: ImageryLabel, trial: u32, seed: u64) -> Epoch {
        // two linearly separable classes: label-dependent oscillation amplitude
        let mut rng = SplitMix64::new(seed);
        let n_channels = 4;
        let n_samples = 100;
        let amp = match label.ordinal() {
            0 => 0.3,
            _ => 3.0,
        };
        let mut data = Vec::new();
        for _ch in 0..n_channels {
            for i in 0..n_samples {
                let t = i as f64 / 250.0;
                let osc = amp * (2.0 * std::f64::consts::PI * 20.0 * t).sin();
                data.push((osc + 0.1 * rng.next_normal()) as f32);
            }
        }
        Epoch {
            n_channels,
            n_samples,
            data,
            sample_rate: 250.0,
            subject: SubjectId::new(subject).unwrap(),
            paradigm: Paradigm::Mi,
            label,
            trial_id: trial,
        }
    }

    fn toy_spec() -> ModelSpec {
        let mut spec = ModelSpec::new(4);
        spec.n_channels = 4;
        spec.n_samples = 100;
        spec.pool_kernel = 20;
        spec.pool_stride = 10;
        spec
    }

    #[test]
    fn training_fits_separable_toy_data() {
        let epochs: Vec<Epoch> = (0..8)
            .map(|i| {
                let label = if i % 2 == 0 {
                    ImageryLabel::Apple
                } else {
                    ImageryLabel::Star
                };
                toy_epoch(1, label, i, 100 + i as u64)
            })
            .collect();
        let refs: Vec<&Epoch> = epochs.iter().collect();
        let model = ShallowConvNet::build(toy_spec(), TaskKind::Intention, 3).unwrap();
        let hp = Hyperparams {
            epochs: 60,
            batch_size: 8,
            seed: 5,
            ..Hyperparams::default()
        };
        let (_trained, history) = train(model, &refs, &refs, &hp).unwrap();
        let best = history
            .epochs
            .iter()
            .map(|e| e.val_accuracy)
            .fold(0.0f64, f64::max);
        assert_eq!(best, 1.0, "history: {:?}", history.epochs.last());
        // model selection invariant: returned best epoch has max val accuracy
        assert_eq!(history.epochs[history.best_epoch].val_accuracy, best);
    }

    #[test]
    fn zero_epochs_rejected() {
        let model = ShallowConvNet::build(toy_spec(), TaskKind::Intention, 3).unwrap();
        let e = toy_epoch(1, ImageryLabel::Apple, 0, 1);
        let hp = Hyperparams {
            epochs: 0,
            ..Hyperparams::default()
        };
        assert!(matches!(
            train(model, &[&e], &[&e], &hp),
            Err(TrainError::BadHyperparams(_))
        ));
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let epochs: Vec<Epoch> = (0..12)
            .map(|i| toy_epoch(1, ImageryLabel::ALL[i % 4], i as u32, 200 + i as u64))
            .collect();
        let refs: Vec<&Epoch> = epochs.iter().collect();
        let hp = Hyperparams {
            epochs: 4,
            batch_size: 5,
            seed: 77,
            ..Hyperparams::default()
        };
        let run = || {
            let model = ShallowConvNet::build(toy_spec(), TaskKind::Intention, 9).unwrap();
            train(model, &refs, &refs, &hp).unwrap()
        };
        let (model_a, hist_a) = run();
        let (model_b, hist_b) = run();
        for (a, b) in hist_a.epochs.iter().zip(&hist_b.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_accuracy.to_bits(), b.val_accuracy.to_bits());
        }
        for (pa, pb) in model_a.parameters().iter().zip(model_b.parameters()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
