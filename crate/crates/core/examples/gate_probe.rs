use pbci_core::data::Epoch;
use pbci_core::decoder::{ModelSpec, ShallowConvNet, TaskKind};
use pbci_core::signal::{design_bandpass, filtfilt, rescale};
use pbci_core::synth::{generate_epochs, preset, SynthConfig};
use pbci_core::train::{kfold, train, evaluate, Hyperparams};
use std::time::Instant;

fn prep(epochs: &[Epoch]) -> Vec<Epoch> {
    let cascade = design_bandpass(8.0, 30.0, 4, 250.0).unwrap();
    epochs.iter().map(|e| rescale(&filtfilt(e, &cascade).unwrap(), 1e6)).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let trials: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);

    let config = SynthConfig { n_trials_per_label: trials, seed: 42, ..preset("easy").unwrap() };
    let raw = generate_epochs(&config).unwrap();
    let prepped = prep(&raw);
    println!("dataset: {} epochs", prepped.len());

    // single fold of the 5-fold plan
    let strata: Vec<u8> = prepped.iter().map(|e| e.subject.index()).collect();
    let plan = kfold(&strata, 5, 42).unwrap();
    let fold = &plan.folds[0];
    let train_set: Vec<&Epoch> = fold.train.iter().map(|&i| &prepped[i]).collect();
    let val_set: Vec<&Epoch> = fold.val.iter().map(|&i| &prepped[i]).collect();
    let test_set: Vec<&Epoch> = fold.test.iter().map(|&i| &prepped[i]).collect();
    println!("fold 0: train {} val {} test {}", train_set.len(), val_set.len(), test_set.len());

    let model = ShallowConvNet::build(ModelSpec::identification(), TaskKind::Identification, 7).unwrap();
    let hp = Hyperparams { epochs: n_epochs, seed: 42, ..Hyperparams::default() };
    let t = Instant::now();
    let (trained, history) = train(model, &train_set, &val_set, &hp).unwrap();
    for (i, e) in history.epochs.iter().enumerate() {
        println!("epoch {:2}: train_loss {:.4}  val_acc {:.3}  val_loss {:.4}", i, e.train_loss, e.val_accuracy, e.val_loss);
    }
    println!("trained in {:.0}s; best epoch {}", t.elapsed().as_secs_f64(), history.best_epoch);
    let report = evaluate(&trained, &test_set).unwrap();
    println!("fold-0 test accuracy: {:.3}", report.accuracy);
}
