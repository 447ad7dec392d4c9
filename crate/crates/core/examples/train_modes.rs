//! Trains the same fusion model under the three regimes (vanilla, knowledge
//! distillation, basis reallocation) and compares test accuracy, final
//! semantic loss and fused-representation rank.
//!
//! `cargo run --release --example train_modes`

use collapse_lab::fusion::FusionModel;
use collapse_lab::neurocore::RandomStream;
use collapse_lab::probe::accuracy;
use collapse_lab::trainers::{train, TrainConfig, TrainMode};
use collapse_lab::synthgen::DeskDataConfig;
use collapse_lab::harness::RunConfig;

fn main() -> collapse_lab::Result<()> {
    let run = RunConfig {
        n_train: 1500,
        epochs: 40,
        kd_epochs: 15,
        teacher_epochs: 15,
        lr_decay_every: 20,
        ..RunConfig::default()
    };
    let data = DeskDataConfig {
        num_modalities: 3,
        ..run.data_config(3)
    };
    let (train_set, test_set) = data.generate(&RandomStream::new(3))?;
    let arch = run.architecture();

    for mode in [TrainMode::Vanilla, TrainMode::Kd, TrainMode::Ebr] {
        let init = RandomStream::new(3).fork("model");
        let mut model = FusionModel::new(&arch, &train_set.obs_dims(), data.num_classes, &init)?;
        if mode == TrainMode::Ebr {
            model.attach_ebr(&arch, &init.fork("ebr"))?;
        }
        let cfg: TrainConfig = run.train_config(mode, 3);
        let (model, trace) = train(model, &train_set, &cfg)?;
        let (_, logits) = model.fuse_predict(&test_set.modalities)?;
        let last = trace.records.last().expect("at least one epoch");
        println!(
            "{:<8} test acc {:.3}  final L_sem {:.3}  fused rank {}  L_md {}",
            mode.as_str(),
            accuracy(&logits, &test_set.labels),
            last.sem_loss,
            last.fused_rank,
            last.md_loss.map_or("-".into(), |v| format!("{v:.3}")),
        );
    }
    Ok(())
}
