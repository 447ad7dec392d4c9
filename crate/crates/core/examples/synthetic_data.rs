//! Generates a desk dataset, prints its feature ledger, and checks that the
//! weak modality really is the least linearly decodable one.
//!
//! `cargo run --release --example synthetic_data`

use collapse_lab::neurocore::RandomStream;
use collapse_lab::probe::holdout_accuracy;
use collapse_lab::synthgen::DeskDataConfig;

fn main() -> collapse_lab::Result<()> {
    let cfg = DeskDataConfig {
        num_modalities: 3,
        ..DeskDataConfig::default()
    };
    let (train, test) = cfg.generate(&RandomStream::new(7))?;
    println!(
        "{} train / {} test samples, {} modalities, obs dims {:?}",
        train.len(),
        test.len(),
        train.num_modalities(),
        train.obs_dims()
    );
    println!("ledger strengths: {:?}", train.strengths);
    println!("weakest to strongest: {:?}", train.strength_order());
    println!("conjugate pairs (predictive, noisy): {:?}", train.conjugate_pairs()?);

    for f in train.ledger_features()?.iter().take(10) {
        println!("  modality {} latent {:>2} {:?}", f.modality, f.latent, f.role);
    }

    let mut s = RandomStream::new(1);
    for (i, x) in train.modalities.iter().enumerate() {
        let acc = holdout_accuracy(x, &train.labels, cfg.num_classes, &mut s)?;
        println!("linear probe on raw modality {i}: {acc:.3}");
    }
    Ok(())
}
