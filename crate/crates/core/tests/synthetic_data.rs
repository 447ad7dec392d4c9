use collapse_lab::neurocore::RandomStream;
use collapse_lab::probe::holdout_accuracy;
use collapse_lab::synthgen::DeskDataConfig;

#[test]
fn weak_modality_is_least_linearly_decodable() {
    let cfg = DeskDataConfig {
        num_modalities: 4,
        n_train: 2000,
        n_test: 10,
        ..DeskDataConfig::default()
    };
    let mut acc = vec![0.0; cfg.num_modalities];
    for seed in 1..=5 {
        let (train, _) = cfg.generate(&RandomStream::new(seed)).unwrap();
        let mut s = RandomStream::new(seed ^ 0xabc);
        for (i, x) in train.modalities.iter().enumerate() {
            acc[i] += holdout_accuracy(x, &train.labels, cfg.num_classes, &mut s).unwrap() / 5.0;
        }
    }
    println!("{acc:?}");
    assert!(acc[1..].iter().all(|a| *a > acc[0]), "{acc:?}");
}
