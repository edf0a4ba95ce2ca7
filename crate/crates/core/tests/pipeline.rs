use hapnet_core::report::write_report_csvs;
use hapnet_core::{
    evaluate, generate, split, train, AblationMode, Checkpoint, Dataset, EvalReport, HapError,
    HapNet, ModelConfig, Split, SyntheticConfig, TrainConfig,
};

fn small_dataset(seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        subjects_per_cluster: 15,
        d: 5,
        seed,
        ..SyntheticConfig::preset(3)
    };
    split(&generate(&cfg).unwrap(), seed).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 5,
        n_e: 3,
        h: 4,
        head_hidden: 8,
        decoder_hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn dataset_file_round_trip() {
    let ds = small_dataset(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(
        back.split_len(Split::Train) + back.split_len(Split::Valid) + back.split_len(Split::Test),
        back.len()
    );
}

#[test]
fn truncated_dataset_is_a_schema_error() {
    let ds = small_dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    ds.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let cut: Vec<&str> = text.lines().take(10).collect();
    std::fs::write(&path, cut.join("\n")).unwrap();
    assert!(matches!(Dataset::load(&path), Err(HapError::Schema(_))));
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let ds = small_dataset(3);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ablation: AblationMode::NoPaaa,
        ..TrainConfig::default()
    };
    let out = train(&ds, &small_model(), &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.model.to_checkpoint(tc.ablation).save(&path).unwrap();

    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.ablation, AblationMode::NoPaaa);
    let reloaded = HapNet::from_checkpoint(&ckpt).unwrap();
    let a = evaluate(&out.model, tc.ablation, &ds, Split::Test).unwrap();
    let b = evaluate(&reloaded, ckpt.ablation, &ds, Split::Test).unwrap();
    assert_eq!(a, b);

    let report_path = dir.path().join("report.json");
    b.save(&report_path).unwrap();
    assert_eq!(EvalReport::load(&report_path).unwrap(), b);
    let csvs = write_report_csvs(&b, &dir.path().join("csv")).unwrap();
    assert_eq!(csvs.len(), 3);
}

#[test]
fn model_rejects_dataset_with_other_dimension() {
    let ds = small_dataset(4);
    let model = HapNet::new(ModelConfig {
        d: 6,
        ..small_model()
    })
    .unwrap();
    assert!(matches!(
        evaluate(&model, AblationMode::Full, &ds, Split::Test),
        Err(HapError::Config(_))
    ));
}
