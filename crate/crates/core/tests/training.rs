use lmc::checkpoint::{load_checkpoint, save_checkpoint};
use lmc::encoder::{forward, EncoderConfig};
use lmc::manifold::{generate_synthetic_dataset, PatchDataset};
use lmc::stain_math::StainBasis;
use lmc::trainer::{train, write_loss_log, TrainConfig, Trainer, TrainingSet};
use lmc::Error;

fn small_run() -> (PatchDataset, EncoderConfig, TrainConfig) {
    run_of(40)
}

fn run_of(steps: usize) -> (PatchDataset, EncoderConfig, TrainConfig) {
    let ds = generate_synthetic_dataset(21, 16, 32, &StainBasis::reference(), 2).unwrap();
    let mut cfg = TrainConfig::with_total_steps(steps);
    cfg.batch_size = 8;
    cfg.seed = 4;
    let enc = EncoderConfig { seed: 4, ..EncoderConfig::tiny() };
    (ds, enc, cfg)
}

#[test]
fn same_seed_gives_identical_log_file() {
    let (ds, enc, cfg) = run_of(20);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let (_, log) = train(&ds, &enc, &cfg).unwrap();
        let path = dir.path().join(name);
        write_loss_log(&path, &log).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let text = String::from_utf8(files.swap_remove(0)).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.starts_with("step,invariance,redundancy,total,lr\n"));
}

#[test]
fn resume_through_file_matches_uninterrupted_run() {
    let (ds, enc, cfg) = small_run();
    let data = TrainingSet::prepare(&ds, &cfg).unwrap();

    let mut straight = Trainer::new(&enc, &cfg).unwrap();
    let full_log = straight.run(&data, 40).unwrap();
    assert!(straight.is_finished());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::new(&enc, &cfg).unwrap();
    let mut log = first.run(&data, 20).unwrap();
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);

    let mut second = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(second.step(), 20);
    log.extend(second.run(&data, 100).unwrap());

    assert_eq!(log, full_log);
    assert_eq!(second.params(), straight.params());
    assert_eq!(second.checkpoint(), straight.checkpoint());

    let probe: Vec<_> = ds.items().iter().take(3).map(|i| i.patch.clone()).collect();
    assert_eq!(
        forward(second.params(), &probe).unwrap(),
        forward(straight.params(), &probe).unwrap()
    );
}

#[test]
fn corrupted_checkpoint_file_is_a_format_error() {
    let (_, enc, cfg) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&path, &Trainer::new(&enc, &cfg).unwrap().checkpoint()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();

    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    bytes[0] ^= 0xff;
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}

#[test]
fn log_rows_are_finite_and_follow_schedule() {
    let (ds, enc, cfg) = small_run();
    let (_, log) = train(&ds, &enc, &cfg).unwrap();
    assert_eq!(log.len(), 40);
    for (i, row) in log.iter().enumerate() {
        assert_eq!(row.step, i);
        assert!(row.loss.total.is_finite() && row.loss.total >= 0.0);
        assert!(row.lr > 0.0 && row.lr <= cfg.base_lr);
    }
    assert!(log[cfg.warmup_steps].lr >= log[0].lr);
    assert!((log[39].lr - cfg.final_lr).abs() <= 1e-12, "{}", log[39].lr);
}
