use std::collections::BTreeMap;
use std::path::Path;

use tdpaint::data::{DatasetKind, ToyDatasetSpec};
use tdpaint::io::{load_checkpoint, save_checkpoint, write_metrics_csv, Checkpoint};
use tdpaint::model::UNetConfig;
use tdpaint::schedule::ScheduleParams;
use tdpaint::training::{MetricRow, RunConfig, TrainConfig, Trainer};

fn run_config(steps: usize) -> RunConfig {
    RunConfig {
        dataset: ToyDatasetSpec { kind: DatasetKind::Gradients, image_side: 8, channels: 1, count: 8, seed: 2 },
        model: UNetConfig { in_channels: 1, base_width: 8, depth: 2, time_embed_dim: 16, groups: 4, blocks_per_level: 1 },
        schedule: ScheduleParams { steps: 40, beta_start: 1e-3, beta_end: 0.2 },
        training: TrainConfig { steps, batch_size: 2, lr: 1e-3, seed: 6, ..TrainConfig::default() },
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn reload_and_resave_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(run_config(3)).unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&a, &Checkpoint::from_trainer(&trainer)).unwrap();
    save_checkpoint(&b, &load_checkpoint(&a).unwrap()).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.contains_key("manifest.json"));
    assert!(fa.keys().any(|k| k.starts_with("weights")) && fa.keys().any(|k| k.starts_with("optim")));
    assert_eq!(fa, fb);
}

#[test]
fn same_config_gives_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let save = |name: &str| {
        let mut t = Trainer::new(run_config(2)).unwrap();
        t.run(|_| Ok(())).unwrap();
        let dir = tmp.path().join(name);
        save_checkpoint(&dir, &Checkpoint::from_trainer(&t)).unwrap();
        files(&dir)
    };
    assert_eq!(save("x"), save("y"));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(run_config(4)).unwrap();
    straight.run(|_| Ok(())).unwrap();

    let mut first = Trainer::new(run_config(2)).unwrap();
    first.run(|_| Ok(())).unwrap();
    save_checkpoint(tmp.path(), &Checkpoint::from_trainer(&first)).unwrap();
    let mut ckpt = load_checkpoint(tmp.path()).unwrap();
    ckpt.config.training.steps = 4;
    let mut resumed = ckpt.into_trainer().unwrap();
    assert_eq!(resumed.step(), 2);
    resumed.run(|_| Ok(())).unwrap();
    assert_eq!(resumed.net.params(), straight.net.params());
}

#[test]
fn corrupt_weights_are_reported_with_their_path() {
    let tmp = tempfile::tempdir().unwrap();
    let t = Trainer::new(run_config(1)).unwrap();
    save_checkpoint(tmp.path(), &Checkpoint::from_trainer(&t)).unwrap();
    let victim = tmp.path().join("weights").join("conv_in.weight.tens");
    std::fs::write(&victim, b"TDPTENS1\x01").unwrap();
    let err = load_checkpoint(tmp.path()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("conv_in.weight"), "{err}");
}

#[test]
fn metrics_csv_has_one_row_per_logged_step() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = run_config(5);
    cfg.training.log_interval = 2;
    let mut rows: Vec<MetricRow> = Vec::new();
    Trainer::new(cfg).unwrap().run(|r| {
        rows.push(r);
        Ok(())
    })
    .unwrap();
    let path = tmp.path().join("metrics.csv");
    write_metrics_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let steps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(text.lines().next(), Some("step,loss,wall_ms"));
    assert_eq!(steps, ["1", "3", "5"]);
}
