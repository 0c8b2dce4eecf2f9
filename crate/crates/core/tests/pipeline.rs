//! Library-level runs of preprocess → train → sample → evaluate on small
//! synthetic data.

use trajdiff::ais::Split;
use trajdiff::archive::preprocess;
use trajdiff::evaluation::horizons_from_hours;
use trajdiff::evaluation::report;
use trajdiff::model::Batcher;
use trajdiff::training::{probe_rows, sample_trace, Checkpoint, Trainer};
use trajdiff::RunConfig;

fn small() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.synthetic.scenes = 4;
    c.data.synthetic.holdout_scenes = 1;
    c.model.width = 16;
    c.model.ffn = 32;
    c.model.layers = 1;
    c.model.lstm_hidden = 8;
    c.model.cond_width = 8;
    c.model.cnn_channels = [4, 4, 8];
    c.scene.grid = 16;
    c.train.batch_size = 16;
    c.train.max_steps = 20;
    c.eval.n_samples = 4;
    c
}

/// Runs the pipeline and returns the report JSON and trace bytes.
fn run_once(c: &RunConfig) -> (String, Vec<u8>) {
    let archive = preprocess(c).unwrap();
    let batcher = Batcher::from_config(c).unwrap();
    let mut trainer = Trainer::new(c, batcher.clone(), archive.dataset(Split::Train).unwrap(), None).unwrap();
    trainer.run(None).unwrap();
    let ckpt = trainer.checkpoint().unwrap();
    let test = archive.dataset(Split::Test).unwrap();
    let idx: Vec<usize> = (0..test.len()).collect();
    let trace = sample_trace(trainer.model(), &test, &idx, &batcher, c, 4, c.seed, false, &ckpt.checkpoint_id).unwrap();
    let horizons = horizons_from_hours(&c.eval.horizons_hours, 10, 24).unwrap();
    let r = report(&trace.final_predictions(), &horizons, &c.data.roi, c.eval.distance, &c.hash(), &ckpt.checkpoint_id)
        .unwrap();
    assert_eq!(r.rows.len(), horizons.len());
    (r.to_json().unwrap(), trace.to_bytes().unwrap())
}

#[test]
fn serial_runs_are_bitwise_identical() {
    let c = small();
    let (a, ta) = run_once(&c);
    let (b, tb) = run_once(&c);
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(run_once(&other).0, a);
}

#[test]
fn loss_falls_over_first_200_steps() {
    let mut c = small();
    c.train.max_steps = 200;
    let archive = preprocess(&c).unwrap();
    let batcher = Batcher::from_config(&c).unwrap();
    let mut t = Trainer::new(&c, batcher, archive.dataset(Split::Train).unwrap(), None).unwrap();
    t.run(None).unwrap();
    let losses: Vec<f64> = t.losses().iter().map(|r| r.loss).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&losses[..20]), mean(&losses[180..]));
    assert!(tail < 0.5 * head, "first 20 mean {head}, last 20 mean {tail}");
}

#[test]
fn checkpoint_round_trip_restores_model() {
    let c = small();
    let archive = preprocess(&c).unwrap();
    let batcher = Batcher::from_config(&c).unwrap();
    let train = archive.dataset(Split::Train).unwrap();
    let mut t = Trainer::new(&c, batcher.clone(), train.clone(), None).unwrap();
    t.run(None).unwrap();
    let bytes = t.checkpoint().unwrap().container.to_bytes(trajdiff::training::CHECKPOINT_MAGIC).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    ckpt.ensure_matches(&c).unwrap();
    let model = ckpt.model().unwrap();
    let idx = [0, 1];
    let a = sample_trace(t.model(), &train, &idx, &batcher, &c, 3, 9, true, "").unwrap();
    let b = sample_trace(&model, &train, &idx, &batcher, &c, 3, 9, true, "").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.meta.steps.len(), 21);
}

#[test]
fn masked_rows_are_zero_in_probe() {
    let mut c = small();
    c.train.ablation.map = true;
    let archive = preprocess(&c).unwrap();
    let batcher = Batcher::from_config(&c).unwrap();
    let train = archive.dataset(Split::Train).unwrap();
    let mut t = Trainer::new(&c, batcher.clone(), train.clone(), None).unwrap();
    t.run(None).unwrap();
    let rows = probe_rows(t.model(), &train, &batcher, &c).unwrap();
    assert_eq!(rows[2], 0.0);
    assert!(rows[0] > 0.0 && rows[1] > 0.0);
}
