//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::cell::Cell;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff::ais::Split;
use trajdiff::archive::{preprocess, WindowArchive};
use trajdiff::diffusion::{
    estimate_x0, forward_diffuse, normal_tensor, sample, sample_step, standard_normal, NoisePredictor, NoiseSchedule,
};
use trajdiff::evaluation::{best_of_n, haversine_km, horizons_from_hours, report, Distance, Horizon, Metric, EARTH_RADIUS_KM};
use trajdiff::model::{alphas, purpose, stream, Batcher, TrajectoryModel};
use trajdiff::nn::Precision;
use trajdiff::training::{predict, sample_trace, Trainer};
use trajdiff::RunConfig;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>, String> {
    t.to_dtype(DType::F64).and_then(|t| t.flatten_all()?.to_vec1::<f64>()).map_err(err)
}

fn desk_schedule() -> Result<NoiseSchedule, String> {
    RunConfig::desk().diffusion.schedule().map_err(err)
}

fn forward_statistics() -> Outcome {
    let start = Instant::now();
    let schedule = desk_schedule()?;
    let x0 = [3.0, -4.0];
    let draws = 100_000;
    let x0_t = Tensor::from_slice(&x0, (1, 1, 2), &Device::Cpu)
        .and_then(|t| t.broadcast_as((draws, 1, 2))?.contiguous())
        .map_err(err)?;
    let mut worst: f64 = 0.0;
    for k in [1, 25, 50, 100] {
        let mut rng = stream(1, purpose::PROBE, k as u64);
        let eps = normal_tensor(&mut rng, &[draws, 1, 2], DType::F64, &Device::Cpu).map_err(err)?;
        let xs = to_vec(&forward_diffuse(&x0_t, k, &eps, &schedule).map_err(err)?)?;
        let ab = schedule.alpha_bar(k).map_err(err)?;
        for (c, &x) in x0.iter().enumerate() {
            let vals: Vec<f64> = xs.iter().skip(c).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / draws as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let (m, v) = (ab.sqrt() * x, 1.0 - ab);
            worst = worst.max(((mean - m) / m).abs()).max(((var - v) / v).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 0.01 && secs < 30.0, format!("worst relative error {worst:.2e}, {secs:.1} s"))
}

fn inverse_identity() -> Outcome {
    let schedule = desk_schedule()?;
    let dtype = Precision::F32.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = sample_step(&mut rng, schedule.steps());
        let x0: Vec<f64> = (0..48).map(|_| rng.random_range(-4.0..4.0)).collect();
        let x0 = Tensor::from_vec(x0, (1, 24, 2), &Device::Cpu).and_then(|t| t.to_dtype(dtype)).map_err(err)?;
        let eps = normal_tensor(&mut rng, &[1, 24, 2], dtype, &Device::Cpu).map_err(err)?;
        let xk = forward_diffuse(&x0, k, &eps, &schedule).map_err(err)?;
        let back = to_vec(&estimate_x0(&xk, k, &eps, &schedule).map_err(err)?)?;
        for (a, b) in back.iter().zip(to_vec(&x0)?) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-5, format!("max abs error {worst:.2e} over 1000 trials (f32)"))
}

/// Returns the exact noise that maps the planted trajectory to `x_k`.
struct Oracle<'a> {
    planted: Tensor,
    schedule: &'a NoiseSchedule,
    calls: Cell<usize>,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, x_k: &Tensor, steps: &[usize], _: &Tensor) -> trajdiff::Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        let ab = self.schedule.alpha_bar(steps[0])?;
        let x0 = self.planted.broadcast_as(x_k.dims())?;
        Ok((x_k - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    }
}

fn oracle_sampler() -> Outcome {
    let config = RunConfig::desk();
    let schedule = desk_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let planted: Vec<f64> = (0..48).map(|_| rng.random_range(-3.0..3.0)).collect();
    let oracle = Oracle {
        planted: Tensor::from_vec(planted.clone(), (1, 24, 2), &Device::Cpu).map_err(err)?,
        schedule: &schedule,
        calls: Cell::new(0),
    };
    let (batch, n) = (1, 8);
    let cond = Tensor::zeros((batch, 3, 4), DType::F64, &Device::Cpu).map_err(err)?;
    let out = sample(&oracle, &cond, &schedule, &config.diffusion.sampler(), n, 24, &mut rng, false).map_err(err)?;
    let xs = to_vec(&out.samples)?;
    let worst = xs
        .chunks(48)
        .flat_map(|s| s.iter().zip(&planted).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let calls = oracle.calls.get();
    check(
        worst < 1e-4 && calls == 20 && out.denoiser_calls == 20,
        format!("max abs error {worst:.2e}, {calls} denoiser calls for {n} samples"),
    )
}

/// Central differences on 20 random denoiser scalars against backprop.
fn gradient_check(model: &TrajectoryModel, config: &RunConfig, seed: u64) -> Result<f64, String> {
    let archive = preprocess(config).map_err(err)?;
    let data = archive.dataset(Split::Train).map_err(err)?;
    let batcher = Batcher::from_config(config).map_err(err)?;
    let mut rng = stream(seed, purpose::PROBE, 7);
    let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..data.len())).collect();
    let a = alphas(idx.len(), config.scene.alpha, config.scene.resample_alpha, &mut rng);
    let batch = batcher.batch(&data, &idx, &a).map_err(err)?;
    let steps: Vec<usize> = idx.iter().map(|_| sample_step(&mut rng, 100)).collect();
    let eps = normal_tensor(&mut rng, batch.x0.dims(), DType::F64, &Device::Cpu).map_err(err)?;
    let mask = config.train.ablation;
    let loss = |m: &TrajectoryModel| -> Result<f64, String> {
        m.loss_with(&batch, mask, &steps, &eps).and_then(|l| Ok(l.to_scalar::<f64>()?)).map_err(err)
    };
    let grads = model.loss_with(&batch, mask, &steps, &eps).map_err(err)?.backward().map_err(err)?;

    let vars: Vec<(&String, &Var)> = model.store().vars().filter(|(n, _)| n.starts_with("denoiser.")).collect();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut flat = rng.random_range(0..total);
        let (_, var) = vars
            .iter()
            .find(|(_, v)| {
                let hit = flat < v.elem_count();
                if !hit {
                    flat -= v.elem_count();
                }
                hit
            })
            .ok_or("parameter index out of range")?;
        let analytic = grads.get(var.as_tensor()).map(to_vec).transpose()?.map_or(0.0, |g| g[flat]);
        let original = to_vec(var.as_tensor())?;
        let set = |delta: f64| -> Result<(), String> {
            let mut v = original.clone();
            v[flat] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).map_err(err)?).map_err(err)
        };
        set(h)?;
        let up = loss(model)?;
        set(-h)?;
        let down = loss(model)?;
        set(0.0)?;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradient_correctness() -> Outcome {
    let mut config = RunConfig::desk();
    config.model.precision = Precision::F64;
    config.train.max_steps = 100;
    let batcher = Batcher::from_config(&config).map_err(err)?;
    let train = preprocess(&config).and_then(|a| a.dataset(Split::Train)).map_err(err)?;
    let mut trainer = Trainer::new(&config, batcher, train, None).map_err(err)?;
    let at_init = gradient_check(trainer.model(), &config, 1)?;
    trainer.run(None).map_err(err)?;
    let trained = gradient_check(trainer.model(), &config, 2)?;
    check(
        at_init < 1e-3 && trained < 1e-3,
        format!("worst relative error {at_init:.2e} at init, {trained:.2e} after 100 steps"),
    )
}

/// Normalized best-of-20 ADE at the full horizon.
fn ade_at_h24(model: &TrajectoryModel, config: &RunConfig, archive: &WindowArchive, split: Split) -> Result<f64, String> {
    let data = archive.dataset(split).map_err(err)?;
    let batcher = Batcher::from_config(config).map_err(err)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let preds = predict(model, &data, &idx, &batcher, config, 20, config.seed).map_err(err)?;
    let h = [Horizon { hours: 4.0, steps: 24 }];
    let r = report(&preds, &h, &config.data.roi, Distance::Normalized, "", "").map_err(err)?;
    Ok(r.rows[0].ade)
}

fn train_desk(config: &RunConfig) -> Result<(WindowArchive, Trainer), String> {
    let archive = preprocess(config).map_err(err)?;
    let batcher = Batcher::from_config(config).map_err(err)?;
    let mut trainer = Trainer::new(config, batcher, archive.dataset(Split::Train).map_err(err)?, None).map_err(err)?;
    trainer.run(None).map_err(err)?;
    Ok((archive, trainer))
}

struct Desk {
    config: RunConfig,
    archive: WindowArchive,
    trainer: Trainer,
}

fn desk_overfit(desk: &mut Option<Desk>) -> Outcome {
    let start = Instant::now();
    let config = RunConfig::desk();
    let (archive, trainer) = train_desk(&config)?;
    let train = ade_at_h24(trainer.model(), &config, &archive, Split::Train)?;
    let val = ade_at_h24(trainer.model(), &config, &archive, Split::Val)?;
    let secs = start.elapsed().as_secs_f64();
    let windows = archive.meta.report.split_windows;
    *desk = Some(Desk { config, archive, trainer });
    check(
        train < 0.05 && val < 0.15 && secs < 900.0,
        format!(
            "train ADE {train:.4} ({} windows), held-out ADE {val:.4} ({} windows), {secs:.0} s",
            windows.train, windows.val
        ),
    )
}

fn ablation_direction(desk: Option<&Desk>) -> Outcome {
    let desk = desk.ok_or("desk model unavailable")?;
    let mut lines = Vec::new();
    let mut wins = 0;
    for offset in 0..3u64 {
        let mut full_cfg = desk.config.clone();
        full_cfg.seed += offset;
        let full = if offset == 0 {
            ade_at_h24(desk.trainer.model(), &full_cfg, &desk.archive, Split::Test)?
        } else {
            let (archive, trainer) = train_desk(&full_cfg)?;
            ade_at_h24(trainer.model(), &full_cfg, &archive, Split::Test)?
        };
        let mut masked_cfg = full_cfg.clone();
        masked_cfg.train.ablation.history = true;
        let (archive, trainer) = train_desk(&masked_cfg)?;
        let masked = ade_at_h24(trainer.model(), &masked_cfg, &archive, Split::Test)?;
        if masked > full {
            wins += 1;
        }
        lines.push(format!("seed {}: full {full:.4} masked {masked:.4}", full_cfg.seed));
    }
    check(wins == 3, format!("{wins}/3 seeds worse without history ({})", lines.join("; ")))
}

/// Great-circle distance from the spherical law of cosines.
fn cosine_law_km(p: [f64; 2], q: [f64; 2]) -> f64 {
    let (a, b) = (p[0].to_radians(), q[0].to_radians());
    let c = a.sin() * b.sin() + a.cos() * b.cos() * (q[1] - p[1]).to_radians().cos();
    EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let point = |rng: &mut ChaCha8Rng| {
        let z: f64 = rng.random_range(-1.0..1.0);
        [z.asin().to_degrees(), rng.random_range(-180.0..180.0)]
    };
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (p, q) = (point(&mut rng), point(&mut rng));
        let h = haversine_km(p, q).map_err(err)?;
        let c = cosine_law_km(p, q);
        worst = worst.max((h - c).abs() / c);
    }

    let mut monotone = true;
    for _ in 0..100 {
        let truth: Vec<[f64; 2]> = (0..12).map(|_| [rng.random(), rng.random()]).collect();
        let pool: Vec<Vec<[f64; 2]>> = (0..20)
            .map(|_| {
                let v = standard_normal(&mut rng, 24);
                v.chunks(2).map(|c| [c[0], c[1]]).collect()
            })
            .collect();
        for metric in [Metric::Ade, Metric::Fde] {
            let mut prev = f64::INFINITY;
            for n in 1..=pool.len() {
                let v = best_of_n(&pool[..n], &truth, 12, metric, Distance::Normalized).map_err(err)?;
                monotone &= v <= prev;
                prev = v;
            }
        }
    }

    let antipodal = haversine_km([0.0, 0.0], [0.0, 180.0]).map_err(err)?;
    let gap = (antipodal - std::f64::consts::PI * EARTH_RADIUS_KM).abs();
    check(
        worst < 1e-6 && monotone && gap < 0.1,
        format!("haversine vs cosine law {worst:.2e}, best-of-N monotone {monotone}, antipodal off by {gap:.2e} km"),
    )
}

fn preprocessing_golden() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let config = RunConfig::load(&fixtures.join("fixture.toml")).map_err(err)?;
    let bytes = preprocess(&config).and_then(|a| a.to_bytes()).map_err(err)?;
    let golden = std::fs::read(fixtures.join("golden.archive")).map_err(err)?;
    check(bytes == golden, format!("{} bytes against {} committed", bytes.len(), golden.len()))
}

fn uncertainty_contraction(desk: Option<&Desk>) -> Outcome {
    let desk = desk.ok_or("desk model unavailable")?;
    let data = desk.archive.dataset(Split::Train).map_err(err)?;
    let idx: Vec<usize> = (0..data.len().min(50)).collect();
    let batcher = Batcher::from_config(&desk.config).map_err(err)?;
    let trace = sample_trace(desk.trainer.model(), &data, &idx, &batcher, &desk.config, 20, desk.config.seed, true, "")
        .map_err(err)?;
    let spreads: Vec<f64> = [100, 80, 60, 40, 20, 0]
        .iter()
        .map(|&k| trace.step_index(k).map(|s| trace.spread_at(s)).ok_or(format!("step {k} missing from trace")))
        .collect::<Result<_, _>>()?;
    let holds = spreads.windows(2).filter(|w| w[1] <= w[0]).count();
    let shown: Vec<String> = spreads.iter().map(|s| format!("{s:.4}")).collect();
    check(
        holds == 5 && idx.len() == 50,
        format!("{holds}/5 non-increasing over {} windows, spread {}", idx.len(), shown.join(" > ")),
    )
}

fn determinism() -> Outcome {
    let mut config = RunConfig::desk();
    config.train.max_steps = 200;
    let run = || -> Result<String, String> {
        let (archive, trainer) = train_desk(&config)?;
        let data = archive.dataset(Split::Test).map_err(err)?;
        let batcher = Batcher::from_config(&config).map_err(err)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let ckpt = trainer.checkpoint().map_err(err)?;
        let trace = sample_trace(trainer.model(), &data, &idx, &batcher, &config, 20, config.seed, false, &ckpt.checkpoint_id)
            .map_err(err)?;
        let horizons =
            horizons_from_hours(&config.eval.horizons_hours, config.data.delta_minutes, config.data.horizon).map_err(err)?;
        let r = report(
            &trace.final_predictions(),
            &horizons,
            &config.data.roi,
            config.eval.distance,
            &config.hash(),
            &ckpt.checkpoint_id,
        )
        .map_err(err)?;
        r.to_json().map_err(err)
    };
    let (a, b) = (run()?, run()?);
    check(a == b, format!("reports of {} and {} bytes, identical {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let mut desk = None;
    let mut failures = 0;
    let mut record = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n:>2} {name}: {detail}");
    };
    record(1, "forward-process statistics", forward_statistics());
    record(2, "inverse identity", inverse_identity());
    record(3, "oracle sampler", oracle_sampler());
    record(4, "gradient correctness", gradient_correctness());
    record(5, "desk-scale overfit", desk_overfit(&mut desk));
    record(6, "history ablation direction", ablation_direction(desk.as_ref()));
    record(7, "metric oracles", metric_oracles());
    record(8, "preprocessing golden", preprocessing_golden());
    record(9, "uncertainty contraction", uncertainty_contraction(desk.as_ref()));
    record(10, "determinism", determinism());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
