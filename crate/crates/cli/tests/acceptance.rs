//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::any::Any;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simi::decompose::{bitplane_decompose, bitplane_reconstruct, decompose, DecompositionMode};
use simi::enhancer::{forward_with_hook, init_params, recursive_update, Checkpoint, EnhancerConfig};
use simi::evaluate::enhance_image;
use simi::gradcheck::{run_suite, TOLERANCE};
use simi::imageio::{load_image, to_unit_tensor, RawImage};
use simi::losses::{loss_brightness, loss_global_chroma, loss_local_color, loss_smoothness, ChromaMode};
use simi::metrics::{psnr, ssim};
use simi::nn::{Graph, Tensor, Var};
use simi::trainer::{checkpoint_path, TrainConfig, Trainer};

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

fn within(elapsed: Duration, limit: Duration) {
    assert!(elapsed < limit, "took {elapsed:?}, limit {limit:?}");
}

fn bitplane_round_trip() -> String {
    let t = Instant::now();
    let img = RawImage::from_fn(256, 2, |x, y| {
        let v = x as u8;
        if y == 0 { [v, 255 - v, v.wrapping_mul(7)] } else { [v.wrapping_add(85), v.wrapping_add(170), v] }
    });
    let back = bitplane_reconstruct(&bitplane_decompose::<f32>(&img).unwrap()).unwrap();
    assert_eq!(back, img);
    within(t.elapsed(), Duration::from_secs(1));
    format!("256 intensities x 3 channels exact in {:?}", t.elapsed())
}

/// Largest `q` with `q·255 <= i·(t-1)`, by counting.
fn quant_oracle(i: u64, t: u64) -> u64 {
    let mut q = 0;
    while (q + 1) * 255 <= i * (t - 1) {
        q += 1;
    }
    q
}

fn quant_threshold_oracle() -> String {
    let t0 = Instant::now();
    let img = RawImage::from_fn(256, 1, |x, _| [x as u8, 255 - x as u8, x as u8]);
    let mut checked = 0;
    for chunk in (2u32..=65).collect::<Vec<_>>().chunks(8) {
        let stack = decompose::<f64>(&img, &DecompositionMode::QuantThreshold(chunk.to_vec())).unwrap();
        for (j, &t) in chunk.iter().enumerate() {
            for c in 0..3 {
                for (x, &got) in stack.map(c, j).iter().enumerate() {
                    let i = img.pixel(x, 0)[c] as u64;
                    let want = quant_oracle(i, t as u64) as f64 / (t - 1) as f64;
                    assert_eq!(got.to_bits(), want.to_bits(), "I={i} t={t}");
                    checked += 1;
                }
            }
        }
    }
    within(t0.elapsed(), Duration::from_secs(1));
    format!("{checked} (I, t) cases exact in {:?}", t0.elapsed())
}

fn random_unit_image(seed: u64, w: usize, h: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    to_unit_tensor(&RawImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])).unwrap()
}

fn update_fixed_point() -> String {
    let t = Instant::now();
    let config = EnhancerConfig::default();
    let store = init_params::<f32>(&config, 11).unwrap();
    let hook = |_: &mut Graph<f32>, _: usize, prev: Var, (_, l2): (Var, Var)| Ok((prev, l2));
    let mut worst = 0.0f32;
    for seed in 0..4 {
        let input = random_unit_image(seed, 16, 12);
        let trace = forward_with_hook(&input, &store, &config, Some(&hook)).unwrap();
        worst = worst.max(trace.output().max_abs_diff(&input));
    }
    assert!(worst <= 1e-7, "max |I_D - I_0| = {worst}");
    within(t.elapsed(), Duration::from_secs(1));
    format!("max |I_D - I_0| = {worst:e} over 4 images, {} stages", config.stages)
}

fn update_scalar(i: f64, l1: f64, l2: f64) -> f64 {
    let gate = 1.0 / (1.0 + (-10.0 * (l2 - i - 0.1)).exp());
    (i + i * (l1 - i) * l1 / (gate * l2)).clamp(0.0, 1.0)
}

fn update_numeric_oracle() -> String {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 1000;
    let draw = |rng: &mut ChaCha8Rng, lo: f64| Tensor::from_fn(&[1, 1, 1, n], |_| rng.random_range(lo..1.0));
    let (i, l1, l2) = (draw(&mut rng, 0.0), draw(&mut rng, 0.0), draw(&mut rng, 1e-3));
    let mut g = Graph::<f64>::new();
    let vars = [i.clone(), l1.clone(), l2.clone()].map(|x| g.constant(x));
    let out = recursive_update(&mut g, vars[0], vars[1], vars[2]).unwrap();
    let worst = (0..n)
        .map(|k| (g.value(out).data()[k] - update_scalar(i.data()[k], l1.data()[k], l2.data()[k])).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "max deviation {worst:e}");
    within(t.elapsed(), Duration::from_secs(1));
    format!("max deviation {worst:e} over {n} triples")
}

fn gradient_suite() -> String {
    let t = Instant::now();
    let report = run_suite(8, 1).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passed(TOLERANCE), "worst {} at {:e}", worst.name, worst.max_rel_err);
    within(t.elapsed(), Duration::from_secs(60));
    format!(
        "{} checks, max rel err {:.2e} ({}) in {:.1?}",
        report.entries.len(),
        report.max_rel_err(),
        worst.name,
        t.elapsed()
    )
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn loss_identities() -> String {
    let shape = [1, 3, 4, 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    let lc_same = scalar(|g| {
        let a = g.constant(x.clone());
        loss_local_color(g, a, a).unwrap()
    });
    assert_eq!(lc_same, 0.0);

    let gray = Tensor::<f64>::from_fn(&shape, |k| 0.1 + 0.8 * ((k % 20) as f64 / 20.0));
    let g_gray = scalar(|g| {
        let a = g.constant(gray.clone());
        loss_global_chroma(g, a, ChromaMode::FactorMap).unwrap()
    });
    assert!(g_gray.abs() <= 1e-6, "L_g(gray) = {g_gray:e}");

    let constant = Tensor::<f64>::full(&shape, 0.37);
    let (s1, s2) = {
        let mut g = Graph::new();
        let (a, b) = (g.constant(constant.clone()), g.constant(constant.map(|v| v * 2.0)));
        let (s1, s2) = loss_smoothness(&mut g, &[(a, b), (b, a)]).unwrap();
        (g.value(s1).item(), g.value(s2).item())
    };
    assert_eq!((s1, s2), (0.0, 0.0));

    let red = Tensor::<f64>::from_fn(&shape, |k| if k < 20 { 1.0 } else { 0.0 });
    let gray_const = Tensor::<f64>::full(&shape, 0.5);
    let lc = scalar(|g| {
        let (a, b) = (g.constant(gray_const.clone()), g.constant(red.clone()));
        loss_local_color(g, a, b).unwrap()
    });
    let chroma = scalar(|g| {
        let a = g.constant(red.clone());
        loss_global_chroma(g, a, ChromaMode::FactorMap).unwrap()
    });
    let lu = scalar(|g| {
        let (a, b) = (g.constant(gray_const.clone()), g.constant(Tensor::zeros(&shape)));
        loss_brightness(g, a, b, 0.6).unwrap()
    });
    for (got, want) in [(lc, 4.0 / 3.0), (chroma, 2.0 / 3.0), (lu, 3.24)] {
        assert!((got - want).abs() <= 1e-3, "{got} vs {want}");
    }
    format!("lc={lc:.6} (4/3) g={chroma:.6} (2/3) lu={lu:.6} (3.24); identities exact")
}

fn smoke_config(self_information: bool) -> TrainConfig {
    let mut config = TrainConfig { batch_size: 2, crop_size: 64, max_iterations: 500, checkpoint_every: 100, ..Default::default() };
    config.model.self_information = self_information;
    config
}

struct SmokeRun {
    checkpoint: PathBuf,
    fixed_batch: (f64, f64),
    probe: (f64, f64),
    secs: f64,
}

fn smoke_run(config: TrainConfig, out: &Path) -> SmokeRun {
    let t = Instant::now();
    let mut trainer = Trainer::<f32>::new(config, assets().join("train"), out).unwrap();
    let batch = trainer.batch(0).unwrap();
    let before = trainer.evaluate_loss(&batch).unwrap().total;
    let checkpoint = trainer.run().unwrap();
    let after = trainer.evaluate_loss(&batch).unwrap().total;
    let probe = load_image(assets().join("probe_dark.png")).unwrap();
    let enhanced = enhance_image(&probe, &Checkpoint::<f32>::load(&checkpoint).unwrap()).unwrap();
    SmokeRun {
        checkpoint,
        fixed_batch: (before, after),
        probe: (probe.mean_brightness(), enhanced.mean_brightness()),
        secs: t.elapsed().as_secs_f64(),
    }
}

fn training_smoke() -> String {
    let dir = tempfile::tempdir().unwrap();
    let with = smoke_run(smoke_config(true), &dir.path().join("with_a"));
    let again = smoke_run(smoke_config(true), &dir.path().join("with_b"));
    let without = smoke_run(smoke_config(false), &dir.path().join("without"));
    let mut lines = Vec::new();
    for (name, run) in [("w/ SIMM", &with), ("w/o SIMM", &without)] {
        let (before, after) = run.fixed_batch;
        assert!(after <= 0.5 * before, "{name}: loss {before} -> {after}");
        assert!(run.probe.1 > run.probe.0, "{name}: probe brightness {:?}", run.probe);
        lines.push(format!(
            "{name}: loss {before:.2} -> {after:.2} ({:.0}%), probe brightness {:.3} -> {:.3}, {:.0}s",
            100.0 * after / before,
            run.probe.0,
            run.probe.1,
            run.secs
        ));
    }
    assert_eq!(fs::read(&with.checkpoint).unwrap(), fs::read(&again.checkpoint).unwrap(), "runs differ");
    let total = with.secs + again.secs + without.secs;
    within(Duration::from_secs_f64(total), Duration::from_secs(600));
    format!("{}; repeat run byte-identical; {total:.0}s total", lines.join("; "))
}

fn ablation_harness() -> String {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ablate.json");
    fs::write(&config, r#"{"batch_size": 2, "crop_size": 64, "max_iterations": 20, "checkpoint_every": 20}"#).unwrap();
    let out_dir = dir.path().join("ablation");
    let output = Command::new(env!("CARGO_BIN_EXE_simi"))
        .arg("ablate")
        .args(["--config", config.to_str().unwrap()])
        .args(["--seed", "7"])
        .args(["--data", assets().join("train").to_str().unwrap()])
        .args(["--low-dir", assets().join("low").to_str().unwrap()])
        .args(["--ref-dir", assets().join("ref").to_str().unwrap()])
        .args(["--out-dir", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["bitplane", "log", "quant", "no-simm"]);
    assert_eq!(report["seed"], 7);
    for r in rows {
        assert!(r["final_loss"].as_f64().unwrap().is_finite());
        assert!(r["mean_psnr"].as_f64().is_some() && r["mean_ssim"].as_f64().is_some());
    }
    let table = String::from_utf8(output.stdout).unwrap();
    assert_eq!(table, fs::read_to_string(out_dir.join("ablation.txt")).unwrap());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    // cells are separated by at least two spaces; headers may contain one
    let cells = |l: &str| l.split("  ").filter(|c| !c.trim().is_empty()).count();
    let columns = cells(lines[0]);
    assert_eq!(columns, 7);
    assert!(lines[1..].iter().all(|l| cells(l) == columns), "ragged table:\n{table}");
    format!("4 variants, {columns}-column table, JSON and text written")
}

fn parameter_budget() -> String {
    let count = EnhancerConfig::default().parameter_count();
    let store = init_params::<f32>(&EnhancerConfig::default(), 0).unwrap();
    assert_eq!(store.num_parameters(), count);
    let printed = Command::new(env!("CARGO_BIN_EXE_simi")).arg("params").output().unwrap();
    assert_eq!(String::from_utf8(printed.stdout).unwrap().trim(), count.to_string());
    assert!(count <= 200_000, "{count} parameters");
    format!("default model has {count} parameters (<= 200000)")
}

fn metric_oracles() -> String {
    let a = RawImage::from_fn(32, 24, |x, y| [(x * 3 + 20) as u8, (y * 5 + 20) as u8, 100]);
    let shifted = |d: u8| RawImage::from_fn(32, 24, |x, y| [(x * 3 + 20) as u8 + d, (y * 5 + 20) as u8 + d, 100 + d]);
    let p16 = psnr(&a, &shifted(16)).unwrap();
    let p1 = psnr(&a, &shifted(1)).unwrap();
    assert!((p16 - 10.0 * (255.0f64 * 255.0 / 256.0).log10()).abs() < 1e-3 && (p16 - 24.0475).abs() < 1e-3, "{p16}");
    assert!((p1 - 48.1308).abs() < 1e-3, "{p1}");
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mut random = || RawImage::from_fn(20, 17, |_, _| [rng.random(), rng.random(), rng.random()]);
        let (x, y) = (random(), random());
        worst = worst.max((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs());
    }
    assert!(worst <= 1e-12, "{worst:e}");
    format!("PSNR {p16:.4} / {p1:.4} dB, SSIM(a,a) = 1, max asymmetry {worst:e}")
}

fn checkpoint_round_trip() -> String {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { max_iterations: 20, checkpoint_every: 10, ..smoke_config(true) };
    let full = Trainer::<f32>::new(config.clone(), assets().join("train"), dir.path().join("full"))
        .unwrap()
        .run()
        .unwrap();
    let first = TrainConfig { max_iterations: 10, ..config.clone() };
    let half = Trainer::<f32>::new(first, assets().join("train"), dir.path().join("split")).unwrap().run().unwrap();
    let resumed = Trainer::<f32>::from_checkpoint(&half, config, assets().join("train"), dir.path().join("split"))
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(resumed, checkpoint_path(&dir.path().join("split"), 20));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap(), "train 10 + resume 10 differs from train 20");

    let copy = dir.path().join("copy.simi");
    Checkpoint::<f32>::load(&full).unwrap().save(&copy).unwrap();
    assert_eq!(fs::read(&full).unwrap(), fs::read(&copy).unwrap(), "save -> load -> save differs");
    format!("save/load/save identical; train 10 + resume 10 == train 20 ({} bytes)", fs::metadata(&full).unwrap().len())
}

fn panic_message(payload: Box<dyn Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let criteria: [(&str, fn() -> String); 11] = [
        ("bit-plane round trip", bitplane_round_trip),
        ("quantisation threshold oracle", quant_threshold_oracle),
        ("recursive update fixed point", update_fixed_point),
        ("recursive update numeric oracle", update_numeric_oracle),
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("training smoke", training_smoke),
        ("ablation harness", ablation_harness),
        ("parameter budget", parameter_budget),
        ("metric oracles", metric_oracles),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name:<32} {detail}"),
            Err(payload) => {
                failed += 1;
                println!("FAIL  {name:<32} {}", panic_message(payload));
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
