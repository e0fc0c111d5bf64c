//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! before asserting, so `cargo test -- --nocapture` doubles as a report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mltn_cli::checkpoint::Checkpoint;
use mltn_cli::commands::cmd_bench;
use mltn_cli::train::{train_fold, train_step};
use mltn_cli::{CliError, ModelKind, TrainConfig};
use mltn_core::complexity::{flops_lotenet, flops_mlp, flops_mltn, flops_tenetx, measured_flops, ComplexityInput};
use mltn_core::data::{encode_idx, load_idx, synth_blobs, write_idx};
use mltn_core::metrics::auroc;
use mltn_core::model::{
    joint_feature_map_oracle, squeeze, unsqueeze, LotenetConfig, MltnConfig, MpsInit, TenetXConfig,
};
use mltn_core::optim::{cross_entropy_with_logits, AdamState};
use mltn_core::{Classifier, LotenetModel, MltnModel, Mode, MpsBlock, SqueezeSpec, TenetXModel, Tensor};

fn report(name: &str, pass: bool, detail: &str) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn single(images: &Tensor, i: usize) -> Tensor {
    let (h, w) = (images.shape()[1], images.shape()[2]);
    Tensor::new(vec![1, h, w], images.data()[i * h * w..(i + 1) * h * w].to_vec()).unwrap()
}

/// Full weight tensor contracted against the dense joint feature map.
fn dense_logits(block: &MpsBlock, x: &Tensor) -> Vec<f64> {
    let rows: Vec<Tensor> = (0..block.n_sites()).map(|j| Tensor::vector(x.row(j).to_vec())).collect();
    let phi = joint_feature_map_oracle(&rows).unwrap();
    let theta = block.to_full_tensor().unwrap();
    let m = block.output_dim();
    let mut out = vec![0.0; m];
    for (w, p) in theta.data().chunks(m).zip(phi.data()) {
        for o in 0..m {
            out[o] += w[o] * p;
        }
    }
    out
}

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut blocks, mut worst) = (0, 0.0f64);
    while blocks < 120 {
        let s = rng.random_range(2..=6);
        let d = rng.random_range(1..=3);
        let beta = rng.random_range(1..=4);
        let m = rng.random_range(1..=3);
        let c = rng.random_range(0..s);
        let block = MpsBlock::random(s, d, beta, m, c, 1.0, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, vec![s, d], -1.0, 1.0);
        let (out, _) = block.forward(&x).unwrap();
        worst = worst.max(rel_err(out.data(), &dense_logits(&block, &x)));
        blocks += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "oracle equivalence",
        worst <= 1e-10 && secs < 10.0,
        &format!("{blocks} blocks, worst relative error {worst:.2e} (limit 1e-10), {secs:.2} s (limit 10 s)"),
    );
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = MltnConfig::new(8, 8, vec![2, 2], 2, 2);
    cfg.init = MpsInit { noise_std: 0.3, gain: 0.5 };
    let mut model = MltnModel::new(cfg, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, vec![3, 8, 8], 0.0, 1.0);
    let y = [0, 1, 1];
    let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = cross_entropy_with_logits(&logits, &y).unwrap();
    let grads = model.backward(&cache, &g).unwrap().params;
    let loss = |m: &mut MltnModel| {
        let (z, _) = m.forward(&x, Mode::Train).unwrap();
        cross_entropy_with_logits(&z, &y).unwrap().0
    };
    let h = 1e-6;
    let (mut checked, mut failed, mut worst) = (0, 0, 0.0f64);
    for (p, grad) in grads.iter().enumerate() {
        for q in 0..grad.len() {
            let orig = model.params()[p].1.data()[q];
            model.params_mut()[p].data_mut()[q] = orig + h;
            let up = loss(&mut model);
            model.params_mut()[p].data_mut()[q] = orig - h;
            let dn = loss(&mut model);
            model.params_mut()[p].data_mut()[q] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grad.data()[q];
            let used = (fd - an).abs() / (1e-4 * fd.abs().max(an.abs()) + 1e-6);
            worst = worst.max(used);
            failed += usize::from(used > 1.0);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient fidelity",
        failed == 0 && secs < 60.0,
        &format!("{checked} parameters, {failed} outside 1e-4 rel / 1e-6 abs (worst error {worst:.3} of tolerance), {secs:.2} s"),
    );
}

#[test]
fn dimension_chain() {
    let cfg = MltnConfig::new(128, 128, vec![4, 4, 4], 5, 2);
    let plan = cfg.plan().unwrap();
    let grids: Vec<(usize, usize)> = plan.iter().map(|p| p.grid).collect();
    let dims: Vec<usize> = plan.iter().map(|p| p.feature_dim).collect();
    let model = MltnModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let sites: Vec<usize> = model.layers().iter().map(|l| l.mps.n_sites()).collect();
    report(
        "dimension chain",
        grids == [(32, 32), (8, 8), (2, 2)] && dims == [16, 16, 16] && sites == [1024, 64, 4],
        &format!("grids {grids:?}, feature dims {dims:?}, sites {sites:?}"),
    );
}

#[test]
fn table_formula_reproduction() {
    let start = Instant::now();
    let c = ComplexityInput { n: 16384, k: 4, l: 3, d: 16, beta: 5 };
    let patch = 16.0 * 16.0 * 25.0;
    let log_term = (16384f64).ln() / (2.0 * 3.0 * 4f64.ln());
    let rows = [
        ("mltn", flops_mltn(c).unwrap(), (log_term + 2.0) * patch, "2.027e4"),
        ("lotenet", flops_lotenet(c).unwrap(), (log_term + 1024.0 + 64.0) * patch, "6.971e6"),
        ("tenetx", flops_tenetx(c).unwrap(), 16384.0 * 16.0 * 25.0, "6.554e6"),
        ("mlp", flops_mlp(ComplexityInput { l: 4, ..c }).unwrap(), 4.0 * 16384.0, "6.554e4"),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (name, got, exact, quoted) in rows {
        let rel = (got - exact).abs() / exact;
        let shown = format!("{got:.3e}");
        ok &= rel <= 1e-9 && shown == quoted;
        detail += &format!("{name} {got:.4} (rel {rel:.1e}, {shown} vs {quoted}); ");
    }
    let (m, l, t) = (rows[0].1, rows[1].1, rows[2].1);
    ok &= m < l && m < t;

    let ds = synth_blobs(4, 128, 128, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mcfg = MltnConfig::new(128, 128, vec![4, 4, 4], 5, 2);
    mcfg.init = MpsInit { noise_std: 1e-2, gain: 2.0 / 16.0 };
    let mut mltn = MltnModel::new(mcfg, &mut rng).unwrap();
    let mut lotenet = LotenetModel::new(LotenetConfig::new(128, 128, vec![4, 4], 5, 2), &mut rng).unwrap();
    let mut tenetx = TenetXModel::new(TenetXConfig::new(128, 128, 5, 2), &mut rng).unwrap();
    mltn.calibrate(&ds.images).unwrap();
    lotenet.calibrate(&ds.images).unwrap();
    tenetx.calibrate(&ds.images).unwrap();
    let x = single(&ds.images, 0);
    let mm = measured_flops(&mut mltn, &x).unwrap();
    let ml = measured_flops(&mut lotenet, &x).unwrap();
    let mt = measured_flops(&mut tenetx, &x).unwrap();
    ok &= mm < ml && mm < mt;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    detail += &format!("measured multiplies mltn {mm}, lotenet {ml}, tenetx {mt}; {secs:.2} s");
    report("table formula reproduction", ok, &detail);
}

fn bench_config(kind: ModelKind, strides: Vec<usize>) -> TrainConfig {
    let mut c = TrainConfig::from_toml("[data]\nsource = \"synth\"\ncount = 64\nheight = 64\nwidth = 64\nseed = 0\n").unwrap();
    c.model.kind = kind;
    c.model.strides = strides;
    c.model.bond_dim = 5;
    c
}

#[test]
fn speed_direction() {
    let start = Instant::now();
    let configs = [bench_config(ModelKind::Mltn, vec![4, 4]), bench_config(ModelKind::Lotenet, vec![4])];
    let (mut mltn, mut lotenet) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..3 {
        let rows = cmd_bench(&configs, 64, None).unwrap();
        mltn = mltn.min(rows[0].epoch_seconds);
        lotenet = lotenet.min(rows[1].epoch_seconds);
    }
    let ratio = lotenet / mltn;
    let secs = start.elapsed().as_secs_f64();
    report(
        "speed direction",
        mltn < lotenet && ratio >= 2.0 && secs < 300.0,
        &format!("epoch seconds mltn {mltn:.4}, lotenet {lotenet:.4}, ratio {ratio:.2} (need >= 2), {secs:.1} s"),
    );
}

const LEARNING_CONFIG: &str = r#"
[model]
kind = "mltn"
strides = [2, 2]
bond_dim = 3
feature_map = "sinusoidal"
norm_scale = 0.2
norm_shift = 1.0
init_noise = 0.3

[train]
max_epochs = 50
patience = 10
lr = 1e-2
batch_size = 32
clip_norm = 1.0
seed = 0

[data]
source = "synth"
count = 640
height = 16
width = 16
seed = 0
"#;

#[test]
fn learning_capability() {
    let start = Instant::now();
    let config = TrainConfig::from_toml(LEARNING_CONFIG).unwrap();
    let ds = config.load_dataset().unwrap();
    let (train, val) = (ds.fold_indices(0, false).len(), ds.fold_indices(0, true).len());
    let (_, s) = train_fold(&config, &ds, 0, None).unwrap();
    let first = s.history[0].val_auroc;
    let secs = start.elapsed().as_secs_f64();
    report(
        "learning capability",
        train == 512 && val == 128 && s.best_val_auroc >= 0.95 && s.epochs_run <= 50 && secs < 300.0,
        &format!(
            "{train}/{val} split, val AUROC {:.4} at best epoch {} of {} (epoch 1: {first:.4}), val acc {:.4}, {secs:.1} s",
            s.best_val_auroc, s.best_epoch, s.epochs_run, s.best_val_acc
        ),
    );
}

fn pairwise_auroc(scores: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn round_trip_and_format_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut detail = String::new();

    let img = rand_tensor(&mut rng, vec![16, 16], 0.0, 1.0);
    let squeeze_ok = [1, 2, 4].iter().all(|&k| {
        let spec = SqueezeSpec::new(k, 16, 16).unwrap();
        unsqueeze(&squeeze(&img, &spec).unwrap(), &spec).unwrap() == img
    });
    detail += &format!("squeeze k=1,2,4 identity {squeeze_ok}; ");

    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig::from_toml(LEARNING_CONFIG).unwrap();
    let ds = synth_blobs(6, 16, 16, 3).unwrap();
    let mut model = config.build_model(16, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.calibrate(&ds.images).unwrap();
    let before = model.predict(&ds.images).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&model, config.to_toml(), 3, 0.5, None).save(&path).unwrap();
    let mut fresh = config.build_model(16, 16, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    Checkpoint::load(&path).unwrap().restore(&mut fresh).unwrap();
    let after = fresh.predict(&ds.images).unwrap();
    let ckpt_ok = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    detail += &format!("checkpoint logits bit-equal {ckpt_ok}; ");

    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    write_idx(&ds, &ip, &lp).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    let (ib, lb) = encode_idx(&back).unwrap();
    let idx_ok = back.labels == ds.labels
        && ib == std::fs::read(&ip).unwrap()
        && lb == std::fs::read(&lp).unwrap()
        && load_idx(&ip, &lp).unwrap().images == back.images;
    detail += &format!("IDX identity {idx_ok}; ");

    let perfect = auroc(&[0.1, 0.3, 0.7, 0.9], &[0, 0, 1, 1]).unwrap();
    let ties = auroc(&[0.5; 8], &[0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-6i32..6))).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        worst = worst.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
    }
    let auroc_ok = perfect == 1.0 && ties == 0.5 && worst < 1e-12;
    detail += &format!("AUROC perfect {perfect}, ties {ties}, pairwise worst diff {worst:.1e}");
    report("round-trip and format suites", squeeze_ok && ckpt_ok && idx_ok && auroc_ok, &detail);
}

fn numerical_location(e: CliError) -> Option<String> {
    match e {
        CliError::Numerical { location, detail } => Some(format!("{location} ({detail})")),
        _ => None,
    }
}

#[test]
fn stability_guard() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let block = MpsBlock::init_identity(1024, 16, 5, 2, 512, MpsInit { noise_std: 1e-2, gain: 0.125 }, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, vec![1024, 16], 0.0, 1.0);
    let (out, cache) = block.forward(&x).unwrap();
    let (gs, gx) = block.backward(&cache, &Tensor::vector(vec![1.0, -1.0])).unwrap();
    let chain_ok = out.is_finite() && gs.iter().all(Tensor::is_finite) && gx.is_finite();

    let config = TrainConfig::from_toml("[data]\nsource = \"synth\"\ncount = 6\nheight = 128\nwidth = 128\nseed = 0\n").unwrap();
    let ds = config.load_dataset().unwrap();
    let mut model = config.build_model(128, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.calibrate(&ds.images).unwrap();
    let (logits, cache) = model.forward(&ds.images, Mode::Train).unwrap();
    let (_, g) = cross_entropy_with_logits(&logits, &ds.labels).unwrap();
    let model_ok = logits.is_finite() && model.backward(&cache, &g).unwrap().is_finite();

    let params: Vec<Tensor> = model.params().into_iter().map(|(_, p)| p.clone()).collect();
    let mut adam = AdamState::new(&params, 1e-3);
    let mut bad_pixels = ds.images.clone();
    bad_pixels.data_mut()[5] = f64::NAN;
    let from_input = train_step(&mut model, &bad_pixels, &ds.labels, &mut adam, None).err().and_then(numerical_location);
    model.params_mut()[1].data_mut()[0] = f64::INFINITY;
    let from_param = train_step(&mut model, &ds.images, &ds.labels, &mut adam, None).err().and_then(numerical_location);

    report(
        "stability guard",
        chain_ok && model_ok && from_input.is_some() && from_param.is_some(),
        &format!(
            "1024-site chain finite {chain_ok}, 128x128 model finite {model_ok}; NaN pixel -> {}; inf weight -> {}",
            from_input.as_deref().unwrap_or("no diagnostic"),
            from_param.as_deref().unwrap_or("no diagnostic")
        ),
    );
}
