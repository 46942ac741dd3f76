//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::*;
use exuseg::dataset::{extract_balanced, load_patchset, save_patchset, synthetic};
use exuseg::gradcheck::{check_end_to_end, check_layer, check_model_layers, GradcheckOptions};
use exuseg::inference::{exudate_probability, predict_image, write_mask, InferenceMode};
use exuseg::metrics::{report, ConfusionMatrix};
use exuseg::nn::{BatchNorm2d, Conv2d, Dense, Layer, MaxPool2d, Model, ModelConfig, Param};
use exuseg::training::{
    load_checkpoint, save_checkpoint, softmax_cross_entropy, Adam, AdamConfig, TrainSchedule, Trainer,
};
use exuseg::{Error, Real, Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn metric_arithmetic() -> Outcome {
    let r = ok(report(&ConfusionMatrix::from_cells(95862, 1665, 1651, 1174)))?;
    let ex = r.reference_specificity.ok_or("exudate recall undefined")?;
    let bg = r.reference_sensitivity.ok_or("background recall undefined")?;
    ensure!((r.accuracy - 0.96696).abs() <= 1e-5, "accuracy {}", r.accuracy);
    ensure!((ex - 0.41353).abs() <= 1e-5, "exudate recall {ex}");
    ensure!((bg - 0.98307).abs() <= 1e-5, "background recall {bg}");
    Ok(format!("accuracy {:.5}, exudate recall {ex:.5}, background recall {bg:.5}", r.accuracy))
}

fn geometry() -> Outcome {
    let (img, _) = synthetic::fundus_pair("geometry", 256, 8, 41);
    let mut model = ok(Model::new(ModelConfig::tiny(), &Rng::new(42)))?;
    let last = model.layers().len() - 1;
    for p in model.layers_mut()[last].params_mut() {
        if p.name == "weight" {
            p.value = ok(p.value.map(|v| v * 40.0))?;
        }
    }
    let pm = ok(predict_image(&img, &model, InferenceMode::Valid, 512))?;
    ensure!(pm.mask.extent() == (224, 224), "mask extent {:?}", pm.mask.extent());
    ensure!(pm.probability.len() == 50176, "{} classifications", pm.probability.len());
    let mut rng = Rng::new(43);
    for _ in 0..100 {
        let (i, j) = (rng.below(224), rng.below(224));
        let mut patch = Vec::with_capacity(3072);
        for r in i..i + 32 {
            for c in j..j + 32 {
                for ch in 0..3 {
                    patch.push(img.pixels.at(&[r, c, ch]));
                }
            }
        }
        let logits = ok(model.predict(&ok(Tensor::new(vec![1, 32, 32, 3], patch))?))?;
        let want = (exudate_probability(logits.as_slice()) > 0.5) as u8;
        ensure!(pm.mask.get(i, j) == want, "pixel ({i}, {j}) disagrees with its patch at ({}, {})", i + 16, j + 16);
    }
    Ok(format!("50176 classifications -> 224x224 mask, {} exudate; 100/100 pixels match", pm.mask.count_ones()))
}

fn gradients() -> Outcome {
    let opts = GradcheckOptions { batch: 4, ..Default::default() };
    let mut worst_layer: Real = 0.0;
    let mut rng = Rng::new(51);
    let mut small: Vec<(Box<dyn Layer>, Vec<usize>)> = vec![
        (Box::new(ok(Conv2d::new(3, 5, 3, 1, 1, &mut rng))?), vec![4, 6, 5, 3]),
        (Box::new(ok(Conv2d::new(2, 3, 3, 2, 0, &mut rng))?), vec![4, 7, 7, 2]),
        (Box::new(ok(BatchNorm2d::new(3, 1e-5, 0.9))?), vec![4, 3, 3, 3]),
        (Box::new(ok(MaxPool2d::new(2))?), vec![4, 4, 6, 2]),
        (Box::new(ok(Dense::new(10, 2, &mut rng))?), vec![4, 10]),
    ];
    for (layer, shape) in &mut small {
        let x = ok(rng.uniform_tensor(shape, -1.0, 1.0))?;
        for r in ok(check_layer(layer.as_mut(), 0, &x, &opts))? {
            ensure!(r.passed, "{} {} on {shape:?}: {:e}", r.kind, r.target, r.rel_error);
            worst_layer = worst_layer.max(r.rel_error);
        }
    }
    let mut model = ok(Model::new(ModelConfig::default(), &Rng::new(52)))?;
    for r in ok(check_model_layers(&mut model, &GradcheckOptions { batch: 2, ..opts.clone() }))? {
        ensure!(r.passed, "layer {} {} {}: {:e}", r.layer, r.kind, r.target, r.rel_error);
        worst_layer = worst_layer.max(r.rel_error);
    }
    let mut worst_e2e: Real = 0.0;
    let mut kinks = 0;
    for r in ok(check_end_to_end(&mut model, &opts))? {
        ensure!(r.passed, "end-to-end layer {} {} {}: {:e}", r.layer, r.kind, r.target, r.rel_error);
        worst_e2e = worst_e2e.max(r.rel_error);
        kinks += r.kinks;
    }
    Ok(format!(
        "worst layer-level {worst_layer:.2e} (< 1e-6), worst end-to-end {worst_e2e:.2e} (< 1e-4, {kinks} kinked coordinates)"
    ))
}

fn brute_force_oracles() -> Outcome {
    let mut rng = Rng::new(61);
    let mut worst: Real = 0.0;
    for trial in 0..20 {
        let n = 1 + rng.below(2);
        let (h, w) = (3 + rng.below(6), 3 + rng.below(6));
        let (cin, cout) = (1 + rng.below(4), 1 + rng.below(4));
        let k = [1, 3][rng.below(2)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(k / 2 + 1);
        let mut conv = ok(Conv2d::new(cin, cout, k, stride, pad, &mut rng))?;
        conv.bias.value = ok(rng.normal_tensor(&[cout], 0.0, 1.0))?;
        let x = ok(rng.uniform_tensor(&[n, h, w, cin], -1.0, 1.0))?;
        let y = ok(conv.forward_train(&x, &mut rng))?;
        let gy = ok(rng.uniform_tensor(y.shape(), -1.0, 1.0))?;
        let dx = ok(conv.backward(&gy))?;
        let (wdx, wdw, wdb) = conv_backward(&x, &conv.weight.value, &gy, stride, pad);
        for (got, want) in [
            (y.as_slice(), conv_forward(&x, &conv.weight.value, &conv.bias.value, stride, pad).as_slice().to_vec()),
            (dx.as_slice(), wdx.as_slice().to_vec()),
            (conv.weight.grad.as_slice(), wdw.as_slice().to_vec()),
            (conv.bias.grad.as_slice(), wdb.as_slice().to_vec()),
        ] {
            let d = rel_diff(got, &want);
            ensure!(d <= 1e-12, "conv trial {trial} ({n}x{h}x{w}x{cin} -> {cout}, k{k} s{stride} p{pad}): {d:e}");
            worst = worst.max(d);
        }

        let (ph, pw) = (2 * (1 + rng.below(4)), 2 * (1 + rng.below(4)));
        let mut px = ok(rng.uniform_tensor(&[n, ph, pw, cin], -1.0, 1.0))?;
        if trial % 2 == 1 {
            px = ok(px.map(|v| v.round()))?;
        }
        let mut pool = ok(MaxPool2d::new(2))?;
        let py = ok(pool.forward_train(&px, &mut rng))?;
        let pg = ok(rng.uniform_tensor(py.shape(), -1.0, 1.0))?;
        let pdx = ok(pool.backward(&pg))?;
        let d = rel_diff(py.as_slice(), maxpool_forward(&px, 2).0.as_slice())
            .max(rel_diff(pdx.as_slice(), maxpool_backward(&px, 2, &pg).as_slice()));
        ensure!(d <= 1e-12, "maxpool trial {trial}: {d:e}");
        worst = worst.max(d);
    }
    Ok(format!("20 random conv2d + maxpool2d cases up to 2x8x8x4, worst relative difference {worst:.1e}"))
}

fn synthetic_overfit() -> Outcome {
    let patches = synthetic::blob_patches(400, 71);
    let schedule = small_schedule(1, 400, 50, 10, 72);
    let mut trainer = ok(Trainer::new(ModelConfig::compact(), schedule, AdamConfig::default()))?;
    let mut reached = None;
    ok(trainer.run(&patches, |_, m| {
        if m.train_accuracy >= 0.99 {
            reached = Some((m.epoch, m.train_accuracy));
            return Ok(false);
        }
        Ok(true)
    }))?;
    let last = trainer.history().last().copied().ok_or("no epochs ran")?;
    match reached {
        Some((epoch, acc)) => Ok(format!("training accuracy {acc:.4} after {epoch} shard-epoch(s)")),
        None => Err(format!("best accuracy {:.4} after {} shard-epochs", last.train_accuracy, last.epoch)),
    }
}

fn loss_sanity() -> Outcome {
    let logits = Tensor::full(&[6, 2], -0.75);
    let labels = ok(Tensor::new(vec![6, 2], (0..6).flat_map(|i| if i < 3 { [1.0, 0.0] } else { [0.0, 1.0] }).collect()))?;
    let (loss, _) = ok(softmax_cross_entropy(&logits, &labels))?;
    let ln2 = std::f64::consts::LN_2 as Real;
    ensure!((loss - ln2).abs() <= 1e-9, "uniform-logit loss {loss}");

    let model = ok(Model::new(ModelConfig::compact(), &Rng::new(81)))?;
    let mut params: Vec<Param> = model.named_params().into_iter().map(|(_, p)| p.clone()).collect();
    let before: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let mut adam = Adam::new(AdamConfig::default(), &params);
    for _ in 0..10 {
        let mut refs: Vec<&mut Param> = params.iter_mut().collect();
        ok(adam.step(&mut refs))?;
    }
    ensure!(params.iter().zip(&before).all(|(p, b)| p.value.bit_eq(b)), "zero-gradient Adam step moved a parameter");
    Ok(format!("loss {loss:.12} vs ln 2; 10 zero-gradient Adam steps left {} tensors bit-identical", params.len()))
}

/// prepare -> train -> predict, returning the bytes of each primary output.
fn pipeline_run(dir: &Path) -> Result<[Vec<u8>; 3], String> {
    let mut set = None;
    for (i, seed) in [91u64, 92].into_iter().enumerate() {
        let (img, gt) = synthetic::fundus_pair(&format!("img{i}"), 256, 6, seed);
        let part = ok(extract_balanced(&img, &gt, 40, &mut Rng::new(93).child(&format!("image:{i}"))))?;
        match &mut set {
            None => set = Some(part),
            Some(s) => s.extend(part),
        }
    }
    let set = set.unwrap();
    let archive = dir.join("train.exps");
    ok(save_patchset(&set, &archive))?;
    let set = ok(load_patchset(&archive))?;

    let mut trainer = ok(Trainer::new(ModelConfig::tiny(), small_schedule(2, 80, 2, 20, 94), AdamConfig::default()))?;
    ok(trainer.run(&set, |_, _| Ok(true)))?;
    let ckpt = dir.join("final.exsg");
    ok(save_checkpoint(&trainer.checkpoint(), &ckpt))?;

    let model = ok(Trainer::from_checkpoint(&ok(load_checkpoint(&ckpt))?))?;
    let (img, _) = synthetic::fundus_pair("test", 256, 6, 95);
    let pm = ok(predict_image(&img, model.model(), InferenceMode::Valid, 512))?;
    let mask = dir.join("test_valid_mask.png");
    ok(write_mask(&pm.mask, &mask))?;
    Ok([archive, ckpt, mask].map(|p| std::fs::read(p).unwrap()))
}

fn determinism() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    for (name, (x, y)) in ["archive", "checkpoint", "mask PNG"].iter().zip(first.iter().zip(&second)) {
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!(
        "archive ({} B), checkpoint ({} B) and mask PNG ({} B) byte-identical across two runs",
        first[0].len(),
        first[1].len(),
        first[2].len()
    ))
}

fn persistence() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let patches = synthetic::blob_patches(40, 101);
    let mut trainer = ok(Trainer::new(ModelConfig::tiny(), small_schedule(1, 40, 1, 10, 102), AdamConfig::default()))?;
    ok(trainer.step_epoch(&patches))?;
    let ckpt = trainer.checkpoint();
    let cpath = dir.path().join("c.exsg");
    ok(save_checkpoint(&ckpt, &cpath))?;
    let back = ok(load_checkpoint(&cpath))?;
    ensure!(back == ckpt, "checkpoint changed on round trip");
    ensure!(
        back.params.iter().zip(&ckpt.params).all(|((_, a), (_, b))| a.bit_eq(b)),
        "checkpoint tensors not bit-exact"
    );
    let ppath = dir.path().join("p.exps");
    ok(save_patchset(&patches, &ppath))?;
    ensure!(ok(load_patchset(&ppath))? == patches, "patch archive changed on round trip");

    let mut rejected = 0;
    for path in [&cpath, &ppath] {
        let bytes = ok(std::fs::read(path))?;
        for pos in [0, 9, bytes.len() / 3, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            ok(std::fs::write(path, &bad))?;
            let err = if path == &cpath { load_checkpoint(path).err() } else { load_patchset(path).err() };
            ensure!(
                matches!(err, Some(Error::Checksum { .. }) | Some(Error::Corrupt(_))),
                "flip at byte {pos} of {} accepted: {err:?}",
                path.display()
            );
            rejected += 1;
        }
    }
    Ok(format!("checkpoint and archive round-trip bit-exactly; {rejected}/8 corrupted files rejected"))
}

fn full_scale_dry_run() -> Outcome {
    let schedule = TrainSchedule::default();
    ok(schedule.validate())?;
    let plan = schedule.plan();
    ensure!(plan.len() == 7500, "plan has {} shard-epochs", plan.len());
    ensure!(schedule.epochs_per_shard_total() == 1500, "{} epochs per shard", schedule.epochs_per_shard_total());
    let patches = synthetic::blob_patches(schedule.required_patches(), 111);
    let mut trainer = ok(Trainer::new(ModelConfig::compact(), schedule.clone(), AdamConfig::default()))?;
    let m = ok(trainer.step_epoch(&patches))?.ok_or("no epoch ran")?;
    ensure!(trainer.schedule() == &schedule, "schedule was altered");
    ensure!(m.loss.is_finite(), "loss {}", m.loss);
    Ok(format!(
        "5x40000x500x3 @ batch 50 accepted ({} shard-epochs); epoch 1 of shard 0 ran 800 batches, loss {:.4}, accuracy {:.4}",
        plan.len(),
        m.loss,
        m.train_accuracy
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("metric arithmetic", metric_arithmetic),
        ("sliding-window geometry", geometry),
        ("gradient correctness", gradients),
        ("brute-force oracle equivalence", brute_force_oracles),
        ("synthetic overfit", synthetic_overfit),
        ("loss sanity", loss_sanity),
        ("determinism", determinism),
        ("persistence", persistence),
        ("full-scale dry run", full_scale_dry_run),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
