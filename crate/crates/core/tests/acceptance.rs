//! Acceptance suite: one PASS/FAIL line per criterion on stdout. Runs without
//! the libtest harness so the lines are always visible.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use dgcnet::densenet::ExecPath;
use dgcnet::hsi::{synth_cube, HsiCube, SplitRatio, SplitSpec};
use dgcnet::tensor::max_abs_diff;
use dgcnet::train::{argmax_rows, ensemble_predict_dataset, format_history};
use dgcnet::{
    compute_metrics, dgc_macs, fit, keep_count, select_channels, stratified_split, Checkpoint, DgcConfig, DgcLayer,
    Error, ForwardOptions, Metrics, Model, ModelConfig, ParamStore, Schedule, Selection, Shape5, Tape, TrainConfig,
};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

/// Epoch budget for the end-to-end run; the criterion allows up to 60.
const DESK_EPOCHS: usize = 24;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dgc_layer(cfg: DgcConfig, seed: u64) -> (DgcLayer, ParamStore) {
    let mut store = ParamStore::new();
    let layer = DgcLayer::new(cfg, &mut store, "dgc", &mut rng(seed)).unwrap();
    for h in &layer.heads {
        let beta = store.get_mut(h.beta).tensor.data_mut();
        let w = probe_weights(beta.len(), seed + h.index as u64);
        beta.copy_from_slice(&w);
    }
    (layer, store)
}

fn dgc_config(c: usize, c_out: usize, heads: usize, k: usize, pad: usize, compression: usize) -> DgcConfig {
    DgcConfig {
        in_channels: c,
        out_channels: c_out,
        heads,
        compression,
        gate_factor: 0.25,
        kernel_size: [k; 3],
        padding: [pad; 3],
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_model_config();
    let model = Model::new(cfg, 31).unwrap();
    let x = random_tensor(Shape5::new(4, 1, 12, 5, 5), &mut rng(31));
    let check = model_grad_check(&model, &x, &[0, 1, 2, 1], 0.5, 100, 1e-4, 31);
    let elapsed = start.elapsed();
    ensure(check.worst < 1e-5, || format!("worst relative error {:.3e}", check.worst))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "100 gradients, worst rel err {:.2e}, {} non-differentiable probes skipped, {:.1}s",
        check.worst,
        check.skipped,
        elapsed.as_secs_f64()
    ))
}

fn path_equivalence() -> Outcome {
    let mut r = rng(32);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let c = r.random_range(heads.max(2)..13);
        let c_out = heads * r.random_range(1..4);
        let (k, pad) = [(1, 0), (3, 1), (3, 0), (2, 0)][r.random_range(0..4)];
        let (l, store) = dgc_layer(dgc_config(c, c_out, heads, k, pad, 4), case);
        let x = random_tensor(
            Shape5::new(r.random_range(1..4), c, r.random_range(3..6), r.random_range(3..6), r.random_range(3..6)),
            &mut r,
        );
        let eps = r.random_range(0.0..0.95);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let train = l.forward_train(&mut tape, &store, xv, eps).unwrap();
        let (infer, _, _) = l.forward_infer(&store, &x, eps).unwrap();
        let d = max_abs_diff(tape.value(train.out).data(), infer.data());
        ensure(d <= 1e-12, || format!("layer case {case}: {d:.3e}"))?;
        worst = worst.max(d);
    }
    let mut model_worst = 0.0f64;
    for seed in 0..5 {
        let model = Model::new(tiny_model_config(), seed).unwrap();
        let x = random_tensor(Shape5::new(3, 1, 12, 5, 5), &mut r);
        let eps = [0.0, 0.25, 0.5, 0.75, 0.9][seed as usize];
        let masked = ForwardOptions {
            path: ExecPath::Masked,
            ..ForwardOptions::infer(eps)
        };
        let a = model.logits(&x, masked).unwrap();
        let b = model.logits(&x, ForwardOptions::infer(eps)).unwrap();
        let d = max_abs_diff(a.data(), b.data());
        ensure(d <= 1e-12, || format!("model seed {seed}: {d:.3e}"))?;
        model_worst = model_worst.max(d);
    }
    Ok(format!("50 layers max diff {worst:.2e}, 5 models max diff {model_worst:.2e}"))
}

fn mac_law() -> Outcome {
    let cfg = dgc_config(64, 64, 4, 3, 0, 16);
    let report = dgc_macs(&cfg, [11, 11, 11], 0.75).unwrap();
    let dev = (report.saving_ratio / 4.0 - 1.0).abs();
    ensure(dev < 0.05, || format!("saving ratio {} deviates {dev:.4}", report.saving_ratio))?;
    let (l, store) = dgc_layer(cfg.clone(), 33);
    let x = random_tensor(Shape5::new(1, 64, 11, 11, 11), &mut rng(33));
    let (out, _, counter) = l.forward_infer(&store, &x, 0.75).unwrap();
    ensure(out.shape() == Shape5::new(1, 64, 9, 9, 9), || format!("output {}", out.shape()))?;
    ensure(counter.conv == report.conv_macs, || {
        format!("instrumented {} vs analytic {}", counter.conv, report.conv_macs)
    })?;
    let ratios: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&t| dgc_macs(&dgc_config(64, 64, t, 3, 0, 16), [11, 11, 11], 0.75).unwrap().saving_ratio)
        .collect();
    let spread = ratios.iter().copied().fold(f64::MIN, f64::max) / ratios.iter().copied().fold(f64::MAX, f64::min) - 1.0;
    ensure(spread < 0.01, || format!("ratio over heads varies {spread:.4}: {ratios:?}"))?;
    Ok(format!(
        "ratio {:.4} (law 4.0), counter {} == analytic, head spread {:.2e}",
        report.saving_ratio, counter.conv, spread
    ))
}

fn gating_contract() -> Outcome {
    let mut r = rng(34);
    for case in 0..1000 {
        let n = r.random_range(1..40);
        let ties = r.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if ties { r.random_range(0..5) as f64 } else { r.random_range(-2.0..2.0) })
            .collect();
        let eps = r.random_range(0.0..0.99);
        let sel = select_channels(&scores, eps).unwrap();
        let k = keep_count(n, eps).unwrap();
        ensure(sel.indices.len() == k, || format!("case {case}: size {} != {k}", sel.indices.len()))?;
        let min_kept = sel.indices.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|&i| !sel.mask[i]) {
            ensure(scores[i] <= min_kept, || format!("case {case}: dropped {i} outranks a kept channel"))?;
            if scores[i] == min_kept {
                let lower = sel.indices.iter().filter(|&&j| scores[j] == min_kept).all(|&j| j < i);
                ensure(lower, || format!("case {case}: tie at {i} not resolved to lower index"))?;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut oracle = order[..k].to_vec();
        oracle.sort();
        ensure(sel.indices == oracle, || format!("case {case}: differs from sort oracle"))?;
    }
    Ok("1000 score vectors match the sort oracle".into())
}

fn gradient_masking() -> Outcome {
    let (l, mut store) = dgc_layer(dgc_config(8, 4, 2, 3, 1, 4), 35);
    let x = random_tensor(Shape5::new(3, 8, 3, 3, 3), &mut rng(35));
    let sel = |v: Vec<usize>| Selection::from_indices(v, 8, 0.75).unwrap();
    let forced = vec![
        vec![sel(vec![0, 1]), sel(vec![1, 2, 4]), sel(vec![3])],
        vec![sel(vec![1, 3]), sel(vec![5, 6, 7]), sel(vec![3, 7])],
    ];
    let unused = [[5, 6, 7], [0, 2, 4]];
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = l.forward_train_forced(&mut tape, &store, xv, &forced).unwrap();
    let n = tape.value(out.out).numel();
    let loss = tape.weighted_sum(out.out, probe_weights(n, 35)).unwrap();
    tape.backward(loss).unwrap();
    tape.write_param_grads(&mut store).unwrap();
    let mut zeros = 0;
    for (head, channels) in unused.iter().enumerate() {
        let g = store.tensor(l.kernels[head].weights).grad.clone().unwrap();
        for oc in 0..2 {
            for &ch in channels {
                let slice = &g[(oc * 8 + ch) * 27..][..27];
                ensure(slice.iter().all(|v| *v == 0.0), || format!("head {head} channel {ch} has gradient"))?;
                zeros += 27;
            }
        }
        ensure(g.iter().any(|v| *v != 0.0), || format!("head {head} received no gradient at all"))?;
    }
    Ok(format!("{zeros} unselected kernel entries have exactly zero gradient"))
}

fn topology() -> Outcome {
    let mut totals = Vec::new();
    for (name, layers) in [("small", [4, 6, 8]), ("base", [10, 10, 10]), ("large", [14, 14, 14])] {
        let cfg = ModelConfig::named(name).unwrap();
        let model = Model::new(cfg.clone(), 0).map_err(|e| format!("{name}: {e}"))?;
        let growth = cfg.growth_rates();
        ensure(growth == [8, 16, 32], || format!("{name}: growth {growth:?}"))?;
        ensure(cfg.layers_per_block == layers, || format!("{name}: layers {:?}", cfg.layers_per_block))?;
        let closed = 2 * 8 + layers.iter().zip([8, 16, 32]).map(|(l, g)| l * g).sum::<usize>();
        ensure(model.classifier_in_channels() == closed, || {
            format!("{name}: classifier input {} vs {closed}", model.classifier_in_channels())
        })?;
        totals.push(model.count_params().total);
    }
    ensure(totals[0] < totals[1] && totals[1] < totals[2], || format!("param counts {totals:?}"))?;
    Ok(format!("params small/base/large = {totals:?}"))
}

fn schedule() -> Outcome {
    for epochs in [12, 24, 200] {
        let s = Schedule::new(epochs, 0.75);
        let eps: Vec<f64> = (0..epochs).map(|e| s.eps(e)).collect();
        let (warm, hold) = (epochs / 12, epochs - epochs / 4);
        ensure(eps[..warm].iter().all(|&e| e == 0.0), || format!("{epochs}: warmup not zero"))?;
        ensure(eps[hold..].iter().all(|&e| e == 0.75), || format!("{epochs}: finetune not at target"))?;
        ensure(eps.windows(2).all(|w| w[0] <= w[1]), || format!("{epochs}: decreasing"))?;
        let slope = 0.75 / (hold - warm) as f64;
        for (e, &v) in eps.iter().enumerate().take(hold).skip(warm) {
            let ideal = slope * (e as f64 - warm as f64);
            ensure((v - ideal).abs() <= slope, || format!("{epochs}: epoch {e} off the line"))?;
        }
    }
    let s = Schedule::new(200, 0.75);
    ensure(s.eps(15) == 0.0 && s.eps(150) == 0.75 && s.eps(149) < 0.75, || "200-epoch boundaries".into())?;
    Ok("epochs 12, 24, 200 checked".into())
}

fn desk_scale() -> Outcome {
    let start = Instant::now();
    let patch = 5;
    let d = toy_data(7, 40, 40, 24, 3, 0.05, patch);
    let model_cfg = desk_model_config(patch, 24, 3);
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        runs: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let res = fit(&model_cfg, &d.train, &d.val, &cfg, 0, None).map_err(|e| e.to_string())?;
    let probs = ensemble_predict_dataset(&[&res.best], &d.test, 64).map_err(|e| e.to_string())?;
    let m = compute_metrics(d.test.labels(), &argmax_rows(&probs, 3), 3).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!(
        "{DESK_EPOCHS} epochs, best val OA {:.4} at epoch {}, test OA {:.4}, kappa {:.4}, {:.0}s",
        res.best_val_oa,
        res.best_epoch,
        m.overall_accuracy,
        m.kappa,
        elapsed.as_secs_f64()
    );
    ensure(res.best_val_oa >= 0.95 && m.kappa >= 0.9 && elapsed < Duration::from_secs(600), || summary.clone())?;
    Ok(summary)
}

/// OA, AA and kappa straight from the matrix definitions.
fn metrics_oracle(k: usize, cm: &[u64]) -> (f64, f64, f64) {
    let n: f64 = cm.iter().map(|&v| v as f64).sum();
    let mut diag = 0.0;
    let mut recall_sum = 0.0;
    let mut present = 0.0;
    let mut chance = 0.0;
    for i in 0..k {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..k {
            row += cm[i * k + j] as f64;
            col += cm[j * k + i] as f64;
        }
        diag += cm[i * k + i] as f64;
        if row > 0.0 {
            recall_sum += cm[i * k + i] as f64 / row;
            present += 1.0;
        }
        chance += row * col;
    }
    let po = diag / n;
    let pe = chance / (n * n);
    (po, recall_sum / present, (po - pe) / (1.0 - pe))
}

fn metrics() -> Outcome {
    let mut r = rng(39);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let k = r.random_range(2..10);
        let cm: Vec<u64> = (0..k * k)
            .map(|i| if i % (k + 1) == 0 { r.random_range(0..200) } else { r.random_range(0..40) })
            .collect();
        if cm.iter().sum::<u64>() == 0 {
            continue;
        }
        let m = Metrics::from_confusion(k, cm.clone()).map_err(|e| e.to_string())?;
        let (oa, aa, kappa) = metrics_oracle(k, &cm);
        for (got, want) in [(m.overall_accuracy, oa), (m.average_accuracy, aa), (m.kappa, kappa)] {
            worst = worst.max((got - want).abs());
        }
        ensure(worst <= 1e-12, || format!("case {case}: deviation {worst:.3e}"))?;
    }
    let truth: Vec<usize> = (0..10_000).map(|_| r.random_range(0..5)).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| r.random_range(0..5)).collect();
    let chance = compute_metrics(&truth, &pred, 5).map_err(|e| e.to_string())?;
    ensure(chance.kappa.abs() < 0.02, || format!("chance kappa {}", chance.kappa))?;
    Ok(format!("max deviation {worst:.2e}, chance kappa {:.4}", chance.kappa))
}

fn determinism_and_formats() -> Outcome {
    let d = toy_data(40, 14, 14, 8, 3, 0.05, 3);
    let model_cfg = ModelConfig {
        input_extent: [8, 3, 3],
        ..tiny_model_config()
    };
    let cfg = TrainConfig {
        epochs: 12,
        runs: 1,
        seed: 40,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let a = fit(&model_cfg, &d.train, &d.val, &cfg, 0, None).map_err(|e| e.to_string())?;
    let b = fit(&model_cfg, &d.train, &d.val, &cfg, 0, None).map_err(|e| e.to_string())?;
    ensure(format_history(&a.history) == format_history(&b.history), || "histories differ".into())?;
    ensure(a.best.to_bytes() == b.best.to_bytes(), || "best checkpoints differ".into())?;

    let cube = synth_cube(40, 16, 12, 6, 3, 0.1).unwrap();
    let bytes = cube.to_bytes();
    let back = HsiCube::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == bytes && back == cube, || "cube round trip".into())?;
    let ckpt_bytes = a.best.to_bytes();
    let ckpt = Checkpoint::from_bytes(&ckpt_bytes).map_err(|e| e.to_string())?;
    ensure(ckpt.to_bytes() == ckpt_bytes && ckpt == a.best, || "checkpoint round trip".into())?;

    let mut flips = 0;
    for (name, data) in [("cube", &bytes), ("checkpoint", &ckpt_bytes)] {
        for at in [5, data.len() / 3, data.len() / 2, data.len() - 6] {
            let mut bad = data.clone();
            bad[at] ^= 0x04;
            let rejected = if name == "cube" {
                matches!(HsiCube::from_bytes(&bad), Err(Error::Checksum { .. }))
            } else {
                matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. }))
            };
            ensure(rejected, || format!("{name}: flipped byte {at} accepted"))?;
            flips += 1;
        }
    }
    Ok(format!("history bitwise equal, both formats round-trip, {flips} corruptions rejected"))
}

fn split_protocol() -> Outcome {
    let cube = synth_cube(41, 36, 36, 4, 6, 0.1).unwrap();
    let labeled = cube.labeled_pixels();
    let ratios = ["2:1:7", "3:1:6", "4:1:5", "5:1:4", "6:1:3"];
    for ratio in ratios {
        let ratio: SplitRatio = ratio.parse().unwrap();
        let split = stratified_split(&cube.labels, &SplitSpec { ratio, seed: 41 }).map_err(|e| e.to_string())?;
        let mut all: Vec<usize> = [&split.train, &split.val, &split.test].into_iter().flatten().copied().collect();
        all.sort_unstable();
        ensure(all == labeled, || format!("{ratio:?}: sets do not partition the labeled pixels"))?;
        let parts = ratio.parts();
        let total: u32 = parts.iter().sum();
        for k in 1..=cube.classes as u16 {
            let n = labeled.iter().filter(|&&p| cube.labels[p] == k).count() as f64;
            for (set, w) in [&split.train, &split.val, &split.test].into_iter().zip(parts) {
                let got = set.iter().filter(|&&p| cube.labels[p] == k).count() as f64;
                let exact = n * w as f64 / total as f64;
                ensure((got - exact).abs() <= 1.0, || format!("{ratio:?} class {k}: {got} vs {exact:.2}"))?;
            }
        }
    }
    Ok(format!("{} ratios, {} classes", ratios.len(), cube.classes))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("path equivalence", path_equivalence),
        ("MAC law", mac_law),
        ("gating contract", gating_contract),
        ("gradient masking", gradient_masking),
        ("topology", topology),
        ("schedule", schedule),
        ("desk-scale end-to-end", desk_scale),
        ("metrics oracle", metrics),
        ("determinism and formats", determinism_and_formats),
        ("split protocol", split_protocol),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
