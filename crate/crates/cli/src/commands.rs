use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dgcnet::checkpoint::write_atomic;
use dgcnet::hsi::{convert_raw, BandStats, Split};
use dgcnet::train::{argmax_rows, checkpoint_file, ensemble_predict_dataset};
use dgcnet::{
    compute_metrics, fit_runs, load_checkpoint, load_cube, save_cube, stratified_split, synth_cube, Checkpoint,
    HsiCube, Model, ModelConfig, PatchDataset, PatchExtractor, SplitSpec,
};
use log::info;
use serde_json::json;

use crate::config::{self, CubeShape, Resolved};
use crate::manifest::Manifest;
use crate::{CliError, ConfigArgs, ConvertArgs, CostArgs, EvalArgs, Global, SplitName, SynthArgs};

const EVAL_BATCH: usize = 64;

fn usage_on_config(e: dgcnet::Error) -> CliError {
    match e {
        dgcnet::Error::Config(msg) => CliError::Usage(msg),
        other => other.into(),
    }
}

fn print_histogram(cube: &HsiCube) {
    let hist = cube.class_histogram();
    println!("{}x{} pixels, {} bands, {} classes", cube.rows, cube.cols, cube.bands, cube.classes);
    println!("    class  pixels");
    println!("unlabeled  {}", cube.labels.len() - hist.iter().sum::<usize>());
    for (k, n) in hist.iter().enumerate() {
        println!("{:>9}  {n}", k + 1);
    }
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<(), CliError> {
    let seed = g.seed.unwrap_or(0);
    let mut m = Manifest::new(
        "synth",
        g,
        json!({"rows": a.rows, "cols": a.cols, "bands": a.bands, "classes": a.classes, "noise": a.noise, "out": a.out}),
    );
    let cube = m
        .time("synth", || synth_cube(seed, a.rows, a.cols, a.bands, a.classes, a.noise))
        .map_err(usage_on_config)?;
    let out = g.out_dir.join(&a.out);
    save_cube(&cube, &out)?;
    print_histogram(&cube);
    m.seed = Some(seed);
    m.artifacts.push(out);
    m.results = json!({"class_histogram": cube.class_histogram()});
    m.write(&g.out_dir)?;
    Ok(())
}

pub fn convert(g: &Global, a: ConvertArgs) -> Result<(), CliError> {
    let mut m = Manifest::new("convert", g, json!({"header": a.header, "out": a.out}));
    let cube = m.time("convert", || convert_raw(&a.header))?;
    let out = g.out_dir.join(&a.out);
    save_cube(&cube, &out)?;
    print_histogram(&cube);
    m.artifacts.push(out);
    m.results = json!({"class_histogram": cube.class_histogram()});
    m.write(&g.out_dir)?;
    Ok(())
}

struct Prepared {
    split: Split,
    extractor: Arc<PatchExtractor>,
}

impl Prepared {
    fn dataset(&self, which: SplitName) -> Result<PatchDataset, CliError> {
        let pixels = match which {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        };
        Ok(PatchDataset::new(self.extractor.clone(), pixels.clone())?)
    }
}

/// Split, band statistics from the training pixels, and the patch extractor.
fn prepare(cube: &HsiCube, cfg: &Resolved) -> Result<Prepared, CliError> {
    let split = stratified_split(
        &cube.labels,
        &SplitSpec {
            ratio: cfg.data.ratio,
            seed: cfg.split_seed(),
        },
    )?;
    let stats = BandStats::from_pixels(cube, &split.train)?;
    let extractor = PatchExtractor::new(cube, cfg.data.patch, &stats)?;
    let (pr, pc) = extractor.padded_extent();
    info!(
        "patch {}: padded extent {pr}x{pc}; split {} train / {} val / {} test",
        cfg.data.patch,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Prepared {
        split,
        extractor: Arc::new(extractor),
    })
}

/// Parses the config, loads its cube and resolves the model against it.
fn load_with_cube(path: &Path, g: &Global, m: &mut Manifest) -> Result<(Resolved, HsiCube), CliError> {
    let (doc, base) = config::read(path)?;
    let partial = config::parse(doc, &base, g.seed)?;
    let cube_path = partial
        .data
        .cube
        .clone()
        .ok_or_else(|| CliError::Usage("config field `data.cube`: a cube file is required".into()))?;
    let cube = m.time("load", || load_cube(&cube_path))?;
    let mut cfg = partial.finish(Some(&CubeShape {
        bands: cube.bands,
        classes: cube.classes,
    }))?;
    cfg.data.cube = Some(std::fs::canonicalize(&cube_path).unwrap_or(cube_path));
    info!(
        "cube {}x{}x{} with {} classes, model k0 {} blocks {:?}",
        cube.rows, cube.cols, cube.bands, cube.classes, cfg.model.k0, cfg.model.layers_per_block
    );
    Ok((cfg, cube))
}

pub fn train(g: &Global, a: ConfigArgs) -> Result<(), CliError> {
    let mut m = Manifest::new("train", g, json!({"config": a.config}));
    let (cfg, cube) = load_with_cube(&a.config, g, &mut m)?;
    m.seed = Some(cfg.train.seed);
    let data = prepare(&cube, &cfg)?;
    let (train, val) = (data.dataset(SplitName::Train)?, data.dataset(SplitName::Val)?);
    let runs = m.time("train", || {
        fit_runs(&cfg.model, &train, &val, &cfg.train, Some(&g.out_dir), g.threads())
    })?;
    let best: Vec<&Checkpoint> = runs.iter().map(|r| &r.best).collect();
    let val_oa = m.time("ensemble", || -> Result<f64, CliError> {
        let probs = ensemble_predict_dataset(&best, &val, EVAL_BATCH)?;
        let pred = argmax_rows(&probs, cfg.model.num_classes);
        Ok(compute_metrics(val.labels(), &pred, cfg.model.num_classes)?.overall_accuracy)
    })?;
    for r in &runs {
        println!("run {}: best val OA {:.4} at epoch {}", r.run, r.best_val_oa, r.best_epoch);
    }
    println!("ensemble val OA {val_oa:.4}");

    for r in &runs {
        m.artifacts.extend(r.checkpoint_path.iter().cloned());
        m.artifacts.extend(r.history_path.iter().cloned());
    }
    m.results = json!({
        "runs": runs.iter().map(|r| json!({
            "run": r.run, "seed": r.seed, "best_epoch": r.best_epoch, "best_val_oa": r.best_val_oa,
        })).collect::<Vec<_>>(),
        "ensemble_val_oa": val_oa,
    });
    m.config = Some(cfg);
    m.write(&g.out_dir)?;
    Ok(())
}

fn report_table(m: &dgcnet::Metrics, names: Option<&[String]>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>5}  {:<24} {:>8} {:>9}", "class", "name", "samples", "accuracy");
    for k in 0..m.classes {
        let samples: u64 = (0..m.classes).map(|p| m.count(k, p)).sum();
        let name = names.and_then(|n| n.get(k)).cloned().unwrap_or_else(|| format!("class {}", k + 1));
        let acc = m.per_class_accuracy[k].map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(s, "{:>5}  {name:<24} {samples:>8} {acc:>9}", k + 1);
    }
    let _ = writeln!(s, "OA     {:.2}", 100.0 * m.overall_accuracy);
    let _ = writeln!(s, "AA     {:.2}", 100.0 * m.average_accuracy);
    let _ = writeln!(s, "kappa  {:.4}", m.kappa);
    s
}

pub fn eval(g: &Global, a: EvalArgs) -> Result<(), CliError> {
    let mut m = Manifest::new("eval", g, json!({"config": a.config, "checkpoints": a.checkpoints, "split": format!("{:?}", a.split).to_lowercase()}));
    let (cfg, cube) = load_with_cube(&a.config, g, &mut m)?;
    let paths: Vec<PathBuf> = if a.checkpoints.is_empty() {
        (0..cfg.train.runs).map(|r| g.out_dir.join(checkpoint_file(r))).collect()
    } else {
        a.checkpoints.clone()
    };
    let ckpts = m.time("load_checkpoints", || {
        paths.iter().map(load_checkpoint).collect::<dgcnet::Result<Vec<_>>>()
    })?;
    for (p, c) in paths.iter().zip(&ckpts) {
        config::check_extents(c.model.config(), cube.bands, cfg.data.patch, cube.classes)
            .map_err(|e| match e {
                CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", p.display())),
                other => other,
            })?;
    }
    let data = prepare(&cube, &cfg)?;
    let ds = data.dataset(a.split)?;
    let refs: Vec<&Checkpoint> = ckpts.iter().collect();
    let k = cube.classes;
    let metrics = m.time("predict", || -> Result<_, CliError> {
        let probs = ensemble_predict_dataset(&refs, &ds, EVAL_BATCH)?;
        Ok(compute_metrics(ds.labels(), &argmax_rows(&probs, k), k)?)
    })?;
    print!("{}", report_table(&metrics, cube.class_names.as_deref()));

    let split = format!("{:?}", a.split).to_lowercase();
    let report = json!({"split": split, "samples": ds.len(), "checkpoints": paths, "metrics": metrics});
    let out = g.out_dir.join(format!("eval-{split}.json"));
    write_atomic(&out, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    m.artifacts.push(out);
    m.seed = Some(cfg.train.seed);
    m.results = json!({"overall_accuracy": metrics.overall_accuracy, "average_accuracy": metrics.average_accuracy, "kappa": metrics.kappa});
    m.config = Some(cfg);
    m.write(&g.out_dir)?;
    Ok(())
}

/// Model for a cost report. Configs with a cube inherit its extents.
fn cost_model(g: &Global, a: &CostArgs) -> Result<Model, CliError> {
    if let Some(path) = &a.source.checkpoint {
        return Ok(load_checkpoint(path)?.model);
    }
    let path = a.source.config.as_ref().expect("clap requires one source");
    let (doc, base) = config::read(path)?;
    let partial = config::parse(doc, &base, g.seed)?;
    let shape = match &partial.data.cube {
        Some(p) => {
            let cube = load_cube(p)?;
            Some(CubeShape {
                bands: cube.bands,
                classes: cube.classes,
            })
        }
        None => None,
    };
    let cfg: ModelConfig = partial.finish(shape.as_ref())?.model;
    Ok(Model::new(cfg, g.seed.unwrap_or(0))?)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn describe(cfg: &ModelConfig) -> String {
    format!(
        "blocks {:?}, growth rates {}, heads {}, gate factor {}, input {:?}, {} classes",
        cfg.layers_per_block,
        join(&cfg.growth_rates()),
        cfg.heads,
        cfg.gate_factor,
        cfg.input_extent,
        cfg.num_classes
    )
}

pub fn macs(g: &Global, a: CostArgs) -> Result<(), CliError> {
    let model = cost_model(g, &a)?;
    let eps = a.eps.unwrap_or_else(|| model.config().target_eps());
    if !(0.0..1.0).contains(&eps) {
        return Err(CliError::Usage(format!("--eps {eps} must lie in [0, 1)")));
    }
    let r = model.count_macs(eps)?;
    let dgc_dense = r.dgc_conv_dense();
    let dgc_pruned: u64 = r.layers.iter().map(|l| l.dgc.dgc_macs).sum();
    let dgc_ratio = dgc_dense as f64 / dgc_pruned as f64;
    let formula = 1.0 / (1.0 - eps);
    if a.json {
        let mut v = serde_json::to_value(&r).expect("report serializes");
        v["dgc_saving_ratio"] = json!(dgc_ratio);
        v["formula_ratio"] = json!(formula);
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        return Ok(());
    }
    println!("{}", describe(model.config()));
    println!("pruning rate {eps}");
    println!(
        "{:<16} {:>6} {:>14} {:>14} {:>10} {:>8}",
        "layer", "in", "dense MACs", "DGC MACs", "saliency", "ratio"
    );
    for (l, layer) in r.layers.iter().zip(model.layers()) {
        println!(
            "{:<16} {:>6} {:>14} {:>14} {:>10} {:>8.3}",
            l.name, layer.in_channels, l.dgc.regular_macs, l.dgc.dgc_macs, l.dgc.saliency_macs, l.dgc.saving_ratio
        );
    }
    println!("stem {}, static 3x3x3 convs {}, classifier {}", r.stem, r.layers.iter().map(|l| l.static_conv).sum::<u64>(), r.classifier);
    println!("DGC layers: dense {dgc_dense}, pruned {dgc_pruned}, saving ratio {dgc_ratio:.4} (formula 1/(1-eps) = {formula:.4})");
    println!(
        "whole model: dense-equivalent {}, pruned {}, saving ratio {:.4}",
        r.dense_total,
        r.pruned_total,
        r.saving_ratio()
    );
    if dgc_ratio <= 1.0 {
        println!("saliency overhead dominates: pruning saves nothing at this rate");
    }
    Ok(())
}

pub fn params(g: &Global, a: CostArgs) -> Result<(), CliError> {
    let model = cost_model(g, &a)?;
    let b = model.count_params();
    let per_layer: Vec<(String, usize)> = model
        .layers()
        .iter()
        .map(|l| {
            let prefix = format!("{}.", l.name);
            let n = model
                .params()
                .iter()
                .filter(|p| p.name.starts_with(&prefix))
                .map(|p| p.tensor.numel())
                .sum();
            (l.name.clone(), n)
        })
        .collect();
    if a.json {
        let v = json!({"breakdown": b, "layers": per_layer.iter().map(|(n, c)| json!({"name": n, "params": c})).collect::<Vec<_>>(), "growth_rates": model.config().growth_rates()});
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        return Ok(());
    }
    println!("{}", describe(model.config()));
    println!("growth rates: {}", join(&model.config().growth_rates()));
    println!("{:<16} {:>10}", "layer", "params");
    for (name, n) in &per_layer {
        println!("{name:<16} {n:>10}");
    }
    println!(
        "stem {}, batch norm {}, saliency {}, DGC kernels {}, static convs {}, classifier {}",
        b.stem, b.batch_norm, b.saliency, b.dgc_kernels, b.static_conv, b.classifier
    );
    println!("classifier input channels {}", model.classifier_in_channels());
    println!("total {}", b.total);
    Ok(())
}

