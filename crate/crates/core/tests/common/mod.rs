#![allow(dead_code)]

use std::sync::Arc;

use dgcnet::hsi::{stratified_split, synth_cube, BandStats, PatchExtractor, Split, SplitSpec};
use dgcnet::train::PatchDataset;
use dgcnet::{ModelConfig, Result, Shape5, Tape, Tensor5, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::uniform(shape, 1.0, rng)
}

/// Direct seven-loop grouped convolution, stride 1, zero padding.
pub fn conv_oracle(
    x: &Tensor5,
    k: &Tensor5,
    bias: Option<&[f64]>,
    groups: usize,
    pad: [usize; 3],
) -> Tensor5 {
    let (s, ks) = (x.shape(), k.shape());
    let od = s.d + 2 * pad[0] + 1 - ks.d;
    let oh = s.h + 2 * pad[1] + 1 - ks.h;
    let ow = s.w + 2 * pad[2] + 1 - ks.w;
    let cig = s.c / groups;
    let cog = ks.n / groups;
    let mut out = Tensor5::zeros(Shape5::new(s.n, ks.n, od, oh, ow));
    for b in 0..s.n {
        for oc in 0..ks.n {
            let g = oc / cog;
            for z in 0..od {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut acc = bias.map_or(0.0, |v| v[oc]);
                        for icg in 0..cig {
                            for kz in 0..ks.d {
                                for ky in 0..ks.h {
                                    for kx in 0..ks.w {
                                        let iz = (z + kz) as isize - pad[0] as isize;
                                        let iy = (y + ky) as isize - pad[1] as isize;
                                        let ix = (x_ + kx) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= s.d as isize
                                            || iy >= s.h as isize
                                            || ix >= s.w as isize
                                        {
                                            continue;
                                        }
                                        acc += k.get(oc, icg, kz, ky, kx)
                                            * x.get(b, g * cig + icg, iz as usize, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, oc, z, y, x_, acc);
                    }
                }
            }
        }
    }
    out
}

/// Relative error with a floor on the denominator so that gradients that are
/// essentially zero compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks every input gradient of a tape computation against central
/// differences. `build` must return a scalar. Returns the worst relative error.
pub fn check_tape_grads(inputs: &[Tensor5], step: f64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor5]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Fixed random weights that turn any output into a scalar loss.
pub fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Two blocks, a handful of channels; fast enough for finite differences.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stages: 2,
        layers_per_block: vec![2, 2],
        k0: 4,
        heads: 2,
        static_groups: 2,
        gate_factor: 0.5,
        compression: 4,
        bottleneck_width: 2,
        num_classes: 3,
        input_extent: [12, 5, 5],
        pool_spectral: true,
    }
}

/// The desk-scale configuration: k0 = 4, three blocks of two layers, two
/// heads, gate factor 0.25.
pub fn desk_model_config(patch: usize, bands: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        stages: 3,
        layers_per_block: vec![2, 2, 2],
        k0: 4,
        heads: 2,
        gate_factor: 0.25,
        num_classes: classes,
        input_extent: [bands, patch, patch],
        ..ModelConfig::default()
    }
}

pub struct ToyData {
    pub split: Split,
    pub extractor: Arc<PatchExtractor>,
    pub train: PatchDataset,
    pub val: PatchDataset,
    pub test: PatchDataset,
}

pub fn toy_data(seed: u64, rows: usize, cols: usize, bands: usize, classes: usize, noise: f64, patch: usize) -> ToyData {
    let cube = synth_cube(seed, rows, cols, bands, classes, noise).unwrap();
    let split = stratified_split(
        &cube.labels,
        &SplitSpec {
            ratio: "6:1:3".parse().unwrap(),
            seed,
        },
    )
    .unwrap();
    let stats = BandStats::from_pixels(&cube, &split.train).unwrap();
    let extractor = Arc::new(PatchExtractor::new(&cube, patch, &stats).unwrap());
    let ds = |px: &[usize]| PatchDataset::new(extractor.clone(), px.to_vec()).unwrap();
    ToyData {
        train: ds(&split.train),
        val: ds(&split.val),
        test: ds(&split.test),
        split,
        extractor,
    }
}

pub struct ModelGradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Samples whose finite-difference probes changed a channel selection or
    /// crossed a ReLU kink, where the loss is not differentiable.
    pub skipped: usize,
}

/// Channel selections and ReLU sign patterns: the piecewise-linear region a
/// forward pass landed in.
fn region(tape: &Tape, out: &dgcnet::densenet::ForwardOutput) -> (Vec<Vec<usize>>, Vec<bool>) {
    let selections = out
        .selections
        .iter()
        .flat_map(|layer| layer.iter().flat_map(|head| head.iter().map(|s| s.indices.clone())))
        .collect();
    (selections, tape.relu_pattern())
}

/// Compares `samples` randomly drawn parameter gradients of the training
/// loss (batch-norm in batch mode, DGC gating at `eps`) with central
/// differences.
pub fn model_grad_check(
    model: &dgcnet::Model,
    x: &Tensor5,
    labels: &[usize],
    eps: f64,
    samples: usize,
    step: f64,
    seed: u64,
) -> ModelGradCheck {
    use dgcnet::ForwardOptions;
    let loss_of = |m: &dgcnet::Model| {
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, x, ForwardOptions::train(eps)).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, labels).unwrap();
        (tape.value(loss).data()[0], region(&tape, &out))
    };
    let mut grads = model.clone();
    let mut tape = Tape::new();
    let out = grads.forward(&mut tape, x, ForwardOptions::train(eps)).unwrap();
    let base = region(&tape, &out);
    let loss = tape.softmax_cross_entropy(out.logits, labels).unwrap();
    tape.backward(loss).unwrap();
    tape.write_param_grads(grads.params_mut()).unwrap();

    let params: Vec<_> = model.params().iter().map(|p| (p.id, p.tensor.numel())).collect();
    let total: usize = params.iter().map(|p| p.1).sum();
    let mut r = rng(seed);
    let mut result = ModelGradCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    while result.checked < samples {
        let mut flat = r.random_range(0..total);
        let (id, i) = params
            .iter()
            .find_map(|&(id, n)| {
                if flat < n {
                    Some((id, flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .unwrap();
        let analytic = grads.params().tensor(id).grad.as_ref().unwrap()[i];
        let mut plus = model.clone();
        plus.params_mut().get_mut(id).tensor.data_mut()[i] += step;
        let mut minus = model.clone();
        minus.params_mut().get_mut(id).tensor.data_mut()[i] -= step;
        let (lp, sp) = loss_of(&plus);
        let (lm, sm) = loss_of(&minus);
        if sp != base || sm != base {
            result.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        result.worst = result.worst.max(rel_err(analytic, numeric));
        result.checked += 1;
    }
    result
}
