//! Fully dense 3D network built from DGC bottleneck layers.
//!
//! Every dense layer consumes every feature produced before it (stem output
//! included), across block boundaries. A feature produced at resolution level
//! `ρ` and consumed at level `ρ'` is average-pooled `ρ' - ρ` times with window
//! 2, stride 2. Block `m` (from 1) grows by `k0 · 2^(m-1)` channels per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dgc::{dgc_macs, DgcConfig, DgcLayer, MacCounter, MacReport, Selection};
use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats};
use crate::params::{ParamId, ParamStore};
use crate::tape::{NormStats, Tape, Var};
use crate::tensor::{Shape5, Tensor5};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: usize,
    pub layers_per_block: Vec<usize>,
    /// Growth rate of the first block.
    pub k0: usize,
    pub heads: usize,
    /// Groups of the static 3×3×3 convolution.
    pub static_groups: usize,
    pub gate_factor: f64,
    pub compression: usize,
    /// DGC bottleneck outputs `bottleneck_width × growth` channels.
    pub bottleneck_width: usize,
    pub num_classes: usize,
    /// `(bands, rows, cols)` of one input patch.
    pub input_extent: [usize; 3],
    /// Whether transitions also halve the spectral axis.
    pub pool_spectral: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl ModelConfig {
    fn variant(layers: Vec<usize>) -> Self {
        Self {
            stages: layers.len(),
            layers_per_block: layers,
            k0: 8,
            heads: 4,
            static_groups: 4,
            gate_factor: 0.25,
            compression: 16,
            bottleneck_width: 4,
            num_classes: 16,
            input_extent: [200, 11, 11],
            pool_spectral: true,
        }
    }

    pub fn small() -> Self {
        Self::variant(vec![4, 6, 8])
    }

    pub fn base() -> Self {
        Self::variant(vec![10, 10, 10])
    }

    pub fn large() -> Self {
        Self::variant(vec![14, 14, 14])
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            "large" | "larger" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn target_eps(&self) -> f64 {
        1.0 - self.gate_factor
    }

    pub fn growth_rates(&self) -> Vec<usize> {
        (1..=self.stages).map(|m| growth_rate(m, self.k0)).collect()
    }

    pub fn stem_channels(&self) -> usize {
        2 * self.k0
    }

    /// Closed-form channel count entering the classifier.
    pub fn classifier_channels(&self) -> usize {
        self.stem_channels()
            + self
                .layers_per_block
                .iter()
                .zip(self.growth_rates())
                .map(|(l, g)| l * g)
                .sum::<usize>()
    }

    /// `(d, h, w)` at every resolution level.
    pub fn level_extents(&self) -> Result<Vec<[usize; 3]>> {
        let mut ext = vec![self.input_extent];
        for level in 1..self.stages {
            let [d, h, w] = ext[level - 1];
            for (axis, v) in [("rows", h), ("cols", w)]
                .into_iter()
                .chain(self.pool_spectral.then_some(("bands", d)))
            {
                if v < 2 {
                    return Err(Error::config(format!(
                        "{axis} extent {v} too small to pool at transition {level}"
                    )));
                }
            }
            let d = if self.pool_spectral { d / 2 } else { d };
            ext.push([d, h / 2, w / 2]);
        }
        Ok(ext)
    }

    pub(crate) fn pool_window(&self) -> [usize; 3] {
        [if self.pool_spectral { 2 } else { 1 }, 2, 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.layers_per_block.len() != self.stages {
            return Err(Error::config(format!(
                "layers_per_block has {} entries for {} stages",
                self.layers_per_block.len(),
                self.stages
            )));
        }
        if self.k0 == 0 || self.num_classes == 0 || self.bottleneck_width == 0 {
            return Err(Error::config("k0, num_classes and bottleneck_width must be positive"));
        }
        if self.input_extent.contains(&0) {
            return Err(Error::config("input extent has a zero axis"));
        }
        for g in self.growth_rates() {
            if self.static_groups == 0 || g % self.static_groups != 0 {
                return Err(Error::config(format!(
                    "static_groups {} does not divide growth rate {g}",
                    self.static_groups
                )));
            }
            if (self.bottleneck_width * g) % self.static_groups != 0 {
                return Err(Error::config("static_groups must divide the bottleneck width"));
            }
        }
        self.level_extents()?;
        Ok(())
    }
}

/// Channels added per layer by block `m` (counted from 1).
pub fn growth_rate(m: usize, k0: usize) -> usize {
    debug_assert!(m >= 1, "blocks are counted from 1");
    k0 << (m.max(1) - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEntry {
    pub producer: String,
    pub channels: usize,
    pub level: usize,
}

/// Every feature produced so far, in production order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureRegistry {
    pub entries: Vec<FeatureEntry>,
}

impl FeatureRegistry {
    pub fn total_channels(&self) -> usize {
        self.entries.iter().map(|e| e.channels).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{prefix}.scale"), Tensor5::filled(Shape5::vector(channels), 1.0))?,
            shift: store.add(format!("{prefix}.shift"), Tensor5::zeros(Shape5::vector(channels)))?,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        })
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        let stats = match mode {
            BnMode::Train => NormStats::Batch,
            BnMode::Eval => NormStats::Running {
                mean: &self.running_mean,
                var: &self.running_var,
            },
        };
        tape.batch_norm(x, scale, shift, stats, BN_EPS)
    }

    fn update(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub name: String,
    /// Block index from 1.
    pub block: usize,
    pub level: usize,
    /// Registry entries consumed (all features produced before this layer).
    pub sources: usize,
    pub in_channels: usize,
    pub growth: usize,
    pub bn1: BatchNorm,
    pub dgc: DgcLayer,
    pub bn2: BatchNorm,
    /// `(growth, bottleneck / static_groups, 3, 3, 3)`
    pub conv: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecPath {
    /// Dense masked DGC, differentiable.
    Masked,
    /// Gathered DGC; only valid on an inference tape.
    Gathered,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub eps: f64,
    pub bn: BnMode,
    pub path: ExecPath,
}

impl ForwardOptions {
    pub fn train(eps: f64) -> Self {
        Self {
            eps,
            bn: BnMode::Train,
            path: ExecPath::Masked,
        }
    }

    pub fn infer(eps: f64) -> Self {
        Self {
            eps,
            bn: BnMode::Eval,
            path: ExecPath::Gathered,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Per dense layer, batch statistics of its two norms (training mode only).
    pub bn_stats: Vec<[BatchStats; 2]>,
    /// Per dense layer, `[head][sample]` selections.
    pub selections: Vec<Vec<Vec<Selection>>>,
    /// Multiply-adds of the gathered DGC path (zero on the masked path).
    pub dgc_macs: MacCounter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    stem: ParamId,
    layers: Vec<DenseLayer>,
    classifier_w: ParamId,
    classifier_b: ParamId,
    registry: FeatureRegistry,
}

/// Builds the network deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config.clone(), seed)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut registry = FeatureRegistry::default();
        let stem_c = config.stem_channels();
        let stem = params.add(
            "stem.conv",
            Tensor5::uniform(Shape5::new(stem_c, 1, 3, 3, 3), (6.0f64 / 27.0).sqrt(), &mut rng),
        )?;
        registry.entries.push(FeatureEntry {
            producer: "stem".into(),
            channels: stem_c,
            level: 0,
        });

        let mut layers = Vec::new();
        for (bi, &count) in config.layers_per_block.iter().enumerate() {
            let block = bi + 1;
            let growth = growth_rate(block, config.k0);
            let bottleneck = config.bottleneck_width * growth;
            for li in 1..=count {
                let name = format!("block{block}.layer{li}");
                let in_channels = registry.total_channels();
                let bn1 = BatchNorm::new(&mut params, &format!("{name}.bn1"), in_channels)?;
                let dgc = DgcLayer::new(
                    DgcConfig {
                        in_channels,
                        out_channels: bottleneck,
                        heads: config.heads,
                        compression: config.compression,
                        gate_factor: config.gate_factor,
                        kernel_size: [1, 1, 1],
                        padding: [0; 3],
                    },
                    &mut params,
                    &format!("{name}.dgc"),
                    &mut rng,
                )?;
                let bn2 = BatchNorm::new(&mut params, &format!("{name}.bn2"), bottleneck)?;
                let fan_in = (bottleneck / config.static_groups * 27) as f64;
                let conv = params.add(
                    format!("{name}.conv"),
                    Tensor5::uniform(
                        Shape5::new(growth, bottleneck / config.static_groups, 3, 3, 3),
                        (6.0 / fan_in).sqrt(),
                        &mut rng,
                    ),
                )?;
                layers.push(DenseLayer {
                    name: name.clone(),
                    block,
                    level: bi,
                    sources: registry.entries.len(),
                    in_channels,
                    growth,
                    bn1,
                    dgc,
                    bn2,
                    conv,
                });
                registry.entries.push(FeatureEntry {
                    producer: name,
                    channels: growth,
                    level: bi,
                });
            }
        }
        let final_c = registry.total_channels();
        debug_assert_eq!(final_c, config.classifier_channels());
        let classifier_w = params.add(
            "classifier.weight",
            Tensor5::uniform(
                Shape5::matrix(config.num_classes, final_c),
                (6.0 / final_c as f64).sqrt(),
                &mut rng,
            ),
        )?;
        let classifier_b = params.add("classifier.bias", Tensor5::zeros(Shape5::vector(config.num_classes)))?;
        Ok(Self {
            config,
            seed,
            params,
            stem,
            layers,
            classifier_w,
            classifier_b,
            registry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn registry(&self) -> &FeatureRegistry {
        &self.registry
    }

    pub fn classifier_in_channels(&self) -> usize {
        self.params.tensor(self.classifier_w).shape().c
    }

    /// Batch-norm running statistics, named `<layer>.bn{1,2}.running_{mean,var}`.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (tag, bn) in [("bn1", &l.bn1), ("bn2", &l.bn2)] {
                out.push((format!("{}.{tag}.running_mean", l.name), bn.running_mean.as_slice()));
                out.push((format!("{}.{tag}.running_var", l.name), bn.running_var.as_slice()));
            }
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let (layer, rest) = name
            .rsplit_once(".bn")
            .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))?;
        let l = self
            .layers
            .iter_mut()
            .find(|l| l.name == layer)
            .ok_or_else(|| Error::config(format!("unknown buffer `{name}`")))?;
        let target = match rest {
            "1.running_mean" => &mut l.bn1.running_mean,
            "1.running_var" => &mut l.bn1.running_var,
            "2.running_mean" => &mut l.bn2.running_mean,
            "2.running_var" => &mut l.bn2.running_var,
            _ => return Err(Error::config(format!("unknown buffer `{name}`"))),
        };
        if target.len() != data.len() {
            return Err(Error::Shape {
                op: "set_buffer",
                axis: "channels",
                expected: target.len(),
                found: data.len(),
            });
        }
        target.copy_from_slice(data);
        Ok(())
    }

    /// Fold one training step's batch statistics into the running averages.
    pub fn apply_bn_stats(&mut self, stats: &[[BatchStats; 2]]) {
        for (layer, [s1, s2]) in self.layers.iter_mut().zip(stats) {
            layer.bn1.update(s1);
            layer.bn2.update(s2);
        }
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        let s = x.shape();
        let [d, h, w] = self.config.input_extent;
        for (axis, expected, found) in [("channels", 1, s.c), ("bands", d, s.d), ("rows", h, s.h), ("cols", w, s.w)] {
            if expected != found {
                return Err(Error::Shape {
                    op: "model input",
                    axis,
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Runs the network on `x`, shaped `(n, 1, bands, rows, cols)`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor5, opts: ForwardOptions) -> Result<ForwardOutput> {
        self.check_input(x)?;
        if opts.path == ExecPath::Gathered && tape.is_recording() {
            return Err(Error::config("gathered DGC path needs an inference tape"));
        }
        let window = self.config.pool_window();
        let store = &self.params;
        let input = tape.leaf(x.clone());
        let stem = tape.param(store, self.stem);
        let stem_out = tape.conv3d(input, stem, None, 1, [1; 3])?;

        // features[i][k] is registry entry i pooled k times past its own level.
        let mut features: Vec<(usize, Vec<Var>)> = vec![(0, vec![stem_out])];
        let mut out = ForwardOutput {
            logits: stem_out,
            bn_stats: Vec::new(),
            selections: Vec::new(),
            dgc_macs: MacCounter::default(),
        };

        for layer in &self.layers {
            let inputs = gather_level(tape, &mut features[..layer.sources], layer.level, window)?;
            let x = tape.concat_channels(&inputs)?;
            if tape.shape(x).c != layer.in_channels {
                return Err(Error::Shape {
                    op: "dense layer",
                    axis: "channels",
                    expected: layer.in_channels,
                    found: tape.shape(x).c,
                });
            }
            let (x, s1) = layer.bn1.apply(tape, store, x, opts.bn)?;
            let x = tape.relu(x);
            let x = match opts.path {
                ExecPath::Masked => {
                    let o = layer.dgc.forward_train(tape, store, x, opts.eps)?;
                    out.selections.push(o.selections);
                    o.out
                }
                ExecPath::Gathered => {
                    let (t, sel, macs) = layer.dgc.forward_infer(store, tape.value(x), opts.eps)?;
                    out.selections.push(sel);
                    out.dgc_macs += macs;
                    tape.leaf(t)
                }
            };
            let (x, s2) = layer.bn2.apply(tape, store, x, opts.bn)?;
            let x = tape.relu(x);
            let conv = tape.param(store, layer.conv);
            let y = tape.conv3d(x, conv, None, self.config.static_groups, [1; 3])?;
            if let (Some(a), Some(b)) = (s1, s2) {
                out.bn_stats.push([a, b]);
            }
            features.push((layer.level, vec![y]));
        }

        let final_level = self.config.stages - 1;
        let all = features.len();
        let inputs = gather_level(tape, &mut features[..all], final_level, window)?;
        let merged = tape.concat_channels(&inputs)?;
        let pooled = tape.global_avg_pool(merged)?;
        let w = tape.param(store, self.classifier_w);
        let b = tape.param(store, self.classifier_b);
        out.logits = tape.linear(pooled, w, Some(b))?;
        Ok(out)
    }

    /// Class logits `(n, K)`.
    pub fn logits(&self, x: &Tensor5, opts: ForwardOptions) -> Result<Tensor5> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, x, opts)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax probabilities `(n, K)` via the gathered path with running
    /// batch-norm statistics.
    pub fn predict(&self, x: &Tensor5, eps: f64) -> Result<Tensor5> {
        let logits = self.logits(x, ForwardOptions::infer(eps))?;
        let s = logits.shape();
        let (rows, k) = (s.n, s.per_sample());
        let mut probs = vec![0.0; rows * k];
        kernels::softmax_rows(logits.data(), rows, k, &mut probs);
        Tensor5::matrix(rows, k, probs)
    }

    pub fn count_params(&self) -> ParamBreakdown {
        let mut b = ParamBreakdown {
            stem: self.params.tensor(self.stem).numel(),
            ..Default::default()
        };
        for l in &self.layers {
            let t = |id| self.params.tensor(id).numel();
            b.batch_norm += t(l.bn1.scale) + t(l.bn1.shift) + t(l.bn2.scale) + t(l.bn2.shift);
            for (h, k) in l.dgc.heads.iter().zip(&l.dgc.kernels) {
                b.saliency += t(h.w1) + t(h.w2) + t(h.beta);
                b.dgc_kernels += t(k.weights);
            }
            b.static_conv += t(l.conv);
        }
        b.classifier = self.params.tensor(self.classifier_w).numel() + self.params.tensor(self.classifier_b).numel();
        b.total = b.stem + b.batch_norm + b.saliency + b.dgc_kernels + b.static_conv + b.classifier;
        b
    }

    /// Analytic per-sample multiply-adds at pruning rate `eps`.
    pub fn count_macs(&self, eps: f64) -> Result<ModelMacs> {
        let extents = self.config.level_extents()?;
        let vol = |e: [usize; 3]| (e[0] * e[1] * e[2]) as u64;
        let stem = 27 * self.config.stem_channels() as u64 * vol(extents[0]);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let ext = extents[l.level];
            let dgc = dgc_macs(&l.dgc.config, ext, eps)?;
            let cin = (l.dgc.config.out_channels / self.config.static_groups) as u64;
            let static_conv = 27 * cin * l.growth as u64 * vol(ext);
            layers.push(LayerMacs {
                name: l.name.clone(),
                dgc,
                static_conv,
            });
        }
        let classifier = (self.classifier_in_channels() * self.config.num_classes) as u64;
        let fixed = stem + classifier + layers.iter().map(|l| l.static_conv).sum::<u64>();
        let dense_total = fixed + layers.iter().map(|l| l.dgc.regular_macs).sum::<u64>();
        let pruned_total = fixed + layers.iter().map(|l| l.dgc.dgc_macs).sum::<u64>();
        Ok(ModelMacs {
            eps,
            stem,
            layers,
            classifier,
            dense_total,
            pruned_total,
        })
    }
}

/// Entries of `features` at `level`, pooling and caching as needed.
fn gather_level(
    tape: &mut Tape,
    features: &mut [(usize, Vec<Var>)],
    level: usize,
    window: [usize; 3],
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(features.len());
    for (src_level, pooled) in features.iter_mut() {
        let steps = level.checked_sub(*src_level).ok_or_else(|| {
            Error::config(format!("feature at level {src_level} consumed at lower level {level}"))
        })?;
        while pooled.len() <= steps {
            let last = *pooled.last().expect("feature has its own level");
            pooled.push(tape.avg_pool3d(last, window, window)?);
        }
        out.push(pooled[steps]);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub stem: usize,
    pub batch_norm: usize,
    pub saliency: usize,
    pub dgc_kernels: usize,
    pub static_conv: usize,
    pub classifier: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub dgc: MacReport,
    pub static_conv: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMacs {
    pub eps: f64,
    pub stem: u64,
    pub layers: Vec<LayerMacs>,
    pub classifier: u64,
    /// Every DGC layer counted as a dense convolution.
    pub dense_total: u64,
    /// DGC layers counted with saliency overhead and pruned fan-in.
    pub pruned_total: u64,
}

impl ModelMacs {
    pub fn dgc_conv_dense(&self) -> u64 {
        self.layers.iter().map(|l| l.dgc.regular_macs).sum()
    }

    pub fn dgc_conv_pruned(&self) -> u64 {
        self.layers.iter().map(|l| l.dgc.conv_macs).sum()
    }

    pub fn saving_ratio(&self) -> f64 {
        self.dense_total as f64 / self.pruned_total as f64
    }
}
