//! Dynamic group convolution.
//!
//! Each of `T` heads owns a saliency generator that scores every input
//! channel from the globally pooled input, keeps the top `(1 - ε)·C` channels
//! of each sample, scales them by their scores and convolves them with the
//! head's kernel. Head outputs are concatenated and channel-shuffled.
//!
//! Two execution paths share the same arithmetic:
//!
//! * [`DgcLayer::forward_train`] records on a tape and zeroes unselected
//!   channels with a mask, so their kernel slices receive exactly zero
//!   gradient from that sample.
//! * [`DgcLayer::forward_infer`] gathers only the selected channels and
//!   kernel slices and convolves those, so the multiply count is the pruned
//!   count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape5, Tensor5};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgcConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: usize,
    /// Reduction factor of the saliency generator's hidden layer.
    pub compression: usize,
    /// Fraction of input channels each head keeps.
    pub gate_factor: f64,
    pub kernel_size: [usize; 3],
    pub padding: [usize; 3],
}

impl DgcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.out_channels % self.heads != 0 {
            return Err(Error::config(format!(
                "dgc: {} heads do not divide {} output channels",
                self.heads, self.out_channels
            )));
        }
        if self.in_channels < self.heads {
            return Err(Error::config(format!(
                "dgc: {} input channels is fewer than {} heads",
                self.in_channels, self.heads
            )));
        }
        if self.compression == 0 {
            return Err(Error::config("dgc: compression must be at least 1"));
        }
        if !(self.gate_factor > 0.0 && self.gate_factor <= 1.0) {
            return Err(Error::config(format!(
                "dgc: gate_factor {} outside (0, 1]",
                self.gate_factor
            )));
        }
        if self.kernel_size.contains(&0) {
            return Err(Error::config("dgc: zero kernel extent"));
        }
        Ok(())
    }

    /// Pruning rate the schedule ramps towards.
    pub fn target_eps(&self) -> f64 {
        1.0 - self.gate_factor
    }

    /// Width of the saliency generator's hidden layer, `C / d` clamped to 1.
    pub fn hidden(&self) -> usize {
        (self.in_channels / self.compression).max(1)
    }

    pub fn head_out(&self) -> usize {
        self.out_channels / self.heads
    }

    pub fn output_extent(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * self.padding[a] + 1).saturating_sub(self.kernel_size[a]);
        }
        out
    }
}

/// Channels each head keeps: `max(1, round_half_up((1 - ε)·C))`.
///
/// A `1e-9` slack absorbs binary representation error so that, e.g.,
/// `(1 - 0.55)·10` rounds to 5.
pub fn keep_count(channels: usize, eps: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("pruning rate {eps} outside [0, 1)")));
    }
    let kept = ((1.0 - eps) * channels as f64 + 0.5 + 1e-9).floor() as usize;
    Ok(kept.clamp(1, channels.max(1)))
}

/// Channels chosen by one head for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Kept channel indices, ascending.
    pub indices: Vec<usize>,
    pub mask: Vec<bool>,
    pub eps: f64,
}

impl Selection {
    pub fn from_indices(mut indices: Vec<usize>, channels: usize, eps: f64) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        let mut mask = vec![false; channels];
        for &i in &indices {
            *mask
                .get_mut(i)
                .ok_or_else(|| Error::config(format!("selected channel {i} >= {channels}")))? = true;
        }
        Ok(Self { indices, mask, eps })
    }
}

/// Top-`keep_count` channels by score; ties go to the lower index.
pub fn select_channels(scores: &[f64], eps: f64) -> Result<Selection> {
    let k = keep_count(scores.len(), eps)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Selection::from_indices(order, scores.len(), eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyHead {
    pub index: usize,
    /// `(C/d, C)`
    pub w1: ParamId,
    /// `(C, C/d)`
    pub w2: ParamId,
    /// `(C)`
    pub beta: ParamId,
}

/// Full fan-in kernel of one head, `(C'/T, C, kd, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadKernel {
    pub weights: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgcLayer {
    pub config: DgcConfig,
    pub heads: Vec<SaliencyHead>,
    pub kernels: Vec<HeadKernel>,
}

/// Result of a DGC forward: the output node plus what every head selected,
/// indexed `[head][sample]`.
#[derive(Debug)]
pub struct DgcOutput {
    pub out: Var,
    pub selections: Vec<Vec<Selection>>,
}

/// Multiply-adds executed by the gathered inference path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub conv: u64,
    pub saliency: u64,
}

impl std::ops::AddAssign for MacCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.conv += rhs.conv;
        self.saliency += rhs.saliency;
    }
}

impl DgcLayer {
    /// Registers parameters under `prefix` and initializes them uniformly in
    /// `±sqrt(6 / fan_in)`, with `β = 0`.
    pub fn new<R: Rng + ?Sized>(
        config: DgcConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, hidden) = (config.in_channels, config.hidden());
        let [kd, kh, kw] = config.kernel_size;
        let mut heads = Vec::with_capacity(config.heads);
        let mut kernels = Vec::with_capacity(config.heads);
        for i in 0..config.heads {
            let w1 = store.add(
                format!("{prefix}.head{i}.w1"),
                Tensor5::uniform(Shape5::matrix(hidden, c), (6.0 / c as f64).sqrt(), rng),
            )?;
            let w2 = store.add(
                format!("{prefix}.head{i}.w2"),
                Tensor5::uniform(Shape5::matrix(c, hidden), (6.0 / hidden as f64).sqrt(), rng),
            )?;
            let beta = store.add(format!("{prefix}.head{i}.beta"), Tensor5::zeros(Shape5::vector(c)))?;
            let fan_in = (c * kd * kh * kw) as f64;
            let weights = store.add(
                format!("{prefix}.head{i}.kernel"),
                Tensor5::uniform(
                    Shape5::new(config.head_out(), c, kd, kh, kw),
                    (6.0 / fan_in).sqrt(),
                    rng,
                ),
            )?;
            heads.push(SaliencyHead { index: i, w1, w2, beta });
            kernels.push(HeadKernel { weights });
        }
        Ok(Self {
            config,
            heads,
            kernels,
        })
    }

    fn check_input(&self, s: Shape5) -> Result<()> {
        if s.c != self.config.in_channels {
            return Err(Error::Shape {
                op: "dgc",
                axis: "channels",
                expected: self.config.in_channels,
                found: s.c,
            });
        }
        Ok(())
    }

    /// Masked training path.
    pub fn forward_train(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Result<DgcOutput> {
        self.forward_train_inner(tape, store, x, eps, None)
    }

    /// Training path with externally fixed selections, indexed
    /// `[head][sample]`. Scores are still computed and used as weights.
    pub fn forward_train_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        forced: &[Vec<Selection>],
    ) -> Result<DgcOutput> {
        if forced.len() != self.config.heads {
            return Err(Error::Shape {
                op: "dgc",
                axis: "heads",
                expected: self.config.heads,
                found: forced.len(),
            });
        }
        self.forward_train_inner(tape, store, x, 0.0, Some(forced))
    }

    fn forward_train_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        eps: f64,
        forced: Option<&[Vec<Selection>]>,
    ) -> Result<DgcOutput> {
        let xs = tape.shape(x);
        self.check_input(xs)?;
        let c = xs.c;
        let pooled = tape.global_avg_pool(x)?;
        let mut outs = Vec::with_capacity(self.config.heads);
        let mut selections = Vec::with_capacity(self.config.heads);
        for (head, kernel) in self.heads.iter().zip(&self.kernels) {
            let w1 = tape.param(store, head.w1);
            let w2 = tape.param(store, head.w2);
            let beta = tape.param(store, head.beta);
            let hidden = tape.linear(pooled, w1, None)?;
            let hidden = tape.relu(hidden);
            let pre = tape.linear(hidden, w2, Some(beta))?;
            let scores = tape.relu(pre);

            let mut head_sel = Vec::with_capacity(xs.n);
            let mut mask = vec![0.0; xs.n * c];
            for b in 0..xs.n {
                let sel = match forced {
                    Some(f) => f[head.index]
                        .get(b)
                        .cloned()
                        .ok_or_else(|| Error::config(format!("no forced selection for sample {b}")))?,
                    None => select_channels(&tape.value(scores).data()[b * c..(b + 1) * c], eps)?,
                };
                if sel.mask.len() != c {
                    return Err(Error::Shape {
                        op: "dgc",
                        axis: "selection",
                        expected: c,
                        found: sel.mask.len(),
                    });
                }
                for &i in &sel.indices {
                    mask[b * c + i] = 1.0;
                }
                head_sel.push(sel);
            }
            let gate = tape.mul_const(scores, mask)?;
            let weighted = tape.scale_channels(x, gate)?;
            let k = tape.param(store, kernel.weights);
            outs.push(tape.conv3d(weighted, k, None, 1, self.config.padding)?);
            selections.push(head_sel);
        }
        let merged = tape.concat_channels(&outs)?;
        let out = tape.channel_shuffle(merged, self.config.heads)?;
        Ok(DgcOutput { out, selections })
    }

    /// Saliency scores `g = relu(w2 · relu(w1 · pool(x)) + β)` of one head,
    /// shaped `(n, C)`.
    pub fn saliency_scores(&self, store: &ParamStore, head: usize, x: &Tensor5) -> Result<Tensor5> {
        let s = x.shape();
        self.check_input(s)?;
        let pooled = global_pool(x);
        let mut macs = 0;
        self.head_scores(store, head, &pooled, s.n, &mut macs)
    }

    fn head_scores(
        &self,
        store: &ParamStore,
        head: usize,
        pooled: &[f64],
        n: usize,
        macs: &mut u64,
    ) -> Result<Tensor5> {
        let h = &self.heads[head];
        let (c, hidden) = (self.config.in_channels, self.config.hidden());
        let mut z = vec![0.0; n * hidden];
        *macs += kernels::linear_forward(pooled, n, c, store.tensor(h.w1).data(), hidden, None, &mut z);
        let mut a = vec![0.0; z.len()];
        kernels::relu(&z, &mut a);
        let mut pre = vec![0.0; n * c];
        *macs += kernels::linear_forward(
            &a,
            n,
            hidden,
            store.tensor(h.w2).data(),
            c,
            Some(store.tensor(h.beta).data()),
            &mut pre,
        );
        let mut g = vec![0.0; pre.len()];
        kernels::relu(&pre, &mut g);
        Tensor5::matrix(n, c, g)
    }

    /// Gathered inference path: only selected channels and their kernel
    /// slices enter the convolution.
    pub fn forward_infer(&self, store: &ParamStore, x: &Tensor5, eps: f64) -> Result<(Tensor5, Vec<Vec<Selection>>, MacCounter)> {
        let s = x.shape();
        self.check_input(s)?;
        let (c, t, per_head) = (s.c, self.config.heads, self.config.head_out());
        let [od, oh, ow] = self.config.output_extent([s.d, s.h, s.w]);
        let os = Shape5::new(s.n, self.config.out_channels, od, oh, ow);
        let ovol = os.volume();
        let vol = s.volume();
        let [kd, kh, kw] = self.config.kernel_size;
        let kvol = kd * kh * kw;
        let pooled = global_pool(x);

        let mut counter = MacCounter::default();
        let mut merged = vec![0.0; os.numel()];
        let mut selections = Vec::with_capacity(t);
        for head in 0..t {
            let scores = self.head_scores(store, head, &pooled, s.n, &mut counter.saliency)?;
            let kernel = store.tensor(self.kernels[head].weights).data();
            let mut head_sel = Vec::with_capacity(s.n);
            for b in 0..s.n {
                let g = &scores.data()[b * c..(b + 1) * c];
                let sel = select_channels(g, eps)?;
                let kept = sel.indices.len();
                let gs = Shape5::new(1, kept, s.d, s.h, s.w);
                let mut gathered = vec![0.0; gs.numel()];
                for (slot, &ch) in sel.indices.iter().enumerate() {
                    let src = &x.data()[(b * c + ch) * vol..][..vol];
                    for (d, v) in gathered[slot * vol..][..vol].iter_mut().zip(src) {
                        *d = *v * g[ch];
                    }
                }
                let ks = Shape5::new(per_head, kept, kd, kh, kw);
                let mut sub_kernel = Vec::with_capacity(ks.numel());
                for oc in 0..per_head {
                    for &ch in &sel.indices {
                        sub_kernel.extend_from_slice(&kernel[(oc * c + ch) * kvol..][..kvol]);
                    }
                }
                let hs = Shape5::new(1, per_head, od, oh, ow);
                let dst = &mut merged[(b * os.c + head * per_head) * ovol..][..per_head * ovol];
                counter.conv += kernels::conv3d_forward(
                    &gathered,
                    gs,
                    &sub_kernel,
                    ks,
                    None,
                    1,
                    self.config.padding,
                    hs,
                    dst,
                );
                head_sel.push(sel);
            }
            selections.push(head_sel);
        }
        let mut out = vec![0.0; os.numel()];
        kernels::channel_shuffle(&merged, os, t, &mut out);
        Ok((Tensor5::from_vec(os, out)?, selections, counter))
    }

    pub fn num_params(&self) -> usize {
        let c = self.config.in_channels;
        let [kd, kh, kw] = self.config.kernel_size;
        self.config.heads * (2 * c * self.config.hidden() + c + self.config.head_out() * c * kd * kh * kw)
    }
}

fn global_pool(x: &Tensor5) -> Vec<f64> {
    let s = x.shape();
    let os = Shape5::new(s.n, s.c, 1, 1, 1);
    let mut pooled = vec![0.0; os.numel()];
    kernels::avg_pool3d_forward(x.data(), s, [s.d, s.h, s.w], [1, 1, 1], os, &mut pooled);
    pooled
}

/// Analytic cost of one DGC layer on a single sample versus a dense
/// convolution of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    /// `k³ · C' · C · D'H'W'`
    pub regular_macs: u64,
    /// Saliency plus per-head convolution, summed over heads.
    pub dgc_macs: u64,
    /// `T · 2 · C · (C/d)`
    pub saliency_macs: u64,
    /// `T · k³ · keep · (C'/T) · D'H'W'`
    pub conv_macs: u64,
    pub saving_ratio: f64,
    /// `1 / (1 - ε)`
    pub formula_ratio: f64,
}

pub fn dgc_macs(cfg: &DgcConfig, input_extent: [usize; 3], eps: f64) -> Result<MacReport> {
    cfg.validate()?;
    let keep = keep_count(cfg.in_channels, eps)? as u64;
    let out_vol: u64 = cfg.output_extent(input_extent).iter().map(|&v| v as u64).product();
    let kvol: u64 = cfg.kernel_size.iter().map(|&v| v as u64).product();
    let (c, c_out, t) = (cfg.in_channels as u64, cfg.out_channels as u64, cfg.heads as u64);
    let regular = kvol * c_out * c * out_vol;
    let per_head_conv = kvol * keep * (c_out / t) * out_vol;
    let per_head_saliency = 2 * c * cfg.hidden() as u64;
    let conv = t * per_head_conv;
    let saliency = t * per_head_saliency;
    let dgc = conv + saliency;
    Ok(MacReport {
        regular_macs: regular,
        dgc_macs: dgc,
        saliency_macs: saliency,
        conv_macs: conv,
        saving_ratio: regular as f64 / dgc as f64,
        formula_ratio: 1.0 / (1.0 - eps),
    })
}
