//! Shared convolutional encoder with an instance projection head and a
//! cluster assignment head.
//!
//! Activations are NHWC and every parameter lives in one flat vector, which
//! keeps the optimizer and finite-difference checks trivial. Gradients are
//! hand-derived; [`Model::backward`] consumes the [`Tape`] recorded by
//! [`Model::forward`].

mod checkpoint;
pub mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use ops::Scalar;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use ops::{relu_backward, relu_in_place, Allocator, Conv, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Four stride-2 conv + ReLU blocks, widths `w, 2w, 2w, 4w`.
    TinyConv,
    /// Stem plus four stages of two residual basic blocks, widths
    /// `w, 2w, 4w, 8w`; no normalization layers.
    Resnet18Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Architecture,
    pub image_size: usize,
    pub base_width: usize,
    /// Instance head output dimension.
    pub projection_dim: usize,
    /// Number of clusters.
    pub clusters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::TinyConv,
            image_size: 32,
            base_width: 16,
            projection_dim: 128,
            clusters: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::Config("at least two clusters are required".into()));
        }
        if self.base_width == 0 || self.projection_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image size must be at least 4".into()));
        }
        Ok(())
    }

    /// Width of the pooled encoder features.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Architecture::TinyConv => 4 * self.base_width,
            Architecture::Resnet18Style => 8 * self.base_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Block {
    /// conv -> ReLU
    Plain(Conv),
    /// ReLU(conv_b(ReLU(conv_a(x))) + skip(x))
    Residual { a: Conv, b: Conv, proj: Option<Conv> },
}

impl Block {
    fn out_size(&self, size: usize) -> usize {
        match self {
            Block::Plain(c) => c.out_size(size),
            Block::Residual { a, .. } => a.out_size(size),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Block::Plain(c) => c.cout,
            Block::Residual { b, .. } => b.cout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    blocks: Vec<Block>,
    inst_hidden: Linear,
    inst_out: Linear,
    clus_hidden: Linear,
    clus_out: Linear,
    total: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig) -> Self {
        let mut alloc = Allocator::default();
        let w = cfg.base_width;
        let mut blocks = Vec::new();
        match cfg.arch {
            Architecture::TinyConv => {
                let mut cin = 3;
                for cout in [w, 2 * w, 2 * w, 4 * w] {
                    blocks.push(Block::Plain(Conv::new(&mut alloc, cin, cout, 3, 2, 1)));
                    cin = cout;
                }
            }
            Architecture::Resnet18Style => {
                blocks.push(Block::Plain(Conv::new(&mut alloc, 3, w, 3, 1, 1)));
                let mut cin = w;
                for (stage, cout) in [w, 2 * w, 4 * w, 8 * w].into_iter().enumerate() {
                    for i in 0..2 {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let a = Conv::new(&mut alloc, cin, cout, 3, stride, 1);
                        let b = Conv::new(&mut alloc, cout, cout, 3, 1, 1);
                        let proj = (stride != 1 || cin != cout)
                            .then(|| Conv::new(&mut alloc, cin, cout, 1, stride, 0));
                        blocks.push(Block::Residual { a, b, proj });
                        cin = cout;
                    }
                }
            }
        }
        let h = cfg.feature_dim();
        let inst_hidden = Linear::new(&mut alloc, h, h);
        let inst_out = Linear::new(&mut alloc, h, cfg.projection_dim);
        let clus_hidden = Linear::new(&mut alloc, h, h);
        let clus_out = Linear::new(&mut alloc, h, cfg.clusters);
        Self {
            blocks,
            inst_hidden,
            inst_out,
            clus_hidden,
            clus_out,
            total: alloc.total,
        }
    }
}

/// Network outputs for a batch of `n` images.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    pub n: usize,
    /// `n x projection_dim`, unit rows.
    pub z: Vec<T>,
    /// `n x clusters`, rows on the simplex.
    pub q: Vec<T>,
}

/// Intermediate activations needed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    n: usize,
    /// Per block: input spatial size and cached tensors.
    blocks: Vec<BlockTape<T>>,
    /// Output of the last block, `n x s x s x feature_dim`.
    last_size: usize,
    features: Vec<T>,
    inst_hidden: Vec<T>,
    inst_raw_norm: Vec<T>,
    z: Vec<T>,
    clus_hidden: Vec<T>,
    q: Vec<T>,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    in_size: usize,
    col_a: Vec<T>,
    /// Plain: block output; residual: hidden ReLU output.
    act_a: Vec<T>,
    col_b: Vec<T>,
    col_proj: Vec<T>,
    out: Vec<T>,
}

/// Encoder plus both heads, with parameters of type `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<T>,
}

const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Model<T> {
    /// He-initialized model; weights drawn from a stream keyed by `seed`.
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = seed::stream(&[seed::domain::INIT, seed]);
        let mut fill = |slot: ops::Slot, fan_in: usize, gain: f64| {
            let std = (gain / fan_in as f64).sqrt();
            for v in slot.of_mut(&mut params) {
                let z: f64 = rng.sample(StandardNormal);
                *v = T::lit(z * std);
            }
        };
        for block in &layout.blocks {
            match block {
                Block::Plain(c) => fill(c.weight, c.fan_in(), 2.0),
                Block::Residual { a, b, proj } => {
                    fill(a.weight, a.fan_in(), 2.0);
                    // Damped residual branch keeps activations bounded without normalization.
                    fill(b.weight, b.fan_in(), 0.5);
                    if let Some(p) = proj {
                        fill(p.weight, p.fan_in(), 1.0);
                    }
                }
            }
        }
        fill(layout.inst_hidden.weight, layout.inst_hidden.fan_in, 2.0);
        fill(layout.inst_out.weight, layout.inst_out.fan_in, 1.0);
        fill(layout.clus_hidden.weight, layout.clus_hidden.fan_in, 2.0);
        fill(layout.clus_out.weight, layout.clus_out.fan_in, 1.0);
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }

    fn image_len(&self) -> usize {
        self.config.image_size * self.config.image_size * 3
    }

    /// Forward pass over `n` NHWC RGB images packed in `images`.
    pub fn forward(&self, images: &[T], n: usize) -> Result<(Output<T>, Tape<T>)> {
        if n == 0 {
            return Err(Error::Empty("forward needs a nonempty batch"));
        }
        if images.len() != n * self.image_len() {
            return Err(Error::Shape(format!(
                "expected {n} images of {0}x{0}x3 ({1} values), got {2}",
                self.config.image_size,
                n * self.image_len(),
                images.len()
            )));
        }
        let p = &self.params;
        let mut size = self.config.image_size;
        let mut x = images.to_vec();
        let mut block_tapes = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let in_size = size;
            let tape = match block {
                Block::Plain(c) => {
                    let (mut y, col) = c.forward(p, &x, n, size);
                    relu_in_place(&mut y);
                    BlockTape {
                        in_size,
                        col_a: col,
                        act_a: Vec::new(),
                        col_b: Vec::new(),
                        col_proj: Vec::new(),
                        out: y,
                    }
                }
                Block::Residual { a, b, proj } => {
                    let (mut h, col_a) = a.forward(p, &x, n, size);
                    relu_in_place(&mut h);
                    let mid = a.out_size(size);
                    let (mut y, col_b) = b.forward(p, &h, n, mid);
                    let col_proj = match proj {
                        Some(pc) => {
                            let (s, col) = pc.forward(p, &x, n, size);
                            for (v, sv) in y.iter_mut().zip(&s) {
                                *v += *sv;
                            }
                            col
                        }
                        None => {
                            for (v, sv) in y.iter_mut().zip(&x) {
                                *v += *sv;
                            }
                            Vec::new()
                        }
                    };
                    relu_in_place(&mut y);
                    BlockTape {
                        in_size,
                        col_a,
                        act_a: h,
                        col_b,
                        col_proj,
                        out: y,
                    }
                }
            };
            size = block.out_size(size);
            x = tape.out.clone();
            block_tapes.push(tape);
        }

        // Global average pool.
        let h = self.config.feature_dim();
        let spatial = size * size;
        let mut features = vec![T::zero(); n * h];
        let inv = T::one() / T::lit(spatial as f64);
        for b in 0..n {
            let f = &mut features[b * h..(b + 1) * h];
            for px in x[b * spatial * h..(b + 1) * spatial * h].chunks_exact(h) {
                for (acc, &v) in f.iter_mut().zip(px) {
                    *acc += v;
                }
            }
            for v in f.iter_mut() {
                *v *= inv;
            }
        }

        let l = &self.layout;
        let mut inst_hidden = l.inst_hidden.forward(p, &features, n);
        relu_in_place(&mut inst_hidden);
        let mut z = l.inst_out.forward(p, &inst_hidden, n);
        let dz = self.config.projection_dim;
        let mut inst_raw_norm = Vec::with_capacity(n);
        for row in z.chunks_exact_mut(dz) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(NORM_EPS));
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            inst_raw_norm.push(norm);
        }

        let mut clus_hidden = l.clus_hidden.forward(p, &features, n);
        relu_in_place(&mut clus_hidden);
        let mut q = l.clus_out.forward(p, &clus_hidden, n);
        for row in q.chunks_exact_mut(self.config.clusters) {
            softmax_in_place(row);
        }

        let out = Output {
            n,
            z: z.clone(),
            q: q.clone(),
        };
        let tape = Tape {
            n,
            blocks: block_tapes,
            last_size: size,
            features,
            inst_hidden,
            inst_raw_norm,
            z,
            clus_hidden,
            q,
        };
        Ok((out, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, images: &[T], n: usize) -> Result<Output<T>> {
        self.forward(images, n).map(|(o, _)| o)
    }

    /// Parameter gradient given loss gradients w.r.t. the unit `z` rows and
    /// the softmax `q` rows.
    pub fn backward(&self, tape: &Tape<T>, dz: &[T], dq: &[T]) -> Result<Vec<T>> {
        let n = tape.n;
        let zd = self.config.projection_dim;
        let m = self.config.clusters;
        if dz.len() != n * zd || dq.len() != n * m {
            return Err(Error::Shape("loss gradient does not match the forward batch".into()));
        }
        let p = &self.params;
        let l = &self.layout;
        let mut g = vec![T::zero(); p.len()];

        // Instance head: back through the L2 normalization.
        let mut d_raw = vec![T::zero(); n * zd];
        for b in 0..n {
            let y = &tape.z[b * zd..(b + 1) * zd];
            let dy = &dz[b * zd..(b + 1) * zd];
            let dot: T = y.iter().zip(dy).map(|(&a, &c)| a * c).sum();
            let norm = tape.inst_raw_norm[b];
            for i in 0..zd {
                d_raw[b * zd + i] = (dy[i] - y[i] * dot) / norm;
            }
        }
        let mut d_ih = l.inst_out.backward(p, &mut g, &tape.inst_hidden, &d_raw, n);
        relu_backward(&tape.inst_hidden, &mut d_ih);
        let mut d_feat = l.inst_hidden.backward(p, &mut g, &tape.features, &d_ih, n);

        // Cluster head: back through the softmax.
        let mut d_logits = vec![T::zero(); n * m];
        for b in 0..n {
            let s = &tape.q[b * m..(b + 1) * m];
            let ds = &dq[b * m..(b + 1) * m];
            let dot: T = s.iter().zip(ds).map(|(&a, &c)| a * c).sum();
            for i in 0..m {
                d_logits[b * m + i] = s[i] * (ds[i] - dot);
            }
        }
        let mut d_ch = l.clus_out.backward(p, &mut g, &tape.clus_hidden, &d_logits, n);
        relu_backward(&tape.clus_hidden, &mut d_ch);
        let d_feat2 = l.clus_hidden.backward(p, &mut g, &tape.features, &d_ch, n);
        for (a, b) in d_feat.iter_mut().zip(&d_feat2) {
            *a += *b;
        }

        // Global average pool.
        let h = self.config.feature_dim();
        let spatial = tape.last_size * tape.last_size;
        let inv = T::one() / T::lit(spatial as f64);
        let mut dx = vec![T::zero(); n * spatial * h];
        for b in 0..n {
            let df = &d_feat[b * h..(b + 1) * h];
            for px in dx[b * spatial * h..(b + 1) * spatial * h].chunks_exact_mut(h) {
                for (d, &v) in px.iter_mut().zip(df) {
                    *d = v * inv;
                }
            }
        }

        for (i, (block, bt)) in l.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let need_input = i > 0;
            let mut dy = dx;
            relu_backward(&bt.out, &mut dy);
            dx = match block {
                Block::Plain(c) => c
                    .backward(p, &mut g, &bt.col_a, &dy, n, bt.in_size, need_input)
                    .unwrap_or_default(),
                Block::Residual { a, b, proj } => {
                    let mid = a.out_size(bt.in_size);
                    let mut dh = b
                        .backward(p, &mut g, &bt.col_b, &dy, n, mid, true)
                        .expect("input gradient requested");
                    relu_backward(&bt.act_a, &mut dh);
                    let da = a.backward(p, &mut g, &bt.col_a, &dh, n, bt.in_size, need_input);
                    let ds = match proj {
                        Some(pc) => pc.backward(p, &mut g, &bt.col_proj, &dy, n, bt.in_size, need_input),
                        None => need_input.then(|| dy.clone()),
                    };
                    match (da, ds) {
                        (Some(mut a), Some(s)) => {
                            for (x, y) in a.iter_mut().zip(&s) {
                                *x += *y;
                            }
                            a
                        }
                        _ => Vec::new(),
                    }
                }
            };
        }
        Ok(g)
    }

    /// Spatial size after each block, for diagnostics.
    pub fn block_sizes(&self) -> Vec<(usize, usize)> {
        let mut size = self.config.image_size;
        self.layout
            .blocks
            .iter()
            .map(|b| {
                size = b.out_size(size);
                (size, b.out_channels())
            })
            .collect()
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Packs images into one NHWC buffer of type `T`.
pub fn pack_images<T: Scalar>(images: &[&crate::dataset::Image]) -> Vec<T> {
    let mut out = Vec::with_capacity(images.iter().map(|i| i.data.len()).sum());
    for img in images {
        out.extend(img.data.iter().map(|&v| T::lit(f64::from(v))));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, size: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::stream(&[seed]);
        (0..n * size * size * 3).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn tiny_conv_stays_under_half_a_million_parameters() {
        let m = Model::<f32>::new(&EncoderConfig::default(), 0).unwrap();
        assert!(m.param_count() < 500_000, "{}", m.param_count());
        assert_eq!(m.block_sizes().last(), Some(&(2, 64)));
    }

    #[test]
    fn outputs_are_normalized() {
        for arch in [Architecture::TinyConv, Architecture::Resnet18Style] {
            let cfg = EncoderConfig {
                arch,
                image_size: 16,
                base_width: 4,
                projection_dim: 8,
                clusters: 3,
            };
            let m = Model::<f64>::new(&cfg, 1).unwrap();
            let out = m.infer(&batch(5, 16, 2), 5).unwrap();
            for row in out.z.chunks_exact(8) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
            for row in out.q.chunks_exact(3) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn duplicated_images_get_identical_rows() {
        let cfg = EncoderConfig {
            image_size: 8,
            base_width: 2,
            ..Default::default()
        };
        let m = Model::<f32>::new(&cfg, 3).unwrap();
        let one: Vec<f32> = batch(1, 8, 5).into_iter().map(|v| v as f32).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let out = m.infer(&two, 2).unwrap();
        assert_eq!(out.z[..128], out.z[128..]);
        assert_eq!(out.q[..5], out.q[5..]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = Model::<f32>::new(&EncoderConfig::default(), 0).unwrap();
        assert!(matches!(m.infer(&[0.0; 10], 1), Err(Error::Shape(_))));
        assert!(m.infer(&[], 0).is_err());
    }

    #[test]
    fn single_cluster_config_is_rejected() {
        let cfg = EncoderConfig {
            clusters: 1,
            ..Default::default()
        };
        assert!(Model::<f32>::new(&cfg, 0).is_err());
    }
}
