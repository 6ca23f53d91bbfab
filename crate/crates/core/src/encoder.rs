//! Small differentiable encoder + projection head and its training loop.
//!
//! Two desk-scale bodies stand in for a full-size backbone: `mlp-small`
//! (flatten, dense 2d, dense d) and `conv-small` (three 3x3 conv blocks with
//! pooling, then a dense map to d). The projection head is a configurable
//! MLP with optional per-layer batch normalization, mirroring the
//! hidden-layers-then-output recipe used at paper scale.
//!
//! Training is plain SGD with momentum 0.9, decoupled L2 weight decay, and a
//! linear-warmup + cosine-annealing learning-rate schedule. All trainable
//! parameters live in one flat vector with a named-shape manifest, which
//! keeps the optimizer, finite-difference checks, and serialization honest
//! about covering every parameter.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{MultiviewBatch, PositiveSetPolicy};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses;
use crate::scalar::Scalar;

/// Encoder body architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MlpSmall,
    ConvSmall,
}

/// conv-small channel progression (3x3 kernels, pad 1, pool after the first
/// two blocks, global average pool after the third).
const CONV_CHANNELS: [usize; 3] = [4, 8, 16];
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Input (height, width, channels).
    pub input: (usize, usize, usize),
    /// Feature dimension d.
    pub d: usize,
    /// Projection dimension, strictly below d.
    pub d_head: usize,
    /// Hidden layers in the projection head.
    pub head_hidden: usize,
    /// Width of each hidden head layer.
    pub head_width: usize,
    /// Batch normalization after each hidden head layer.
    pub head_norm: bool,
}

impl EncoderConfig {
    /// Desk-scale default: d = 64, head 2 x 128 -> 32 with batch norm.
    pub fn desk(arch: Arch, input: (usize, usize, usize)) -> Self {
        Self {
            arch,
            input,
            d: 64,
            d_head: 32,
            head_hidden: 2,
            head_width: 128,
            head_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidConfig("empty input shape".into()));
        }
        if self.arch == Arch::ConvSmall && (h < 4 || w < 4) {
            return Err(Error::InvalidConfig(
                "conv-small needs input of at least 4x4".into(),
            ));
        }
        if self.d_head >= self.d {
            return Err(Error::InvalidConfig(format!(
                "d_head {} must be below d {}",
                self.d_head, self.d
            )));
        }
        if self.d == 0 || self.d_head == 0 || self.head_width == 0 {
            return Err(Error::InvalidConfig("zero layer width".into()));
        }
        Ok(())
    }
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Pairs per batchate (the batch holds twice as many instances).
    pub batch_pairs: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 20,
            peak_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0003,
            batch_pairs: 16,
            temperature: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("bad momentum/weight_decay".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::InvalidConfig("batch_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine annealing to ~0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.peak_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        let progress =
            (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
        cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decay class of a tensor: weights shrink under decoupled L2, biases do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    w: usize,
    b: usize,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
enum BodyLayout {
    Mlp { fc1: DenseIdx, fc2: DenseIdx },
    Conv {
        convs: [ConvIdx; 3],
        fc: DenseIdx,
    },
}

#[derive(Debug, Clone)]
struct HeadLayout {
    hidden: Vec<(DenseIdx, Option<BnIdx>)>,
    out: DenseIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    body: BodyLayout,
    head: HeadLayout,
}

struct ManifestBuilder {
    tensors: Vec<TensorMeta>,
    offset: usize,
    stats: Vec<TensorMeta>,
    stats_offset: usize,
}

impl ManifestBuilder {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            offset: 0,
            stats: Vec::new(),
            stats_offset: 0,
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        let len: usize = shape.iter().product();
        self.tensors.push(TensorMeta {
            name,
            shape,
            kind,
            offset: self.offset,
        });
        self.offset += len;
        self.tensors.len() - 1
    }

    fn stat(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len: usize = shape.iter().product();
        self.stats.push(TensorMeta {
            name,
            shape,
            kind: ParamKind::Bias,
            offset: self.stats_offset,
        });
        self.stats_offset += len;
        self.stats.len() - 1
    }

    fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize) -> DenseIdx {
        DenseIdx {
            w: self.tensor(format!("{name}.w"), vec![out_dim, in_dim], ParamKind::Weight),
            b: self.tensor(format!("{name}.b"), vec![out_dim], ParamKind::Bias),
            in_dim,
            out_dim,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvIdx {
        ConvIdx {
            w: self.tensor(format!("{name}.w"), vec![cout, cin, 3, 3], ParamKind::Weight),
            b: self.tensor(format!("{name}.b"), vec![cout], ParamKind::Bias),
            cin,
            cout,
        }
    }

    fn batch_norm(&mut self, name: &str, dim: usize) -> BnIdx {
        BnIdx {
            gamma: self.tensor(format!("{name}.gamma"), vec![dim], ParamKind::Weight),
            beta: self.tensor(format!("{name}.beta"), vec![dim], ParamKind::Bias),
            mean: self.stat(format!("{name}.running_mean"), vec![dim]),
            var: self.stat(format!("{name}.running_var"), vec![dim]),
            dim,
        }
    }
}

fn build_layout(cfg: &EncoderConfig) -> (Layout, Vec<TensorMeta>, Vec<TensorMeta>) {
    let mut mb = ManifestBuilder::new();
    let (h, w, c) = cfg.input;
    let body = match cfg.arch {
        Arch::MlpSmall => {
            let input_len = h * w * c;
            let fc1 = mb.dense("enc.fc1", input_len, 2 * cfg.d);
            let fc2 = mb.dense("enc.fc2", 2 * cfg.d, cfg.d);
            BodyLayout::Mlp { fc1, fc2 }
        }
        Arch::ConvSmall => {
            let convs = [
                mb.conv("enc.conv1", c, CONV_CHANNELS[0]),
                mb.conv("enc.conv2", CONV_CHANNELS[0], CONV_CHANNELS[1]),
                mb.conv("enc.conv3", CONV_CHANNELS[1], CONV_CHANNELS[2]),
            ];
            let fc = mb.dense("enc.fc", CONV_CHANNELS[2], cfg.d);
            BodyLayout::Conv { convs, fc }
        }
    };
    let mut hidden = Vec::new();
    let mut in_dim = cfg.d;
    for layer in 0..cfg.head_hidden {
        let fc = mb.dense(&format!("head.fc{}", layer + 1), in_dim, cfg.head_width);
        let bn = cfg
            .head_norm
            .then(|| mb.batch_norm(&format!("head.bn{}", layer + 1), cfg.head_width));
        hidden.push((fc, bn));
        in_dim = cfg.head_width;
    }
    let out = mb.dense("head.out", in_dim, cfg.d_head);
    (
        Layout {
            body,
            head: HeadLayout { hidden, out },
        },
        mb.tensors,
        mb.stats,
    )
}

/// Encoder + head parameters, optimizer state, and batch-norm statistics.
pub struct EncoderState<F: Scalar> {
    config: EncoderConfig,
    layout: Layout,
    manifest: Vec<TensorMeta>,
    stats_manifest: Vec<TensorMeta>,
    params: Vec<F>,
    velocity: Vec<F>,
    run_stats: Vec<F>,
    decay_mask: Vec<bool>,
    epoch: usize,
}

impl<F: Scalar> EncoderState<F> {
    /// Fresh state with He-uniform weight init drawn from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, manifest, stats_manifest) = build_layout(&config);
        let total: usize = manifest.iter().map(TensorMeta::len).sum();
        let stats_total: usize = stats_manifest.iter().map(TensorMeta::len).sum();
        let mut params = vec![F::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for meta in &manifest {
            init_tensor(meta, &mut params, &mut rng);
        }
        let mut run_stats = vec![F::zero(); stats_total];
        for meta in &stats_manifest {
            if meta.name.ends_with("running_var") {
                run_stats[meta.offset..meta.offset + meta.len()].fill(F::one());
            }
        }
        let decay_mask = {
            let mut mask = vec![false; total];
            for meta in &manifest {
                if meta.kind == ParamKind::Weight {
                    mask[meta.offset..meta.offset + meta.len()].fill(true);
                }
            }
            mask
        };
        Ok(Self {
            config,
            layout,
            manifest,
            stats_manifest,
            params,
            velocity: vec![F::zero(); total],
            run_stats,
            decay_mask,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn manifest(&self) -> &[TensorMeta] {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, idx: usize) -> F {
        self.params[idx]
    }

    pub fn set_param(&mut self, idx: usize, value: F) {
        self.params[idx] = value;
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
            && self.run_stats.iter().all(|v| v.is_finite())
    }

    /// Mutable view of a named tensor's data.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let meta = self.manifest.iter().find(|m| m.name == name)?;
        let (offset, len) = (meta.offset, meta.len());
        Some(&mut self.params[offset..offset + len])
    }

    fn view2(&self, idx: &DenseIdx) -> (ArrayView2<'_, F>, &[F]) {
        let wmeta = &self.manifest[idx.w];
        let bmeta = &self.manifest[idx.b];
        let w = ArrayView2::from_shape(
            (idx.out_dim, idx.in_dim),
            &self.params[wmeta.offset..wmeta.offset + wmeta.len()],
        )
        .expect("dense weight shape");
        (w, &self.params[bmeta.offset..bmeta.offset + bmeta.len()])
    }

    fn dense_forward(&self, idx: &DenseIdx, x: &Array2<F>) -> Array2<F> {
        let (w, b) = self.view2(idx);
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, &bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        y
    }

    /// Eval-mode forward for one image: (feature, raw projection).
    ///
    /// Batch-norm layers consume running statistics, so repeated calls are
    /// bitwise identical.
    pub fn forward(&self, img: &Image<F>) -> Result<(Array1<F>, Array1<F>)> {
        let (h, w, c) = self.config.input;
        if img.shape() != [h, w, c] {
            return Err(Error::DimMismatch {
                context: "encoder input",
                expected: format!("{h}x{w}x{c}"),
                got: format!("{:?}", img.shape()),
            });
        }
        let (features, projections, _) = self.forward_images(std::slice::from_ref(img), false)?;
        Ok((
            features.row(0).to_owned(),
            projections.row(0).to_owned(),
        ))
    }

    /// Forward a set of images; `train` selects batch statistics in the
    /// batch-norm layers and records caches for backprop.
    fn forward_images(
        &self,
        images: &[Image<F>],
        train: bool,
    ) -> Result<(Array2<F>, Array2<F>, ForwardCache<F>)> {
        let batch = images.len();
        let (h, w, c) = self.config.input;
        for img in images {
            if img.shape() != [h, w, c] {
                return Err(Error::DimMismatch {
                    context: "encoder input",
                    expected: format!("{h}x{w}x{c}"),
                    got: format!("{:?}", img.shape()),
                });
            }
        }
        let (features, body_cache) = match &self.layout.body {
            BodyLayout::Mlp { fc1, fc2 } => {
                let mut x0 = Array2::zeros((batch, h * w * c));
                for (bi, img) in images.iter().enumerate() {
                    for (j, &v) in img.iter().enumerate() {
                        x0[[bi, j]] = v;
                    }
                }
                let a1 = self.dense_forward(fc1, &x0);
                let r1 = relu(&a1);
                let feat = self.dense_forward(fc2, &r1);
                (feat, BodyCache::Mlp { x0, a1, r1 })
            }
            BodyLayout::Conv { convs, fc } => {
                let mut x = Array4::zeros((batch, c, h, w));
                for (bi, img) in images.iter().enumerate() {
                    for y in 0..h {
                        for xx in 0..w {
                            for ch in 0..c {
                                x[[bi, ch, y, xx]] = img[[y, xx, ch]];
                            }
                        }
                    }
                }
                let a1 = self.conv_forward(&convs[0], &x);
                let r1 = relu4(&a1);
                let p1 = avg_pool2(&r1);
                let a2 = self.conv_forward(&convs[1], &p1);
                let r2 = relu4(&a2);
                let p2 = avg_pool2(&r2);
                let a3 = self.conv_forward(&convs[2], &p2);
                let r3 = relu4(&a3);
                let g = global_avg_pool(&r3);
                let feat = self.dense_forward(fc, &g);
                (
                    feat,
                    BodyCache::Conv {
                        x,
                        a1,
                        p1,
                        a2,
                        p2,
                        a3,
                        g,
                    },
                )
            }
        };

        let mut h_in = features.clone();
        let mut head_caches = Vec::with_capacity(self.layout.head.hidden.len());
        for (fc, bn) in &self.layout.head.hidden {
            let pre = self.dense_forward(fc, &h_in);
            let (normed, bn_cache) = match bn {
                None => (pre.clone(), None),
                Some(bn_idx) => {
                    let (y, cache) = self.bn_forward(bn_idx, &pre, train)?;
                    (y, cache)
                }
            };
            let post = relu(&normed);
            head_caches.push(HeadLayerCache {
                x_in: h_in,
                pre,
                normed,
                bn: bn_cache,
            });
            h_in = post;
        }
        let projections = self.dense_forward(&self.layout.head.out, &h_in);
        Ok((
            features,
            projections,
            ForwardCache {
                body: body_cache,
                head_layers: head_caches,
                head_out_in: h_in,
            },
        ))
    }

    fn conv_forward(&self, idx: &ConvIdx, x: &Array4<F>) -> Array4<F> {
        let (batch, _, h, w) = x.dim();
        let wmeta = &self.manifest[idx.w];
        let bmeta = &self.manifest[idx.b];
        let weights = &self.params[wmeta.offset..wmeta.offset + wmeta.len()];
        let bias = &self.params[bmeta.offset..bmeta.offset + bmeta.len()];
        let mut y = Array4::zeros((batch, idx.cout, h, w));
        for b in 0..batch {
            for co in 0..idx.cout {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..idx.cin {
                            for u in 0..3usize {
                                let yy = i as isize + u as isize - 1;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for v in 0..3usize {
                                    let xx = j as isize + v as isize - 1;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let wv = weights
                                        [((co * idx.cin + ci) * 3 + u) * 3 + v];
                                    acc += wv * x[[b, ci, yy as usize, xx as usize]];
                                }
                            }
                        }
                        y[[b, co, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn bn_forward(
        &self,
        idx: &BnIdx,
        x: &Array2<F>,
        train: bool,
    ) -> Result<(Array2<F>, Option<BnCache<F>>)> {
        let gamma = self.param_slice(idx.gamma);
        let beta = self.param_slice(idx.beta);
        let eps = F::from_f64_lossy(BN_EPS);
        let batch = x.nrows();
        if train {
            let b_f = F::from_usize(batch).unwrap();
            let mean = x.sum_axis(Axis(0)) / b_f;
            let mut var = Array1::<F>::zeros(idx.dim);
            for row in x.rows() {
                for (fi, (&v, &m)) in row.iter().zip(mean.iter()).enumerate() {
                    let d = v - m;
                    var[fi] += d * d;
                }
            }
            var.mapv_inplace(|v| v / b_f);
            let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
            let mut xhat = x.clone();
            for mut row in xhat.rows_mut() {
                for (fi, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[fi]) * invstd[fi];
                }
            }
            let mut y = xhat.clone();
            for mut row in y.rows_mut() {
                for (fi, v) in row.iter_mut().enumerate() {
                    *v = *v * gamma[fi] + beta[fi];
                }
            }
            Ok((
                y,
                Some(BnCache {
                    xhat,
                    invstd,
                    batch_mean: mean,
                    batch_var: var,
                }),
            ))
        } else {
            let mean = self.stat_slice(idx.mean);
            let var = self.stat_slice(idx.var);
            let mut y = x.clone();
            for mut row in y.rows_mut() {
                for (fi, v) in row.iter_mut().enumerate() {
                    let invstd = F::one() / (var[fi] + eps).sqrt();
                    *v = (*v - mean[fi]) * invstd * gamma[fi] + beta[fi];
                }
            }
            Ok((y, None))
        }
    }

    fn param_slice(&self, tensor: usize) -> &[F] {
        let meta = &self.manifest[tensor];
        &self.params[meta.offset..meta.offset + meta.len()]
    }

    fn stat_slice(&self, stat: usize) -> &[F] {
        let meta = &self.stats_manifest[stat];
        &self.run_stats[meta.offset..meta.offset + meta.len()]
    }

    /// Train-mode loss of one multiview batch; no state is touched.
    ///
    /// This is the function the parameter-space finite-difference oracle
    /// evaluates.
    pub fn batch_loss(
        &self,
        batch: &MultiviewBatch<F>,
        policy: PositiveSetPolicy,
        tau: F,
    ) -> Result<F> {
        let (_, projections, _) = self.forward_images(batch.instances(), true)?;
        let z = normalize_rows(&projections)?;
        let sets = losses::positive_sets(policy, batch.labels(), batch.pair_map());
        let rows: Vec<Array1<F>> = z.rows().into_iter().map(|r| r.to_owned()).collect();
        Ok(losses::objective_free(&rows, &sets, tau))
    }

    /// Loss and analytic gradients for every trainable parameter, flattened
    /// in manifest order. No state is touched.
    pub fn batch_loss_and_grads(
        &self,
        batch: &MultiviewBatch<F>,
        policy: PositiveSetPolicy,
        tau: F,
    ) -> Result<(F, Vec<F>, BnBatchStats<F>)> {
        let (_, projections, cache) = self.forward_images(batch.instances(), true)?;
        let (z, norms) = normalize_rows_with_norms(&projections)?;
        let sets = losses::positive_sets(policy, batch.labels(), batch.pair_map());
        let rows: Vec<Array1<F>> = z.rows().into_iter().map(|r| r.to_owned()).collect();
        let (loss, z_grads) = losses::gradient_free(&rows, &sets, tau);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at epoch {}",
                self.epoch
            )));
        }
        // fold the row-normalization Jacobian: du = (g - (g.z) z) / |u|
        let mut du = Array2::zeros(projections.dim());
        for (i, g) in z_grads.iter().enumerate() {
            let zi = &rows[i];
            let dot = g.dot(zi);
            for (j, v) in du.row_mut(i).iter_mut().enumerate() {
                *v = (g[j] - dot * zi[j]) / norms[i];
            }
        }
        let (grads, bn_stats) = self.backward(&cache, &du);
        Ok((loss, grads, bn_stats))
    }

    /// Backprop `du` (gradient w.r.t. raw projections) through head and body.
    fn backward(&self, cache: &ForwardCache<F>, du: &Array2<F>) -> (Vec<F>, BnBatchStats<F>) {
        let mut grads = vec![F::zero(); self.params.len()];
        let mut bn_stats = BnBatchStats(Vec::new());

        // head output layer
        let mut dx = self.dense_backward(
            &self.layout.head.out,
            &cache.head_out_in,
            du,
            &mut grads,
        );
        // hidden layers in reverse
        for ((fc, bn), layer_cache) in self
            .layout
            .head
            .hidden
            .iter()
            .zip(cache.head_layers.iter())
            .rev()
        {
            // through the rectifier
            relu_backward_inplace(&layer_cache.normed, &mut dx);
            // through batch norm
            if let (Some(bn_idx), Some(bn_cache)) = (bn, &layer_cache.bn) {
                dx = self.bn_backward(bn_idx, bn_cache, &dx, &mut grads);
                bn_stats.0.push((
                    *bn_idx,
                    bn_cache.batch_mean.clone(),
                    bn_cache.batch_var.clone(),
                ));
            }
            dx = self.dense_backward(fc, &layer_cache.x_in, &dx, &mut grads);
        }

        // body
        match (&self.layout.body, &cache.body) {
            (BodyLayout::Mlp { fc1, fc2 }, BodyCache::Mlp { x0, a1, r1 }) => {
                let mut d1 = self.dense_backward(fc2, r1, &dx, &mut grads);
                relu_backward_inplace(a1, &mut d1);
                let _ = self.dense_backward(fc1, x0, &d1, &mut grads);
            }
            (
                BodyLayout::Conv { convs, fc },
                BodyCache::Conv {
                    x,
                    a1,
                    p1,
                    a2,
                    p2,
                    a3,
                    g,
                },
            ) => {
                let dg = self.dense_backward(fc, g, &dx, &mut grads);
                let r3_dims = a3.dim();
                let mut d3 = global_avg_pool_backward(&dg, (r3_dims.2, r3_dims.3));
                relu_backward_inplace4(a3, &mut d3);
                let mut d_p2 = self.conv_backward(&convs[2], p2, &d3, &mut grads);
                let mut d2 = avg_pool2_backward(&d_p2, (a2.dim().2, a2.dim().3));
                relu_backward_inplace4(a2, &mut d2);
                d_p2 = self.conv_backward(&convs[1], p1, &d2, &mut grads);
                let mut d1 = avg_pool2_backward(&d_p2, (a1.dim().2, a1.dim().3));
                relu_backward_inplace4(a1, &mut d1);
                let _ = self.conv_backward(&convs[0], x, &d1, &mut grads);
            }
            _ => unreachable!("layout and cache always agree"),
        }
        (grads, bn_stats)
    }

    fn dense_backward(
        &self,
        idx: &DenseIdx,
        x: &Array2<F>,
        dy: &Array2<F>,
        grads: &mut [F],
    ) -> Array2<F> {
        let (w, _) = self.view2(idx);
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&w);
        let wmeta = &self.manifest[idx.w];
        for (slot, &v) in grads[wmeta.offset..wmeta.offset + wmeta.len()]
            .iter_mut()
            .zip(dw.iter())
        {
            *slot += v;
        }
        let bmeta = &self.manifest[idx.b];
        for (slot, &v) in grads[bmeta.offset..bmeta.offset + bmeta.len()]
            .iter_mut()
            .zip(db.iter())
        {
            *slot += v;
        }
        dx
    }

    fn conv_backward(
        &self,
        idx: &ConvIdx,
        x: &Array4<F>,
        dy: &Array4<F>,
        grads: &mut [F],
    ) -> Array4<F> {
        let (batch, _, h, w) = x.dim();
        let wmeta = &self.manifest[idx.w];
        let bmeta = &self.manifest[idx.b];
        let weights = &self.params[wmeta.offset..wmeta.offset + wmeta.len()];
        let mut dx = Array4::zeros(x.dim());
        let mut dw = vec![F::zero(); wmeta.len()];
        let mut db = vec![F::zero(); bmeta.len()];
        for b in 0..batch {
            for co in 0..idx.cout {
                for i in 0..h {
                    for j in 0..w {
                        let g = dy[[b, co, i, j]];
                        if g == F::zero() {
                            continue;
                        }
                        db[co] += g;
                        for ci in 0..idx.cin {
                            for u in 0..3usize {
                                let yy = i as isize + u as isize - 1;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for v in 0..3usize {
                                    let xx = j as isize + v as isize - 1;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let widx = ((co * idx.cin + ci) * 3 + u) * 3 + v;
                                    dw[widx] += g * x[[b, ci, yy as usize, xx as usize]];
                                    dx[[b, ci, yy as usize, xx as usize]] +=
                                        g * weights[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (slot, v) in grads[wmeta.offset..wmeta.offset + wmeta.len()]
            .iter_mut()
            .zip(dw)
        {
            *slot += v;
        }
        for (slot, v) in grads[bmeta.offset..bmeta.offset + bmeta.len()]
            .iter_mut()
            .zip(db)
        {
            *slot += v;
        }
        dx
    }

    fn bn_backward(
        &self,
        idx: &BnIdx,
        cache: &BnCache<F>,
        dy: &Array2<F>,
        grads: &mut [F],
    ) -> Array2<F> {
        let batch = dy.nrows();
        let b_f = F::from_usize(batch).unwrap();
        let gamma = self.param_slice(idx.gamma).to_vec();
        let dbeta = dy.sum_axis(Axis(0));
        let mut dgamma = Array1::<F>::zeros(idx.dim);
        for (row, xrow) in dy.rows().into_iter().zip(cache.xhat.rows()) {
            for (fi, (&g, &xh)) in row.iter().zip(xrow.iter()).enumerate() {
                dgamma[fi] += g * xh;
            }
        }
        let mut dx = Array2::zeros(dy.dim());
        for bi in 0..batch {
            for fi in 0..idx.dim {
                let term = dy[[bi, fi]] * b_f - dbeta[fi] - cache.xhat[[bi, fi]] * dgamma[fi];
                dx[[bi, fi]] = gamma[fi] * cache.invstd[fi] * term / b_f;
            }
        }
        let gmeta = &self.manifest[idx.gamma];
        for (slot, &v) in grads[gmeta.offset..gmeta.offset + gmeta.len()]
            .iter_mut()
            .zip(dgamma.iter())
        {
            *slot += v;
        }
        let bmeta = &self.manifest[idx.beta];
        for (slot, &v) in grads[bmeta.offset..bmeta.offset + bmeta.len()]
            .iter_mut()
            .zip(dbeta.iter())
        {
            *slot += v;
        }
        dx
    }

    /// SGD with momentum plus decoupled L2 decay on weight-kind parameters.
    pub fn sgd_step(&mut self, grads: &[F], lr: f64, train: &TrainConfig) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::DimMismatch {
                context: "gradient length",
                expected: self.params.len().to_string(),
                got: grads.len().to_string(),
            });
        }
        let lr = F::from_f64_lossy(lr);
        let momentum = F::from_f64_lossy(train.momentum);
        // decoupled decay: weights shrink by exactly (1 - lr * wd)
        let decay = F::one() - lr * F::from_f64_lossy(train.weight_decay);
        for i in 0..self.params.len() {
            self.velocity[i] = momentum * self.velocity[i] + grads[i];
            let mut p = self.params[i];
            if self.decay_mask[i] {
                p = p * decay;
            }
            self.params[i] = p - lr * self.velocity[i];
        }
        Ok(())
    }

    fn update_running_stats(&mut self, bn_stats: &BnBatchStats<F>, batch: usize) {
        let m = F::from_f64_lossy(BN_MOMENTUM);
        let one_minus = F::one() - m;
        // unbiased variance for the running estimate
        let correction = if batch > 1 {
            F::from_usize(batch).unwrap() / F::from_usize(batch - 1).unwrap()
        } else {
            F::one()
        };
        for (idx, mean, var) in &bn_stats.0 {
            let mmeta = &self.stats_manifest[idx.mean];
            let vmeta = &self.stats_manifest[idx.var];
            for (fi, (&mu, &sig)) in mean.iter().zip(var.iter()).enumerate() {
                let mslot = &mut self.run_stats[mmeta.offset + fi];
                *mslot = one_minus * *mslot + m * mu;
                let vslot = &mut self.run_stats[vmeta.offset + fi];
                *vslot = one_minus * *vslot + m * sig * correction;
            }
        }
    }

    /// One optimizer step on one batch; returns (loss, skipped anchors).
    pub fn train_step(
        &mut self,
        batch: &MultiviewBatch<F>,
        policy: PositiveSetPolicy,
        train: &TrainConfig,
        lr: f64,
    ) -> Result<(F, usize)> {
        let tau = F::from_f64_lossy(train.temperature);
        let sets = losses::positive_sets(policy, batch.labels(), batch.pair_map());
        let skipped = sets.iter().filter(|s| s.is_empty()).count();
        let (loss, grads, bn_stats) = self.batch_loss_and_grads(batch, policy, tau)?;
        self.sgd_step(&grads, lr, train)?;
        self.update_running_stats(&bn_stats, batch.len());
        Ok((loss, skipped))
    }
}

/// Per-layer batch statistics produced during a training forward pass;
/// consumed by the running-average update.
pub struct BnBatchStats<F: Scalar>(Vec<(BnIdx, Array1<F>, Array1<F>)>);

/// Mean loss and bookkeeping from one epoch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub skipped_anchors: usize,
}

/// One pass over the data source: forward, loss gradient, backprop, SGD
/// update per batch. The learning rate comes from [`lr_schedule`] at the
/// state's current epoch; the epoch counter advances at the end.
pub fn train_epoch<F: Scalar, I>(
    state: &mut EncoderState<F>,
    batches: I,
    policy: PositiveSetPolicy,
    train: &TrainConfig,
) -> Result<EpochMetrics>
where
    I: IntoIterator<Item = MultiviewBatch<F>>,
{
    train.validate()?;
    let lr = lr_schedule(state.epoch, train);
    let mut total_loss = 0.0;
    let mut batches_seen = 0usize;
    let mut skipped_total = 0usize;
    for batch in batches {
        let (loss, skipped) = state.train_step(&batch, policy, train, lr)?;
        total_loss += loss.to_f64_lossy();
        batches_seen += 1;
        skipped_total += skipped;
    }
    if batches_seen == 0 {
        return Err(Error::EmptyBatch);
    }
    if !state.params_finite() {
        return Err(Error::Numerical(format!(
            "non-finite parameters after epoch {}",
            state.epoch
        )));
    }
    let metrics = EpochMetrics {
        epoch: state.epoch,
        mean_loss: total_loss / batches_seen as f64,
        batches: batches_seen,
        skipped_anchors: skipped_total,
    };
    state.epoch += 1;
    Ok(metrics)
}

// ----- plain tensor ops -----

fn relu<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

fn relu4<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

fn relu_backward_inplace<F: Scalar>(pre: &Array2<F>, grad: &mut Array2<F>) {
    grad.zip_mut_with(pre, |g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

fn relu_backward_inplace4<F: Scalar>(pre: &Array4<F>, grad: &mut Array4<F>) {
    grad.zip_mut_with(pre, |g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

fn avg_pool2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64_lossy(0.25);
    Array4::from_shape_fn((b, c, oh, ow), |(bi, ci, i, j)| {
        (x[[bi, ci, 2 * i, 2 * j]]
            + x[[bi, ci, 2 * i + 1, 2 * j]]
            + x[[bi, ci, 2 * i, 2 * j + 1]]
            + x[[bi, ci, 2 * i + 1, 2 * j + 1]])
            * quarter
    })
}

fn avg_pool2_backward<F: Scalar>(dy: &Array4<F>, input_hw: (usize, usize)) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = Array4::zeros((b, c, input_hw.0, input_hw.1));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dy[[bi, ci, i, j]] * quarter;
                    dx[[bi, ci, 2 * i, 2 * j]] = g;
                    dx[[bi, ci, 2 * i + 1, 2 * j]] = g;
                    dx[[bi, ci, 2 * i, 2 * j + 1]] = g;
                    dx[[bi, ci, 2 * i + 1, 2 * j + 1]] = g;
                }
            }
        }
    }
    dx
}

fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let inv = F::from_f64_lossy(1.0 / (h * w) as f64);
    Array2::from_shape_fn((b, c), |(bi, ci)| {
        let mut acc = F::zero();
        for i in 0..h {
            for j in 0..w {
                acc += x[[bi, ci, i, j]];
            }
        }
        acc * inv
    })
}

fn global_avg_pool_backward<F: Scalar>(dy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (b, c) = dy.dim();
    let inv = F::from_f64_lossy(1.0 / (hw.0 * hw.1) as f64);
    Array4::from_shape_fn((b, c, hw.0, hw.1), |(bi, ci, _, _)| dy[[bi, ci]] * inv)
}

fn init_tensor<F: Scalar>(meta: &TensorMeta, params: &mut [F], rng: &mut ChaCha8Rng) {
    let slice = &mut params[meta.offset..meta.offset + meta.len()];
    if meta.name.ends_with(".gamma") {
        slice.fill(F::one());
        return;
    }
    if meta.kind == ParamKind::Bias {
        slice.fill(F::zero());
        return;
    }
    // He-uniform over the fan-in
    let fan_in: usize = match meta.shape.len() {
        2 => meta.shape[1],
        4 => meta.shape[1] * meta.shape[2] * meta.shape[3],
        _ => meta.shape.iter().product(),
    };
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in slice.iter_mut() {
        *v = F::from_f64_lossy(rng.random_range(-limit..limit));
    }
}

/// Row-wise unit normalization; errors on near-zero rows.
fn normalize_rows<F: Scalar>(x: &Array2<F>) -> Result<Array2<F>> {
    Ok(normalize_rows_with_norms(x)?.0)
}

fn normalize_rows_with_norms<F: Scalar>(x: &Array2<F>) -> Result<(Array2<F>, Vec<F>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm.to_f64_lossy() < 1e-12 {
            return Err(Error::DegenerateEmbedding {
                norm: norm.to_f64_lossy(),
            });
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

struct HeadLayerCache<F: Scalar> {
    x_in: Array2<F>,
    /// Dense output before normalization (rectifier mask uses the normed
    /// values when batch norm is on).
    #[allow(dead_code)]
    pre: Array2<F>,
    normed: Array2<F>,
    bn: Option<BnCache<F>>,
}

struct BnCache<F: Scalar> {
    xhat: Array2<F>,
    invstd: Array1<F>,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
}

enum BodyCache<F: Scalar> {
    Mlp {
        x0: Array2<F>,
        a1: Array2<F>,
        r1: Array2<F>,
    },
    Conv {
        x: Array4<F>,
        a1: Array4<F>,
        p1: Array4<F>,
        a2: Array4<F>,
        p2: Array4<F>,
        a3: Array4<F>,
        g: Array2<F>,
    },
}

struct ForwardCache<F: Scalar> {
    body: BodyCache<F>,
    head_layers: Vec<HeadLayerCache<F>>,
    head_out_in: Array2<F>,
}

// ----- serialization -----

const MAGIC: &[u8] = b"FIRM1\n";

#[derive(Serialize, Deserialize)]
struct FileManifest {
    dtype: String,
    epoch: usize,
    config: EncoderConfig,
    tensors: Vec<FileTensor>,
}

#[derive(Serialize, Deserialize)]
struct FileTensor {
    name: String,
    shape: Vec<usize>,
    kind: String,
}

impl<F: Scalar> EncoderState<F> {
    fn file_manifest(&self) -> FileManifest {
        let mut tensors = Vec::new();
        for meta in &self.manifest {
            tensors.push(FileTensor {
                name: meta.name.clone(),
                shape: meta.shape.clone(),
                kind: match meta.kind {
                    ParamKind::Weight => "weight".into(),
                    ParamKind::Bias => "bias".into(),
                },
            });
        }
        for meta in &self.manifest {
            tensors.push(FileTensor {
                name: format!("{}.v", meta.name),
                shape: meta.shape.clone(),
                kind: "velocity".into(),
            });
        }
        for meta in &self.stats_manifest {
            tensors.push(FileTensor {
                name: meta.name.clone(),
                shape: meta.shape.clone(),
                kind: "running".into(),
            });
        }
        FileManifest {
            dtype: "f32".into(),
            epoch: self.epoch,
            config: self.config.clone(),
            tensors,
        }
    }

    /// Serialize: magic bytes, one-line JSON manifest, then a little-endian
    /// f32 blob holding parameters, momentum buffers, and running statistics
    /// in manifest order.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let manifest = serde_json::to_string(&self.file_manifest())
            .map_err(|e| Error::ModelFile(e.to_string()))?;
        let mut bytes = Vec::with_capacity(
            MAGIC.len() + manifest.len() + 1 + 4 * (2 * self.params.len() + self.run_stats.len()),
        );
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(manifest.as_bytes());
        bytes.push(b'\n');
        for v in self.params.iter().chain(&self.velocity).chain(&self.run_stats) {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Load a state saved by [`EncoderState::save`]; the manifest must match
    /// the config-derived layout exactly and the blob must be complete.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::ModelFile("bad magic bytes".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::ModelFile("missing manifest terminator".into()))?;
        let manifest: FileManifest = serde_json::from_slice(&rest[..newline])
            .map_err(|e| Error::ModelFile(format!("manifest parse: {e}")))?;
        if manifest.dtype != "f32" {
            return Err(Error::ModelFile(format!("unknown dtype {}", manifest.dtype)));
        }
        let mut state = Self::new(manifest.config.clone(), 0)?;
        state.epoch = manifest.epoch;
        let expected = state.file_manifest();
        if expected.tensors.len() != manifest.tensors.len() {
            return Err(Error::ModelFile(format!(
                "manifest mismatch: {} tensors, expected {}",
                manifest.tensors.len(),
                expected.tensors.len()
            )));
        }
        for (got, want) in manifest.tensors.iter().zip(&expected.tensors) {
            if got.name != want.name || got.shape != want.shape || got.kind != want.kind {
                return Err(Error::ModelFile(format!(
                    "manifest mismatch at tensor {}",
                    got.name
                )));
            }
        }
        let blob = &rest[newline + 1..];
        let want_floats = 2 * state.params.len() + state.run_stats.len();
        if blob.len() != 4 * want_floats {
            return Err(Error::ModelFile(format!(
                "blob holds {} bytes, expected {}",
                blob.len(),
                4 * want_floats
            )));
        }
        let mut floats = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for slot in state
            .params
            .iter_mut()
            .chain(&mut state.velocity)
            .chain(&mut state.run_stats)
        {
            *slot = F::from_f64_lossy(floats.next().expect("length checked") as f64);
        }
        Ok(state)
    }
}
