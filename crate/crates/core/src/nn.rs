//! Network definitions: a plain MLP and a small two-conv CNN.
//!
//! Activations travel between layers as `[B, features]` matrices; convolution
//! layers interpret their input as NCHW flattened row-major. Every layer's
//! post-activation output can serve as the feature tap used by the feature
//! imitation loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, OptimConfig};
use crate::rng::{self, Stream};
use crate::tensor::{
    add_row_bias, column_sums, matmul, matmul_nt, matmul_tn, relu_backward, relu_forward, softmax_rows, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    SmallCnn,
}

/// Architecture description.
///
/// * `mlp`: `input_shape` may be any shape (it is flattened); `layer_sizes`
///   lists hidden widths.
/// * `smallcnn`: `input_shape = [C, H, W]`; `layer_sizes = [conv1, conv2, dense]`
///   channel counts and dense width. Both convolutions are 3×3, stride 1,
///   zero padding 1; a 2×2 average pool follows the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub input_shape: Vec<usize>,
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
    /// Layer whose post-activation output is the feature map. Defaults to the
    /// penultimate (last hidden) layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_layer: Option<usize>,
}

impl ArchSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            input_shape: vec![input_dim],
            layer_sizes: hidden.to_vec(),
            num_classes,
            feature_layer: None,
        }
    }

    pub fn small_cnn(input: [usize; 3], conv: [usize; 2], dense: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::SmallCnn,
            input_shape: input.to_vec(),
            layer_sizes: vec![conv[0], conv[1], dense],
            num_classes,
            feature_layer: None,
        }
    }

    pub fn with_feature_layer(mut self, layer: usize) -> Self {
        self.feature_layer = Some(layer);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input_shape {:?}", self.input_shape)));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {:?}", self.layer_sizes)));
        }
        match self.kind {
            ArchKind::Mlp => {
                if self.layer_sizes.is_empty() {
                    return Err(Error::Config("mlp needs at least one hidden layer".into()));
                }
            }
            ArchKind::SmallCnn => {
                if self.input_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "smallcnn input_shape must be [C, H, W], got {:?}",
                        self.input_shape
                    )));
                }
                if self.input_shape[1] < 2 || self.input_shape[2] < 2 {
                    return Err(Error::Config("smallcnn needs H, W >= 2".into()));
                }
                if self.layer_sizes.len() != 3 {
                    return Err(Error::Config(format!(
                        "smallcnn layer_sizes must be [conv1, conv2, dense], got {:?}",
                        self.layer_sizes
                    )));
                }
            }
        }
        let feature = self.feature_layer();
        if feature + 1 >= self.num_layers() {
            return Err(Error::Config(format!(
                "feature_layer {feature} must be below the logit layer {}",
                self.num_layers() - 1
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Number of parameterised layers, including the logit layer.
    pub fn num_layers(&self) -> usize {
        match self.kind {
            ArchKind::Mlp => self.layer_sizes.len() + 1,
            ArchKind::SmallCnn => 4,
        }
    }

    pub fn feature_layer(&self) -> usize {
        self.feature_layer.unwrap_or(self.num_layers().saturating_sub(2))
    }

    pub fn feature_dim(&self) -> usize {
        self.layers()[self.feature_layer()].output_dim()
    }

    pub fn label(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes.iter().map(usize::to_string).collect();
        match self.kind {
            ArchKind::Mlp => format!("mlp[{}]", sizes.join("-")),
            ArchKind::SmallCnn => format!("cnn[{}]", sizes.join("-")),
        }
    }

    pub(crate) fn layers(&self) -> Vec<Layer> {
        match self.kind {
            ArchKind::Mlp => {
                let mut widths = vec![self.input_dim()];
                widths.extend(&self.layer_sizes);
                widths.push(self.num_classes);
                widths
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| Layer::Dense {
                        fan_in: w[0],
                        fan_out: w[1],
                        relu: l + 2 < widths.len(),
                    })
                    .collect()
            }
            ArchKind::SmallCnn => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                let (c1, c2, dense) = (self.layer_sizes[0], self.layer_sizes[1], self.layer_sizes[2]);
                vec![
                    Layer::Conv(ConvGeom { in_c: c, out_c: c1, h, w, pool: false }),
                    Layer::Conv(ConvGeom { in_c: c1, out_c: c2, h, w, pool: true }),
                    Layer::Dense {
                        fan_in: c2 * (h / 2) * (w / 2),
                        fan_out: dense,
                        relu: true,
                    },
                    Layer::Dense {
                        fan_in: dense,
                        fan_out: self.num_classes,
                        relu: false,
                    },
                ]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvGeom {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Layer {
    Dense { fan_in: usize, fan_out: usize, relu: bool },
    Conv(ConvGeom),
}

impl Layer {
    fn param_shapes(&self) -> [Vec<usize>; 2] {
        match *self {
            Layer::Dense { fan_in, fan_out, .. } => [vec![fan_in, fan_out], vec![fan_out]],
            // Kernel stored as an im2col matrix: rows (in_c, ky, kx), columns out_c.
            Layer::Conv(g) => [vec![g.in_c * 9, g.out_c], vec![g.out_c]],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { fan_in, .. } => fan_in,
            Layer::Conv(g) => g.in_c * 9,
        }
    }

    fn output_dim(&self) -> usize {
        match *self {
            Layer::Dense { fan_out, .. } => fan_out,
            Layer::Conv(g) if g.pool => g.out_c * (g.h / 2) * (g.w / 2),
            Layer::Conv(g) => g.out_c * g.h * g.w,
        }
    }
}

/// A network's parameters and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub arch: ArchSpec,
    pub params: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
    pub net_id: usize,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense { input: Tensor, pre: Tensor },
    Conv { cols: Tensor, pre: Tensor },
}

/// Result of a forward pass, including what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub logits: Tensor,
    pub probs: Tensor,
    pub feature: Tensor,
    caches: Vec<LayerCache>,
}

impl ForwardRecord {
    /// Which ReLU units were active, across every rectified layer.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for (i, cache) in self.caches.iter().enumerate() {
            // The logit layer is the only one without a ReLU.
            if i + 1 == self.caches.len() {
                break;
            }
            let pre = match cache {
                LayerCache::Dense { pre, .. } | LayerCache::Conv { pre, .. } => pre,
            };
            out.extend(pre.data().iter().map(|&v| v > 0.0));
        }
        out
    }
}

impl NetworkState {
    /// He-uniform weights, zero biases, zero momentum. Same `(arch, seed)`
    /// gives a bit-identical state.
    pub fn init(arch: &ArchSpec, seed: u64, net_id: usize) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(Stream::Init, seed, net_id as u64);
        let mut params = Vec::new();
        for layer in arch.layers() {
            let [w_shape, b_shape] = layer.param_shapes();
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            let numel: usize = w_shape.iter().product();
            let w: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::new(w_shape, w)?);
            params.push(Tensor::zeros(&b_shape));
        }
        let momentum = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            arch: arch.clone(),
            params,
            momentum,
            net_id,
        })
    }

    /// Rebuilds a state from stored parameters; momentum starts at zero.
    pub fn from_params(arch: ArchSpec, params: Vec<Tensor>, net_id: usize) -> Result<Self> {
        arch.validate()?;
        let expected: Vec<Vec<usize>> = arch.layers().iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "{} expects {} parameter tensors, got {}",
                arch.label(),
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::dim("from_params", e, p.shape()));
            }
        }
        let momentum = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            arch,
            params,
            momentum,
            net_id,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Largest absolute parameter difference against another network of the same architecture.
    pub fn param_distance(&self, other: &NetworkState) -> Result<f64> {
        let mut max = 0.0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            max = max.max(a.max_abs_diff(b)?);
        }
        Ok(max)
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<ForwardRecord> {
        if inputs.shape().len() < 2 || inputs.row_len() != self.arch.input_dim() {
            let mut want = vec![inputs.shape().first().copied().unwrap_or(0)];
            want.extend(&self.arch.input_shape);
            return Err(Error::dim("forward", inputs.shape(), &want));
        }
        let layers = self.arch.layers();
        let feature_layer = self.arch.feature_layer();
        let mut act = inputs.clone().flatten_rows();
        let mut caches = Vec::with_capacity(layers.len());
        let mut feature = None;
        for (l, layer) in layers.iter().enumerate() {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            act = match *layer {
                Layer::Dense { relu, .. } => {
                    let pre = add_row_bias(&matmul(&act, w)?, b)?;
                    let out = if relu { relu_forward(&pre) } else { pre.clone() };
                    caches.push(LayerCache::Dense { input: act, pre });
                    out
                }
                Layer::Conv(g) => {
                    let batch = act.rows();
                    let cols = im2col(&act, g)?;
                    let pre = add_row_bias(&matmul(&cols, w)?, b)?;
                    let post = pixels_to_nchw(&relu_forward(&pre), batch, g);
                    caches.push(LayerCache::Conv { cols, pre });
                    if g.pool {
                        avg_pool2(&post, g)
                    } else {
                        post
                    }
                }
            };
            if l == feature_layer {
                feature = Some(act.clone());
            }
        }
        let logits = act;
        let probs = softmax_rows(&logits)?;
        Ok(ForwardRecord {
            logits,
            probs,
            feature: feature.expect("validated feature layer"),
            caches,
        })
    }

    /// Parameter gradients of a scalar loss whose gradients on the logits and
    /// (optionally) on the feature tap are supplied.
    pub fn backward(
        &self,
        record: &ForwardRecord,
        grad_logits: &Tensor,
        grad_feature: Option<&Tensor>,
    ) -> Result<Vec<Tensor>> {
        record.logits.check_same_shape("backward(logits)", grad_logits)?;
        if let Some(gf) = grad_feature {
            record.feature.check_same_shape("backward(feature)", gf)?;
        }
        let layers = self.arch.layers();
        let feature_layer = self.arch.feature_layer();
        let mut grads = vec![Tensor::zeros(&[1]); self.params.len()];
        let mut upstream = grad_logits.clone();
        for l in (0..layers.len()).rev() {
            if l == feature_layer {
                if let Some(gf) = grad_feature {
                    upstream.add_scaled(gf, 1.0)?;
                }
            }
            let w = &self.params[2 * l];
            let need_input_grad = l > 0;
            match (&layers[l], &record.caches[l]) {
                (Layer::Dense { relu, .. }, LayerCache::Dense { input, pre }) => {
                    let d_pre = if *relu { relu_backward(pre, &upstream)? } else { upstream };
                    grads[2 * l] = matmul_tn(input, &d_pre)?;
                    grads[2 * l + 1] = column_sums(&d_pre)?;
                    upstream = if need_input_grad { matmul_nt(&d_pre, w)? } else { d_pre };
                }
                (Layer::Conv(g), LayerCache::Conv { cols, pre }) => {
                    let batch = upstream.rows();
                    let d_post = if g.pool { avg_pool2_backward(&upstream, *g) } else { upstream };
                    let d_pre = relu_backward(pre, &nchw_to_pixels(&d_post, batch, *g))?;
                    grads[2 * l] = matmul_tn(cols, &d_pre)?;
                    grads[2 * l + 1] = column_sums(&d_pre)?;
                    upstream = if need_input_grad {
                        col2im(&matmul_nt(&d_pre, w)?, batch, *g)
                    } else {
                        d_pre
                    };
                }
                _ => unreachable!("cache kind follows layer kind"),
            }
        }
        Ok(grads)
    }

    /// One Nesterov-momentum step at the scheduled learning rate.
    pub fn sgd_step(&mut self, grads: &[Tensor], cfg: &OptimConfig, epoch_fraction: f64, iteration: u64) -> Result<()> {
        let lr = cfg.lr_at(epoch_fraction);
        optim::nesterov_step(&mut self.params, &mut self.momentum, grads, cfg, lr).map_err(|reason| {
            Error::Diverged {
                net: self.net_id,
                iteration,
                reason,
            }
        })
    }
}

/// Rows `(b, y, x)`, columns `(c, ky, kx)`, zero padding 1.
fn im2col(x: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let batch = x.rows();
    let (h, w, c) = (g.h, g.w, g.in_c);
    if x.row_len() != c * h * w {
        return Err(Error::dim("conv", x.shape(), &[batch, c * h * w]));
    }
    let width = c * 9;
    let mut cols = vec![0.0; batch * h * w * width];
    for b in 0..batch {
        let img = x.row(b);
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ch in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[row + ch * 9 + ky * 3 + kx] = img[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * h * w, width], cols)
}

fn col2im(dcols: &Tensor, batch: usize, g: ConvGeom) -> Tensor {
    let (h, w, c) = (g.h, g.w, g.in_c);
    let width = c * 9;
    let mut out = Tensor::zeros(&[batch, c * h * w]);
    for b in 0..batch {
        let img = out.row_mut(b);
        for y in 0..h {
            for xx in 0..w {
                let row = &dcols.data()[((b * h + y) * w + xx) * width..][..width];
                for ch in 0..c {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            img[(ch * h + sy as usize) * w + sx as usize] += row[ch * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[B*H*W, O]` pixel-major to `[B, O*H*W]` NCHW.
fn pixels_to_nchw(t: &Tensor, batch: usize, g: ConvGeom) -> Tensor {
    let (hw, o) = (g.h * g.w, g.out_c);
    let mut out = Tensor::zeros(&[batch, o * hw]);
    for b in 0..batch {
        for p in 0..hw {
            for ch in 0..o {
                out.data_mut()[b * o * hw + ch * hw + p] = t.data()[(b * hw + p) * o + ch];
            }
        }
    }
    out
}

fn nchw_to_pixels(t: &Tensor, batch: usize, g: ConvGeom) -> Tensor {
    let (hw, o) = (g.h * g.w, g.out_c);
    let mut out = Tensor::zeros(&[batch * hw, o]);
    for b in 0..batch {
        for p in 0..hw {
            for ch in 0..o {
                out.data_mut()[(b * hw + p) * o + ch] = t.data()[b * o * hw + ch * hw + p];
            }
        }
    }
    out
}

/// 2×2 average pool, stride 2; odd trailing rows/columns are dropped.
fn avg_pool2(t: &Tensor, g: ConvGeom) -> Tensor {
    let (h, w, o) = (g.h, g.w, g.out_c);
    let (ph, pw) = (h / 2, w / 2);
    let batch = t.rows();
    let mut out = Tensor::zeros(&[batch, o * ph * pw]);
    for b in 0..batch {
        let src = t.row(b);
        for ch in 0..o {
            for y in 0..ph {
                for x in 0..pw {
                    let base = ch * h * w;
                    let s = src[base + 2 * y * w + 2 * x]
                        + src[base + 2 * y * w + 2 * x + 1]
                        + src[base + (2 * y + 1) * w + 2 * x]
                        + src[base + (2 * y + 1) * w + 2 * x + 1];
                    out.data_mut()[b * o * ph * pw + (ch * ph + y) * pw + x] = 0.25 * s;
                }
            }
        }
    }
    out
}

fn avg_pool2_backward(upstream: &Tensor, g: ConvGeom) -> Tensor {
    let (h, w, o) = (g.h, g.w, g.out_c);
    let (ph, pw) = (h / 2, w / 2);
    let batch = upstream.rows();
    let mut out = Tensor::zeros(&[batch, o * h * w]);
    for b in 0..batch {
        for ch in 0..o {
            for y in 0..ph {
                for x in 0..pw {
                    let gv = 0.25 * upstream.data()[b * o * ph * pw + (ch * ph + y) * pw + x];
                    let dst = out.row_mut(b);
                    let base = ch * h * w;
                    dst[base + 2 * y * w + 2 * x] += gv;
                    dst[base + 2 * y * w + 2 * x + 1] += gv;
                    dst[base + (2 * y + 1) * w + 2 * x] += gv;
                    dst[base + (2 * y + 1) * w + 2 * x + 1] += gv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar probe: `sum(w1 ⊙ logits) + sum(w2 ⊙ feature)`; its logit/feature
    /// gradients are just `w1`, `w2`.
    fn probe_loss(net: &NetworkState, x: &Tensor, w1: &Tensor, w2: &Tensor) -> f64 {
        let rec = net.forward(x).unwrap();
        let a: f64 = rec.logits.data().iter().zip(w1.data()).map(|(p, q)| p * q).sum();
        let b: f64 = rec.feature.data().iter().zip(w2.data()).map(|(p, q)| p * q).sum();
        a + b
    }

    fn check_param_grads(arch: &ArchSpec, batch: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetworkState::init(arch, seed, 0).unwrap();
        let mut net = net;
        for p in net.params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let mut shape = vec![batch];
        shape.extend(&arch.input_shape);
        let x = random_tensor(&shape, &mut rng);
        let rec = net.forward(&x).unwrap();
        let w1 = random_tensor(rec.logits.shape(), &mut rng);
        let w2 = random_tensor(rec.feature.shape(), &mut rng);
        let grads = net.backward(&rec, &w1, Some(&w2)).unwrap();
        for (pi, g) in grads.iter().enumerate() {
            let numeric = finite_difference_grad(
                |p| {
                    let mut probe = net.clone();
                    probe.params[pi] = p.clone();
                    probe_loss(&probe, &x, &w1, &w2)
                },
                &net.params[pi],
                1e-5,
            );
            let err = max_relative_error(g, &numeric, 1e-6).unwrap();
            assert!(err < 1e-4, "param {pi} of {}: rel err {err}", arch.label());
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        check_param_grads(&ArchSpec::mlp(5, &[7, 6], 3), 4, 11);
        check_param_grads(&ArchSpec::mlp(5, &[7, 6], 3).with_feature_layer(0), 3, 12);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        check_param_grads(&ArchSpec::small_cnn([2, 4, 5], [3, 2], 5, 3), 2, 21);
        check_param_grads(&ArchSpec::small_cnn([1, 4, 4], [2, 3], 4, 2).with_feature_layer(1), 2, 22);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ArchSpec::mlp(8, &[16], 4);
        let a = NetworkState::init(&arch, 3, 0).unwrap();
        let b = NetworkState::init(&arch, 3, 0).unwrap();
        let c = NetworkState::init(&arch, 4, 0).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert!(a.momentum.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        assert!(matches!(NetworkState::init(&ArchSpec::mlp(8, &[], 4), 0, 0), Err(Error::Config(_))));
        assert!(matches!(NetworkState::init(&ArchSpec::mlp(8, &[4], 1), 0, 0), Err(Error::Config(_))));
        let logit_tap = ArchSpec::mlp(8, &[4], 3).with_feature_layer(1);
        assert!(matches!(logit_tap.validate(), Err(Error::Config(_))));
        let bad_cnn = ArchSpec {
            input_shape: vec![28, 28],
            ..ArchSpec::small_cnn([1, 28, 28], [4, 4], 8, 10)
        };
        assert!(bad_cnn.validate().is_err());
    }

    #[test]
    fn hand_set_weights_give_affine_logits() {
        // 2 -> 2 -> 2 with identity hidden weights and positive inputs: ReLU is
        // inactive, so logits = (x·W0 + b0)·W1 + b1.
        let arch = ArchSpec::mlp(2, &[2], 2);
        let params = vec![
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Tensor::new(vec![2], vec![0.5, 0.25]).unwrap(),
            Tensor::from_rows(&[vec![2.0, -1.0], vec![1.0, 3.0]]).unwrap(),
            Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
        ];
        let net = NetworkState::from_params(arch, params, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let rec = net.forward(&x).unwrap();
        // hidden = [1.5, 2.25]; logits = [1.5*2 + 2.25*1 + 0.1, -1.5 + 2.25*3 - 0.2]
        assert_eq!(rec.feature.data(), &[1.5, 2.25]);
        assert!((rec.logits.data()[0] - 5.35).abs() < 1e-12);
        assert!((rec.logits.data()[1] - 5.05).abs() < 1e-12);
    }

    #[test]
    fn forward_rows_are_independent_of_batch() {
        let arch = ArchSpec::small_cnn([1, 4, 4], [2, 2], 3, 3);
        let net = NetworkState::init(&arch, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[3, 1, 4, 4], &mut rng);
        let full = net.forward(&x).unwrap();
        let single = net.forward(&x.select_rows(&[1])).unwrap();
        assert_eq!(full.logits.row(1), single.logits.row(0));
        for r in 0..3 {
            let s: f64 = full.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(full.feature.shape(), &[3, arch.feature_dim()]);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = NetworkState::init(&ArchSpec::mlp(8, &[4], 3), 0, 0).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(&[2, 7])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = NetworkState::init(&ArchSpec::mlp(4, &[5], 3), 1, 0).unwrap();
        let x = Tensor::full(&[2, 4], 0.3);
        let rec = net.forward(&x).unwrap();
        let grads = net.backward(&rec, &Tensor::zeros(&[2, 3]), Some(&Tensor::zeros(&[2, 5]))).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn feature_only_grad_skips_logit_layer() {
        let net = NetworkState::init(&ArchSpec::mlp(4, &[5], 3), 1, 0).unwrap();
        let x = Tensor::full(&[2, 4], 0.3);
        let rec = net.forward(&x).unwrap();
        let grads = net.backward(&rec, &Tensor::zeros(&[2, 3]), Some(&Tensor::full(&[2, 5], 1.0))).unwrap();
        assert!(grads[2].data().iter().all(|&v| v == 0.0));
        assert!(grads[3].data().iter().all(|&v| v == 0.0));
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
    }
}
