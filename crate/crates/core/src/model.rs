//! CAM-compatible classifiers: conv blocks → final feature map → global
//! average pooling → one linear head.
//!
//! The head reads the pooled features directly, so for every class the class
//! activation map `Σ_k w[c,k] · f_k(i,j)` averages to exactly `logit[c] - bias[c]`.
//! There is no slot for a hidden fully connected layer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    checkpoint, conv2d_backward, conv2d_forward, gap_backward, gap_forward, linear_backward, linear_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, sigmoid, softmax, Tensor,
};
use crate::proposal::{CamMap, CamSource};

const KERNEL: usize = 3;
const PAD: usize = 1;
const MIN_FEATURE_SIDE: usize = 4;
/// Fixed input standardisation `(x - INPUT_MEAN) * INPUT_GAIN`, so that
/// `[0, 1]` pixels reach the first convolution roughly zero-mean with unit spread.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_GAIN: f64 = 2.0;

fn standardize(image: &Tensor) -> Tensor {
    image.map(|v| (v - INPUT_MEAN) * INPUT_GAIN)
}

/// What the head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Softmax over binned counts `0..=N`.
    Count,
    /// Independent sigmoid per identity.
    MultilabelIdentity,
    /// Softmax over identities.
    SingleLabelIdentity,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Count => "count",
            HeadKind::MultilabelIdentity => "multilabel-identity",
            HeadKind::SingleLabelIdentity => "single-label-identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_side: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(head: HeadKind, num_classes: usize, seed: u64) -> Self {
        ModelConfig {
            input_side: 64,
            channels: vec![8, 16, 32],
            num_classes,
            head,
            seed,
        }
    }

    pub fn feature_side(&self) -> usize {
        self.input_side >> self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid block channels {:?}", self.channels)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let div = 1usize << self.channels.len();
        if !self.input_side.is_multiple_of(div) || self.feature_side() < MIN_FEATURE_SIDE {
            return Err(Error::Config(format!(
                "input side {} must be divisible by {div} with a feature map of at least {MIN_FEATURE_SIDE}",
                self.input_side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    kernels: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamNet {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    head_weights: Tensor,
    head_bias: Tensor,
}

/// Result of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub logits: Tensor,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    block_inputs: Vec<Tensor>,
    pub pre_relu: Vec<Tensor>,
    post_relu: Vec<Tensor>,
    pub features: Tensor,
    pub pooled: Tensor,
    pub logits: Tensor,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl CamNet {
    /// Seeded He-uniform initialisation (variance kept through the ReLUs);
    /// biases start at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = 3;
        for &cout in &config.channels {
            let area = KERNEL * KERNEL;
            blocks.push(ConvBlock {
                kernels: he_uniform(&mut rng, &[cout, cin, KERNEL, KERNEL], cin * area),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let k = config.num_classes;
        let head_weights = he_uniform(&mut rng, &[k, cin], cin);
        Ok(CamNet {
            config,
            blocks,
            head_weights,
            head_bias: Tensor::zeros(&[k]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_kind(&self) -> HeadKind {
        self.config.head
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn head_weights(&self) -> &Tensor {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &Tensor {
        &self.head_bias
    }

    pub fn head_weights_mut(&mut self) -> &mut Tensor {
        &mut self.head_weights
    }

    pub fn head_bias_mut(&mut self) -> &mut Tensor {
        &mut self.head_bias
    }

    /// Subtracts row `class` from every head row (and likewise the bias).
    /// Softmax outputs are unchanged; the reference class then has a zero
    /// CAM and every other CAM reads as evidence against it.
    pub fn anchor_head(&mut self, class: usize) -> Result<()> {
        let k = self.config.num_classes;
        if class >= k {
            return Err(Error::InvalidArgument(format!("anchor class {class} out of range for {k} classes")));
        }
        let c = self.head_weights.shape()[1];
        let row: Vec<f64> = self.head_weights.data()[class * c..(class + 1) * c].to_vec();
        let b = self.head_bias.data()[class];
        for chunk in self.head_weights.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(&row).for_each(|(w, r)| *w -= r);
        }
        self.head_bias.data_mut().iter_mut().for_each(|v| *v -= b);
        Ok(())
    }

    /// All trainable tensors in a fixed order: per block kernels and bias, then head weights and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.push(&b.kernels);
            out.push(&b.bias);
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.kernels);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.kernels"));
            names.push(format!("block{i}.bias"));
        }
        names.push("head.weights".into());
        names.push("head.bias".into());
        names
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_side;
        image.expect_shape("CamNet::forward", "image", &[3, s, s])
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.check_image(image)?;
        let mut x = standardize(image);
        for b in &self.blocks {
            let z = conv2d_forward(&x, &b.kernels, &b.bias, 1, PAD)?;
            x = maxpool2_forward(&relu_forward(&z))?;
        }
        let pooled = gap_forward(&x)?;
        let logits = linear_forward(&pooled, &self.head_weights, &self.head_bias)?;
        Ok(ForwardOutput { features: x, logits })
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<ForwardCache> {
        self.check_image(image)?;
        let n = self.blocks.len();
        let mut block_inputs = Vec::with_capacity(n);
        let mut pre_relu = Vec::with_capacity(n);
        let mut post_relu = Vec::with_capacity(n);
        let mut x = standardize(image);
        for b in &self.blocks {
            let z = conv2d_forward(&x, &b.kernels, &b.bias, 1, PAD)?;
            let r = relu_forward(&z);
            let next = maxpool2_forward(&r)?;
            block_inputs.push(x);
            pre_relu.push(z);
            post_relu.push(r);
            x = next;
        }
        let pooled = gap_forward(&x)?;
        let logits = linear_forward(&pooled, &self.head_weights, &self.head_bias)?;
        Ok(ForwardCache {
            block_inputs,
            pre_relu,
            post_relu,
            features: x,
            pooled,
            logits,
        })
    }

    /// Parameter gradients (same order as [`CamNet::params`]) given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor) -> Result<Vec<Tensor>> {
        let head = linear_backward(&cache.pooled, &self.head_weights, dlogits)?;
        let mut grad = gap_backward(cache.features.shape(), &head.input)?;
        let mut grads = Vec::with_capacity(2 * self.blocks.len() + 2);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let d_relu = maxpool2_backward(&cache.post_relu[i], &grad)?;
            let d_conv = relu_backward(&cache.pre_relu[i], &d_relu)?;
            let g = conv2d_backward(&cache.block_inputs[i], &b.kernels, &d_conv, 1, PAD)?;
            let mut params = g.params.into_iter();
            let dk = params.next().expect("kernel grad");
            let db = params.next().expect("bias grad");
            grads.push(db);
            grads.push(dk);
            grad = g.input;
        }
        grads.reverse();
        grads.extend(head.params);
        Ok(grads)
    }

    /// Raw class activation map `M[i,j] = Σ_k W[class,k] · features[k,i,j]`.
    pub fn cam(&self, features: &Tensor, class_index: usize) -> Result<CamMap> {
        let k = self.num_classes();
        if class_index >= k {
            return Err(Error::ClassIndex {
                index: class_index,
                num_classes: k,
            });
        }
        features.expect_ndim("CamNet::cam", "features", 3)?;
        let &[c, h, w] = features.shape() else { unreachable!() };
        let cw = self.head_weights.shape()[1];
        if c != cw {
            return Err(Error::shape("CamNet::cam", "feature channels", cw, c));
        }
        let row = &self.head_weights.data()[class_index * c..(class_index + 1) * c];
        let mut grid = vec![0.0; h * w];
        for (ch, &wk) in row.iter().enumerate() {
            for (g, f) in grid.iter_mut().zip(&features.data()[ch * h * w..(ch + 1) * h * w]) {
                *g += wk * f;
            }
        }
        let source = match self.config.head {
            HeadKind::Count => CamSource::CountNet,
            _ => CamSource::RecogNet,
        };
        Ok(CamMap {
            grid: Tensor::from_vec(&[h, w], grid)?,
            class_index,
            source,
        })
    }

    pub(crate) fn require(&self, kind: HeadKind) -> Result<()> {
        if self.config.head != kind {
            return Err(Error::HeadKind {
                expected: kind.name(),
                actual: self.config.head.name(),
            });
        }
        Ok(())
    }

    /// Predicted count bin (ties → lowest) and the CAM of that bin.
    pub fn predict_count(&self, image: &Tensor) -> Result<(usize, CamMap)> {
        self.require(HeadKind::Count)?;
        let out = self.forward(image)?;
        let n_hat = out.logits.argmax();
        let cam = self.cam(&out.features, n_hat)?;
        Ok((n_hat, cam))
    }

    /// Per-identity sigmoid scores.
    pub fn predict_identities(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.require(HeadKind::MultilabelIdentity)?;
        let out = self.forward(image)?;
        Ok(out.logits.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Softmax over identities.
    pub fn predict_softmax(&self, image: &Tensor) -> Result<Vec<f64>> {
        self.require(HeadKind::SingleLabelIdentity)?;
        let out = self.forward(image)?;
        Ok(softmax(out.logits.data()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&CheckpointHeader {
            format: "camnet".into(),
            config: self.config.clone(),
        })?;
        let names = self.param_names();
        let params = self.params();
        let named: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(params).collect();
        checkpoint::save(path, &header, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::load(path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let header: CheckpointHeader =
            serde_json::from_str(&header).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != "camnet" {
            return Err(bad(format!("unexpected format {}", header.format)));
        }
        let mut net = CamNet::new(header.config)?;
        let names = net.param_names();
        if tensors.len() != names.len() {
            return Err(bad(format!("expected {} tensors, found {}", names.len(), tensors.len())));
        }
        for ((slot, name), (found, t)) in net.params_mut().into_iter().zip(&names).zip(tensors) {
            if *name != found || slot.shape() != t.shape() {
                return Err(bad(format!("tensor {found} {:?} does not match {name} {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: ModelConfig,
}
