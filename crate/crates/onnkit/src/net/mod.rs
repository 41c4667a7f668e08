//! Minimal differentiable network engine.
//!
//! Supports the small fixed architectures used by the toolkit: dense,
//! 2-D convolution (stride 1), ReLU, nearest-neighbor 2x upsampling and
//! flatten, with softmax-cross-entropy and MSE losses. Everything is f64.
//! Beyond plain gradients it provides per-sample parameter Jacobians and
//! exact Hessian-vector products (forward-over-reverse), which the tangent
//! kernel machinery builds on.

mod autodiff;
pub(crate) mod layers;
mod loss;
mod optim;

pub use autodiff::{ForwardTrace, Scalarization};
pub use loss::{LossKind, LossTarget};
pub(crate) use loss::softmax_rows as softened_softmax;
pub use optim::{Optimizer, OptimizerHyper, OptimizerKind};

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Spatial shape of an activation as it flows through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dims {
    Flat(usize),
    Chw { c: usize, h: usize, w: usize },
}

impl Dims {
    pub fn volume(&self) -> usize {
        match *self {
            Dims::Flat(d) => d,
            Dims::Chw { c, h, w } => c * h * w,
        }
    }

    /// Dims of one sample of a batched tensor ([n, d] or [n, c, h, w]).
    pub fn of_batch(t: &Tensor) -> Result<Dims> {
        match t.shape() {
            [_, d] => Ok(Dims::Flat(*d)),
            [_, c, h, w] => Ok(Dims::Chw {
                c: *c,
                h: *h,
                w: *w,
            }),
            s => Err(Error::ShapeMismatch {
                location: "batch".into(),
                expected: "[n, d] or [n, c, h, w]".into(),
                got: format!("{s:?}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    },
    Conv2d {
        channels_in: usize,
        channels_out: usize,
        kernel_size: usize,
        padding: Padding,
        bias: bool,
    },
    Relu,
    Upsample2x,
    Flatten,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Dense {
            fan_in,
            fan_out,
            bias: true,
        }
    }

    pub fn dense_no_bias(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Dense {
            fan_in,
            fan_out,
            bias: false,
        }
    }

    /// Bias-free convolution (a physical PSF has no additive offset).
    pub fn conv2d(channels_in: usize, channels_out: usize, kernel_size: usize, padding: Padding) -> Self {
        LayerSpec::Conv2d {
            channels_in,
            channels_out,
            kernel_size,
            padding,
            bias: false,
        }
    }

    pub fn conv2d_biased(
        channels_in: usize,
        channels_out: usize,
        kernel_size: usize,
        padding: Padding,
    ) -> Self {
        LayerSpec::Conv2d {
            channels_in,
            channels_out,
            kernel_size,
            padding,
            bias: true,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn is_shape_only(&self) -> bool {
        matches!(self, LayerSpec::Flatten | LayerSpec::Upsample2x)
    }

    fn validate(&self, index: usize) -> Result<()> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out, .. } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "layer {index}: dense requires fan_in, fan_out >= 1"
                    )));
                }
            }
            LayerSpec::Conv2d {
                channels_in,
                channels_out,
                kernel_size,
                ..
            } => {
                if channels_in == 0 || channels_out == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "layer {index}: conv2d requires positive channel counts"
                    )));
                }
                if kernel_size == 0 || kernel_size % 2 == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "layer {index}: conv2d requires odd kernel_size, got {kernel_size}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Maps the incoming activation shape to the outgoing one.
    pub fn out_dims(&self, input: Dims, index: usize) -> Result<Dims> {
        let mismatch = |expected: String| Error::ShapeMismatch {
            location: format!("layer {index} ({})", self.kind_name()),
            expected,
            got: format!("{input:?}"),
        };
        match *self {
            LayerSpec::Dense { fan_in, fan_out, .. } => match input {
                Dims::Flat(d) if d == fan_in => Ok(Dims::Flat(fan_out)),
                Dims::Flat(_) => Err(mismatch(format!("flat input of size {fan_in}"))),
                _ => Err(mismatch("flat input (insert flatten)".into())),
            },
            LayerSpec::Conv2d {
                channels_in,
                channels_out,
                kernel_size,
                padding,
                ..
            } => match input {
                Dims::Chw { c, h, w } if c == channels_in => {
                    let (oh, ow) = match padding {
                        Padding::Same => (h, w),
                        Padding::Valid => {
                            if h < kernel_size || w < kernel_size {
                                return Err(mismatch(format!(
                                    "spatial size >= {kernel_size} for valid padding"
                                )));
                            }
                            (h - kernel_size + 1, w - kernel_size + 1)
                        }
                    };
                    Ok(Dims::Chw {
                        c: channels_out,
                        h: oh,
                        w: ow,
                    })
                }
                _ => Err(mismatch(format!("[{channels_in}, h, w] input"))),
            },
            LayerSpec::Relu => Ok(input),
            LayerSpec::Upsample2x => match input {
                Dims::Chw { c, h, w } => Ok(Dims::Chw {
                    c,
                    h: 2 * h,
                    w: 2 * w,
                }),
                _ => Err(mismatch("[c, h, w] input".into())),
            },
            LayerSpec::Flatten => match input {
                Dims::Chw { c, h, w } => Ok(Dims::Flat(c * h * w)),
                _ => Err(mismatch("[c, h, w] input".into())),
            },
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Upsample2x => "upsample2x",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Weight scaling convention. `Standard` bakes the init scale into the
/// parameter values; `Ntk` draws unit normals and applies 1/sqrt(fan_in)
/// (times sqrt(2) after a ReLU) in the forward pass, keeping the tangent
/// kernel stable as widths grow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    Standard,
    Ntk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub parameterization: Parameterization,
    /// Layers before this index form the optical frontend; the rest is the
    /// digital backend.
    pub frontend_split: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, parameterization: Parameterization, frontend_split: usize) -> Self {
        Self {
            layers,
            parameterization,
            frontend_split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one layer".into()));
        }
        if self.frontend_split > self.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "frontend_split {} exceeds layer count {}",
                self.frontend_split,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            if i < self.frontend_split && matches!(layer, LayerSpec::Relu) {
                return Err(Error::InvalidSpec(format!(
                    "layer {i}: optical frontend must stay linear, found relu before frontend_split"
                )));
            }
        }
        Ok(())
    }

    /// True when the architecture is dense/relu only (optionally with a
    /// leading flatten), i.e. the analytic FC kernel applies.
    pub fn is_fc_only(&self) -> bool {
        self.layers.iter().all(|l| {
            matches!(
                l,
                LayerSpec::Dense { .. } | LayerSpec::Relu | LayerSpec::Flatten
            )
        })
    }

    /// Whether the input of layer `i` traces back to a ReLU output
    /// (shape-only layers are transparent).
    fn follows_relu(&self, i: usize) -> bool {
        for j in (0..i).rev() {
            match self.layers[j] {
                LayerSpec::Relu => return true,
                ref l if l.is_shape_only() => continue,
                _ => return false,
            }
        }
        false
    }

    /// Whether the output of layer `i` feeds a ReLU.
    fn feeds_relu(&self, i: usize) -> bool {
        for layer in self.layers.iter().skip(i + 1) {
            match layer {
                LayerSpec::Relu => return true,
                l if l.is_shape_only() => continue,
                _ => return false,
            }
        }
        false
    }

    /// Forward scale factor for a parameterized layer.
    pub(crate) fn layer_scale(&self, i: usize) -> f64 {
        match self.parameterization {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => {
                let fan_in = match self.layers[i] {
                    LayerSpec::Dense { fan_in, .. } => fan_in,
                    LayerSpec::Conv2d {
                        channels_in,
                        kernel_size,
                        ..
                    } => channels_in * kernel_size * kernel_size,
                    _ => return 1.0,
                };
                let gain = if self.follows_relu(i) { 2.0_f64.sqrt() } else { 1.0 };
                gain / (fan_in as f64).sqrt()
            }
        }
    }

    fn init_std(&self, i: usize) -> f64 {
        match self.parameterization {
            Parameterization::Ntk => 1.0,
            Parameterization::Standard => {
                let fan_in = match self.layers[i] {
                    LayerSpec::Dense { fan_in, .. } => fan_in,
                    LayerSpec::Conv2d {
                        channels_in,
                        kernel_size,
                        ..
                    } => channels_in * kernel_size * kernel_size,
                    _ => return 0.0,
                };
                let num = if self.feeds_relu(i) { 2.0 } else { 1.0 };
                (num / fan_in as f64).sqrt()
            }
        }
    }
}

/// Which parameter tensors an operation touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamScope {
    All,
    Frontend,
    Backend,
    /// Explicit layer indices.
    Layers(Vec<usize>),
}

impl ParamScope {
    fn contains(&self, layer: usize, frontend_split: usize) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::Frontend => layer < frontend_split,
            ParamScope::Backend => layer >= frontend_split,
            ParamScope::Layers(set) => set.contains(&layer),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub layer: usize,
}

/// A materialized network: spec plus named parameter tensors.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    meta: Vec<ParamMeta>,
}

/// Builds a network with deterministic, seed-keyed initialization.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut params = Vec::new();
    let mut meta = Vec::new();
    let mut rng = rng_from_seed(derive(seed, "net-init"));
    for (i, layer) in spec.layers.iter().enumerate() {
        let (w_shape, b_len) = match *layer {
            LayerSpec::Dense { fan_in, fan_out, bias } => {
                (Some(vec![fan_in, fan_out]), if bias { Some(fan_out) } else { None })
            }
            LayerSpec::Conv2d {
                channels_in,
                channels_out,
                kernel_size,
                bias,
                ..
            } => (
                Some(vec![channels_out, channels_in, kernel_size, kernel_size]),
                if bias { Some(channels_out) } else { None },
            ),
            _ => (None, None),
        };
        if let Some(shape) = w_shape {
            let std = spec.init_std(i);
            let w = Tensor::from_fn(&shape, |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            });
            params.push(w);
            meta.push(ParamMeta {
                name: format!("layer{i}.weight"),
                layer: i,
            });
        }
        if let Some(len) = b_len {
            // Standard: biases start at zero. Ntk: biases are unit normals
            // like every other weight.
            let b = match spec.parameterization {
                Parameterization::Standard => Tensor::zeros(&[len]),
                Parameterization::Ntk => Tensor::from_fn(&[len], |_| rng.sample(StandardNormal)),
            };
            params.push(b);
            meta.push(ParamMeta {
                name: format!("layer{i}.bias"),
                layer: i,
            });
        }
    }
    Ok(Network { spec: spec.clone(), params, meta })
}

impl Network {
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>, meta: Vec<ParamMeta>) -> Result<Self> {
        spec.validate()?;
        let fresh = build_network(&spec, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (i, (have, want)) in params.iter().zip(fresh.params.iter()).enumerate() {
            if have.shape() != want.shape() {
                return Err(Error::InvalidSpec(format!(
                    "parameter {} ({}) has shape {:?}, expected {:?}",
                    i,
                    meta.get(i).map(|m| m.name.as_str()).unwrap_or("?"),
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { spec, params, meta })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn meta(&self) -> &[ParamMeta] {
        &self.meta
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Parameter tensor indices selected by `scope`, in storage order.
    pub fn scoped_param_indices(&self, scope: &ParamScope) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| scope.contains(m.layer, self.spec.frontend_split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of scalar parameters inside `scope`.
    pub fn scoped_dim(&self, scope: &ParamScope) -> usize {
        self.scoped_param_indices(scope)
            .iter()
            .map(|&i| self.params[i].len())
            .sum()
    }

    /// Concatenates the scoped parameter tensors into one flat vector.
    pub fn flatten_scoped(&self, tensors: &[Tensor], scope: &ParamScope) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scoped_dim(scope));
        for i in self.scoped_param_indices(scope) {
            out.extend_from_slice(tensors[i].data());
        }
        out
    }

    /// Splits a flat scoped vector back into per-parameter tensors, zero
    /// everywhere outside the scope.
    pub fn unflatten_scoped(&self, flat: &[f64], scope: &ParamScope) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut at = 0;
        for i in self.scoped_param_indices(scope) {
            let len = self.params[i].len();
            out[i].data_mut().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        debug_assert_eq!(at, flat.len());
        out
    }

    /// Extracts the backend (layers from `frontend_split` on) as a
    /// standalone network sharing parameter values by copy.
    pub fn backend_network(&self) -> Result<Network> {
        let split = self.spec.frontend_split;
        let spec = NetworkSpec::new(
            self.spec.layers[split..].to_vec(),
            self.spec.parameterization,
            0,
        );
        let mut params = Vec::new();
        let mut meta = Vec::new();
        for (p, m) in self.params.iter().zip(&self.meta) {
            if m.layer >= split {
                params.push(p.clone());
                meta.push(ParamMeta {
                    name: format!("layer{}.{}", m.layer - split, m.name.rsplit('.').next().unwrap()),
                    layer: m.layer - split,
                });
            }
        }
        Network::from_parts(spec, params, meta)
    }

    /// Writes updated backend parameters back into this network.
    pub fn adopt_backend(&mut self, backend: &Network) -> Result<()> {
        let split = self.spec.frontend_split;
        let mut src = backend.params.iter();
        for (p, m) in self.params.iter_mut().zip(&self.meta) {
            if m.layer >= split {
                let s = src.next().ok_or_else(|| {
                    Error::InvalidSpec("backend network has fewer parameters than expected".into())
                })?;
                if s.shape() != p.shape() {
                    return Err(Error::InvalidSpec(format!(
                        "backend parameter {} shape {:?} does not match {:?}",
                        m.name,
                        s.shape(),
                        p.shape()
                    )));
                }
                *p = s.clone();
            }
        }
        if src.next().is_some() {
            return Err(Error::InvalidSpec(
                "backend network has more parameters than expected".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(4, 3)], Parameterization::Standard, 0);
        let a = build_network(&spec, 7).unwrap();
        let b = build_network(&spec, 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
        let c = build_network(&spec, 8).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn standard_init_std_matches_fan_in() {
        // Lone dense layer is not followed by relu: std = sqrt(1/fan_in).
        let spec = NetworkSpec::new(vec![LayerSpec::dense(10_000, 1)], Parameterization::Standard, 0);
        let net = build_network(&spec, 3).unwrap();
        let std = net.params()[0].rms();
        let want = (1.0f64 / 10_000.0).sqrt();
        assert!(
            (std - want).abs() / want < 0.05,
            "std {std} vs expected {want}"
        );
    }

    #[test]
    fn he_init_when_feeding_relu() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::dense(10_000, 4), LayerSpec::Relu],
            Parameterization::Standard,
            0,
        );
        let net = build_network(&spec, 3).unwrap();
        let std = net.params()[0].rms();
        let want = (2.0f64 / 10_000.0).sqrt();
        assert!((std - want).abs() / want < 0.05);
    }

    #[test]
    fn relu_in_frontend_rejected() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::conv2d(1, 4, 3, Padding::Valid),
                LayerSpec::Relu,
                LayerSpec::Flatten,
            ],
            Parameterization::Standard,
            2,
        );
        assert!(matches!(build_network(&spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::conv2d(1, 4, 4, Padding::Valid)],
            Parameterization::Standard,
            0,
        );
        assert!(build_network(&spec, 0).is_err());
    }

    #[test]
    fn param_count_and_scopes() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::conv2d(1, 8, 7, Padding::Valid),
                LayerSpec::Flatten,
                LayerSpec::dense(8 * 22 * 22, 16),
                LayerSpec::Relu,
                LayerSpec::dense(16, 10),
            ],
            Parameterization::Standard,
            1,
        );
        let net = build_network(&spec, 0).unwrap();
        assert_eq!(net.param_count(), 8 * 49 + (3872 * 16 + 16) + (160 + 10));
        assert_eq!(net.scoped_dim(&ParamScope::Frontend), 392);
        assert_eq!(
            net.scoped_dim(&ParamScope::Backend),
            net.param_count() - 392
        );
    }

    #[test]
    fn ntk_scale_uses_sqrt2_after_relu() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::dense_no_bias(4, 8),
                LayerSpec::Relu,
                LayerSpec::dense_no_bias(8, 1),
            ],
            Parameterization::Ntk,
            0,
        );
        assert!((spec.layer_scale(0) - 0.5).abs() < 1e-15);
        assert!((spec.layer_scale(2) - (2.0f64).sqrt() / (8.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backend_roundtrip() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::conv2d(1, 2, 3, Padding::Valid),
                LayerSpec::Flatten,
                LayerSpec::dense(2 * 4 * 4, 3),
            ],
            Parameterization::Standard,
            1,
        );
        let mut net = build_network(&spec, 1).unwrap();
        let mut backend = net.backend_network().unwrap();
        backend.params_mut()[0].data_mut()[0] = 42.0;
        net.adopt_backend(&backend).unwrap();
        assert_eq!(net.params()[1].data()[0], 42.0);
    }
}
