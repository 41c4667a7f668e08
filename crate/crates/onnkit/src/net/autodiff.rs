//! Forward, backward, per-sample Jacobian, and Hessian-vector passes.
//!
//! The Hessian-vector product uses the forward-over-reverse construction:
//! a tangent pass alongside the forward pass, then a tangent pass alongside
//! the backward pass. All layers here are piecewise bilinear, so the only
//! nonlinearity is the ReLU gate, whose second derivative vanishes almost
//! everywhere.

use super::layers::{
    add_bias_flat, add_bias_planes, conv2d_bwd_input, conv2d_fwd, conv2d_wgrad, dense_bwd_input,
    dense_fwd, dense_wgrad, relu_fwd, relu_gate, upsample2x_bwd, upsample2x_fwd, ConvGeom,
};
use super::{Dims, LayerSpec, Network, Padding, ParamScope};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// How a multi-output network is reduced to one scalar per sample for
/// Jacobian and tangent-kernel purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scalarization {
    SumOutputs,
    MeanOutputs,
    /// One Jacobian row per output unit; row `i * k + c` is output `c` of
    /// sample `i`.
    PerOutput,
}

/// Activations of every stage for one batch: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
pub struct ForwardTrace {
    pub n: usize,
    pub acts: Vec<Vec<f64>>,
    pub dims: Vec<Dims>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn output_tensor(&self) -> Tensor {
        let dims = *self.dims.last().unwrap();
        let shape = match dims {
            Dims::Flat(d) => vec![self.n, d],
            Dims::Chw { c, h, w } => vec![self.n, c, h, w],
        };
        Tensor::new(shape, self.output().to_vec()).unwrap()
    }
}

impl Network {
    /// Parameter tensor indices (weight, bias) of layer `l`.
    pub(crate) fn layer_param_idx(&self, l: usize) -> (Option<usize>, Option<usize>) {
        let mut w = None;
        let mut b = None;
        for (i, m) in self.meta().iter().enumerate() {
            if m.layer == l {
                if m.name.ends_with(".weight") {
                    w = Some(i);
                } else {
                    b = Some(i);
                }
            }
        }
        (w, b)
    }

    /// Shape of each stage for the given input dims; errors name the layer.
    pub fn infer_dims(&self, input: Dims) -> Result<Vec<Dims>> {
        let mut dims = Vec::with_capacity(self.spec().layers.len() + 1);
        dims.push(input);
        for (i, layer) in self.spec().layers.iter().enumerate() {
            let next = layer.out_dims(dims[i], i)?;
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn forward_trace(&self, batch: &Tensor, checked: bool) -> Result<ForwardTrace> {
        let n = batch.batch_size();
        let dims = self.infer_dims(Dims::of_batch(batch)?)?;
        if checked && !batch.all_finite() {
            return Err(Error::NonFinite {
                location: "input batch".into(),
            });
        }
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
        acts.push(batch.data().to_vec());
        for (i, layer) in self.spec().layers.iter().enumerate() {
            let out = self.apply_layer(i, layer, &acts[i], dims[i], dims[i + 1], n);
            if checked && !out.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("layer {i} ({})", layer.kind_name()),
                });
            }
            acts.push(out);
        }
        Ok(ForwardTrace { n, acts, dims })
    }

    fn apply_layer(
        &self,
        i: usize,
        layer: &LayerSpec,
        input: &[f64],
        din: Dims,
        dout: Dims,
        n: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; n * dout.volume()];
        let s = self.spec().layer_scale(i);
        let (w_idx, b_idx) = self.layer_param_idx(i);
        match (layer, din, dout) {
            (LayerSpec::Dense { fan_in, fan_out, .. }, _, _) => {
                dense_fwd(input, n, *fan_in, *fan_out, self.params()[w_idx.unwrap()].data(), s, &mut out);
                if let Some(b) = b_idx {
                    add_bias_flat(self.params()[b].data(), n, *fan_out, &mut out);
                }
            }
            (LayerSpec::Conv2d { .. }, Dims::Chw { c: _, h, w }, Dims::Chw { c: co, h: oh, w: ow }) => {
                let g = self.conv_geom(i, h, w, oh, ow);
                conv2d_fwd(input, n, g, self.params()[w_idx.unwrap()].data(), s, &mut out);
                if let Some(b) = b_idx {
                    add_bias_planes(self.params()[b].data(), n, co, oh * ow, &mut out);
                }
            }
            (LayerSpec::Relu, _, _) => relu_fwd(input, &mut out),
            (LayerSpec::Upsample2x, Dims::Chw { c, h, w }, _) => {
                upsample2x_fwd(input, n, c, h, w, &mut out)
            }
            (LayerSpec::Flatten, _, _) => out.copy_from_slice(input),
            _ => unreachable!("dims validated by infer_dims"),
        }
        out
    }

    fn conv_geom(&self, i: usize, h: usize, w: usize, oh: usize, ow: usize) -> ConvGeom {
        match self.spec().layers[i] {
            LayerSpec::Conv2d {
                channels_in,
                channels_out,
                kernel_size,
                padding,
                ..
            } => ConvGeom {
                ci: channels_in,
                co: channels_out,
                k: kernel_size,
                h,
                w,
                oh,
                ow,
                pad: match padding {
                    Padding::Valid => 0,
                    Padding::Same => kernel_size / 2,
                },
            },
            _ => unreachable!(),
        }
    }

    /// Pure forward pass with finiteness checks at every layer boundary.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(batch, true)?.output_tensor())
    }

    /// Backpropagates `out_grad` (shaped like the final output, flattened)
    /// through the trace. Returns per-parameter gradients (zeros outside
    /// `scope`) and, if requested, the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        out_grad: Vec<f64>,
        scope: &ParamScope,
        want_input_grad: bool,
    ) -> (Vec<Tensor>, Option<Vec<f64>>) {
        let n = trace.n;
        let split = self.spec().frontend_split;
        let mut grads: Vec<Tensor> = self.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let lowest_scoped = self
            .meta()
            .iter()
            .filter(|m| scope.contains(m.layer, split))
            .map(|m| m.layer)
            .min();
        let stop = if want_input_grad { 0 } else { lowest_scoped.unwrap_or(usize::MAX) };
        let mut delta = out_grad;
        for (l, layer) in self.spec().layers.iter().enumerate().rev() {
            if !want_input_grad && lowest_scoped.map_or(true, |lo| l < lo) {
                break;
            }
            let scoped = scope.contains(l, split);
            let need_gin = want_input_grad || l > stop;
            let a_in = &trace.acts[l];
            let din = trace.dims[l];
            let dout = trace.dims[l + 1];
            let s = self.spec().layer_scale(l);
            let (w_idx, b_idx) = self.layer_param_idx(l);
            delta = match (layer, din, dout) {
                (LayerSpec::Dense { fan_in, fan_out, .. }, _, _) => {
                    if scoped {
                        let (gw, gb) = grads_pair(&mut grads, w_idx, b_idx);
                        dense_wgrad(a_in, &delta, n, *fan_in, *fan_out, s, gw, gb);
                    }
                    if need_gin {
                        let mut gin = vec![0.0; n * fan_in];
                        dense_bwd_input(
                            &delta,
                            n,
                            *fan_in,
                            *fan_out,
                            self.params()[w_idx.unwrap()].data(),
                            s,
                            &mut gin,
                        );
                        gin
                    } else {
                        break;
                    }
                }
                (LayerSpec::Conv2d { .. }, Dims::Chw { c: ci, h, w }, Dims::Chw { h: oh, w: ow, .. }) => {
                    let g = self.conv_geom(l, h, w, oh, ow);
                    if scoped {
                        let (gw, gb) = grads_pair(&mut grads, w_idx, b_idx);
                        conv2d_wgrad(a_in, &delta, n, g, s, gw, gb);
                    }
                    if need_gin {
                        let mut gin = vec![0.0; n * ci * h * w];
                        conv2d_bwd_input(&delta, n, g, self.params()[w_idx.unwrap()].data(), s, &mut gin);
                        gin
                    } else {
                        break;
                    }
                }
                (LayerSpec::Relu, _, _) => {
                    let mut gin = vec![0.0; a_in.len()];
                    relu_gate(a_in, &delta, &mut gin);
                    gin
                }
                (LayerSpec::Upsample2x, Dims::Chw { c, h, w }, _) => {
                    let mut gin = vec![0.0; n * c * h * w];
                    upsample2x_bwd(&delta, n, c, h, w, &mut gin);
                    gin
                }
                (LayerSpec::Flatten, _, _) => delta,
                _ => unreachable!(),
            };
        }
        let input_grad = want_input_grad.then_some(delta);
        (grads, input_grad)
    }

    /// Per-sample parameter Jacobian. For `SumOutputs`/`MeanOutputs` the
    /// result is `n x p`; for `PerOutput` it is `(n * k) x p` where `k` is
    /// the per-sample output volume. Rows are independent and computed in
    /// parallel; the result does not depend on thread count.
    pub fn per_sample_jacobian(
        &self,
        batch: &Tensor,
        scalarization: Scalarization,
        scope: &ParamScope,
    ) -> Result<Tensor> {
        let n = batch.batch_size();
        let dims = self.infer_dims(Dims::of_batch(batch)?)?;
        let k = dims.last().unwrap().volume();
        let rows_per_sample = match scalarization {
            Scalarization::PerOutput => k,
            _ => 1,
        };
        let p = self.scoped_dim(scope);
        if p == 0 {
            return Err(Error::InvalidSpec("jacobian scope selects no parameters".into()));
        }
        let mut rows = vec![0.0; n * rows_per_sample * p];
        rows.par_chunks_mut(rows_per_sample * p)
            .enumerate()
            .try_for_each(|(i, block)| -> Result<()> {
                let sample = batch.sample_tensor(i);
                let trace = self.forward_trace(&sample, false)?;
                for r in 0..rows_per_sample {
                    let out_grad = match scalarization {
                        Scalarization::SumOutputs => vec![1.0; k],
                        Scalarization::MeanOutputs => vec![1.0 / k as f64; k],
                        Scalarization::PerOutput => {
                            let mut g = vec![0.0; k];
                            g[r] = 1.0;
                            g
                        }
                    };
                    let (grads, _) = self.backward(&trace, out_grad, scope, false);
                    self.flatten_scoped_into(&grads, scope, &mut block[r * p..(r + 1) * p]);
                }
                Ok(())
            })?;
        Tensor::new(vec![n * rows_per_sample, p], rows)
    }

    pub(crate) fn flatten_scoped_into(&self, tensors: &[Tensor], scope: &ParamScope, out: &mut [f64]) {
        let mut at = 0;
        for i in self.scoped_param_indices(scope) {
            let d = tensors[i].data();
            out[at..at + d.len()].copy_from_slice(d);
            at += d.len();
        }
        debug_assert_eq!(at, out.len());
    }

    /// Exact Hessian-vector product of the scalarized output of one sample
    /// with respect to the scoped parameters.
    pub fn hvp_scalarized(
        &self,
        sample: &Tensor,
        scalarization: Scalarization,
        v: &[f64],
        scope: &ParamScope,
    ) -> Result<Vec<f64>> {
        if matches!(scalarization, Scalarization::PerOutput) {
            return Err(Error::InvalidSpec(
                "hvp needs a scalarized output (sum_outputs or mean_outputs)".into(),
            ));
        }
        let p = self.scoped_dim(scope);
        if v.len() != p {
            return Err(Error::ShapeMismatch {
                location: "hvp tangent".into(),
                expected: format!("{p} entries"),
                got: format!("{}", v.len()),
            });
        }
        let tangent = self.unflatten_scoped(v, scope);
        let trace = self.forward_trace(sample, false)?;
        let n = trace.n;
        let num_layers = self.spec().layers.len();
        let split = self.spec().frontend_split;
        let first_scoped = self
            .meta()
            .iter()
            .filter(|m| scope.contains(m.layer, split))
            .map(|m| m.layer)
            .min()
            .ok_or_else(|| Error::InvalidSpec("hvp scope selects no parameters".into()))?;

        // Tangent forward: r[l] = R{acts[l]}. Zero until the first scoped
        // parameterized layer can inject the tangent.
        let mut r: Vec<Vec<f64>> = Vec::with_capacity(num_layers + 1);
        r.push(vec![0.0; trace.acts[0].len()]);
        for (l, layer) in self.spec().layers.iter().enumerate() {
            let din = trace.dims[l];
            let dout = trace.dims[l + 1];
            if l < first_scoped {
                r.push(vec![0.0; n * dout.volume()]);
                continue;
            }
            let scoped = scope.contains(l, split);
            let s = self.spec().layer_scale(l);
            let (w_idx, b_idx) = self.layer_param_idx(l);
            let mut out = vec![0.0; n * dout.volume()];
            match (layer, din, dout) {
                (LayerSpec::Dense { fan_in, fan_out, .. }, _, _) => {
                    dense_fwd(&r[l], n, *fan_in, *fan_out, self.params()[w_idx.unwrap()].data(), s, &mut out);
                    if scoped {
                        dense_fwd(&trace.acts[l], n, *fan_in, *fan_out, tangent[w_idx.unwrap()].data(), s, &mut out);
                        if let Some(b) = b_idx {
                            add_bias_flat(tangent[b].data(), n, *fan_out, &mut out);
                        }
                    }
                }
                (LayerSpec::Conv2d { .. }, Dims::Chw { h, w, .. }, Dims::Chw { c: co, h: oh, w: ow }) => {
                    let g = self.conv_geom(l, h, w, oh, ow);
                    conv2d_fwd(&r[l], n, g, self.params()[w_idx.unwrap()].data(), s, &mut out);
                    if scoped {
                        conv2d_fwd(&trace.acts[l], n, g, tangent[w_idx.unwrap()].data(), s, &mut out);
                        if let Some(b) = b_idx {
                            add_bias_planes(tangent[b].data(), n, co, oh * ow, &mut out);
                        }
                    }
                }
                (LayerSpec::Relu, _, _) => relu_gate(&trace.acts[l], &r[l], &mut out),
                (LayerSpec::Upsample2x, Dims::Chw { c, h, w }, _) => {
                    upsample2x_fwd(&r[l], n, c, h, w, &mut out)
                }
                (LayerSpec::Flatten, _, _) => out.copy_from_slice(&r[l]),
                _ => unreachable!(),
            }
            r.push(out);
        }

        // Backward pass, keeping the delta at every stage we will revisit.
        let k = trace.dims.last().unwrap().volume();
        let top = match scalarization {
            Scalarization::SumOutputs => vec![1.0; n * k],
            Scalarization::MeanOutputs => vec![1.0 / k as f64; n * k],
            Scalarization::PerOutput => unreachable!(),
        };
        let mut deltas: Vec<Option<Vec<f64>>> = vec![None; num_layers + 1];
        deltas[num_layers] = Some(top);
        for l in (first_scoped..num_layers).rev() {
            let delta_out = deltas[l + 1].as_ref().unwrap();
            let din = trace.dims[l];
            let dout = trace.dims[l + 1];
            let s = self.spec().layer_scale(l);
            let (w_idx, _) = self.layer_param_idx(l);
            let mut gin = vec![0.0; n * din.volume()];
            match (&self.spec().layers[l], din, dout) {
                (LayerSpec::Dense { fan_in, fan_out, .. }, _, _) => dense_bwd_input(
                    delta_out,
                    n,
                    *fan_in,
                    *fan_out,
                    self.params()[w_idx.unwrap()].data(),
                    s,
                    &mut gin,
                ),
                (LayerSpec::Conv2d { .. }, Dims::Chw { h, w, .. }, Dims::Chw { h: oh, w: ow, .. }) => {
                    let g = self.conv_geom(l, h, w, oh, ow);
                    conv2d_bwd_input(delta_out, n, g, self.params()[w_idx.unwrap()].data(), s, &mut gin);
                }
                (LayerSpec::Relu, _, _) => relu_gate(&trace.acts[l], delta_out, &mut gin),
                (LayerSpec::Upsample2x, Dims::Chw { c, h, w }, _) => {
                    upsample2x_bwd(delta_out, n, c, h, w, &mut gin)
                }
                (LayerSpec::Flatten, _, _) => gin.copy_from_slice(delta_out),
                _ => unreachable!(),
            }
            deltas[l] = Some(gin);
        }

        // Tangent backward: rdelta = R{delta}, accumulating R{grad} per
        // scoped layer, which is exactly the Hessian-vector product.
        let mut hv: Vec<Tensor> = self.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut rdelta = vec![0.0; n * k];
        for l in (first_scoped..num_layers).rev() {
            let delta_out = deltas[l + 1].as_ref().unwrap();
            let din = trace.dims[l];
            let dout = trace.dims[l + 1];
            let scoped = scope.contains(l, split);
            let s = self.spec().layer_scale(l);
            let (w_idx, b_idx) = self.layer_param_idx(l);
            rdelta = match (&self.spec().layers[l], din, dout) {
                (LayerSpec::Dense { fan_in, fan_out, .. }, _, _) => {
                    if scoped {
                        let (gw, gb) = grads_pair(&mut hv, w_idx, b_idx);
                        dense_wgrad(&trace.acts[l], &rdelta, n, *fan_in, *fan_out, s, gw, gb);
                        dense_wgrad(&r[l], delta_out, n, *fan_in, *fan_out, s, gw, None);
                    }
                    let mut gin = vec![0.0; n * fan_in];
                    dense_bwd_input(&rdelta, n, *fan_in, *fan_out, self.params()[w_idx.unwrap()].data(), s, &mut gin);
                    if scoped {
                        dense_bwd_input(delta_out, n, *fan_in, *fan_out, tangent[w_idx.unwrap()].data(), s, &mut gin);
                    }
                    gin
                }
                (LayerSpec::Conv2d { .. }, Dims::Chw { c: ci, h, w }, Dims::Chw { h: oh, w: ow, .. }) => {
                    let g = self.conv_geom(l, h, w, oh, ow);
                    if scoped {
                        let (gw, gb) = grads_pair(&mut hv, w_idx, b_idx);
                        conv2d_wgrad(&trace.acts[l], &rdelta, n, g, s, gw, gb);
                        conv2d_wgrad(&r[l], delta_out, n, g, s, gw, None);
                    }
                    let mut gin = vec![0.0; n * ci * h * w];
                    conv2d_bwd_input(&rdelta, n, g, self.params()[w_idx.unwrap()].data(), s, &mut gin);
                    if scoped {
                        conv2d_bwd_input(delta_out, n, g, tangent[w_idx.unwrap()].data(), s, &mut gin);
                    }
                    gin
                }
                (LayerSpec::Relu, _, _) => {
                    let mut gin = vec![0.0; trace.acts[l].len()];
                    relu_gate(&trace.acts[l], &rdelta, &mut gin);
                    gin
                }
                (LayerSpec::Upsample2x, Dims::Chw { c, h, w }, _) => {
                    let mut gin = vec![0.0; n * c * h * w];
                    upsample2x_bwd(&rdelta, n, c, h, w, &mut gin);
                    gin
                }
                (LayerSpec::Flatten, _, _) => rdelta,
                _ => unreachable!(),
            };
        }
        let mut out = vec![0.0; p];
        self.flatten_scoped_into(&hv, scope, &mut out);
        Ok(out)
    }
}

fn grads_pair<'a>(
    grads: &'a mut [Tensor],
    w_idx: Option<usize>,
    b_idx: Option<usize>,
) -> (&'a mut [f64], Option<&'a mut [f64]>) {
    let w = w_idx.unwrap();
    match b_idx {
        None => (grads[w].data_mut(), None),
        Some(b) => {
            debug_assert_ne!(w, b);
            let (lo, hi) = if w < b { (w, b) } else { (b, w) };
            let (a, rest) = grads.split_at_mut(hi);
            let first = &mut a[lo];
            let second = &mut rest[0];
            if w < b {
                (first.data_mut(), Some(second.data_mut()))
            } else {
                (second.data_mut(), Some(first.data_mut()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, LayerSpec, NetworkSpec, Parameterization};

    fn simple_dense_net() -> Network {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::dense(4, 3),
                LayerSpec::Relu,
                LayerSpec::dense(3, 2),
            ],
            Parameterization::Standard,
            0,
        );
        build_network(&spec, 11).unwrap()
    }

    #[test]
    fn zero_weights_zero_bias_give_zero_output() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(5, 3)], Parameterization::Standard, 0);
        let mut net = build_network(&spec, 0).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_central_crop_through_network() {
        let spec = NetworkSpec::new(
            vec![LayerSpec::conv2d(1, 1, 3, Padding::Valid)],
            Parameterization::Standard,
            0,
        );
        let mut net = build_network(&spec, 0).unwrap();
        net.params_mut()[0].data_mut().fill(0.0);
        net.params_mut()[0].data_mut()[4] = 1.0;
        let img = Tensor::new(vec![1, 1, 5, 5], (0..25).map(|v| v as f64 * 0.5).collect()).unwrap();
        let y = net.forward(&img).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(y.data()[oy * 3 + ox], img.data()[(oy + 1) * 5 + (ox + 1)]);
            }
        }
    }

    #[test]
    fn three_layer_net_matches_straight_line_oracle() {
        // 2x2 input, flatten -> dense(4,2), relu, dense(2,1); evaluate the
        // same arithmetic with explicit scalars.
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::Flatten,
                LayerSpec::dense(4, 2),
                LayerSpec::Relu,
                LayerSpec::dense(2, 1),
            ],
            Parameterization::Standard,
            0,
        );
        let net = build_network(&spec, 42).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.7, 1.1, 0.25]).unwrap();
        let y = net.forward(&x).unwrap();

        let w1 = net.params()[0].data(); // [4,2]
        let b1 = net.params()[1].data();
        let w2 = net.params()[2].data(); // [2,1]
        let b2 = net.params()[3].data();
        let xf = x.data();
        let mut h = [0.0f64; 2];
        for o in 0..2 {
            let mut acc = b1[o];
            for i in 0..4 {
                acc += xf[i] * w1[i * 2 + o];
            }
            h[o] = acc.max(0.0);
        }
        let want = b2[0] + h[0] * w2[0] + h[1] * w2[1];
        assert!((y.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn linear_model_jacobian_rows_are_inputs() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense_no_bias(4, 1)], Parameterization::Standard, 0);
        let net = build_network(&spec, 5).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 - 4.0).collect()).unwrap();
        let jac = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        assert_eq!(jac.shape(), &[3, 4]);
        for i in 0..3 {
            for d in 0..4 {
                assert!((jac.data()[i * 4 + d] - x.data()[i * 4 + d]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn per_output_rows_sum_to_sum_outputs_row() {
        let net = simple_dense_net();
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.4, 0.9, 0.2, 1.0, 0.5, -0.2, 0.7]).unwrap();
        let js = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        let jp = net
            .per_sample_jacobian(&x, Scalarization::PerOutput, &ParamScope::All)
            .unwrap();
        let p = net.param_count();
        assert_eq!(jp.shape(), &[4, p]); // n=2, k=2
        for i in 0..2 {
            for col in 0..p {
                let summed: f64 = (0..2).map(|c| jp.data()[(i * 2 + c) * p + col]).sum();
                assert!((summed - js.data()[i * p + col]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_is_deterministic_and_parallel_safe() {
        let net = simple_dense_net();
        let x = Tensor::new(vec![8, 4], (0..32).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        let b = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_error_names_offending_layer() {
        let net = simple_dense_net();
        let x = Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap();
        let err = net.forward(&x).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }
}
