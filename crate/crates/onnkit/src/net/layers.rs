//! Flat-slice compute kernels for the layer types.
//!
//! All kernels accumulate into their output so the tangent (R-operator)
//! passes can reuse them with different operand pairings. Inner loops run
//! over contiguous memory.

/// out[b, o] += scale * sum_i in[b, i] * w[i, o]; weights stored [fan_in, fan_out].
pub fn dense_fwd(input: &[f64], n: usize, fan_in: usize, fan_out: usize, w: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(input.len(), n * fan_in);
    debug_assert_eq!(out.len(), n * fan_out);
    for b in 0..n {
        let in_row = &input[b * fan_in..(b + 1) * fan_in];
        let out_row = &mut out[b * fan_out..(b + 1) * fan_out];
        for (i, &x) in in_row.iter().enumerate() {
            let xv = scale * x;
            if xv == 0.0 {
                continue;
            }
            let w_row = &w[i * fan_out..(i + 1) * fan_out];
            for (o, wv) in w_row.iter().enumerate() {
                out_row[o] += xv * wv;
            }
        }
    }
}

/// out[b, o] += bias[o].
pub fn add_bias_flat(bias: &[f64], n: usize, fan_out: usize, out: &mut [f64]) {
    for b in 0..n {
        let row = &mut out[b * fan_out..(b + 1) * fan_out];
        for (o, bv) in bias.iter().enumerate() {
            row[o] += bv;
        }
    }
}

/// gin[b, i] += scale * sum_o gout[b, o] * w[i, o].
pub fn dense_bwd_input(gout: &[f64], n: usize, fan_in: usize, fan_out: usize, w: &[f64], scale: f64, gin: &mut [f64]) {
    for b in 0..n {
        let g_row = &gout[b * fan_out..(b + 1) * fan_out];
        let gin_row = &mut gin[b * fan_in..(b + 1) * fan_in];
        for i in 0..fan_in {
            let w_row = &w[i * fan_out..(i + 1) * fan_out];
            let mut acc = 0.0;
            for (gv, wv) in g_row.iter().zip(w_row) {
                acc += gv * wv;
            }
            gin_row[i] += scale * acc;
        }
    }
}

/// gw[i, o] += scale * sum_b in[b, i] * gout[b, o]; gb[o] += sum_b gout[b, o].
pub fn dense_wgrad(
    input: &[f64],
    gout: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    scale: f64,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    for b in 0..n {
        let in_row = &input[b * fan_in..(b + 1) * fan_in];
        let g_row = &gout[b * fan_out..(b + 1) * fan_out];
        for (i, &x) in in_row.iter().enumerate() {
            let xv = scale * x;
            if xv == 0.0 {
                continue;
            }
            let gw_row = &mut gw[i * fan_out..(i + 1) * fan_out];
            for (o, gv) in g_row.iter().enumerate() {
                gw_row[o] += xv * gv;
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..n {
            let g_row = &gout[b * fan_out..(b + 1) * fan_out];
            for (o, gv) in g_row.iter().enumerate() {
                gb[o] += gv;
            }
        }
    }
}

/// Geometry of one conv application.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    /// Padding offset: 0 for valid, k/2 for same.
    pub pad: usize,
}

impl ConvGeom {
    /// Output-row range [lo, hi) for which input row oy + ky - pad stays in bounds.
    #[inline]
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.oh);
        (lo.min(hi), hi)
    }

    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo.min(hi), hi)
    }
}

/// out[b, co, oy, ox] += scale * sum_{ci,ky,kx} in[b, ci, oy+ky-pad, ox+kx-pad] * wt[co, ci, ky, kx].
pub fn conv2d_fwd(input: &[f64], n: usize, g: ConvGeom, wt: &[f64], scale: f64, out: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    debug_assert_eq!(input.len(), n * g.ci * in_plane);
    debug_assert_eq!(out.len(), n * g.co * out_plane);
    for b in 0..n {
        let in_b = &input[b * g.ci * in_plane..(b + 1) * g.ci * in_plane];
        let out_b = &mut out[b * g.co * out_plane..(b + 1) * g.co * out_plane];
        for co in 0..g.co {
            let out_c = &mut out_b[co * out_plane..(co + 1) * out_plane];
            for ci in 0..g.ci {
                let in_c = &in_b[ci * in_plane..(ci + 1) * in_plane];
                let w_base = (co * g.ci + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.oy_range(ky);
                    for kx in 0..g.k {
                        let wv = scale * wt[w_base + ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.ox_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let in_row =
                                &in_c[iy * g.w + (ox_lo + kx - g.pad)..iy * g.w + (ox_hi + kx - g.pad)];
                            let out_row = &mut out_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            for (ov, iv) in out_row.iter_mut().zip(in_row) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[b, co, :, :] += bias[co].
pub fn add_bias_planes(bias: &[f64], n: usize, co: usize, plane: usize, out: &mut [f64]) {
    for b in 0..n {
        for c in 0..co {
            let v = bias[c];
            let row = &mut out[(b * co + c) * plane..(b * co + c + 1) * plane];
            for o in row.iter_mut() {
                *o += v;
            }
        }
    }
}

/// gin[b, ci, iy, ix] += scale * sum_{co,ky,kx} gout[b, co, iy-ky+pad, ix-kx+pad] * wt[co, ci, ky, kx].
pub fn conv2d_bwd_input(gout: &[f64], n: usize, g: ConvGeom, wt: &[f64], scale: f64, gin: &mut [f64]) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..n {
        let gout_b = &gout[b * g.co * out_plane..(b + 1) * g.co * out_plane];
        let gin_b = &mut gin[b * g.ci * in_plane..(b + 1) * g.ci * in_plane];
        for co in 0..g.co {
            let gout_c = &gout_b[co * out_plane..(co + 1) * out_plane];
            for ci in 0..g.ci {
                let gin_c = &mut gin_b[ci * in_plane..(ci + 1) * in_plane];
                let w_base = (co * g.ci + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.oy_range(ky);
                    for kx in 0..g.k {
                        let wv = scale * wt[w_base + ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.ox_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let gout_row = &gout_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let gin_row = &mut gin_c
                                [iy * g.w + (ox_lo + kx - g.pad)..iy * g.w + (ox_hi + kx - g.pad)];
                            for (gi, go) in gin_row.iter_mut().zip(gout_row) {
                                *gi += wv * go;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gw[co, ci, ky, kx] += scale * sum_{b,oy,ox} in[b, ci, oy+ky-pad, ox+kx-pad] * gout[b, co, oy, ox];
/// gb[co] += sum of each gout plane.
pub fn conv2d_wgrad(
    input: &[f64],
    gout: &[f64],
    n: usize,
    g: ConvGeom,
    scale: f64,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for b in 0..n {
        let in_b = &input[b * g.ci * in_plane..(b + 1) * g.ci * in_plane];
        let gout_b = &gout[b * g.co * out_plane..(b + 1) * g.co * out_plane];
        for co in 0..g.co {
            let gout_c = &gout_b[co * out_plane..(co + 1) * out_plane];
            for ci in 0..g.ci {
                let in_c = &in_b[ci * in_plane..(ci + 1) * in_plane];
                let w_base = (co * g.ci + ci) * g.k * g.k;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.oy_range(ky);
                    for kx in 0..g.k {
                        let (ox_lo, ox_hi) = g.ox_range(kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - g.pad;
                            let in_row =
                                &in_c[iy * g.w + (ox_lo + kx - g.pad)..iy * g.w + (ox_hi + kx - g.pad)];
                            let gout_row = &gout_c[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            for (iv, go) in in_row.iter().zip(gout_row) {
                                acc += iv * go;
                            }
                        }
                        gw[w_base + ky * g.k + kx] += scale * acc;
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..n {
            for co in 0..g.co {
                let plane = &gout[(b * g.co + co) * out_plane..(b * g.co + co + 1) * out_plane];
                gb[co] += plane.iter().sum::<f64>();
            }
        }
    }
}

/// out = max(in, 0), elementwise assign.
pub fn relu_fwd(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

/// out = g where gate > 0, else 0 (assign). Used for both the backward pass
/// and the tangent passes; relu'' vanishes almost everywhere.
pub fn relu_gate(gate: &[f64], g: &[f64], out: &mut [f64]) {
    for ((o, &x), &gv) in out.iter_mut().zip(gate).zip(g) {
        *o = if x > 0.0 { gv } else { 0.0 };
    }
}

/// Nearest-neighbor 2x upsample, assign.
pub fn upsample2x_fwd(input: &[f64], n: usize, c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for bc in 0..n * c {
        let in_p = &input[bc * h * w..(bc + 1) * h * w];
        let out_p = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let v = in_p[y * w + x];
                let base = (2 * y) * ow + 2 * x;
                out_p[base] = v;
                out_p[base + 1] = v;
                out_p[base + ow] = v;
                out_p[base + ow + 1] = v;
            }
        }
    }
}

/// Backward of 2x upsample: each input cell collects its four outputs, assign.
pub fn upsample2x_bwd(gout: &[f64], n: usize, c: usize, h: usize, w: usize, gin: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    debug_assert_eq!(gout.len(), n * c * oh * ow);
    for bc in 0..n * c {
        let go_p = &gout[bc * oh * ow..(bc + 1) * oh * ow];
        let gi_p = &mut gin[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let base = (2 * y) * ow + 2 * x;
                gi_p[y * w + x] = go_p[base] + go_p[base + 1] + go_p[base + ow] + go_p[base + ow + 1];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_valid_delta_kernel_is_central_crop() {
        // 1x1 channel, 4x4 image, 3x3 delta kernel centered.
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut wt = vec![0.0; 9];
        wt[4] = 1.0; // center
        let g = ConvGeom {
            ci: 1,
            co: 1,
            k: 3,
            h: 4,
            w: 4,
            oh: 2,
            ow: 2,
            pad: 0,
        };
        let mut out = vec![0.0; 4];
        conv2d_fwd(&img, 1, g, &wt, 1.0, &mut out);
        assert_eq!(out, vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn conv_same_padding_shape_and_values() {
        // Uniform 3x3 kernel on a constant image: interior sums 9, corner sums 4.
        let img = vec![1.0; 9];
        let wt = vec![1.0; 9];
        let g = ConvGeom {
            ci: 1,
            co: 1,
            k: 3,
            h: 3,
            w: 3,
            oh: 3,
            ow: 3,
            pad: 1,
        };
        let mut out = vec![0.0; 9];
        conv2d_fwd(&img, 1, g, &wt, 1.0, &mut out);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn upsample_roundtrip_sums() {
        let input = vec![1.0, 2.0, 3.0, 4.0];
        let mut up = vec![0.0; 16];
        upsample2x_fwd(&input, 1, 1, 2, 2, &mut up);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[1], 1.0);
        assert_eq!(up[5], 1.0);
        let mut back = vec![0.0; 4];
        upsample2x_bwd(&up, 1, 1, 2, 2, &mut back);
        assert_eq!(back, vec![4.0, 8.0, 12.0, 16.0]);
    }
}
