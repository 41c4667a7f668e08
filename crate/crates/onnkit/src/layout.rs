//! Optical frontend layout: how many square kernels fit on a metasurface.
//!
//! Counts follow n_cols = floor((w - d) / (k + d)) per axis; the placement
//! itself is a centered grid with pitch k + d, which keeps margins symmetric
//! and every edge gap at least d.

use crate::error::{Error, Result};
use crate::net::{LayerSpec, NetworkSpec, Padding, Parameterization};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channels {
    Mono,
    Rgb,
}

impl Channels {
    pub fn count(&self) -> usize {
        match self {
            Channels::Mono => 1,
            Channels::Rgb => 3,
        }
    }
}

/// User-facing description of the optical frontend.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrontendDesign {
    pub surface_h_mm: f64,
    pub surface_w_mm: f64,
    /// Physical kernel side length.
    pub kernel_size_mm: f64,
    /// Minimum edge-to-edge spacing between kernels.
    pub min_spacing_mm: f64,
    /// Digital resolution of one kernel (odd, e.g. 7).
    pub kernel_px: usize,
    pub channels: Channels,
}

impl FrontendDesign {
    pub fn validate(&self) -> Result<()> {
        if !(self.surface_h_mm > 0.0 && self.surface_w_mm > 0.0) {
            return Err(Error::InvalidSpec("surface dimensions must be positive".into()));
        }
        if !(self.kernel_size_mm > 0.0) {
            return Err(Error::InvalidSpec("kernel size must be positive".into()));
        }
        if !(self.min_spacing_mm >= 0.0) {
            return Err(Error::InvalidSpec("spacing must be non-negative".into()));
        }
        if self.kernel_px == 0 || self.kernel_px % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel_px must be odd and positive, got {}",
                self.kernel_px
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayoutResult {
    pub n_cols: usize,
    pub n_rows: usize,
    pub n_kernels: usize,
    /// Kernel center positions (x, y) in mm from the surface corner.
    pub centers_mm: Vec<(f64, f64)>,
}

fn axis_count(extent: f64, k: f64, d: f64) -> usize {
    let v = (extent - d) / (k + d);
    if v.is_finite() && v > 0.0 {
        v.floor() as usize
    } else {
        0
    }
}

/// Maximal symmetric placement; zero kernels is a valid outcome.
pub fn compute_layout(design: &FrontendDesign) -> Result<LayoutResult> {
    design.validate()?;
    let k = design.kernel_size_mm;
    let d = design.min_spacing_mm;
    let n_cols = axis_count(design.surface_w_mm, k, d);
    let n_rows = axis_count(design.surface_h_mm, k, d);
    let n_kernels = n_cols * n_rows;
    let mut centers_mm = Vec::with_capacity(n_kernels);
    if n_kernels > 0 {
        let pitch = k + d;
        let span_w = n_cols as f64 * k + (n_cols - 1) as f64 * d;
        let span_h = n_rows as f64 * k + (n_rows - 1) as f64 * d;
        let x0 = (design.surface_w_mm - span_w) / 2.0 + k / 2.0;
        let y0 = (design.surface_h_mm - span_h) / 2.0 + k / 2.0;
        for r in 0..n_rows {
            for c in 0..n_cols {
                centers_mm.push((x0 + c as f64 * pitch, y0 + r as f64 * pitch));
            }
        }
    }
    Ok(LayoutResult {
        n_cols,
        n_rows,
        n_kernels,
        centers_mm,
    })
}

/// Binds a frontend design and its layout to a backend, producing the full
/// hybrid architecture: one bias-free conv layer with `n_kernels` output
/// channels, then the digital backend.
pub fn design_to_netspec(
    design: &FrontendDesign,
    layout: &LayoutResult,
    backend: Vec<LayerSpec>,
) -> Result<NetworkSpec> {
    design.validate()?;
    if layout.n_kernels == 0 {
        return Err(Error::InvalidSpec(
            "layout has zero kernels; enlarge the surface or shrink kernel size/spacing".into(),
        ));
    }
    let mut layers = vec![LayerSpec::conv2d(
        design.channels.count(),
        layout.n_kernels,
        design.kernel_px,
        Padding::Valid,
    )];
    layers.extend(backend);
    let spec = NetworkSpec::new(layers, Parameterization::Standard, 1);
    spec.validate()?;
    Ok(spec)
}
