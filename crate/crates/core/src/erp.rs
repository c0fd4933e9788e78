//! Pixel ↔ sphere conventions and the per-panel coordinate grids consumed
//! by the geometry embedding.
//!
//! Columns map to azimuth and rows to polar angle with a half-pixel offset,
//! so no sample ever sits exactly on a pole. Azimuth phi lies in (-pi, pi]
//! with phi = 0 at the image centre column; theta runs from 0 at the zenith
//! to pi at the nadir. Grids are computed in f64 and stored in f32.

use crate::error::{Error, Result};

/// Azimuth/polar pair on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalAngles {
    /// Azimuth in radians, (-pi, pi] after normalization.
    pub phi: f64,
    /// Polar angle in radians, (0, pi) for any in-range pixel.
    pub theta: f64,
}

impl SphericalAngles {
    /// Wrap phi into (-pi, pi]; theta is left untouched.
    pub fn normalized(self) -> SphericalAngles {
        SphericalAngles { phi: wrap_phi(self.phi), theta: self.theta }
    }
}

fn wrap_phi(phi: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut p = phi % tau;
    if p > std::f64::consts::PI {
        p -= tau;
    } else if p <= -std::f64::consts::PI {
        p += tau;
    }
    p
}

/// Angles of the (possibly fractional) pixel `(x_e, y_e)` of a `w_e` x `h_e`
/// equirectangular image. Pixel centres sit at integer coordinates plus 0.5.
pub fn pixel_to_angles(x_e: f64, y_e: f64, w_e: usize, h_e: usize) -> Result<SphericalAngles> {
    if w_e == 0 || h_e == 0 {
        return Err(Error::Config("pixel_to_angles: empty image".into()));
    }
    if !(0.0..w_e as f64).contains(&x_e) || !(0.0..h_e as f64).contains(&y_e) {
        return Err(Error::Domain(format!(
            "pixel ({x_e}, {y_e}) outside {w_e}x{h_e} image"
        )));
    }
    let theta = std::f64::consts::PI * (y_e + 0.5) / h_e as f64;
    let phi = std::f64::consts::TAU * (x_e + 0.5) / w_e as f64 - std::f64::consts::PI;
    Ok(SphericalAngles { phi: wrap_phi(phi), theta })
}

/// Unit vector for the given angles: x toward phi=0 on the equator, z up.
pub fn angles_to_unit_vector(a: SphericalAngles) -> [f64; 3] {
    let (sin_t, cos_t) = a.theta.sin_cos();
    let (sin_p, cos_p) = a.phi.sin_cos();
    [sin_t * cos_p, sin_t * sin_p, cos_t]
}

/// Per-pixel coordinate grids of one panel.
///
/// `global` holds (x_s, y_s, z_s) rows of shape 3 x height x width computed
/// from the panel's true ERP columns. `local` holds the (x', y') rows of a
/// fixed reference panel, identical for every panel; z' is not stored
/// because it always equals z_s.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelGeometry {
    pub global: Vec<f32>,
    pub local: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl PanelGeometry {
    /// Interleave global and local rows into the (x,y,z,x',y') layout the
    /// geometry embedding consumes, shape 5 x height x width.
    pub fn stacked(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(5 * plane);
        out.extend_from_slice(&self.global);
        out.extend_from_slice(&self.local);
        debug_assert_eq!(out.len(), 5 * plane);
        out
    }
}

/// Unit-sphere grid of the panel starting at ERP column `panel_index *
/// stride`, sampled every `sub` pixels at the centres of the coarse grid
/// (`sub = 1` is the full-resolution pixel grid; the encoder stem uses
/// `sub = 4`). Columns wrap across the ERP seam.
#[allow(clippy::too_many_arguments)]
fn global_grid(
    panel_index: usize,
    interval: usize,
    stride: usize,
    w_e: usize,
    h_e: usize,
    sub: usize,
) -> Result<Vec<f32>> {
    if sub == 0 || interval % sub != 0 || h_e % sub != 0 {
        return Err(Error::Config(format!(
            "panel grid: subsample {sub} must divide panel {h_e}x{interval}"
        )));
    }
    let gh = h_e / sub;
    let gw = interval / sub;
    let start = (panel_index * stride) as f64;
    let off = (sub as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; 3 * gh * gw];
    for r in 0..gh {
        let y = (r * sub) as f64 + off;
        for c in 0..gw {
            let x = (start + (c * sub) as f64 + off).rem_euclid(w_e as f64);
            let v = angles_to_unit_vector(pixel_to_angles(x, y, w_e, h_e)?);
            for (ch, &val) in v.iter().enumerate() {
                out[(ch * gh + r) * gw + c] = val as f32;
            }
        }
    }
    Ok(out)
}

/// Build the global/local coordinate grids for one panel.
///
/// The local grid is the (x, y) part of the grid of `ref_panel_index`,
/// bitwise identical for every panel of a run.
#[allow(clippy::too_many_arguments)]
pub fn panel_coordinate_grid(
    panel_index: usize,
    interval: usize,
    stride: usize,
    w_e: usize,
    h_e: usize,
    ref_panel_index: usize,
    sub: usize,
) -> Result<PanelGeometry> {
    if stride == 0 || w_e % stride != 0 {
        return Err(Error::Config(format!(
            "panel grid: stride {stride} must divide ERP width {w_e}"
        )));
    }
    let n = w_e / stride;
    if panel_index >= n || ref_panel_index >= n {
        return Err(Error::Config(format!(
            "panel grid: panel {panel_index}/{ref_panel_index} out of range for {n} panels"
        )));
    }
    let global = global_grid(panel_index, interval, stride, w_e, h_e, sub)?;
    let local = if ref_panel_index == panel_index {
        global[..2 * global.len() / 3].to_vec()
    } else {
        let reference = global_grid(ref_panel_index, interval, stride, w_e, h_e, sub)?;
        reference[..2 * reference.len() / 3].to_vec()
    };
    Ok(PanelGeometry { global, local, height: h_e / sub, width: interval / sub })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn pixel_convention_examples() {
        // Column 2 of a width-4 image sits a quarter turn east of centre.
        let a = pixel_to_angles(2.0, 0.0, 4, 2).unwrap();
        assert!((a.phi - PI / 4.0).abs() < 1e-12);
        // Rows mirror around the equator.
        assert!((pixel_to_angles(0.0, 0.0, 4, 2).unwrap().theta - PI / 4.0).abs() < 1e-12);
        assert!((pixel_to_angles(0.0, 1.0, 4, 2).unwrap().theta - 3.0 * PI / 4.0).abs() < 1e-12);
        // Continuous equator coordinate.
        let h = 64usize;
        let eq = pixel_to_angles(0.0, h as f64 / 2.0 - 0.5, 128, h).unwrap();
        assert!((eq.theta - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        assert!(pixel_to_angles(-0.1, 0.0, 4, 4).is_err());
        assert!(pixel_to_angles(0.0, 4.0, 4, 4).is_err());
    }

    #[test]
    fn unit_vector_landmarks() {
        let zenith = angles_to_unit_vector(SphericalAngles { phi: 0.0, theta: 0.0 });
        assert!((zenith[0]).abs() < 1e-12 && (zenith[1]).abs() < 1e-12 && (zenith[2] - 1.0).abs() < 1e-12);
        let fwd = angles_to_unit_vector(SphericalAngles { phi: 0.0, theta: PI / 2.0 });
        assert!((fwd[0] - 1.0).abs() < 1e-12 && fwd[1].abs() < 1e-12 && fwd[2].abs() < 1e-12);
        let diag = angles_to_unit_vector(SphericalAngles { phi: PI / 4.0, theta: PI / 2.0 });
        let s = 0.5f64.sqrt();
        assert!((diag[0] - s).abs() < 1e-12 && (diag[1] - s).abs() < 1e-12 && diag[2].abs() < 1e-12);
    }

    #[test]
    fn grids_unit_norm_and_shared_local() {
        let g0 = panel_coordinate_grid(0, 8, 4, 32, 16, 0, 1).unwrap();
        let g3 = panel_coordinate_grid(3, 8, 4, 32, 16, 0, 1).unwrap();
        let plane = g0.height * g0.width;
        for i in 0..plane {
            let n = (0..3)
                .map(|c| g0.global[c * plane + i] as f64)
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // Local grids are bitwise identical across panels.
        assert_eq!(g0.local, g3.local);
        // The reference panel's local grid is its own global (x, y).
        assert_eq!(g0.local, g0.global[..2 * plane].to_vec());
        // z rows depend only on the row index.
        for r in 0..g3.height {
            let first = g3.global[2 * plane + r * g3.width];
            for c in 0..g3.width {
                assert_eq!(g3.global[2 * plane + r * g3.width + c], first);
            }
        }
    }

    #[test]
    fn window_placement_wraps() {
        // Panel 1 of a 1024-wide ERP with stride 32 covers columns 32..32+I-1.
        let w_e = 1024;
        let (i_len, s) = (128usize, 32usize);
        let g = panel_coordinate_grid(1, i_len, s, w_e, 64, 0, 1).unwrap();
        let plane = g.height * g.width;
        for c in 0..g.width {
            let expect = angles_to_unit_vector(
                pixel_to_angles(((s + c) % w_e) as f64, 0.0, w_e, 64).unwrap(),
            );
            let got = g.global[c];
            assert!((got as f64 - expect[0]).abs() < 1e-6);
            let got_z = g.global[2 * plane + c];
            assert!((got_z as f64 - expect[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn circular_shift_relation() {
        // Shifting the panel index draws the same values further along the ERP.
        let (w_e, h_e, i_len, s) = (32usize, 8usize, 8usize, 4usize);
        let a = panel_coordinate_grid(2, i_len, s, w_e, h_e, 0, 1).unwrap();
        let b = panel_coordinate_grid(5, i_len, s, w_e, h_e, 0, 1).unwrap();
        let plane = a.height * a.width;
        for r in 0..h_e {
            for c in 0..i_len {
                let col_a = (2 * s + c) % w_e;
                let col_b = (5 * s + c) % w_e;
                let direct_a = angles_to_unit_vector(
                    pixel_to_angles(col_a as f64, r as f64, w_e, h_e).unwrap(),
                );
                let direct_b = angles_to_unit_vector(
                    pixel_to_angles(col_b as f64, r as f64, w_e, h_e).unwrap(),
                );
                for ch in 0..3 {
                    assert_eq!(a.global[(ch * a.height + r) * a.width + c], direct_a[ch] as f32);
                    assert_eq!(b.global[(ch * b.height + r) * b.width + c], direct_b[ch] as f32);
                }
            }
        }
        assert_eq!(a.local, b.local);
    }

    #[test]
    fn strided_grid_uses_coarse_pixel_centres() {
        let g = panel_coordinate_grid(0, 8, 8, 16, 8, 0, 4).unwrap();
        assert_eq!((g.height, g.width), (2, 2));
        // First coarse sample sits at fine pixel coordinate 1.5.
        let expect = angles_to_unit_vector(pixel_to_angles(1.5, 1.5, 16, 8).unwrap());
        assert!((g.global[0] as f64 - expect[0]).abs() < 1e-7);
    }
}
