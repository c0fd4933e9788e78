//! Partitioning an equirectangular raster into overlapping vertical panels
//! and merging per-panel predictions back into a seamless raster.

use crate::error::{Error, Result};

/// A channels x height x width raster with column-circular semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ErpTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "erp tensor {channels}x{height}x{width} wants {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(ErpTensor { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ErpTensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Circularly shift columns left by `k`: output column x takes input
    /// column (x + k) mod width.
    pub fn rotate_columns(&self, k: usize) -> ErpTensor {
        let k = k % self.width;
        let mut out = ErpTensor::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                for x in 0..self.width {
                    out.data[row + x] = self.data[row + (x + k) % self.width];
                }
            }
        }
        out
    }

    /// Mirror columns: output column x takes input column width-1-x.
    pub fn flip_columns(&self) -> ErpTensor {
        let mut out = ErpTensor::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                for x in 0..self.width {
                    out.data[row + x] = self.data[row + self.width - 1 - x];
                }
            }
        }
        out
    }
}

/// Sliding-window configuration: panels of width `interval` every `stride`
/// columns over a `width x height` ERP. The stride must divide both the ERP
/// width (so the window tiling closes around the seam) and the interval (so
/// every pixel is covered by the same number of panels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelConfig {
    pub interval: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl PanelConfig {
    pub fn new(interval: usize, stride: usize, width: usize, height: usize) -> Result<Self> {
        if interval == 0 || stride == 0 || width == 0 || height == 0 {
            return Err(Error::Config("panel config: all dimensions must be positive".into()));
        }
        if width % stride != 0 {
            return Err(Error::Config(format!(
                "panel config: stride {stride} does not divide ERP width {width}"
            )));
        }
        if interval % stride != 0 {
            return Err(Error::Config(format!(
                "panel config: stride {stride} does not divide interval {interval}"
            )));
        }
        if interval > width {
            return Err(Error::Config(format!(
                "panel config: interval {interval} exceeds ERP width {width}"
            )));
        }
        Ok(PanelConfig { interval, stride, width, height })
    }

    /// Number of panels, W_e / S.
    pub fn panel_count(&self) -> usize {
        self.width / self.stride
    }

    /// How many panels cover each ERP pixel, I / S.
    pub fn coverage(&self) -> usize {
        self.interval / self.stride
    }

    /// ERP column of panel-local column `j` of panel `n`.
    pub fn erp_column(&self, n: usize, j: usize) -> usize {
        (n * self.stride + j) % self.width
    }
}

/// The panels cut from one ERP, along with the configuration that produced
/// them.
#[derive(Debug, Clone)]
pub struct PanelSet {
    pub panels: Vec<ErpTensor>,
    pub config: PanelConfig,
}

/// Cut `erp` into N = W_e/S panels; panel n holds ERP columns
/// n*S .. n*S+I-1, wrapping across the seam.
pub fn partition_erp(erp: &ErpTensor, cfg: &PanelConfig) -> Result<PanelSet> {
    if erp.width != cfg.width || erp.height != cfg.height {
        return Err(Error::Config(format!(
            "partition: ERP {}x{} does not match config {}x{}",
            erp.height, erp.width, cfg.height, cfg.width
        )));
    }
    let n = cfg.panel_count();
    let mut panels = Vec::with_capacity(n);
    for p in 0..n {
        let mut panel = ErpTensor::zeros(erp.channels, erp.height, cfg.interval);
        for c in 0..erp.channels {
            for y in 0..erp.height {
                let src_row = (c * erp.height + y) * erp.width;
                let dst_row = (c * erp.height + y) * cfg.interval;
                for j in 0..cfg.interval {
                    panel.data[dst_row + j] = erp.data[src_row + cfg.erp_column(p, j)];
                }
            }
        }
        panels.push(panel);
    }
    Ok(PanelSet { panels, config: *cfg })
}

/// Blend per-panel predictions back onto the ERP grid.
///
/// Each ERP pixel is covered by exactly I/S panels; the result is the
/// weight-normalized sum over them in ascending panel order, accumulated in
/// f64. Weights come from the single-channel `confidences` panels when
/// given, and are 1 otherwise.
pub fn merge_panels(
    preds: &PanelSet,
    confidences: Option<&PanelSet>,
    cfg: &PanelConfig,
) -> Result<ErpTensor> {
    let n = cfg.panel_count();
    if preds.panels.len() != n {
        return Err(Error::Config(format!(
            "merge: {} panels given, config wants {n}",
            preds.panels.len()
        )));
    }
    let channels = preds.panels[0].channels;
    for panel in &preds.panels {
        if panel.channels != channels || panel.height != cfg.height || panel.width != cfg.interval
        {
            return Err(Error::Shape(format!(
                "merge: panel {}x{}x{} does not match config {}x{}",
                panel.channels, panel.height, panel.width, cfg.height, cfg.interval
            )));
        }
    }
    if let Some(conf) = confidences {
        if conf.panels.len() != n {
            return Err(Error::Config(format!(
                "merge: {} confidence panels given, config wants {n}",
                conf.panels.len()
            )));
        }
        for panel in &conf.panels {
            if panel.channels != 1 || panel.height != cfg.height || panel.width != cfg.interval {
                return Err(Error::Shape(format!(
                    "merge: confidence panel {}x{}x{} must be 1x{}x{}",
                    panel.channels, panel.height, panel.width, cfg.height, cfg.interval
                )));
            }
        }
    }

    let (h, we) = (cfg.height, cfg.width);
    let mut num = vec![0.0f64; channels * h * we];
    let mut den = vec![0.0f64; h * we];
    for p in 0..n {
        let panel = &preds.panels[p];
        for j in 0..cfg.interval {
            let x = cfg.erp_column(p, j);
            for y in 0..h {
                let w = match confidences {
                    Some(conf) => {
                        let wv = conf.panels[p].at(0, y, j) as f64;
                        if !(wv > 0.0) || !wv.is_finite() {
                            return Err(Error::Merge(format!(
                                "non-positive confidence {wv} at panel {p}, pixel ({y},{j})"
                            )));
                        }
                        wv
                    }
                    None => 1.0,
                };
                den[y * we + x] += w;
                for c in 0..channels {
                    num[(c * h + y) * we + x] += w * panel.at(c, y, j) as f64;
                }
            }
        }
    }
    let mut out = ErpTensor::zeros(channels, h, we);
    for y in 0..h {
        for x in 0..we {
            let d = den[y * we + x];
            if d <= 0.0 {
                return Err(Error::Merge(format!("zero total weight at pixel ({y},{x})")));
            }
            for c in 0..channels {
                out.data[(c * h + y) * we + x] = (num[(c * h + y) * we + x] / d) as f32;
            }
        }
    }
    Ok(out)
}

/// Number of panels covering each ERP column, by direct enumeration.
/// O(N * I); test/diagnostic helper kept separate from the merge path.
pub fn coverage_by_enumeration(cfg: &PanelConfig) -> Vec<usize> {
    let mut cov = vec![0usize; cfg.width];
    for p in 0..cfg.panel_count() {
        for j in 0..cfg.interval {
            cov[cfg.erp_column(p, j)] += 1;
        }
    }
    cov
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(channels: usize, height: usize, width: usize) -> ErpTensor {
        let data = (0..channels * height * width).map(|i| i as f32 * 0.25 - 3.0).collect();
        ErpTensor::new(channels, height, width, data).unwrap()
    }

    #[test]
    fn table_row_panel_count() {
        let cfg = PanelConfig::new(128, 32, 1024, 512).unwrap();
        assert_eq!(cfg.panel_count(), 32);
        assert_eq!(cfg.coverage(), 4);
    }

    #[test]
    fn identity_partition_single_panel() {
        let erp = ramp(2, 4, 8);
        let cfg = PanelConfig::new(8, 8, 8, 4).unwrap();
        let set = partition_erp(&erp, &cfg).unwrap();
        assert_eq!(set.panels.len(), 1);
        assert_eq!(set.panels[0], erp);
    }

    #[test]
    fn wrap_around_columns() {
        // W=8, I=4, S=2, panel 3 covers columns 6,7,0,1.
        let erp = ramp(1, 2, 8);
        let cfg = PanelConfig::new(4, 2, 8, 2).unwrap();
        let set = partition_erp(&erp, &cfg).unwrap();
        let expect_cols = [6usize, 7, 0, 1];
        for (j, &col) in expect_cols.iter().enumerate() {
            for y in 0..2 {
                assert_eq!(set.panels[3].at(0, y, j), erp.at(0, y, col));
            }
        }
    }

    #[test]
    fn merge_of_partition_is_identity() {
        let erp = ramp(3, 4, 16);
        let cfg = PanelConfig::new(8, 2, 16, 4).unwrap();
        let set = partition_erp(&erp, &cfg).unwrap();
        let merged = merge_panels(&set, None, &cfg).unwrap();
        assert_eq!(merged, erp, "uniform-weight round trip should be exact");
    }

    #[test]
    fn constant_panels_merge_to_constant() {
        let cfg = PanelConfig::new(4, 2, 8, 2).unwrap();
        let panels = (0..cfg.panel_count())
            .map(|_| ErpTensor::new(1, 2, 4, vec![std::f32::consts::E; 8]).unwrap())
            .collect();
        let merged = merge_panels(&PanelSet { panels, config: cfg }, None, &cfg).unwrap();
        for v in merged.data {
            assert_eq!(v, std::f32::consts::E);
        }
    }

    #[test]
    fn coverage_multiplicity() {
        let cfg = PanelConfig::new(128, 32, 1024, 4).unwrap();
        for (x, &c) in coverage_by_enumeration(&cfg).iter().enumerate() {
            assert_eq!(c, 4, "column {x}");
        }
    }

    #[test]
    fn rotation_shifts_panel_indices() {
        let erp = ramp(1, 2, 12);
        let cfg = PanelConfig::new(6, 3, 12, 2).unwrap();
        let k = 2usize;
        let rotated = partition_erp(&erp.rotate_columns(k * cfg.stride), &cfg).unwrap();
        let plain = partition_erp(&erp, &cfg).unwrap();
        let n = cfg.panel_count();
        for p in 0..n {
            assert_eq!(rotated.panels[p], plain.panels[(p + k) % n]);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PanelConfig::new(128, 48, 1024, 4).is_err());
        assert!(PanelConfig::new(100, 32, 1024, 4).is_err());
        assert!(PanelConfig::new(2048, 32, 1024, 4).is_err());
    }

    #[test]
    fn zero_confidence_is_merge_error() {
        let cfg = PanelConfig::new(4, 4, 4, 1).unwrap();
        let preds = PanelSet {
            panels: vec![ErpTensor::new(1, 1, 4, vec![1.0; 4]).unwrap()],
            config: cfg,
        };
        let conf = PanelSet {
            panels: vec![ErpTensor::new(1, 1, 4, vec![0.5, 0.0, 0.5, 0.5]).unwrap()],
            config: cfg,
        };
        let err = merge_panels(&preds, Some(&conf), &cfg).unwrap_err();
        assert!(matches!(err, Error::Merge(_)));
    }
}
