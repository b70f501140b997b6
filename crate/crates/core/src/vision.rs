//! Grid features, ROI-Align region pooling, uniform proposals and a small
//! strided-convolution stand-in for the image backbone.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lten;
use crate::tensor::{ParamStore, Tensor};

/// Default backbone output: 7 × 7 × 2048.
pub const GRID_SIDE: usize = 7;
pub const GRID_CHANNELS: usize = 2048;
/// Samples per bin side used by region pooling.
pub const SAMPLES_PER_BIN: usize = 2;

/// An `H × W × C` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeature {
    values: Tensor,
}

impl GridFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::dim(
                "grid feature",
                s,
                &[GRID_SIDE, GRID_SIDE, GRID_CHANNELS],
            ));
        }
        if !values.all_finite() {
            return Err(Error::Numeric {
                op: "grid feature",
                detail: "non-finite value".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// Cell vector at row `y`, column `x`.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let c = self.channels();
        let off = (y * self.width() + x) * c;
        &self.values.data()[off..off + c]
    }

    /// Row-major `[H·W, C]` view used as visual tokens.
    pub fn flatten(&self) -> Tensor {
        self.values
            .reshape([self.height() * self.width(), self.channels()])
            .expect("same element count")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(lten::read_file(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        lten::write_file(path, &self.values, lten::DType::F32)
    }
}

/// Box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Region {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v)) && x1 < x2 && y1 < y2;
        if !ok {
            return Err(Error::Region(format!("({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Converts a pixel box to normalized coordinates, clamping to the image.
    pub fn from_pixels(b: [f64; 4], image_w: f64, image_h: f64) -> Result<Self> {
        let c = |v: f64, s: f64| (v / s).clamp(0.0, 1.0);
        Self::new(
            c(b[0], image_w),
            c(b[1], image_h),
            c(b[2], image_w),
            c(b[3], image_h),
        )
    }
}

/// Bilinear sample at continuous cell coordinates `(u, v)` where integer
/// values hit cell centers. Coordinates are clamped to the grid.
fn bilinear(grid: &GridFeature, u: f64, v: f64, out: &mut [f64], weight: f64) {
    let (h, w) = (grid.height(), grid.width());
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let taps = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ];
    for (y, x, tw) in taps {
        if tw == 0.0 {
            continue;
        }
        let cell = grid.cell(y, x);
        for (o, c) in out.iter_mut().zip(cell) {
            *o += weight * tw * c;
        }
    }
}

/// ROI-Align: each output bin averages `samples_per_bin²` bilinear samples at
/// regularly spaced points inside the bin, with no coordinate quantization.
pub fn roi_align(
    grid: &GridFeature,
    region: &Region,
    out: (usize, usize),
    samples_per_bin: usize,
) -> Result<Tensor> {
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || samples_per_bin == 0 {
        return Err(Error::Parameter(format!(
            "roi_align output {oh}x{ow} with {samples_per_bin} samples"
        )));
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let (x1, y1, x2, y2) = (
        clamp(region.x1),
        clamp(region.y1),
        clamp(region.x2),
        clamp(region.y2),
    );
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::Region(format!(
            "({}, {}, {}, {}) has zero area after clamping",
            region.x1, region.y1, region.x2, region.y2
        )));
    }
    let (h, w, c) = (grid.height() as f64, grid.width() as f64, grid.channels());
    let (bw, bh) = ((x2 - x1) * w / ow as f64, (y2 - y1) * h / oh as f64);
    let s = samples_per_bin;
    let weight = 1.0 / (s * s) as f64;
    let mut data = vec![0.0; oh * ow * c];
    for by in 0..oh {
        for bx in 0..ow {
            let cell = &mut data[(by * ow + bx) * c..(by * ow + bx + 1) * c];
            for sy in 0..s {
                let y = y1 * h + (by as f64 + (sy as f64 + 0.5) / s as f64) * bh;
                for sx in 0..s {
                    let x = x1 * w + (bx as f64 + (sx as f64 + 0.5) / s as f64) * bw;
                    bilinear(grid, x - 0.5, y - 0.5, cell, weight);
                }
            }
        }
    }
    Tensor::new([oh, ow, c], data)
}

/// A region's single pooled vector (1 × 1 ROI-Align, flattened).
pub fn pool_region_vector(grid: &GridFeature, region: &Region) -> Result<Tensor> {
    roi_align(grid, region, (1, 1), SAMPLES_PER_BIN)?.reshape([grid.channels()])
}

/// `n²` equal tiles covering the unit square in row-major order.
pub fn uniform_proposals(n_per_axis: usize) -> Vec<Region> {
    let n = n_per_axis.max(1);
    let step = 1.0 / n as f64;
    let edge = |i: usize| if i == n { 1.0 } else { i as f64 * step };
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(Region {
                x1: edge(c),
                y1: edge(r),
                x2: edge(c + 1),
                y2: edge(r + 1),
            });
        }
    }
    out
}

#[derive(Debug, Deserialize, Serialize)]
struct RegionLine {
    id: String,
    regions: Vec<[f64; 4]>,
}

/// Reads a JSON-lines region file: `{"id": .., "regions": [[x1,y1,x2,y2], ..]}`.
pub fn load_region_file(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Region>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: RegionLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let regions = rec
            .regions
            .iter()
            .map(|b| Region::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        out.push((rec.id, regions));
    }
    Ok(out)
}

pub fn save_region_file(path: impl AsRef<Path>, records: &[(String, Vec<Region>)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (id, regions) in records {
        let line = RegionLine {
            id: id.clone(),
            regions: regions.iter().map(|r| [r.x1, r.y1, r.x2, r.y2]).collect(),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Input side length the stand-in encoder expects.
pub const IMAGE_SIDE: usize = 224;

/// Non-overlapping strided convolutions 224 → 56 → 28 → 14 → 7 with ReLU
/// between stages. Kernel size equals stride, so each stage is a patch
/// projection.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    params: ParamStore,
    stages: Vec<(usize, usize, usize)>,
}

impl ToyEncoder {
    const STRIDES: [usize; 4] = [4, 2, 2, 2];

    fn channel_plan(out_channels: usize) -> [usize; 5] {
        [3, 8, 16, 32, out_channels]
    }

    /// Randomly initialized encoder with zero biases.
    pub fn new(out_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = Self::channel_plan(out_channels);
        let mut params = ParamStore::new();
        for (i, &k) in Self::STRIDES.iter().enumerate() {
            let fan_in = (k * k * ch[i]) as f64;
            params.insert(
                format!("encoder.conv{i}.weight"),
                Tensor::randn([k, k, ch[i], ch[i + 1]], (2.0 / fan_in).sqrt(), &mut rng),
            )?;
            params.insert(format!("encoder.conv{i}.bias"), Tensor::zeros([ch[i + 1]]))?;
        }
        Self::from_params(params)
    }

    /// Rebuilds from named tensors, e.g. loaded from a checkpoint.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let mut stages = Vec::new();
        for (i, &k) in Self::STRIDES.iter().enumerate() {
            let w = params
                .by_name(&format!("encoder.conv{i}.weight"))
                .ok_or_else(|| Error::Config(format!("missing encoder.conv{i}.weight")))?;
            let s = w.shape();
            if s.len() != 4 || s[0] != k || s[1] != k {
                return Err(Error::dim("toy encoder", s, &[k, k, 0, 0]));
            }
            if let Some((_, _, prev)) = stages.last() {
                if *prev != s[2] {
                    return Err(Error::dim("toy encoder", s, &[k, k, *prev, s[3]]));
                }
            }
            stages.push((k, s[2], s[3]));
        }
        Ok(Self { params, stages })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.2).unwrap_or(0)
    }

    pub fn encode(&self, image: &Tensor) -> Result<GridFeature> {
        if image.shape() != [IMAGE_SIDE, IMAGE_SIDE, 3] {
            return Err(Error::dim(
                "toy encoder input",
                image.shape(),
                &[IMAGE_SIDE, IMAGE_SIDE, 3],
            ));
        }
        let mut x = image.clone();
        let last = self.stages.len() - 1;
        for (i, &(k, cin, cout)) in self.stages.iter().enumerate() {
            let w = self
                .params
                .by_name(&format!("encoder.conv{i}.weight"))
                .unwrap();
            let b = self
                .params
                .by_name(&format!("encoder.conv{i}.bias"))
                .unwrap();
            let side = x.shape()[0] / k;
            let prev = x.shape()[0];
            let mut out = vec![0.0; side * side * cout];
            for oy in 0..side {
                for ox in 0..side {
                    let o = &mut out[(oy * side + ox) * cout..(oy * side + ox + 1) * cout];
                    o.copy_from_slice(b.data());
                    for ky in 0..k {
                        for kx in 0..k {
                            let px = &x.data()[((oy * k + ky) * prev + ox * k + kx) * cin..][..cin];
                            let wk = &w.data()[(ky * k + kx) * cin * cout..][..cin * cout];
                            for (ci, &p) in px.iter().enumerate() {
                                if p == 0.0 {
                                    continue;
                                }
                                for (oc, wv) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                                    *oc += p * wv;
                                }
                            }
                        }
                    }
                    if i != last {
                        o.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
            }
            x = Tensor::new([side, side, cout], out)?;
        }
        GridFeature::new(x)
    }
}
