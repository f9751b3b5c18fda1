//! Bird's-eye-view rasters: the 3-channel LIDAR view (intensity, mean
//! height, neighborhood height spread), the camera view warped by a
//! homography, and class-index label maps.
//!
//! Grid geometry: 400 x 400 cells of 5 cm covering 6..26 m ahead and
//! -10..10 m sideways. Row 0 is the far edge (x = 26 m), column 0 the left
//! edge (y = +10 m).

use std::f64::consts::FRAC_2_PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::pointcloud::{in_roi, PointCloudFrame, ROI_X, ROI_Y};

pub const GRID_SIZE: usize = 400;
pub const CELL_METERS: f64 = 0.05;

/// Ground-truth taxonomy, indexed by label value.
pub const CLASS_NAMES: [&str; 7] = [
    "Background",
    "Solid Line",
    "Dotted Line",
    "Stop Line",
    "Arrow",
    "Prohibited Area",
    "Other Point",
];
pub const NUM_CLASSES: usize = 7;
/// Camera-derived maps carry every class except "Other Point".
pub const C_REGION_CLASSES: usize = 6;

pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [128, 0, 128],
    [255, 255, 0],
    [0, 0, 255],
    [255, 255, 255],
];

/// Maps an in-ROI ground position to its grid cell `(row, col)`.
///
/// The near and right edges (x = 6, y = -10) are folded into the last
/// row/column so that every in-ROI position lands inside the grid.
pub fn world_to_pixel(x: f32, y: f32) -> Result<(usize, usize)> {
    if !(x >= ROI_X.0 && x < ROI_X.1 && y >= ROI_Y.0 && y < ROI_Y.1) {
        return Err(Error::OutsideRoi { x, y });
    }
    let row = ((ROI_X.1 as f64 - x as f64) / CELL_METERS).floor() as usize;
    let col = ((ROI_Y.1 as f64 - y as f64) / CELL_METERS).floor() as usize;
    Ok((row.min(GRID_SIZE - 1), col.min(GRID_SIZE - 1)))
}

/// Per-cell accumulators. Summation is associative, so partial grids
/// built from disjoint point subsets can be merged.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridCellStats {
    pub n: u32,
    pub sum_i: f64,
    /// Sum of `h + 2`.
    pub sum_hs: f64,
    pub sum_h: f64,
    pub sum_h2: f64,
}

impl GridCellStats {
    pub fn push(&mut self, intensity: f32, h: f32) {
        let (i, h) = (intensity as f64, h as f64);
        self.n += 1;
        self.sum_i += i;
        self.sum_hs += h + 2.0;
        self.sum_h += h;
        self.sum_h2 += h * h;
    }

    pub fn merge(&mut self, other: &GridCellStats) {
        self.n += other.n;
        self.sum_i += other.sum_i;
        self.sum_hs += other.sum_hs;
        self.sum_h += other.sum_h;
        self.sum_h2 += other.sum_h2;
    }
}

/// Accumulates in-ROI points into a row-major `GRID_SIZE^2` grid. Points
/// outside the ROI are ignored.
pub fn accumulate_cells(frame: &PointCloudFrame) -> Vec<GridCellStats> {
    let mut cells = vec![GridCellStats::default(); GRID_SIZE * GRID_SIZE];
    for p in frame.points.iter().filter(|p| in_roi(p)) {
        let (r, c) = world_to_pixel(p.x, p.y).expect("in-ROI point");
        cells[r * GRID_SIZE + c].push(p.intensity, p.z);
    }
    cells
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).floor().clamp(0.0, 255.0) as u8
}

/// Maps a height standard deviation (meters) to a byte with arctan.
pub fn encode_spread(std: f64) -> u8 {
    quantize(FRAC_2_PI * std.atan())
}

/// 3-channel LIDAR bird's-eye view, interleaved HWC bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbevImage {
    pub frame_id: u64,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LbevImage {
    pub fn zeros(frame_id: u64, height: usize, width: usize) -> Self {
        Self { frame_id, height, width, data: vec![0; height * width * 3] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * 3 + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: u8) {
        self.data[(row * self.width + col) * 3 + channel] = v;
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("sized buffer")
    }

    pub fn from_rgb_image(frame_id: u64, img: &RgbImage) -> Self {
        Self {
            frame_id,
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_image(path, |p| self.to_rgb_image().save(p))
    }

    pub fn load_png(path: &Path, frame_id: u64) -> Result<Self> {
        let img = open_image(path)?.to_rgb8();
        Ok(Self::from_rgb_image(frame_id, &img))
    }
}

/// Builds the LIDAR view from a ROI-filtered frame.
///
/// Per cell with `n` points: channel 0 is the mean reflectance, channel 1
/// the mean of `h + 2`, both scaled by 255 and floored. Channel 2 is the
/// population standard deviation of heights over the cell and its (up to)
/// eight neighbors, squashed by `2/pi * atan` and scaled the same way.
/// Cells without points encode 0 in channels 0 and 1; channel 2 is 0 when
/// the whole 3x3 window is empty.
pub fn rasterize_lbev(frame: &PointCloudFrame) -> LbevImage {
    let cells = accumulate_cells(frame);
    let mut img = LbevImage::zeros(frame.frame_id, GRID_SIZE, GRID_SIZE);
    for r in 0..GRID_SIZE {
        for c in 0..GRID_SIZE {
            let cell = &cells[r * GRID_SIZE + c];
            if cell.n > 0 {
                let n = cell.n as f64;
                img.set(r, c, 0, quantize(cell.sum_i / n));
                img.set(r, c, 1, quantize(cell.sum_hs / n));
            }
            let mut win = GridCellStats::default();
            for rr in r.saturating_sub(1)..=(r + 1).min(GRID_SIZE - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(GRID_SIZE - 1) {
                    win.merge(&cells[rr * GRID_SIZE + cc]);
                }
            }
            if win.n > 0 {
                let n = win.n as f64;
                let mean = win.sum_h / n;
                let var = (win.sum_h2 / n - mean * mean).max(0.0);
                img.set(r, c, 2, encode_spread(var.sqrt()));
            }
        }
    }
    img
}

/// Single-channel class-index raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("label map", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    /// Errors on the first value `>= classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&value) => Err(Error::LabelOutOfRange { value, classes: classes as u8 }),
            None => Ok(()),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("sized buffer");
        save_image(path, |p| img.save(p))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_image(path)?.to_luma8();
        Ok(Self { height: img.height() as usize, width: img.width() as usize, data: img.into_raw() })
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn save_image(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    f(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn colorize_labels(labels: &LabelMap) -> Result<RgbImage> {
    labels.validate(NUM_CLASSES)?;
    Ok(RgbImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        Rgb(PALETTE[labels.get(y as usize, x as usize) as usize])
    }))
}

/// Inverse of [`colorize_labels`]; colors outside the palette are errors.
pub fn decolorize_labels(img: &RgbImage) -> Result<LabelMap> {
    let mut data = Vec::with_capacity((img.width() * img.height()) as usize);
    for px in img.pixels() {
        let class = PALETTE
            .iter()
            .position(|c| *c == px.0)
            .ok_or_else(|| Error::invalid("decolorize_labels", format!("color {:?} not in palette", px.0)))?;
        data.push(class as u8);
    }
    LabelMap::new(img.height() as usize, img.width() as usize, data)
}

/// Projective map from front-camera pixel coordinates `(col, row, 1)` to
/// bird's-eye-view pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Nine whitespace/comma separated numbers, row-major.
    pub fn parse(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| Error::invalid("homography", format!("`{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != 9 {
            return Err(Error::invalid("homography", format!("expected 9 numbers, got {}", values.len())));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, v) in values.into_iter().enumerate() {
            m[i / 3][i % 3] = v;
        }
        Ok(Homography(m))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() <= 1e-9 || !det.is_finite() {
            return Err(Error::SingularHomography(det));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                inv[r][c] = adj[r][c] / det;
            }
        }
        Ok(Homography(inv))
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w))
    }
}

/// Camera bird's-eye view.
#[derive(Debug, Clone, PartialEq)]
pub struct CbevImage {
    pub frame_id: u64,
    pub image: RgbImage,
}

/// Source location `(x, y)` sampled for output pixel `(row, col)`, given
/// the inverse homography; `None` when it falls outside the source.
pub fn ipm_source_location(inverse: &Homography, row: usize, col: usize, src_w: u32, src_h: u32) -> Option<(f64, f64)> {
    let (sx, sy) = inverse.apply(col as f64, row as f64)?;
    let inside = sx >= 0.0 && sy >= 0.0 && sx <= (src_w - 1) as f64 && sy <= (src_h - 1) as f64;
    inside.then_some((sx, sy))
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let p = |xx: u32, yy: u32| img.get_pixel(xx, yy).0[ch] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Warps a front-camera image into the 400 x 400 bird's-eye grid.
/// Samples falling outside the source are black.
pub fn ipm_transform(front: &RgbImage, homography: &Homography, frame_id: u64) -> Result<CbevImage> {
    let inverse = homography.inverse()?;
    let mut out = RgbImage::new(GRID_SIZE as u32, GRID_SIZE as u32);
    if front.width() > 0 && front.height() > 0 {
        for row in 0..GRID_SIZE {
            for col in 0..GRID_SIZE {
                if let Some((sx, sy)) = ipm_source_location(&inverse, row, col, front.width(), front.height()) {
                    out.put_pixel(col as u32, row as u32, Rgb(sample_bilinear(front, sx, sy)));
                }
            }
        }
    }
    Ok(CbevImage { frame_id, image: out })
}
