//! Overlapping tile grids over raster slides, background detection, fixed
//! color-histogram features, and stitching of tile scores back into a
//! per-pixel map.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::bag::SlideBag;
use crate::error::{Error, Result};
use crate::pnm::{GrayImage, RgbImage};
use crate::synth::slide_rng;

pub const DEFAULT_TILE_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 128;

/// Channel threshold and pixel share of the background rule.
pub const BACKGROUND_LEVEL: u8 = 200;
pub const BACKGROUND_SHARE: (usize, usize) = (9, 10);

pub const HISTOGRAM_BINS: usize = 8;
/// 3 channels x 8 bins, then per-channel mean and std.
pub const FEATURE_DIM: usize = 3 * HISTOGRAM_BINS + 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Top-left corners in row-major order.
    pub positions: Vec<(usize, usize)>,
}

impl TileGrid {
    /// Distance between neighbouring tile origins; neighbours share
    /// `overlap` pixels.
    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn axis_positions(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p + tile <= dim).collect();
    let last = *out.last().expect("dim >= tile");
    if last + tile < dim {
        out.push(dim - tile);
    }
    out
}

/// Tiles of `tile_size` pixels at a stride of `tile_size - overlap`; the last
/// tile of each axis is shifted back to end on the image border.
pub fn tile_grid(width: usize, height: usize, tile_size: usize, overlap: usize) -> Result<TileGrid> {
    if tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    if overlap >= tile_size {
        return Err(Error::invalid(format!("overlap {overlap} leaves no stride for tile {tile_size}")));
    }
    if tile_size > width || tile_size > height {
        return Err(Error::invalid(format!(
            "tile size {tile_size} exceeds image {width}x{height}"
        )));
    }
    let stride = tile_size - overlap;
    let xs = axis_positions(width, tile_size, stride);
    let ys = axis_positions(height, tile_size, stride);
    let positions = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TileGrid {
        width,
        height,
        tile_size,
        overlap,
        positions,
    })
}

/// True when at least 90% of pixels have every channel strictly above 200.
pub fn is_background(tile: &RgbImage) -> bool {
    let total = tile.width * tile.height;
    let bright = tile
        .data
        .chunks_exact(3)
        .filter(|px| px.iter().all(|&c| c > BACKGROUND_LEVEL))
        .count();
    total > 0 && bright * BACKGROUND_SHARE.1 >= total * BACKGROUND_SHARE.0
}

/// Normalized 8-bin histogram per channel followed by per-channel mean and
/// standard deviation, intensities scaled to `[0, 1]`.
pub fn extract_features(tile: &RgbImage) -> Vec<f64> {
    let total = (tile.width * tile.height) as f64;
    let mut hist = [[0usize; HISTOGRAM_BINS]; 3];
    let mut sum = [0.0f64; 3];
    for px in tile.data.chunks_exact(3) {
        for c in 0..3 {
            hist[c][px[c] as usize * HISTOGRAM_BINS / 256] += 1;
            sum[c] += px[c] as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let mut var = [0.0f64; 3];
    for px in tile.data.chunks_exact(3) {
        for c in 0..3 {
            let d = px[c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for channel in &hist {
        out.extend(channel.iter().map(|&h| h as f64 / total));
    }
    out.extend(mean.iter().map(|m| m / 255.0));
    out.extend(var.iter().map(|v| (v / total).sqrt() / 255.0));
    out
}

/// Tiles of one raster slide: which are background, and features of the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledSlide {
    pub grid: TileGrid,
    pub background: Vec<bool>,
    /// One row per tissue tile, in grid order.
    pub features: Array2<f64>,
    /// Majority tumor label of each tissue tile, when a pixel mask is given.
    pub truth: Option<Vec<u8>>,
}

impl TiledSlide {
    pub fn tissue_tiles(&self) -> usize {
        self.features.nrows()
    }
}

/// Tiles a raster, drops background tiles and extracts features of the rest.
/// With `flip_seed`, each tissue tile is randomly flipped horizontally and
/// vertically before extraction (inert for the histogram features).
pub fn tile_slide(
    image: &RgbImage,
    truth_mask: Option<&[u8]>,
    tile_size: usize,
    overlap: usize,
    flip_seed: Option<u64>,
) -> Result<TiledSlide> {
    let grid = tile_grid(image.width, image.height, tile_size, overlap)?;
    if let Some(mask) = truth_mask {
        if mask.len() != image.width * image.height {
            return Err(Error::DimensionMismatch {
                expected: image.width * image.height,
                actual: mask.len(),
            });
        }
    }
    let per_tile: Vec<(bool, Vec<f64>, u8)> = grid
        .positions
        .par_iter()
        .enumerate()
        .map(|(index, &(x, y))| {
            let mut tile = image.crop(x, y, tile_size);
            if is_background(&tile) {
                return (true, Vec::new(), 0);
            }
            if let Some(seed) = flip_seed {
                let mut rng = slide_rng(seed, index as u64);
                if rng.random::<bool>() {
                    tile = tile.flip_horizontal();
                }
                if rng.random::<bool>() {
                    tile = tile.flip_vertical();
                }
            }
            let label = truth_mask.map_or(0, |mask| {
                let mut tumor = 0usize;
                for row in y..y + tile_size {
                    tumor += mask[row * image.width + x..row * image.width + x + tile_size]
                        .iter()
                        .filter(|&&m| m == 1)
                        .count();
                }
                u8::from(2 * tumor >= tile_size * tile_size)
            });
            (false, extract_features(&tile), label)
        })
        .collect();
    let background: Vec<bool> = per_tile.iter().map(|t| t.0).collect();
    let rows: Vec<&(bool, Vec<f64>, u8)> = per_tile.iter().filter(|t| !t.0).collect();
    let mut features = Array2::zeros((rows.len(), FEATURE_DIM));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.1.iter().enumerate() {
            features[[i, j]] = v;
        }
    }
    let truth = truth_mask.map(|_| rows.iter().map(|r| r.2).collect());
    Ok(TiledSlide {
        grid,
        background,
        features,
        truth,
    })
}

impl TiledSlide {
    /// Bag of the tissue tiles. Fails when every tile is background.
    pub fn to_bag(&self, id: &str, percent: f64) -> Result<SlideBag> {
        let mut bag = SlideBag::new(
            id,
            self.features.clone(),
            percent,
            Some(u8::from(percent > 0.0)),
            self.truth.clone(),
        )?;
        bag.true_percent = Some(percent);
        Ok(bag)
    }
}

/// Per-pixel probability map; pixels covered only by background tiles are
/// flagged and carry no value.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub background: Vec<bool>,
}

impl SegmentationMap {
    /// 8-bit rendering; background pixels are 0.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .values
            .iter()
            .zip(&self.background)
            .map(|(&v, &bg)| if bg { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// 255 on background, 0 on tissue.
    pub fn background_mask(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.background.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }
}

/// Averages the scores of every tissue tile covering each pixel.
/// `tile_scores` holds one score per non-background tile, in grid order.
pub fn stitch_map(grid: &TileGrid, background: &[bool], tile_scores: &[f64]) -> Result<SegmentationMap> {
    if background.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            actual: background.len(),
        });
    }
    let tissue = background.iter().filter(|&&b| !b).count();
    if tile_scores.len() != tissue {
        return Err(Error::DimensionMismatch {
            expected: tissue,
            actual: tile_scores.len(),
        });
    }
    let (w, h, t) = (grid.width, grid.height, grid.tile_size);
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    let mut scores = tile_scores.iter();
    for (&(x, y), &bg) in grid.positions.iter().zip(background) {
        if bg {
            continue;
        }
        let s = *scores.next().expect("counted above");
        for row in y..y + t {
            let base = row * w;
            for i in base + x..base + x + t {
                sum[i] += s;
                count[i] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    let background = count.iter().map(|&c| c == 0).collect();
    Ok(SegmentationMap {
        width: w,
        height: h,
        values,
        background,
    })
}
