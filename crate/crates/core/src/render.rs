//! PNG overlays: explanation segments, attribution heatmaps and prototype galleries.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::imageops::{self, FilterType as ResizeFilter};
use image::{ImageEncoder, Rgb, RgbImage};

use crate::attribution::AttributionMap;
use crate::encoder_explainer::{compose, ExplanationMap};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sem_core::PrototypeBank;
use crate::tensor_store::ActivationRecord;

/// Twenty fixed, well-separated colors; prototype `k` uses entry `k % 20`.
pub const PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [199, 199, 199],
    [219, 219, 141],
    [158, 218, 229],
];

/// Side of a gallery patch relative to one grid cell.
pub const CONTEXT_FACTOR: f64 = 2.0;

pub fn palette_color(prototype: usize) -> Rgb<u8> {
    Rgb(PALETTE[prototype % PALETTE.len()])
}

/// Diverging map: 0 → blue, 0.5 → white, 1 → red.
pub fn heat_color(t: f32) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let s = t * 2.0;
        (s, s, 1.0)
    } else {
        let s = (1.0 - t) * 2.0;
        (1.0, s, s)
    };
    Rgb([r, g, b].map(|v| (v * 255.0).round() as u8))
}

fn blend(base: Rgb<u8>, top: Rgb<u8>, alpha: f32) -> Rgb<u8> {
    let a = alpha.clamp(0.0, 1.0);
    Rgb(std::array::from_fn(|i| {
        (base.0[i] as f32 * (1.0 - a) + top.0[i] as f32 * a).round() as u8
    }))
}

/// Grid cell under image pixel `(x, y)` for nearest-neighbor upsampling.
fn cell_of(x: u32, y: u32, img: (u32, u32), grid: (usize, usize)) -> (usize, usize) {
    let row = (y as usize * grid.0 / img.1 as usize).min(grid.0 - 1);
    let col = (x as usize * grid.1 / img.0 as usize).min(grid.1 - 1);
    (row, col)
}

fn overlay_with(
    image: &RgbImage,
    grid: (usize, usize),
    alpha: f32,
    color: impl Fn(usize, usize) -> Rgb<u8>,
) -> RgbImage {
    let dims = image.dimensions();
    RgbImage::from_fn(dims.0, dims.1, |x, y| {
        let (r, c) = cell_of(x, y, dims, grid);
        blend(*image.get_pixel(x, y), color(r, c), alpha)
    })
}

/// Explanation map drawn nearest-neighbor over `image`, one palette color per prototype.
pub fn overlay_explanation(image: &RgbImage, map: &ExplanationMap, alpha: f32) -> RgbImage {
    overlay_with(image, (map.height, map.width), alpha, |r, c| palette_color(map.get(r, c)))
}

/// Attribution heatmap over `image`; values are normalized per map, red high, blue low.
pub fn overlay_attribution(image: &RgbImage, map: &AttributionMap, alpha: f32) -> RgbImage {
    let norm = map.normalized();
    overlay_with(image, map.dim(), alpha, |r, c| heat_color(norm[[r, c]]))
}

/// Pixel rectangle `(x0, y0, width, height)` of the patch centred on grid cell
/// `(row, col)`: the cell scaled by [`CONTEXT_FACTOR`], shifted to stay inside the image.
pub fn patch_rect(
    row: usize,
    col: usize,
    grid: (usize, usize),
    image: (u32, u32),
) -> (u32, u32, u32, u32) {
    let axis = |index: usize, cells: usize, extent: u32| {
        let cell = extent as f64 / cells as f64;
        let size = (cell * CONTEXT_FACTOR).round().clamp(1.0, extent as f64);
        let center = (index as f64 + 0.5) * cell;
        let start = (center - size / 2.0).round().clamp(0.0, extent as f64 - size);
        (start as u32, size as u32)
    };
    let (x0, w) = axis(col, grid.1, image.0);
    let (y0, h) = axis(row, grid.0, image.1);
    (x0, y0, w, h)
}

/// Training grid cell closest to one prototype.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GallerySource {
    pub prototype: usize,
    pub sample_id: usize,
    pub row: usize,
    pub col: usize,
    pub squared_distance: f64,
}

/// For every prototype of `bank`, the stored training composite row nearest to it.
/// Ties keep the earliest record and row.
pub fn find_gallery_sources<I>(bank: &PrototypeBank, records: I) -> Result<Vec<Option<GallerySource>>>
where
    I: IntoIterator<Item = Result<ActivationRecord>>,
{
    let depth = bank.depth_from().ok_or_else(|| {
        Error::Config(format!("bank at {:?} is not a composite bank", bank.location()))
    })?;
    let mut best: Vec<Option<GallerySource>> = vec![None; bank.len()];
    for record in records {
        let record = record?;
        let composite = compose(&record, depth)?;
        if composite.dim() != bank.dim() {
            return Err(Error::shape("composite dim", bank.dim(), composite.dim()));
        }
        for r in 0..composite.resolution() {
            let row = composite.row(r);
            for (k, slot) in best.iter_mut().enumerate() {
                let d = linalg::squared_l2(row, bank.prototype(k));
                if slot.is_none_or(|s| d < s.squared_distance) {
                    *slot = Some(GallerySource {
                        prototype: k,
                        sample_id: record.sample_id,
                        row: r / composite.width,
                        col: r % composite.width,
                        squared_distance: d,
                    });
                }
            }
        }
    }
    Ok(best)
}

pub const GALLERY_TILE: u32 = 64;
pub const GALLERY_BORDER: u32 = 4;

/// Patches side by side, each resized to a square tile and framed in its prototype's
/// palette color. `image_of(sample_id)` supplies the source images.
pub fn render_gallery(
    sources: &[GallerySource],
    grid: (usize, usize),
    mut image_of: impl FnMut(usize) -> Result<RgbImage>,
) -> Result<RgbImage> {
    let cell = GALLERY_TILE + 2 * GALLERY_BORDER;
    let mut out = RgbImage::from_pixel(cell * sources.len().max(1) as u32, cell, Rgb([255; 3]));
    for (i, src) in sources.iter().enumerate() {
        let image = image_of(src.sample_id)?;
        let (x0, y0, w, h) = patch_rect(src.row, src.col, grid, image.dimensions());
        let patch = imageops::crop_imm(&image, x0, y0, w, h).to_image();
        let tile = imageops::resize(&patch, GALLERY_TILE, GALLERY_TILE, ResizeFilter::Nearest);
        let left = i as u32 * cell;
        let frame = palette_color(src.prototype);
        for y in 0..cell {
            for x in 0..cell {
                out.put_pixel(left + x, y, frame);
            }
        }
        imageops::replace(
            &mut out,
            &tile,
            (left + GALLERY_BORDER) as i64,
            GALLERY_BORDER as i64,
        );
    }
    Ok(out)
}

/// Prototype ids present in `map`, ascending.
pub fn present_prototypes(map: &ExplanationMap) -> Vec<usize> {
    map.histogram()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(k, _)| k)
        .collect()
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// PNG with fixed encoder settings, so equal images give equal bytes.
pub fn save_png(image: &RgbImage, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Default, FilterType::Adaptive)
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(path.to_path_buf())
}

/// File names of the three per-sample renderings.
pub fn render_names(sample_id: usize) -> [String; 3] {
    ["explanation", "attribution", "gallery"].map(|kind| format!("sample_{sample_id}_{kind}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct_and_cycles() {
        for i in 0..20 {
            for j in i + 1..20 {
                assert_ne!(PALETTE[i], PALETTE[j]);
            }
        }
        assert_eq!(palette_color(23), palette_color(3));
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat_color(0.0), Rgb([0, 0, 255]));
        assert_eq!(heat_color(0.5), Rgb([255, 255, 255]));
        assert_eq!(heat_color(1.0), Rgb([255, 0, 0]));
    }

    #[test]
    fn patch_geometry() {
        // 7x7 grid over 224 px: cells of 32 px, patches of 64 px
        assert_eq!(patch_rect(3, 3, (7, 7), (224, 224)), (80, 80, 64, 64));
        assert_eq!(patch_rect(0, 0, (7, 7), (224, 224)), (0, 0, 64, 64));
        assert_eq!(patch_rect(6, 6, (7, 7), (224, 224)), (160, 160, 64, 64));
        // a 1x1 grid covers the whole image
        assert_eq!(patch_rect(0, 0, (1, 1), (50, 30)), (0, 0, 50, 30));
    }

    #[test]
    fn explanation_overlay_is_nearest_neighbor() {
        let map = ExplanationMap {
            height: 2,
            width: 2,
            ids: vec![0, 1, 2, 3],
            depth_from: 2,
            num_prototypes: 4,
            num_classes: 4,
            k_per_class: 1,
        };
        let base = RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]));
        let out = overlay_explanation(&base, &map, 1.0);
        assert_eq!(*out.get_pixel(0, 0), palette_color(0));
        assert_eq!(*out.get_pixel(3, 0), palette_color(1));
        assert_eq!(*out.get_pixel(1, 3), palette_color(2));
        assert_eq!(*out.get_pixel(2, 2), palette_color(3));
        assert_eq!(present_prototypes(&map), vec![0, 1, 2, 3]);
    }

    #[test]
    fn png_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(9, 5, |x, y| Rgb([x as u8 * 20, y as u8 * 40, 7]));
        save_png(&img, dir.path().join("a.png")).unwrap();
        save_png(&img, dir.path().join("b.png")).unwrap();
        let a = std::fs::read(dir.path().join("a.png")).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap());
        assert_eq!(load_rgb(dir.path().join("a.png")).unwrap(), img);
    }
}
