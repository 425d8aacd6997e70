//! PNG figure rendering: frame snapshots, diverging delta heatmaps, mask
//! overlays, and bar/box summary charts. Everything is drawn into raw pixel
//! buffers with no text, so identical inputs give identical pixel payloads.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Rgb, RgbImage};
use ndarray::{ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::util::{atomic_write, sha256_hex, BoxStats};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const BAR: Rgb<u8> = Rgb([70, 120, 180]);
const WHISKER: Rgb<u8> = Rgb([20, 20, 20]);
const BOX_FILL: Rgb<u8> = Rgb([158, 193, 224]);
const MEDIAN: Rgb<u8> = Rgb([170, 40, 40]);

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(h, w, 3)` floats in `[0,1]` to an 8-bit RGB raster.
pub fn render_frame(image: &ArrayView3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([
            to_byte(image[[r, c, 0]] as f64),
            to_byte(image[[r, c, 1]] as f64),
            to_byte(image[[r, c, 2]] as f64),
        ])
    })
}

/// Signed field to a blue–white–red diverging map, scaled symmetrically by
/// the largest magnitude so zero always lands on white.
pub fn render_heatmap(delta: &ArrayView2<f64>) -> RgbImage {
    let (h, w) = delta.dim();
    let scale = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = delta[[y as usize, x as usize]];
        let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
        if t >= 0.0 {
            // white -> red
            Rgb([255, to_byte(1.0 - t), to_byte(1.0 - t)])
        } else {
            // white -> blue
            Rgb([to_byte(1.0 + t), to_byte(1.0 + t), 255])
        }
    })
}

/// Frame with masked pixels tinted red, the rest dimmed slightly so the
/// highlighted region reads at a glance.
pub fn render_overlay(image: &ArrayView3<f32>, mask: &ArrayView2<bool>) -> RgbImage {
    let (h, w, _) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let px = [
            image[[r, c, 0]] as f64,
            image[[r, c, 1]] as f64,
            image[[r, c, 2]] as f64,
        ];
        if mask[[r, c]] {
            Rgb([
                to_byte(0.4 * px[0] + 0.6),
                to_byte(0.4 * px[1]),
                to_byte(0.4 * px[2]),
            ])
        } else {
            Rgb([to_byte(0.7 * px[0]), to_byte(0.7 * px[1]), to_byte(0.7 * px[2])])
        }
    })
}

/// Nearest-neighbour upscale so small frames stay legible.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let factor = factor.max(1);
    ImageBuffer::from_fn(img.width() * factor, img.height() * factor, |x, y| {
        *img.get_pixel(x / factor, y / factor)
    })
}

struct Canvas {
    img: RgbImage,
    left: u32,
    bottom: u32,
    plot_w: u32,
    plot_h: u32,
    lo: f64,
    hi: f64,
}

impl Canvas {
    /// Plot area with a fixed margin and a y-range padded so extremes don't
    /// sit on the frame.
    fn new(n_slots: usize, lo: f64, hi: f64) -> Canvas {
        let plot_w = (n_slots as u32 * 26).max(200);
        let plot_h = 220u32;
        let margin = 20u32;
        let img = ImageBuffer::from_pixel(plot_w + 2 * margin, plot_h + 2 * margin, BG);
        let pad = (hi - lo).abs().max(1e-12) * 0.05;
        Canvas {
            img,
            left: margin,
            bottom: margin + plot_h,
            plot_w,
            plot_h,
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn y_px(&self, v: f64) -> u32 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        self.bottom - (t * self.plot_h as f64).round() as u32
    }

    /// Horizontal extent of slot `i` of `n`, with one pixel of gutter.
    fn slot(&self, i: usize, n: usize) -> (u32, u32) {
        let span = self.plot_w as f64 / n as f64;
        let x0 = self.left as f64 + i as f64 * span;
        let x1 = x0 + span;
        ((x0 + 2.0) as u32, (x1 - 2.0).max(x0 + 3.0) as u32)
    }

    fn vline(&mut self, x: u32, y0: u32, y1: u32, color: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            if x < self.img.width() && y < self.img.height() {
                self.img.put_pixel(x, y, color);
            }
        }
    }

    fn hline(&mut self, x0: u32, x1: u32, y: u32, color: Rgb<u8>) {
        for x in x0.min(x1)..=x0.max(x1) {
            if x < self.img.width() && y < self.img.height() {
                self.img.put_pixel(x, y, color);
            }
        }
    }

    fn fill_rect(&mut self, x0: u32, x1: u32, y0: u32, y1: u32, color: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.hline(x0, x1, y, color);
        }
    }

    fn axes(&mut self) {
        let (left, bottom, top) = (self.left, self.bottom, self.bottom - self.plot_h);
        let right = self.left + self.plot_w;
        self.vline(left, top, bottom, AXIS);
        self.hline(left, right, bottom, AXIS);
        // Zero line when the range spans it.
        if self.lo < 0.0 && self.hi > 0.0 {
            let y = self.y_px(0.0);
            self.hline(left, right, y, Rgb([180, 180, 180]));
        }
    }
}

/// Bars with symmetric error whiskers, one slot per entry.
pub fn render_bar_chart(means: &[f64], stds: &[f64]) -> Result<RgbImage> {
    if means.is_empty() || means.len() != stds.len() {
        return Err(Error::dim(format!(
            "bar chart needs matching non-empty series, got {} means and {} stds",
            means.len(),
            stds.len()
        )));
    }
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for (m, s) in means.iter().zip(stds) {
        lo = lo.min(m - s);
        hi = hi.max(m + s);
    }
    let mut canvas = Canvas::new(means.len(), lo, hi);
    canvas.axes();
    let base = canvas.y_px(0.0);
    for (i, (&m, &s)) in means.iter().zip(stds).enumerate() {
        let (x0, x1) = canvas.slot(i, means.len());
        canvas.fill_rect(x0, x1, base, canvas.y_px(m), BAR);
        let mid = (x0 + x1) / 2;
        let (y_lo, y_hi) = (canvas.y_px(m - s), canvas.y_px(m + s));
        canvas.vline(mid, y_hi, y_lo, WHISKER);
        canvas.hline(mid.saturating_sub(2), mid + 2, y_hi, WHISKER);
        canvas.hline(mid.saturating_sub(2), mid + 2, y_lo, WHISKER);
    }
    Ok(canvas.img)
}

/// Classic five-number box plots, one slot per entry.
pub fn render_box_plot(stats: &[BoxStats]) -> Result<RgbImage> {
    if stats.is_empty() {
        return Err(Error::dim("box plot needs at least one entry"));
    }
    let lo = stats.iter().map(|b| b.min).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::numeric("box plot bounds are non-finite"));
    }
    let mut canvas = Canvas::new(stats.len(), lo, hi);
    canvas.axes();
    for (i, b) in stats.iter().enumerate() {
        let (x0, x1) = canvas.slot(i, stats.len());
        let mid = (x0 + x1) / 2;
        canvas.vline(mid, canvas.y_px(b.max), canvas.y_px(b.q3), WHISKER);
        canvas.vline(mid, canvas.y_px(b.q1), canvas.y_px(b.min), WHISKER);
        canvas.hline(mid.saturating_sub(2), mid + 2, canvas.y_px(b.max), WHISKER);
        canvas.hline(mid.saturating_sub(2), mid + 2, canvas.y_px(b.min), WHISKER);
        canvas.fill_rect(x0, x1, canvas.y_px(b.q3), canvas.y_px(b.q1), BOX_FILL);
        canvas.hline(x0, x1, canvas.y_px(b.q3), AXIS);
        canvas.hline(x0, x1, canvas.y_px(b.q1), AXIS);
        canvas.vline(x0, canvas.y_px(b.q3), canvas.y_px(b.q1), AXIS);
        canvas.vline(x1, canvas.y_px(b.q3), canvas.y_px(b.q1), AXIS);
        canvas.hline(x0, x1, canvas.y_px(b.median), MEDIAN);
    }
    Ok(canvas.img)
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format(0, format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    atomic_write(path, &png_bytes(img)?)
}

/// Hash of the decoded pixel payload (dimensions + raw RGB), so two PNGs
/// compare equal regardless of encoder metadata.
pub fn png_pixel_hash(path: &Path) -> Result<String> {
    let img = image::open(path)
        .map_err(|e| Error::format(0, format!("png decode {}: {e}", path.display())))?
        .to_rgb8();
    let mut bytes = Vec::with_capacity(8 + img.as_raw().len());
    bytes.extend_from_slice(&img.width().to_le_bytes());
    bytes.extend_from_slice(&img.height().to_le_bytes());
    bytes.extend_from_slice(img.as_raw());
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use tempfile::TempDir;

    fn checker_frame() -> Array3<f32> {
        Array3::from_shape_fn((8, 10, 3), |(r, c, ch)| {
            if (r + c) % 2 == 0 {
                [1.0, 0.5, 0.0][ch]
            } else {
                [0.0, 0.5, 1.0][ch]
            }
        })
    }

    #[test]
    fn frame_render_maps_unit_floats_to_bytes() {
        let img = render_frame(&checker_frame().view());
        assert_eq!((img.width(), img.height()), (10, 8));
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 128, 0]));
        assert_eq!(*img.get_pixel(1, 0), Rgb([0, 128, 255]));
    }

    #[test]
    fn heatmap_is_white_at_zero_saturated_at_extremes() {
        let mut delta = Array2::zeros((4, 4));
        delta[[0, 0]] = 2.0;
        delta[[3, 3]] = -2.0;
        delta[[1, 1]] = 1.0;
        let img = render_heatmap(&delta.view());
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 0, 0]));
        assert_eq!(*img.get_pixel(3, 3), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(2, 2), Rgb([255, 255, 255]));
        assert_eq!(*img.get_pixel(1, 1), Rgb([255, 128, 128]));
    }

    #[test]
    fn all_zero_field_renders_white() {
        let delta = Array2::zeros((3, 3));
        let img = render_heatmap(&delta.view());
        assert!(img.pixels().all(|p| *p == Rgb([255, 255, 255])));
    }

    #[test]
    fn overlay_tints_masked_pixels_red() {
        let frame = checker_frame();
        let mut mask = Array2::from_elem((8, 10), false);
        mask[[0, 0]] = true;
        let img = render_overlay(&frame.view(), &mask.view());
        let masked = img.get_pixel(0, 0);
        let free = img.get_pixel(2, 0);
        assert!(masked[0] > masked[1] && masked[0] > masked[2]);
        assert_eq!(*free, Rgb([to_byte(0.7), to_byte(0.35), 0]));
    }

    #[test]
    fn upscale_repeats_pixels() {
        let img = render_frame(&checker_frame().view());
        let big = upscale(&img, 4);
        assert_eq!((big.width(), big.height()), (40, 32));
        for dy in 0..4 {
            for dx in 0..4 {
                assert_eq!(big.get_pixel(dx, dy), img.get_pixel(0, 0));
            }
        }
    }

    #[test]
    fn bar_chart_rejects_mismatched_series() {
        assert!(render_bar_chart(&[1.0], &[]).is_err());
        assert!(render_bar_chart(&[], &[]).is_err());
    }

    #[test]
    fn bar_chart_paints_bars_and_whiskers() {
        let img = render_bar_chart(&[1.0, 2.0], &[0.5, 0.25]).unwrap();
        let bar_pixels = img.pixels().filter(|p| **p == BAR).count();
        let whisker_pixels = img.pixels().filter(|p| **p == WHISKER).count();
        assert!(bar_pixels > 100, "bars missing: {bar_pixels}");
        assert!(whisker_pixels > 10, "whiskers missing: {whisker_pixels}");
    }

    #[test]
    fn box_plot_paints_boxes_and_medians() {
        let b = BoxStats {
            min: 0.0,
            q1: 1.0,
            median: 1.5,
            q3: 2.0,
            max: 3.0,
        };
        let img = render_box_plot(&[b.clone(), b]).unwrap();
        assert!(img.pixels().any(|p| *p == BOX_FILL));
        assert!(img.pixels().any(|p| *p == MEDIAN));
    }

    #[test]
    fn png_round_trip_and_pixel_hash_are_stable() {
        let dir = TempDir::new().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let img = render_frame(&checker_frame().view());
        write_png(&a, &img).unwrap();
        write_png(&b, &img).unwrap();
        let ha = png_pixel_hash(&a).unwrap();
        let hb = png_pixel_hash(&b).unwrap();
        assert_eq!(ha, hb);

        let decoded = image::open(&a).unwrap().to_rgb8();
        assert_eq!(decoded, img);
    }

    #[test]
    fn pixel_hash_detects_content_change() {
        let dir = TempDir::new().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let img = render_frame(&checker_frame().view());
        let mut other = img.clone();
        other.put_pixel(0, 0, Rgb([1, 2, 3]));
        write_png(&a, &img).unwrap();
        write_png(&b, &other).unwrap();
        assert_ne!(png_pixel_hash(&a).unwrap(), png_pixel_hash(&b).unwrap());
    }
}
