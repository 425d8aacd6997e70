//! Deterministic synthetic road-scene generator and dataset file I/O.
//!
//! Each frame is rendered from a smoothed random curvature process: the
//! steering label, the drawn road geometry, and the per-pixel class mask all
//! derive from the same value, so downstream class attribution can be checked
//! exactly against ground truth.

use crate::error::{Error, Result};
use crate::util::atomic_write;
use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

/// Pixel class ids used by the generator and the ground-truth segmenter.
pub mod class {
    pub const SKY: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const LANE_MARKING: u8 = 2;
    pub const VEHICLE: u8 = 3;
    pub const ROADSIDE: u8 = 4;
    pub const COUNT: usize = 5;

    pub fn name(id: u8) -> &'static str {
        match id {
            SKY => "sky",
            ROAD => "road",
            LANE_MARKING => "lane-marking",
            VEHICLE => "vehicle",
            ROADSIDE => "roadside",
            _ => "unknown",
        }
    }
}

/// One synthetic frame: RGB image in `[0,1]`, normalized steering command in
/// `[-1,1]`, and its exact per-pixel class mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `(h, w, 3)` RGB, values in `[0,1]`.
    pub image: Array3<f32>,
    /// Normalized steering command, `|steering| <= 1`.
    pub steering: f32,
    /// `(h, w)` class ids, each in `0..5`.
    pub seg_mask: Array2<u8>,
}

/// Generator configuration. Identical configs produce bit-identical output.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub seed: u64,
    /// Gain applied to the smoothed curvature before clipping to `[-1,1]`.
    /// Zero forces every curvature increment (and steering label) to zero.
    pub curvature_scale: f64,
    /// Exponential-smoothing factor of the curvature random walk, in `(0,1)`.
    pub curvature_smoothness: f64,
    /// Per-frame probability that a vehicle is visible.
    pub vehicle_rate: f64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 16 || self.w < 32 {
            return Err(Error::config(format!(
                "image dimensions must be at least 16x32, got {}x{}",
                self.h, self.w
            )));
        }
        if self.frames < 1 {
            return Err(Error::config("frames must be >= 1"));
        }
        if !(self.curvature_smoothness > 0.0 && self.curvature_smoothness < 1.0) {
            return Err(Error::config(format!(
                "curvature_smoothness must lie in (0,1), got {}",
                self.curvature_smoothness
            )));
        }
        if !(0.0..=1.0).contains(&self.vehicle_rate) {
            return Err(Error::config(format!(
                "vehicle_rate must lie in [0,1], got {}",
                self.vehicle_rate
            )));
        }
        if !self.curvature_scale.is_finite() || self.curvature_scale < 0.0 {
            return Err(Error::config(format!(
                "curvature_scale must be finite and >= 0, got {}",
                self.curvature_scale
            )));
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 48,
            w: 64,
            frames: 2000,
            seed: 42,
            curvature_scale: 1.2,
            curvature_smoothness: 0.15,
            vehicle_rate: 0.15,
        }
    }
}

/// Per-frame random draws, always sampled in the same order so the stream
/// layout does not depend on earlier outcomes.
struct FrameDraws {
    curvature_increment: f64,
    vehicle_visible: bool,
    vehicle_depth: f64,
    vehicle_lateral: f64,
}

fn draw_frame(rng: &mut ChaCha8Rng, vehicle_rate: f64) -> FrameDraws {
    let g: f64 = StandardNormal.sample(rng);
    let u: f64 = rng.gen();
    let depth: f64 = rng.gen_range(0.30..0.72);
    let lateral: f64 = rng.gen_range(-0.55..0.55);
    FrameDraws {
        curvature_increment: g,
        vehicle_visible: u < vehicle_rate,
        vehicle_depth: depth,
        vehicle_lateral: lateral,
    }
}

/// Deterministic per-pixel noise in `[-1,1]` for surface texture.
fn pixel_noise(seed: u64, r: usize, c: usize) -> f32 {
    let mut x = seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (c as u64)
        .wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ((x >> 11) as f32 / (1u64 << 53) as f32) * 2.0 - 1.0
}

struct RoadGeometry {
    horizon: usize,
    rows_below: f64,
    w: f64,
}

impl RoadGeometry {
    fn new(h: usize, w: usize) -> Self {
        let horizon = ((h as f64) * 0.38).round() as usize;
        let horizon = horizon.clamp(1, h - 2);
        RoadGeometry {
            horizon,
            rows_below: (h - 1 - horizon).max(1) as f64,
            w: w as f64,
        }
    }

    /// Depth parameter: 0 at the horizon, 1 at the bottom row.
    fn depth(&self, row: usize) -> f64 {
        (row - self.horizon) as f64 / self.rows_below
    }

    /// Road center column; the car sits centered at the bottom, and the road
    /// bends toward the steering direction with distance.
    fn center(&self, steering: f64, t: f64) -> f64 {
        self.w / 2.0 + 0.42 * self.w * steering * (1.0 - t) * (1.0 - t)
    }

    fn half_width(&self, t: f64) -> f64 {
        (0.06 + 0.40 * t) * self.w
    }
}

/// Generates exactly `config.frames` samples. Pure function of the config.
pub fn generate_sequence(config: &SceneConfig) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let geom = RoadGeometry::new(config.h, config.w);
    let s = config.curvature_smoothness;
    let mut curvature = 0.0f64;
    let mut out = Vec::with_capacity(config.frames);
    for frame_idx in 0..config.frames {
        let draws = draw_frame(&mut rng, config.vehicle_rate);
        curvature = (1.0 - s) * curvature + s * draws.curvature_increment;
        let steering = (config.curvature_scale * curvature).clamp(-1.0, 1.0);
        out.push(render_frame(config, &geom, frame_idx, steering, &draws));
    }
    Ok(out)
}

fn render_frame(
    config: &SceneConfig,
    geom: &RoadGeometry,
    frame_idx: usize,
    steering: f64,
    draws: &FrameDraws,
) -> SceneSample {
    let (h, w) = (config.h, config.w);
    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut mask = Array2::<u8>::zeros((h, w));

    for r in 0..h {
        if r < geom.horizon {
            // sky gradient, brightest at the horizon
            let f = r as f32 / geom.horizon as f32;
            let col = [
                0.45 + 0.37 * f,
                0.65 + 0.23 * f,
                0.92 + 0.05 * f,
            ];
            for cidx in 0..w {
                put(&mut image, &mut mask, r, cidx, col, class::SKY);
            }
            continue;
        }
        let t = geom.depth(r);
        let center = geom.center(steering, t);
        let half = geom.half_width(t);
        let lane_half = (0.010 * w as f64).max(1.0);
        let dash_on = (r as i64 - 2 * frame_idx as i64).rem_euclid(10) < 6;
        for cidx in 0..w {
            let dx = (cidx as f64 + 0.5) - center;
            let n = pixel_noise(config.seed, r, cidx);
            if dx.abs() <= half {
                if dx.abs() <= lane_half && dash_on {
                    put(
                        &mut image,
                        &mut mask,
                        r,
                        cidx,
                        [0.93, 0.92, 0.80],
                        class::LANE_MARKING,
                    );
                } else {
                    let base = 0.33 + 0.08 * (1.0 - t) as f32;
                    let col = [
                        base + 0.015 * n,
                        base + 0.015 * n,
                        base + 0.02 + 0.015 * n,
                    ];
                    put(&mut image, &mut mask, r, cidx, col, class::ROAD);
                }
            } else {
                let col = [
                    0.20 + 0.03 * n,
                    0.50 + 0.04 * n,
                    0.19 + 0.02 * n,
                ];
                put(&mut image, &mut mask, r, cidx, col, class::ROADSIDE);
            }
        }
    }

    if draws.vehicle_visible {
        draw_vehicle(&mut image, &mut mask, geom, steering, draws, h, w);
    }

    SceneSample {
        image,
        steering: steering as f32,
        seg_mask: mask,
    }
}

fn draw_vehicle(
    image: &mut Array3<f32>,
    mask: &mut Array2<u8>,
    geom: &RoadGeometry,
    steering: f64,
    draws: &FrameDraws,
    h: usize,
    w: usize,
) {
    let t = draws.vehicle_depth;
    let bottom = geom.horizon as f64 + t * geom.rows_below;
    let veh_h = (0.30 * t * (h - geom.horizon) as f64).max(2.0);
    let veh_w = ((0.08 + 0.22 * t) * w as f64).max(2.0);
    let cx = geom.center(steering, t) + draws.vehicle_lateral * geom.half_width(t);
    let r0 = ((bottom - veh_h).floor().max(geom.horizon as f64)) as usize;
    let r1 = (bottom.floor() as usize).min(h - 1);
    let c0 = ((cx - veh_w / 2.0).floor().max(0.0)) as usize;
    let c1 = ((cx + veh_w / 2.0).floor() as usize).min(w - 1);
    for r in r0..=r1 {
        // top third gets a darker cabin band
        let cabin = (r as f64) < bottom - veh_h * 2.0 / 3.0;
        let col = if cabin {
            [0.32, 0.07, 0.06]
        } else {
            [0.70, 0.12, 0.10]
        };
        for c in c0..=c1 {
            put(image, mask, r, c, col, class::VEHICLE);
        }
    }
}

#[inline]
fn put(image: &mut Array3<f32>, mask: &mut Array2<u8>, r: usize, c: usize, col: [f32; 3], id: u8) {
    for (k, v) in col.iter().enumerate() {
        image[[r, c, k]] = v.clamp(0.0, 1.0);
    }
    mask[[r, c]] = id;
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"VNCP";
const VERSION: u32 = 1;

/// Serializes samples to the binary dataset format and writes atomically.
///
/// Layout (little-endian): magic `VNCP`, version u32, h u32, w u32, c u32=3,
/// frames u32; then per frame the image as `h*w*3` f32 row-major, steering
/// f32, and the class mask as `h*w` u8.
pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config("cannot write an empty dataset"));
    }
    let (h, w, c) = samples[0].image.dim();
    if c != 3 {
        return Err(Error::dim("images must have 3 channels"));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != (h, w, 3) || s.seg_mask.dim() != (h, w) {
            return Err(Error::dim(format!(
                "sample {i} shape {:?}/{:?} differs from first sample {}x{}",
                s.image.dim(),
                s.seg_mask.dim(),
                h,
                w
            )));
        }
    }
    let frame_bytes = h * w * 3 * 4 + 4 + h * w;
    let mut buf = Vec::with_capacity(24 + samples.len() * frame_bytes);
    buf.extend_from_slice(MAGIC);
    let mut tmp = [0u8; 4];
    for v in [VERSION, h as u32, w as u32, 3u32, samples.len() as u32] {
        LittleEndian::write_u32(&mut tmp, v);
        buf.extend_from_slice(&tmp);
    }
    for s in samples {
        for &px in s.image.as_slice().expect("standard layout") {
            LittleEndian::write_f32(&mut tmp, px);
            buf.extend_from_slice(&tmp);
        }
        LittleEndian::write_f32(&mut tmp, s.steering);
        buf.extend_from_slice(&tmp);
        buf.extend_from_slice(s.seg_mask.as_slice().expect("standard layout"));
    }
    atomic_write(path, &buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4, what)?))
    }
}

/// Reads a dataset written by [`write_dataset`]. Round-trips are lossless.
pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, expected 'VNCP'")));
    }
    let version_off = cur.pos as u64;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_off,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let c_off = cur.pos as u64;
    let c = cur.u32("channels")?;
    if c != 3 {
        return Err(Error::format(c_off, format!("channel count {c}, expected 3")));
    }
    let frames = cur.u32("frame count")? as usize;
    if h == 0 || w == 0 || frames == 0 {
        return Err(Error::format(8, "zero dimension in header".to_string()));
    }

    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let img_off = cur.pos as u64;
        let raw = cur.take(h * w * 3 * 4, &format!("frame {f} image"))?;
        let mut image = Array3::<f32>::zeros((h, w, 3));
        {
            let dst = image.as_slice_mut().expect("standard layout");
            LittleEndian::read_f32_into(raw, dst);
            for (i, v) in dst.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(v) {
                    return Err(Error::format(
                        img_off + 4 * i as u64,
                        format!("frame {f} pixel value {v} outside [0,1]"),
                    ));
                }
            }
        }
        let steer_off = cur.pos as u64;
        let steering = cur.f32(&format!("frame {f} steering"))?;
        if !steering.is_finite() || steering.abs() > 1.0 {
            return Err(Error::format(
                steer_off,
                format!("frame {f} steering {steering} outside [-1,1]"),
            ));
        }
        let mask_off = cur.pos as u64;
        let raw_mask = cur.take(h * w, &format!("frame {f} mask"))?;
        for (i, &m) in raw_mask.iter().enumerate() {
            if m as usize >= class::COUNT {
                return Err(Error::format(
                    mask_off + i as u64,
                    format!("frame {f} mask class {m} out of range"),
                ));
            }
        }
        let seg_mask = Array2::from_shape_vec((h, w), raw_mask.to_vec()).expect("sized above");
        out.push(SceneSample {
            image,
            steering,
            seg_mask,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after final frame", bytes.len() - cur.pos),
        ));
    }
    Ok(out)
}
