//! Automatic latent perturbation: perturbed reconstructions per latent
//! dimension, difference binarization, connected-component class attribution,
//! steering impact scores, and dataset-level aggregation.
//!
//! Latent dimensions are addressed 1-based throughout this module; that is
//! the numbering the reports and figures use.

use crate::error::{Error, Result};
use crate::float::{c, Real};
use crate::model::SteerModel;
use crate::scenegen::SceneSample;
use crate::util::{mean_std, quantile, BoxStats};
use crate::vae::to_planar_batch;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Maps a latent vector to a planar image `(3, h, w)`.
pub trait LatentDecoder<F> {
    fn decode_latent(&self, z: &ArrayView1<F>) -> Array3<F>;
}

/// Single-step steering evaluation of a latent vector from a zero hidden
/// state.
pub trait SteerHead<F> {
    fn steer(&self, z: &ArrayView1<F>) -> F;
}

impl<F: Real> LatentDecoder<F> for SteerModel<F> {
    fn decode_latent(&self, z: &ArrayView1<F>) -> Array3<F> {
        self.decode_one(z)
    }
}

impl<F: Real> SteerHead<F> for SteerModel<F> {
    fn steer(&self, z: &ArrayView1<F>) -> F {
        self.steer_one(z)
    }
}

/// Per-pixel classifier: `(h, w, 3)` image in `[0,1]` to `(h, w)` class ids.
/// Any external segmentation model can stand in behind this interface.
pub trait Segmenter {
    fn segment(&self, image: &ArrayView3<f32>) -> Result<Array2<u8>>;
}

/// Ground-truth oracle for synthetic scenes: serves the recorded class map,
/// checking only that the queried image has the matching shape.
pub struct OracleSegmenter {
    pub seg_mask: Array2<u8>,
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, image: &ArrayView3<f32>) -> Result<Array2<u8>> {
        let (h, w, _) = image.dim();
        if self.seg_mask.dim() != (h, w) {
            return Err(Error::dim(format!(
                "oracle mask is {:?}, image is ({h}, {w})",
                self.seg_mask.dim()
            )));
        }
        Ok(self.seg_mask.clone())
    }
}

/// Latent posterior of one frame with noise off: `z = mu`,
/// `sigma = exp(log_var / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<F> {
    pub z: Array1<F>,
    pub sigma: Array1<F>,
}

pub fn encode_sample<F: Real>(model: &SteerModel<F>, sample: &SceneSample) -> Result<LatentCode<F>> {
    let (h, w) = model.cfg.vae.in_hw;
    if sample.image.dim() != (h, w, 3) {
        return Err(Error::dim(format!(
            "frame is {:?}, model expects ({h}, {w}, 3)",
            sample.image.dim()
        )));
    }
    let x = to_planar_batch::<F>(&[sample]);
    let (z, sigma) = model.encode_one(&x.index_axis(Axis(0), 0));
    Ok(LatentCode { z, sigma })
}

fn check_dim<F>(code: &LatentCode<F>, j: usize) -> Result<usize> {
    let m = code.z.len();
    if j < 1 || j > m {
        return Err(Error::index(format!("latent dim {j} out of range 1..={m}")));
    }
    Ok(j - 1)
}

fn perturbed_pair<F: Real>(code: &LatentCode<F>, idx: usize) -> (Array1<F>, Array1<F>) {
    let two_sigma = c::<F>(2.0) * code.sigma[idx];
    let mut zp = code.z.clone();
    let mut zm = code.z.clone();
    zp[idx] = zp[idx] + two_sigma;
    zm[idx] = zm[idx] - two_sigma;
    (zp, zm)
}

/// Reconstructions of `z ± 2 sigma_j e_j` (dimension `j` is 1-based).
pub fn perturb_reconstructions<F: Real>(
    code: &LatentCode<F>,
    j: usize,
    decoder: &dyn LatentDecoder<F>,
) -> Result<(Array3<F>, Array3<F>)> {
    let idx = check_dim(code, j)?;
    let (zp, zm) = perturbed_pair(code, idx);
    Ok((decoder.decode_latent(&zp.view()), decoder.decode_latent(&zm.view())))
}

/// Signed difference of the two reconstructions, channel-mean reduced,
/// peak-normalized, and thresholded at the given quantile of its own values.
///
/// When the peak is at or below `1e-8` the normalization would be degenerate:
/// the raw reduced difference is returned with an all-false mask.
pub fn diff_and_binarize<F: Real>(
    xhat_plus: &ArrayView3<F>,
    xhat_minus: &ArrayView3<F>,
    threshold_quantile: f64,
) -> Result<(Array2<f64>, Array2<bool>)> {
    if xhat_plus.dim() != xhat_minus.dim() {
        return Err(Error::dim(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            xhat_plus.dim(),
            xhat_minus.dim()
        )));
    }
    if !(threshold_quantile > 0.0 && threshold_quantile < 1.0) {
        return Err(Error::config(format!(
            "threshold quantile must lie in (0,1), got {threshold_quantile}"
        )));
    }
    let (chans, h, w) = xhat_plus.dim();
    let inv_c = 1.0 / chans as f64;
    let mut delta = Array2::<f64>::zeros((h, w));
    for ch in 0..chans {
        for r in 0..h {
            for col in 0..w {
                delta[[r, col]] +=
                    (xhat_plus[[ch, r, col]] - xhat_minus[[ch, r, col]]).to_f64() * inv_c;
            }
        }
    }
    let max = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 1e-8) {
        return Ok((delta, Array2::from_elem((h, w), false)));
    }
    delta.mapv_inplace(|v| v / max);
    let flat: Vec<f64> = delta.iter().copied().collect();
    let cutoff = quantile(&flat, threshold_quantile);
    let mask = delta.mapv(|v| v > cutoff);
    Ok((delta, mask))
}

/// Labels the connected components of `mask` (4-connectivity) and counts,
/// per region, the majority class of `seg_mask` over its pixels; ties go to
/// the lowest class id.
pub fn count_region_classes(
    mask: &ArrayView2<bool>,
    seg_mask: &ArrayView2<u8>,
) -> Result<(BTreeMap<u8, usize>, usize)> {
    if mask.dim() != seg_mask.dim() {
        return Err(Error::dim(format!(
            "mask is {:?}, class map is {:?}",
            mask.dim(),
            seg_mask.dim()
        )));
    }
    let (h, w) = mask.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    let mut regions = 0usize;
    let mut queue: Vec<(usize, usize)> = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[[r0, c0]] || visited[[r0, c0]] {
                continue;
            }
            regions += 1;
            let mut hist = [0usize; 256];
            visited[[r0, c0]] = true;
            queue.clear();
            queue.push((r0, c0));
            while let Some((r, col)) = queue.pop() {
                hist[seg_mask[[r, col]] as usize] += 1;
                let mut push = |rr: usize, cc: usize, visited: &mut Array2<bool>| {
                    if mask[[rr, cc]] && !visited[[rr, cc]] {
                        visited[[rr, cc]] = true;
                        queue.push((rr, cc));
                    }
                };
                if r > 0 {
                    push(r - 1, col, &mut visited);
                }
                if r + 1 < h {
                    push(r + 1, col, &mut visited);
                }
                if col > 0 {
                    push(r, col - 1, &mut visited);
                }
                if col + 1 < w {
                    push(r, col + 1, &mut visited);
                }
            }
            // strict comparison over ascending ids: ties keep the lowest id
            let mut majority = (0usize, 0usize);
            for (id, &cnt) in hist.iter().enumerate() {
                if cnt > majority.1 {
                    majority = (id, cnt);
                }
            }
            *counts.entry(majority.0 as u8).or_insert(0) += 1;
        }
    }
    Ok((counts, regions))
}

/// Full perturbation analysis of one latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AlpDimensionResult<F> {
    /// 1-based latent dimension.
    pub dim: usize,
    pub xhat_plus: Array3<F>,
    pub xhat_minus: Array3<F>,
    pub delta: Array2<f64>,
    pub mask: Array2<bool>,
    pub region_count: usize,
    pub class_counts: BTreeMap<u8, usize>,
}

/// Runs the perturbation pipeline over every latent dimension of one frame:
/// encode once (noise off), then perturb / binarize / attribute per
/// dimension. Deterministic given the frame and the model parameters.
pub fn alp_analyze<F: Real>(
    image: &ArrayView3<f32>,
    model: &SteerModel<F>,
    segmenter: &dyn Segmenter,
    threshold_quantile: f64,
) -> Result<Vec<AlpDimensionResult<F>>> {
    let (h, w) = model.cfg.vae.in_hw;
    if image.dim() != (h, w, 3) {
        return Err(Error::dim(format!(
            "frame is {:?}, model expects ({h}, {w}, 3)",
            image.dim()
        )));
    }
    let seg = segmenter.segment(image)?;
    if seg.dim() != (h, w) {
        return Err(Error::dim(format!(
            "segmenter returned {:?} for a ({h}, {w}) frame",
            seg.dim()
        )));
    }
    let x = hwc_to_planar::<F>(image);
    let (z, sigma) = model.encode_one(&x.view());
    let code = LatentCode { z, sigma };
    let m = code.z.len();
    let mut results = Vec::with_capacity(m);
    for j in 1..=m {
        let (xhat_plus, xhat_minus) = perturb_reconstructions(&code, j, model)?;
        let (delta, mask) =
            diff_and_binarize(&xhat_plus.view(), &xhat_minus.view(), threshold_quantile)?;
        let (class_counts, region_count) = count_region_classes(&mask.view(), &seg.view())?;
        results.push(AlpDimensionResult {
            dim: j,
            xhat_plus,
            xhat_minus,
            delta,
            mask,
            region_count,
            class_counts,
        });
    }
    Ok(results)
}

fn hwc_to_planar<F: Real>(image: &ArrayView3<f32>) -> Array3<F> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((3, h, w), |(ch, r, col)| c::<F>(image[[r, col, ch]] as f64))
}

/// Steering sensitivity of one latent dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactRecord<F> {
    /// 1-based latent dimension.
    pub dim: usize,
    pub y0: F,
    pub y_plus: F,
    pub y_minus: F,
    pub d_minus: F,
    pub d_plus: F,
    pub d_per: F,
    /// Exactly `(d_minus + d_plus + d_per) / 3`.
    pub impact: F,
}

pub fn impact_score<F: Real>(
    code: &LatentCode<F>,
    j: usize,
    head: &dyn SteerHead<F>,
) -> Result<ImpactRecord<F>> {
    let idx = check_dim(code, j)?;
    let y0 = head.steer(&code.z.view());
    let (zp, zm) = perturbed_pair(code, idx);
    let y_plus = head.steer(&zp.view());
    let y_minus = head.steer(&zm.view());
    let d_minus = (y_minus - y0).abs();
    let d_plus = (y_plus - y0).abs();
    let d_per = (y_plus - y_minus).abs();
    Ok(ImpactRecord {
        dim: j,
        y0,
        y_plus,
        y_minus,
        d_minus,
        d_plus,
        d_per,
        impact: (d_minus + d_plus + d_per) / c::<F>(3.0),
    })
}

/// What perturbed predictions are scored against in the aggregate report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReference {
    /// Squared error against the recorded steering label (default).
    GroundTruth,
    /// Squared error against the unperturbed prediction.
    Unperturbed,
}

/// Mean and population std of the squared steering error under the two
/// perturbation directions of one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimErrorStats {
    pub mean_minus: f64,
    pub std_minus: f64,
    pub mean_plus: f64,
    pub std_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub sample_size: usize,
    pub decile: f64,
    /// Per latent dimension, indexed 0 for dim 1.
    pub per_dim_error: Vec<DimErrorStats>,
    /// Distribution of the unperturbed per-frame squared prediction error.
    pub error_box: BoxStats,
    /// Frames in each decile group.
    pub decile_frames: usize,
    /// Per-dimension impact distribution over the highest-error frames.
    pub top_decile: Vec<BoxStats>,
    /// Per-dimension impact distribution over the lowest-error frames.
    pub bottom_decile: Vec<BoxStats>,
}

/// Dataset-level perturbation sensitivity: evaluates `sample_size` frames
/// (an evenly strided, deterministic subset), scores every dimension's
/// perturbed predictions, and summarizes impact distributions for the
/// highest- and lowest-error deciles.
pub fn aggregate_impact<F: Real>(
    dataset: &[SceneSample],
    model: &SteerModel<F>,
    sample_size: usize,
    decile: f64,
    error_reference: ErrorReference,
) -> Result<AggregateReport> {
    if sample_size == 0 {
        return Err(Error::config("sample_size must be >= 1"));
    }
    if sample_size > dataset.len() {
        return Err(Error::config(format!(
            "sample_size {} exceeds dataset size {}",
            sample_size,
            dataset.len()
        )));
    }
    if !(decile > 0.0 && decile <= 0.5) {
        return Err(Error::config(format!(
            "decile must lie in (0, 0.5], got {decile}"
        )));
    }
    let m = model.cfg.vae.latent_dim;
    let n = dataset.len();
    let mut frame_error = Vec::with_capacity(sample_size);
    // per dim: squared errors under -2 sigma / +2 sigma, and impact scores
    let mut err_minus = vec![Vec::with_capacity(sample_size); m];
    let mut err_plus = vec![Vec::with_capacity(sample_size); m];
    let mut impacts = vec![Vec::with_capacity(sample_size); m];
    for i in 0..sample_size {
        let sample = &dataset[i * n / sample_size];
        let code = encode_sample(model, sample)?;
        let y0 = model.steer_one(&code.z.view()).to_f64();
        let label = sample.steering as f64;
        frame_error.push((y0 - label) * (y0 - label));
        let reference = match error_reference {
            ErrorReference::GroundTruth => label,
            ErrorReference::Unperturbed => y0,
        };
        for j in 1..=m {
            let rec = impact_score(&code, j, model)?;
            let ep = rec.y_plus.to_f64() - reference;
            let em = rec.y_minus.to_f64() - reference;
            err_plus[j - 1].push(ep * ep);
            err_minus[j - 1].push(em * em);
            impacts[j - 1].push(rec.impact.to_f64());
        }
    }

    let per_dim_error = (0..m)
        .map(|d| {
            let (mean_minus, std_minus) = mean_std(&err_minus[d]);
            let (mean_plus, std_plus) = mean_std(&err_plus[d]);
            DimErrorStats {
                mean_minus,
                std_minus,
                mean_plus,
                std_plus,
            }
        })
        .collect();
    let error_box = BoxStats::from_values(&frame_error).expect("sample_size >= 1");

    // rank frames by unperturbed prediction error, ties broken by position
    let mut order: Vec<usize> = (0..sample_size).collect();
    order.sort_by(|&a, &b| {
        frame_error[b]
            .total_cmp(&frame_error[a])
            .then(a.cmp(&b))
    });
    let k = (decile * sample_size as f64).ceil() as usize;
    let k = k.clamp(1, sample_size);
    let decile_stats = |frames: &[usize]| -> Vec<BoxStats> {
        (0..m)
            .map(|d| {
                let vals: Vec<f64> = frames.iter().map(|&f| impacts[d][f]).collect();
                BoxStats::from_values(&vals).expect("decile group is non-empty")
            })
            .collect()
    };
    let top_decile = decile_stats(&order[..k]);
    let bottom_decile = decile_stats(&order[sample_size - k..]);

    Ok(AggregateReport {
        sample_size,
        decile,
        per_dim_error,
        error_box,
        decile_frames: k,
        top_decile,
        bottom_decile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SteerModel};
    use crate::scenegen::{self, generate_sequence, SceneConfig};
    use crate::vae::VaeConfig;
    use ndarray::arr1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Decoder stub: pixel p of channel ch is `base + sum_j w[(ch,p), j] z_j`.
    struct LinearDecoder {
        w: ndarray::Array2<f64>, // (3*h*w, m)
        h: usize,
        w_: usize,
    }

    impl LatentDecoder<f64> for LinearDecoder {
        fn decode_latent(&self, z: &ArrayView1<f64>) -> Array3<f64> {
            let flat = self.w.dot(z);
            flat.into_shape_with_order((3, self.h, self.w_)).unwrap()
        }
    }

    fn code(z: &[f64], sigma: &[f64]) -> LatentCode<f64> {
        LatentCode {
            z: arr1(z),
            sigma: arr1(sigma),
        }
    }

    #[test]
    fn zero_sigma_yields_identical_reconstructions() {
        let dec = LinearDecoder {
            w: ndarray::Array2::from_shape_fn((3 * 2 * 2, 3), |(p, j)| (p + j) as f64 * 0.1),
            h: 2,
            w_: 2,
        };
        let code = code(&[0.3, -0.2, 0.5], &[0.4, 0.0, 0.1]);
        let (p, m) = perturb_reconstructions(&code, 2, &dec).unwrap();
        assert_eq!(p, m);
    }

    #[test]
    fn linear_decoder_difference_is_four_sigma_times_column() {
        let w = ndarray::Array2::from_shape_fn((3 * 2 * 2, 3), |(p, j)| {
            ((p * 7 + j * 13) % 11) as f64 * 0.07 - 0.3
        });
        let dec = LinearDecoder {
            w: w.clone(),
            h: 2,
            w_: 2,
        };
        let code = code(&[0.3, -0.2, 0.5], &[0.4, 0.25, 0.1]);
        for j in 1..=3usize {
            let (p, m) = perturb_reconstructions(&code, j, &dec).unwrap();
            let diff = &p - &m;
            let expect = 4.0 * code.sigma[j - 1];
            for (pi, (&d, &wv)) in diff.iter().zip(w.column(j - 1).iter()).enumerate() {
                assert!(
                    (d - expect * wv).abs() < 1e-12,
                    "pixel {pi} of dim {j}: {d} vs {}",
                    expect * wv
                );
            }
        }
    }

    #[test]
    fn out_of_range_dim_is_an_index_error() {
        let dec = LinearDecoder {
            w: ndarray::Array2::zeros((12, 3)),
            h: 2,
            w_: 2,
        };
        let code = code(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        assert!(matches!(
            perturb_reconstructions(&code, 0, &dec),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            perturb_reconstructions(&code, 4, &dec),
            Err(Error::Index(_))
        ));
        let head_err = impact_score(&code, 4, &ZeroHead);
        assert!(matches!(head_err, Err(Error::Index(_))));
    }

    #[test]
    fn identical_inputs_give_zero_delta_and_empty_mask() {
        let img = Array3::from_elem((3, 4, 4), 0.7f64);
        let (delta, mask) = diff_and_binarize(&img.view(), &img.view(), 0.9).unwrap();
        assert!(delta.iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn hand_case_one_by_ten_marks_only_the_peak() {
        let mut plus = Array3::<f64>::zeros((3, 1, 10));
        for ch in 0..3 {
            plus[[ch, 0, 0]] = 1.0;
        }
        let minus = Array3::<f64>::zeros((3, 1, 10));
        let (delta, mask) = diff_and_binarize(&plus.view(), &minus.view(), 0.9).unwrap();
        // sorted quantile position 0.9 * 9 = 8.1 -> cutoff 0.1
        let flat: Vec<f64> = delta.iter().copied().collect();
        let cutoff = quantile(&flat, 0.9);
        assert!((cutoff - 0.1).abs() < 1e-12);
        assert!(mask[[0, 0]]);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn mask_cardinality_bound_on_distinct_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            // distinct by construction: strictly increasing base + shuffle-ish jitter
            let mut vals: Vec<f64> = (0..64).map(|i| i as f64 + rng.gen_range(0.0..0.4)).collect();
            // random permutation
            for i in (1..vals.len()).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            let plus = Array3::from_shape_fn((3, 8, 8), |(_, r, c)| vals[r * 8 + c]);
            let minus = Array3::<f64>::zeros((3, 8, 8));
            let (_, mask) = diff_and_binarize(&plus.view(), &minus.view(), 0.9).unwrap();
            let card = mask.iter().filter(|&&b| b).count();
            assert!(card <= (0.1f64 * 64.0).ceil() as usize, "cardinality {card}");
        }
    }

    #[test]
    fn count_region_hand_cases() {
        // empty mask
        let mask = Array2::from_elem((3, 3), false);
        let seg = Array2::<u8>::zeros((3, 3));
        let (counts, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
        assert_eq!(regions, 0);
        assert!(counts.is_empty());

        // one region entirely on road
        let mut mask = Array2::from_elem((3, 3), false);
        mask[[1, 0]] = true;
        mask[[1, 1]] = true;
        let seg = Array2::from_elem((3, 3), scenegen::class::ROAD);
        let (counts, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
        assert_eq!(regions, 1);
        assert_eq!(counts.get(&scenegen::class::ROAD), Some(&1));

        // two components: {(0,0),(0,1)} on road, {(2,2)} on vehicle
        let mut mask = Array2::from_elem((3, 3), false);
        mask[[0, 0]] = true;
        mask[[0, 1]] = true;
        mask[[2, 2]] = true;
        let mut seg = Array2::from_elem((3, 3), scenegen::class::ROAD);
        seg[[2, 2]] = scenegen::class::VEHICLE;
        let (counts, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
        assert_eq!(regions, 2);
        assert_eq!(counts.get(&scenegen::class::ROAD), Some(&1));
        assert_eq!(counts.get(&scenegen::class::VEHICLE), Some(&1));
        assert_eq!(counts.values().sum::<usize>(), regions);
    }

    #[test]
    fn majority_tie_goes_to_lowest_class_id() {
        let mut mask = Array2::from_elem((1, 2), false);
        mask[[0, 0]] = true;
        mask[[0, 1]] = true;
        let mut seg = Array2::<u8>::zeros((1, 2));
        seg[[0, 0]] = 3;
        seg[[0, 1]] = 1;
        let (counts, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
        assert_eq!(regions, 1);
        assert_eq!(counts.get(&1), Some(&1));
    }

    #[test]
    fn diagonal_pixels_are_separate_regions() {
        let mut mask = Array2::from_elem((2, 2), false);
        mask[[0, 0]] = true;
        mask[[1, 1]] = true;
        let seg = Array2::<u8>::zeros((2, 2));
        let (_, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
        assert_eq!(regions, 2);
    }

    proptest! {
        #[test]
        fn class_counts_sum_to_region_count(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Array2::from_shape_fn((8, 8), |_| rng.gen_bool(0.4));
            let seg = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0u8..5));
            let (counts, regions) = count_region_classes(&mask.view(), &seg.view()).unwrap();
            prop_assert_eq!(counts.values().sum::<usize>(), regions);
        }
    }

    fn tiny_model() -> SteerModel<f32> {
        let cfg = ModelConfig {
            vae: VaeConfig {
                in_hw: (16, 32),
                latent_dim: 4,
                channels: [4, 4, 4, 4],
            },
            n_inter: 4,
            n_command: 2,
            n_motor: 1,
            sparsity: 0.0,
        };
        SteerModel::new(cfg, 5).unwrap()
    }

    fn tiny_scene(frames: usize, seed: u64) -> Vec<SceneSample> {
        let cfg = SceneConfig {
            h: 16,
            w: 32,
            frames,
            seed,
            ..SceneConfig::default()
        };
        generate_sequence(&cfg).unwrap()
    }

    #[test]
    fn alp_analyze_returns_every_dimension_and_is_deterministic() {
        let model = tiny_model();
        let data = tiny_scene(2, 7);
        let seg = OracleSegmenter {
            seg_mask: data[0].seg_mask.clone(),
        };
        let run = || alp_analyze(&data[0].image.view(), &model, &seg, 0.9).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        for (j, r) in a.iter().enumerate() {
            assert_eq!(r.dim, j + 1);
            assert_eq!(r.class_counts.values().sum::<usize>(), r.region_count);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_ignoring_a_dimension_yields_an_empty_result() {
        let mut model = tiny_model();
        // sever latent dim 3 from the decoder input
        model.vae.dec_in.w.column_mut(2).fill(0.0);
        let data = tiny_scene(1, 9);
        let seg = OracleSegmenter {
            seg_mask: data[0].seg_mask.clone(),
        };
        let results = alp_analyze(&data[0].image.view(), &model, &seg, 0.9).unwrap();
        let r = &results[2];
        assert_eq!(r.xhat_plus, r.xhat_minus);
        assert!(r.mask.iter().all(|&b| !b));
        assert_eq!(r.region_count, 0);
        assert!(r.class_counts.is_empty());
    }

    #[test]
    fn masked_pixels_stay_inside_a_hardwired_patch() {
        // decoder fixture: dim 1 writes only into rows 2..5, cols 3..8
        let h = 8;
        let w_ = 10;
        let mut w = ndarray::Array2::<f64>::zeros((3 * h * w_, 2));
        for ch in 0..3 {
            for r in 2..5 {
                for col in 3..8 {
                    w[[ch * h * w_ + r * w_ + col, 0]] = 1.0 + (r + col) as f64 * 0.05;
                }
            }
        }
        // dim 2 paints a faint global wash so the quantile has spread
        for p in 0..3 * h * w_ {
            w[[p, 1]] = 0.001 * (p % 7) as f64;
        }
        let dec = LinearDecoder { w, h, w_ };
        let code = code(&[0.1, 0.2], &[0.5, 0.5]);
        let (p, m) = perturb_reconstructions(&code, 1, &dec).unwrap();
        let (_, mask) = diff_and_binarize(&p.view(), &m.view(), 0.9).unwrap();
        assert!(mask.iter().any(|&b| b), "fixture should mark pixels");
        for ((r, col), &on) in mask.indexed_iter() {
            if on {
                assert!(
                    (0..7).contains(&r) && (1..10).contains(&col),
                    "pixel ({r},{col}) outside dilated bbox"
                );
            }
        }
    }

    #[test]
    fn hardwired_lane_patch_attributes_to_lane_or_road() {
        let data = tiny_scene(1, 11);
        let sample = &data[0];
        let (h, w_) = (16usize, 32usize);
        // hard-wire dim 1 to exactly the lane-marking pixels of this frame
        let mut w = ndarray::Array2::<f64>::zeros((3 * h * w_, 2));
        let mut lane_pixels = 0;
        for ((r, col), &cls) in sample.seg_mask.indexed_iter() {
            if cls == scenegen::class::LANE_MARKING {
                lane_pixels += 1;
                for ch in 0..3 {
                    w[[ch * h * w_ + r * w_ + col, 0]] = 1.0;
                }
            }
        }
        assert!(lane_pixels > 0, "fixture frame needs lane markings");
        for p in 0..3 * h * w_ {
            w[[p, 1]] += 0.0001 * (p % 5) as f64;
        }
        let dec = LinearDecoder { w, h, w_ };
        let code = code(&[0.0, 0.0], &[0.5, 0.5]);
        let (p, m) = perturb_reconstructions(&code, 1, &dec).unwrap();
        let (_, mask) = diff_and_binarize(&p.view(), &m.view(), 0.9).unwrap();
        let (counts, regions) = count_region_classes(&mask.view(), &sample.seg_mask.view()).unwrap();
        assert!(regions > 0);
        let top_class = counts
            .iter()
            .max_by_key(|&(_, n)| *n)
            .map(|(&id, _)| id)
            .unwrap();
        assert!(
            top_class == scenegen::class::LANE_MARKING || top_class == scenegen::class::ROAD,
            "majority attribution {top_class}"
        );
    }

    struct ZeroHead;
    impl SteerHead<f64> for ZeroHead {
        fn steer(&self, _z: &ArrayView1<f64>) -> f64 {
            0.0
        }
    }

    /// Head reading only dimension `ignore_all_but`: linear slope around a
    /// center value.
    struct LinearHead {
        dim: usize,
        slope: f64,
        center: f64,
    }
    impl SteerHead<f64> for LinearHead {
        fn steer(&self, z: &ArrayView1<f64>) -> f64 {
            self.slope * (z[self.dim] - self.center)
        }
    }

    #[test]
    fn head_ignoring_the_dimension_scores_zero_impact() {
        let head = LinearHead {
            dim: 0,
            slope: 0.7,
            center: 0.0,
        };
        let code = code(&[0.4, -0.3], &[0.2, 0.5]);
        let rec = impact_score(&code, 2, &head).unwrap();
        assert_eq!(rec.impact, 0.0);
        assert_eq!(rec.d_per, 0.0);
    }

    #[test]
    fn zero_sigma_scores_zero_impact() {
        let head = LinearHead {
            dim: 0,
            slope: 0.7,
            center: 0.1,
        };
        let code = code(&[0.4, -0.3], &[0.0, 0.5]);
        let rec = impact_score(&code, 1, &head).unwrap();
        assert_eq!(rec.impact, 0.0);
    }

    #[test]
    fn antisymmetric_predictions_score_four_thirds_a() {
        // y0 = 0, y+ = a, y- = -a  =>  impact = (a + a + 2a)/3
        let code = code(&[0.25, 0.0], &[0.3, 1.0]);
        let head = LinearHead {
            dim: 0,
            slope: 0.9,
            center: 0.25,
        };
        let rec = impact_score(&code, 1, &head).unwrap();
        let a = 0.9 * 2.0 * 0.3;
        assert!(rec.y0.abs() < 1e-15);
        assert!((rec.impact - 4.0 * a / 3.0).abs() < 1e-12);
    }

    #[test]
    fn impact_is_exactly_the_mean_of_its_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let code = code(&z, &s);
            let head = LinearHead {
                dim: rng.gen_range(0..3),
                slope: rng.gen_range(-2.0..2.0),
                center: rng.gen_range(-0.5..0.5),
            };
            let rec = impact_score(&code, rng.gen_range(1..=3), &head).unwrap();
            assert_eq!(rec.impact, (rec.d_minus + rec.d_plus + rec.d_per) / 3.0);
        }
    }

    #[test]
    fn swap_invariance_of_d_per_and_delta_negation() {
        let plus = Array3::from_shape_fn((3, 4, 4), |(c0, r, col)| {
            0.2 + 0.1 * (c0 + r * 2 + col) as f64
        });
        let minus = Array3::from_shape_fn((3, 4, 4), |(c0, r, col)| {
            0.7 - 0.05 * (c0 * 3 + r + col * 2) as f64
        });
        // raw reduced difference negates under swap (before normalization)
        let raw = |a: &Array3<f64>, b: &Array3<f64>| {
            let mut d = Array2::<f64>::zeros((4, 4));
            for ch in 0..3 {
                for r in 0..4 {
                    for col in 0..4 {
                        d[[r, col]] += (a[[ch, r, col]] - b[[ch, r, col]]) / 3.0;
                    }
                }
            }
            d
        };
        let ab = raw(&plus, &minus);
        let ba = raw(&minus, &plus);
        for (x, y) in ab.iter().zip(ba.iter()) {
            assert!((x + y).abs() < 1e-15);
        }

        let code = code(&[0.3], &[0.4]);
        let head = LinearHead {
            dim: 0,
            slope: 1.3,
            center: 0.0,
        };
        let rec = impact_score(&code, 1, &head).unwrap();
        // d_per compares the two perturbed predictions symmetrically
        assert_eq!(rec.d_per, (rec.y_plus - rec.y_minus).abs());
        assert_eq!(rec.d_per, (rec.y_minus - rec.y_plus).abs());
    }

    #[test]
    fn aggregate_single_frame_collapses_to_points() {
        let model = tiny_model();
        let data = tiny_scene(3, 13);
        let report =
            aggregate_impact(&data, &model, 1, 0.1, ErrorReference::GroundTruth).unwrap();
        assert_eq!(report.sample_size, 1);
        assert_eq!(report.decile_frames, 1);
        assert_eq!(report.error_box.min, report.error_box.max);
        for d in 0..4 {
            assert_eq!(report.top_decile[d], report.bottom_decile[d]);
            assert_eq!(report.top_decile[d].min, report.top_decile[d].max);
        }
    }

    #[test]
    fn aggregate_zero_circuit_scores_zero_impacts() {
        let mut model = tiny_model();
        model.ltc.w.fill(0.0);
        model.ltc.a.fill(0.0);
        model.ltc.vleak.fill(0.0);
        model.readout.a.fill(0.0);
        model.readout.b.fill(0.0);
        let data = tiny_scene(10, 19);
        let report =
            aggregate_impact(&data, &model, 5, 0.2, ErrorReference::GroundTruth).unwrap();
        for d in 0..4 {
            assert_eq!(report.top_decile[d].min, 0.0);
            assert_eq!(report.top_decile[d].max, 0.0);
            assert_eq!(report.bottom_decile[d].min, 0.0);
            assert_eq!(report.bottom_decile[d].max, 0.0);
        }
    }

    #[test]
    fn aggregate_quartiles_match_a_sort_oracle() {
        let model = tiny_model();
        let data = tiny_scene(24, 23);
        let report =
            aggregate_impact(&data, &model, 24, 0.5, ErrorReference::GroundTruth).unwrap();
        // recompute one dimension's top-decile box from scratch
        let m = 4;
        let mut impacts = vec![Vec::new(); m];
        let mut errors = Vec::new();
        for sample in &data {
            let code = encode_sample(&model, sample).unwrap();
            let y0 = model.steer_one(&code.z.view()) as f64;
            errors.push((y0 - sample.steering as f64) * (y0 - sample.steering as f64));
            for j in 1..=m {
                impacts[j - 1].push(impact_score(&code, j, &model).unwrap().impact as f64);
            }
        }
        let mut order: Vec<usize> = (0..24).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let k = (0.5f64 * 24.0).ceil() as usize;
        for d in 0..m {
            let mut vals: Vec<f64> = order[..k].iter().map(|&f| impacts[d][f]).collect();
            vals.sort_by(f64::total_cmp);
            let pos = |q: f64| {
                let p = q * (vals.len() - 1) as f64;
                let lo = p.floor() as usize;
                let frac = p - lo as f64;
                if lo + 1 < vals.len() {
                    vals[lo] * (1.0 - frac) + vals[lo + 1] * frac
                } else {
                    vals[vals.len() - 1]
                }
            };
            let b = &report.top_decile[d];
            assert!((b.q1 - pos(0.25)).abs() < 1e-12);
            assert!((b.median - pos(0.5)).abs() < 1e-12);
            assert!((b.q3 - pos(0.75)).abs() < 1e-12);
            assert_eq!(b.min, vals[0]);
            assert_eq!(b.max, vals[vals.len() - 1]);
        }
    }

    #[test]
    fn aggregate_rejects_bad_parameters() {
        let model = tiny_model();
        let data = tiny_scene(4, 3);
        assert!(matches!(
            aggregate_impact(&data, &model, 0, 0.1, ErrorReference::GroundTruth),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aggregate_impact(&data, &model, 5, 0.1, ErrorReference::GroundTruth),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aggregate_impact(&data, &model, 2, 0.6, ErrorReference::GroundTruth),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aggregate_impact(&data, &model, 2, 0.0, ErrorReference::GroundTruth),
            Err(Error::Config(_))
        ));
    }
}
