//! Joint optimization of the VAE and the circuit under the combined loss,
//! plus tenfold cross-validation and teacher-forced offline evaluation.

use crate::error::{Error, Result};
use crate::float::{c, Real};
use crate::model::{SteerModel, TensorVisit};
use crate::ncp::{pred_loss_and_grad, rollout, rollout_backward};
use crate::scenegen::SceneSample;
use crate::util::mean_std;
use crate::vae::{
    kl_loss_and_grad, recon_loss_and_grad, reparameterize, reparameterize_backward,
    to_planar_batch,
};
use ndarray::{Array2, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Reconstruction weight.
    pub beta: f64,
    /// KL weight.
    pub gamma: f64,
    /// Prediction weight.
    pub alpha: f64,
    /// Exponent of the label-magnitude weighting inside the prediction loss.
    pub lambda: f64,
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch: usize,
    /// Frames per sequence.
    pub seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            gamma: 0.001,
            alpha: 0.066,
            lambda: 1.0,
            lr: 5e-4,
            batch: 20,
            seq_len: 16,
            epochs: 30,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is deliberately legal: it turns training into an identity
    /// pass, which the tests lean on.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("lr", self.lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.batch < 1 {
            return Err(Error::config("batch must be >= 1"));
        }
        if self.seq_len < 1 {
            return Err(Error::config("seq_len must be >= 1"));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0,1), got {v}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be > 0"));
        }
        Ok(())
    }
}

/// Combined loss with its weighted addends and the raw components.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<F> {
    pub combined: F,
    pub recon_term: F,
    pub kl_term: F,
    pub pred_term: F,
    pub recon: F,
    pub kl: F,
    pub pred: F,
}

pub fn combined_loss<F: Real>(recon: F, kl: F, pred: F, cfg: &TrainConfig) -> Result<LossBreakdown<F>> {
    if cfg.beta < 0.0 || cfg.gamma < 0.0 || cfg.alpha < 0.0 {
        return Err(Error::config("loss weights must be >= 0"));
    }
    let recon_term = c::<F>(cfg.beta) * recon;
    let kl_term = c::<F>(cfg.gamma) * kl;
    let pred_term = c::<F>(cfg.alpha) * pred;
    Ok(LossBreakdown {
        combined: recon_term + kl_term + pred_term,
        recon_term,
        kl_term,
        pred_term,
        recon,
        kl,
        pred,
    })
}

/// Adaptive-moment optimizer over any canonical parameter container. Moment
/// buffers are kept in the container's tensor visit order.
pub struct Adam<F> {
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &mut dyn TensorVisit<F>) -> Self {
        let mut m: Vec<Vec<F>> = Vec::new();
        params.for_each_tensor_mut(&mut |_, t| m.push(vec![F::zero(); t.len()]));
        Adam {
            t: 0,
            m: m.clone(),
            v: m,
        }
    }

    /// One bias-corrected update; `grads` must share the canonical tensor
    /// layout of `params`.
    pub fn step(
        &mut self,
        params: &mut dyn TensorVisit<F>,
        grads: &mut dyn TensorVisit<F>,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let mut g: Vec<Vec<F>> = Vec::with_capacity(self.m.len());
        grads.for_each_tensor_mut(&mut |_, t| g.push(t.to_vec()));
        assert_eq!(g.len(), self.m.len(), "optimizer/gradient tensor count mismatch");
        let b1 = c::<F>(cfg.adam_beta1);
        let b2 = c::<F>(cfg.adam_beta2);
        let lr = c::<F>(cfg.lr);
        let eps = c::<F>(cfg.adam_eps);
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0usize;
        params.for_each_tensor_mut(&mut |name, theta| {
            let (m, v, gi) = (&mut ms[i], &mut vs[i], &g[i]);
            assert_eq!(theta.len(), gi.len(), "tensor {name} changed size");
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (F::one() - b1) * gi[k];
                v[k] = b2 * v[k] + (F::one() - b2) * gi[k] * gi[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] = theta[k] - lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Forward and backward pass for one batch of sequences: encode every frame
/// with fresh noise, decode for reconstruction, roll the latent sequence
/// through the circuit from a zero hidden state, and accumulate parameter
/// gradients of the combined loss into `grads`.
///
/// `x` holds `batch * seq_len` planar frames, sequence-major (frame `t` of
/// sequence `s` at row `s * seq_len + t`); `y` is `(batch, seq_len)`.
pub fn step_loss_and_grads<F: Real, R: Rng>(
    model: &SteerModel<F>,
    x: Array4<F>,
    y: &ArrayView2<F>,
    cfg: &TrainConfig,
    rng: &mut R,
    grads: &mut SteerModel<F>,
) -> Result<LossBreakdown<F>> {
    let (b, t_len) = y.dim();
    if x.dim().0 != b * t_len {
        return Err(Error::dim(format!(
            "frame batch {} does not match {} sequences x {} frames",
            x.dim().0,
            b,
            t_len
        )));
    }
    let m_lat = model.cfg.vae.latent_dim;

    let enc = model.vae.encode(x);
    let (z, eps) = reparameterize(&enc.mu.view(), &enc.logvar.view(), rng);
    let dec = model.vae.decode(z.clone());
    let (recon, mut dxhat) = recon_loss_and_grad(&enc.x.view(), &dec.xhat.view());
    if !recon.is_finite() {
        return Err(Error::numeric("reconstruction loss is non-finite"));
    }
    let (kl, dmu_kl, dlogvar_kl) = kl_loss_and_grad(&enc.mu.view(), &enc.logvar.view());
    if !kl.is_finite() {
        return Err(Error::numeric("KL divergence loss is non-finite"));
    }

    let inputs: Vec<Array2<F>> = (0..t_len)
        .map(|t| Array2::from_shape_fn((b, m_lat), |(s, j)| z[[s * t_len + t, j]]))
        .collect();
    let init = Array2::<F>::zeros((b, model.wiring.n_neurons()));
    let cache = rollout(inputs, &model.ltc, &model.readout, &model.wiring, init, F::one())
        .map_err(|e| Error::numeric(format!("circuit rollout diverged: {e}")))?;

    // prediction loss: normalized per sequence, averaged over the batch
    let inv_b = F::one() / c::<F>(b as f64);
    let mut pred = F::zero();
    let mut dyhat = Array2::<F>::zeros((b, t_len));
    for s in 0..b {
        let (l, g) = pred_loss_and_grad(&cache.yhat.row(s), &y.row(s), c::<F>(cfg.lambda))?;
        pred = pred + l * inv_b;
        dyhat.row_mut(s).assign(&(g * inv_b));
    }
    if !pred.is_finite() {
        return Err(Error::numeric("steering prediction loss is non-finite"));
    }
    let breakdown = combined_loss(recon, kl, pred, cfg)?;

    dxhat.mapv_inplace(|v| v * c::<F>(cfg.beta));
    let mut dz = model.vae.decode_backward(&dec, dxhat, &mut grads.vae);
    dyhat.mapv_inplace(|v| v * c::<F>(cfg.alpha));
    let dinputs = rollout_backward(
        &cache,
        &dyhat.view(),
        &model.ltc,
        &model.readout,
        &model.wiring,
        F::one(),
        &mut grads.ltc,
        &mut grads.readout,
    );
    for (t, du) in dinputs.iter().enumerate() {
        for s in 0..b {
            for j in 0..m_lat {
                dz[[s * t_len + t, j]] = dz[[s * t_len + t, j]] + du[[s, j]];
            }
        }
    }
    let (dmu_z, dlogvar_z) = reparameterize_backward(&dz.view(), &eps.view(), &enc.logvar.view());
    let gamma = c::<F>(cfg.gamma);
    let dmu = dmu_z + &dmu_kl.mapv(|v| v * gamma);
    let dlogvar = dlogvar_z + &dlogvar_kl.mapv(|v| v * gamma);
    model.vae.encode_backward(&enc, &dmu.view(), &dlogvar.view(), &mut grads.vae);
    Ok(breakdown)
}

/// Per-epoch means of the per-step loss components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub combined: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub pred: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: SteerModel<F>,
    pub curves: LossCurves,
}

pub fn train<F: Real>(
    model: SteerModel<F>,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    train_segments(model, &[dataset], cfg)
}

/// Training over several contiguous frame runs. Sequences never straddle a
/// segment boundary; cross-validation uses this to keep the held-out gap out
/// of the training stream.
pub fn train_segments<F: Real>(
    mut model: SteerModel<F>,
    segments: &[&[SceneSample]],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    check_shapes(&model, segments)?;
    let seqs = sequence_index(segments, cfg.seq_len);
    if seqs.len() < cfg.batch {
        return Err(Error::config(format!(
            "dataset provides {} full sequence(s) of length {}, need at least batch = {} \
             ({} frames)",
            seqs.len(),
            cfg.seq_len,
            cfg.batch,
            cfg.batch * cfg.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&mut model);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut curves = LossCurves::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = gather_batch::<F>(segments, &seqs, chunk, cfg.seq_len);
            let mut grads = model.zeros_like();
            let bd = step_loss_and_grads(&model, x, &y.view(), cfg, &mut rng, &mut grads)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::numeric(format!("epoch {epoch} step {steps}: {msg}"))
                    }
                    other => other,
                })?;
            adam.step(&mut model, &mut grads, cfg);
            model.ltc.project();
            sums[0] += bd.combined.to_f64();
            sums[1] += bd.recon.to_f64();
            sums[2] += bd.kl.to_f64();
            sums[3] += bd.pred.to_f64();
            steps += 1;
        }
        let inv = 1.0 / steps as f64;
        curves.combined.push(sums[0] * inv);
        curves.recon.push(sums[1] * inv);
        curves.kl.push(sums[2] * inv);
        curves.pred.push(sums[3] * inv);
    }
    Ok(TrainOutcome { model, curves })
}

fn check_shapes<F: Real>(model: &SteerModel<F>, segments: &[&[SceneSample]]) -> Result<()> {
    let (h, w) = model.cfg.vae.in_hw;
    for seg in segments {
        if let Some(s) = seg.first() {
            if s.image.dim() != (h, w, 3) {
                return Err(Error::dim(format!(
                    "dataset frames are {:?}, model expects ({h}, {w}, 3)",
                    s.image.dim()
                )));
            }
        }
    }
    Ok(())
}

/// Start offsets of every full sequence, per segment; trailing remainders are
/// dropped.
fn sequence_index(segments: &[&[SceneSample]], seq_len: usize) -> Vec<(usize, usize)> {
    let mut seqs = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let mut start = 0;
        while start + seq_len <= seg.len() {
            seqs.push((si, start));
            start += seq_len;
        }
    }
    seqs
}

fn gather_batch<F: Real>(
    segments: &[&[SceneSample]],
    seqs: &[(usize, usize)],
    chunk: &[usize],
    seq_len: usize,
) -> (Array4<F>, Array2<F>) {
    let mut frames: Vec<&SceneSample> = Vec::with_capacity(chunk.len() * seq_len);
    let mut y = Array2::<F>::zeros((chunk.len(), seq_len));
    for (bi, &si) in chunk.iter().enumerate() {
        let (seg, start) = seqs[si];
        for t in 0..seq_len {
            let sample = &segments[seg][start + t];
            frames.push(sample);
            y[[bi, t]] = c::<F>(sample.steering as f64);
        }
    }
    (to_planar_batch(&frames), y)
}

/// Teacher-forced evaluation statistics: the per-step squared steering error
/// over every full sequence, with noise off (`z = mu`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub n_steps: usize,
    /// Mean squared error of each sequence, in stream order.
    pub per_sequence: Vec<f64>,
}

pub fn offline_eval<F: Real>(model: &SteerModel<F>, dataset: &[SceneSample]) -> Result<EvalReport> {
    let (steps, per_sequence) = eval_errors(model, &[dataset])?;
    let (mean, std) = mean_std(&steps);
    Ok(EvalReport {
        mean,
        std,
        n_steps: steps.len(),
        per_sequence,
    })
}

/// Each segment is one recorded sequence: the hidden state starts at zero at
/// its first frame and then evolves along the whole recording, teacher-forced
/// (every input is the recorded frame, never a model product). Frames are
/// encoded in bounded batches; the rollout itself runs once per segment.
fn eval_errors<F: Real>(
    model: &SteerModel<F>,
    segments: &[&[SceneSample]],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(model, segments)?;
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config("cannot evaluate an empty segment"));
    }
    let m_lat = model.cfg.vae.latent_dim;
    let mut step_errors = Vec::with_capacity(segments.iter().map(|s| s.len()).sum());
    let mut per_seq = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut inputs: Vec<Array2<F>> = Vec::with_capacity(seg.len());
        for chunk in seg.chunks(64) {
            let frames: Vec<&SceneSample> = chunk.iter().collect();
            let enc = model.vae.encode(to_planar_batch::<F>(&frames));
            for row in 0..chunk.len() {
                inputs.push(Array2::from_shape_fn((1, m_lat), |(_, j)| enc.mu[[row, j]]));
            }
        }
        let init = Array2::<F>::zeros((1, model.wiring.n_neurons()));
        let cache = rollout(inputs, &model.ltc, &model.readout, &model.wiring, init, F::one())?;
        let mut acc = 0.0f64;
        for (t, frame) in seg.iter().enumerate() {
            let e = cache.yhat[[0, t]].to_f64() - frame.steering as f64;
            let e2 = e * e;
            step_errors.push(e2);
            acc += e2;
        }
        per_seq.push(acc / seg.len() as f64);
    }
    Ok((step_errors, per_seq))
}

/// Per-fold cross-validation result; errors are mean and population standard
/// deviation of the per-sequence mean squared steering error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

/// Contiguous fold boundaries `[start, end)` with sizes differing by at most
/// one frame.
pub fn fold_bounds(n: usize, folds: usize) -> Vec<(usize, usize)> {
    (0..folds).map(|k| (k * n / folds, (k + 1) * n / folds)).collect()
}

fn thread_cap() -> usize {
    std::env::var("LATENT_STEER_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .min(10)
        })
}

/// Cross-validation over contiguous segments: fold `k` trains a copy of
/// `init` (with fold-offset seed) on everything except segment `k` and
/// evaluates on both sides. Folds run in parallel, capped by the
/// `LATENT_STEER_THREADS` environment variable.
pub fn cross_validate<F: Real + Send + Sync>(
    init: &SteerModel<F>,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
    n_folds: usize,
) -> Result<Vec<FoldReport>> {
    cfg.validate()?;
    if n_folds < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    let n = dataset.len();
    if n < n_folds {
        return Err(Error::config(format!(
            "dataset has {n} frames, cannot split into {n_folds} folds"
        )));
    }
    let bounds = fold_bounds(n, n_folds);
    let cap = thread_cap();
    let mut reports: Vec<Option<FoldReport>> = vec![None; n_folds];
    let folds: Vec<usize> = (0..n_folds).collect();
    for wave in folds.chunks(cap) {
        let wave_reports: Result<Vec<(usize, FoldReport)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&k| {
                    let (lo, hi) = bounds[k];
                    (
                        k,
                        scope.spawn(move || -> Result<FoldReport> {
                            let mut fold_cfg = *cfg;
                            fold_cfg.seed = cfg.seed.wrapping_add(k as u64);
                            let train_segs: Vec<&[SceneSample]> =
                                [&dataset[..lo], &dataset[hi..]]
                                    .into_iter()
                                    .filter(|s| !s.is_empty())
                                    .collect();
                            let out = train_segments(init.clone(), &train_segs, &fold_cfg)?;
                            let (train_steps, _) = eval_errors(&out.model, &train_segs)?;
                            let (test_steps, _) =
                                eval_errors(&out.model, &[&dataset[lo..hi]])?;
                            let (train_mean, train_std) = mean_std(&train_steps);
                            let (test_mean, test_std) = mean_std(&test_steps);
                            Ok(FoldReport {
                                fold: k,
                                train_mean,
                                train_std,
                                test_mean,
                                test_std,
                            })
                        }),
                    )
                })
                .collect();
            handles
                .into_iter()
                .map(|(k, h)| {
                    let r = h
                        .join()
                        .map_err(|_| Error::numeric(format!("fold {k} thread panicked")))??;
                    Ok((k, r))
                })
                .collect()
        });
        for (k, r) in wave_reports? {
            reports[k] = Some(r);
        }
    }
    Ok(reports.into_iter().map(|r| r.expect("all folds ran")).collect())
}

/// The standard ten-segment protocol.
pub fn tenfold_cv<F: Real + Send + Sync>(
    init: &SteerModel<F>,
    dataset: &[SceneSample],
    cfg: &TrainConfig,
) -> Result<Vec<FoldReport>> {
    cross_validate(init, dataset, cfg, 10)
}

/// Finite-difference audit of the full joint gradient on a tiny
/// configuration (8x8 frames, 3 latent dimensions, 5 neurons, two 4-frame
/// sequences). Returns the worst relative error across all parameters.
pub fn gradient_audit_toy() -> Result<f64> {
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::model::ModelConfig;
    use crate::vae::VaeConfig;

    let mcfg = ModelConfig {
        vae: VaeConfig {
            in_hw: (8, 8),
            latent_dim: 3,
            channels: [2, 3, 4, 4],
        },
        n_inter: 3,
        n_command: 1,
        n_motor: 1,
        sparsity: 0.0,
    };
    let mut model: SteerModel<f64> = SteerModel::new(mcfg, 11)?;
    let cfg = TrainConfig {
        batch: 2,
        seq_len: 4,
        ..TrainConfig::default()
    };
    let x = Array4::from_shape_fn((8, 3, 8, 8), |(n, ch, r, col)| {
        let phase = (n * 13 + ch * 7 + r * 3 + col) as f64;
        0.5 + 0.4 * (0.37 * phase).sin()
    });
    let y = Array2::from_shape_fn((2, 4), |(s, t)| 0.25 * s as f64 - 0.3 + 0.13 * t as f64);

    let mut theta0: Vec<f64> = Vec::new();
    model.for_each_tensor_mut(&mut |_, t| theta0.extend_from_slice(t));

    let mut grads = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    step_loss_and_grads(&model, x.clone(), &y.view(), &cfg, &mut rng, &mut grads)?;
    let mut analytic: Vec<f64> = Vec::new();
    grads.for_each_tensor_mut(&mut |_, t| analytic.extend_from_slice(t));

    let mut loss_at = |theta: &[f64]| -> f64 {
        let mut off = 0;
        model.for_each_tensor_mut(&mut |_, t| {
            t.copy_from_slice(&theta[off..off + t.len()]);
            off += t.len();
        });
        // identical noise draw on every probe
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sink = SteerModel::new(mcfg, 11).unwrap().zeros_like();
        step_loss_and_grads(&model, x.clone(), &y.view(), &cfg, &mut rng, &mut sink)
            .expect("toy loss is finite")
            .combined
            .to_f64()
    };
    let numeric = central_diff(&mut loss_at, &theta0);
    Ok(max_rel_err(&analytic, &numeric))
}
