//! The joint perception-control model: VAE encoder/decoder, sparse LTC
//! circuit, and steering read-out, plus the two named size profiles.

use crate::error::Result;
use crate::float::{c, Real};
use crate::ncp::{build_wiring, ltc_step_batch, Ltc, Readout, WiringSpec};
use crate::vae::{Vae, VaeConfig};
use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vae: VaeConfig,
    pub n_inter: usize,
    pub n_command: usize,
    pub n_motor: usize,
    pub sparsity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vae: VaeConfig::default(),
            n_inter: 12,
            n_command: 6,
            n_motor: 1,
            sparsity: 0.6,
        }
    }
}

/// Named size presets selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-scale geometry: 78x200 RGB, 32 latent dimensions.
    Paper,
    /// Small geometry for commodity hardware: 48x64 RGB, 16 latent dimensions.
    Desk,
}

impl Profile {
    pub fn model_config(self) -> ModelConfig {
        let vae = match self {
            Profile::Paper => VaeConfig {
                in_hw: (78, 200),
                latent_dim: 32,
                channels: [24, 36, 48, 64],
            },
            Profile::Desk => VaeConfig {
                in_hw: (48, 64),
                latent_dim: 16,
                channels: [24, 36, 48, 64],
            },
        };
        ModelConfig {
            vae,
            ..ModelConfig::default()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(crate::error::Error::config(format!(
                "unknown profile '{other}', expected 'paper' or 'desk'"
            ))),
        }
    }
}

/// Anything that exposes its trainable tensors in a stable canonical order.
/// The optimizer and the checkpoint format both rely on that order.
pub trait TensorVisit<F> {
    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F]));
}

/// All trainable state. Doubles as its own gradient/optimizer-state container
/// via [`SteerModel::zeros_like`].
#[derive(Debug, Clone, PartialEq)]
pub struct SteerModel<F> {
    pub cfg: ModelConfig,
    pub vae: Vae<F>,
    pub wiring: WiringSpec,
    pub ltc: Ltc<F>,
    pub readout: Readout<F>,
}

impl<F: Real> SteerModel<F> {
    /// Deterministic construction: the wiring uses `seed` for its own stream,
    /// parameters draw from a second stream in canonical order.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let wiring = build_wiring(
            cfg.vae.latent_dim,
            cfg.n_inter,
            cfg.n_command,
            cfg.n_motor,
            cfg.sparsity,
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let vae = Vae::new(cfg.vae, &mut rng)?;
        let ltc = Ltc::new(&wiring, &mut rng);
        let mut readout = Readout::new(cfg.n_motor, &mut rng);
        readout.center_on(&ltc.rest_state(&wiring, 60), &wiring);
        Ok(SteerModel {
            cfg,
            vae,
            wiring,
            ltc,
            readout,
        })
    }

    /// Rebuilds a model shell from persisted configuration and wiring; the
    /// parameter values are placeholders until the caller fills them.
    pub fn from_parts(cfg: ModelConfig, wiring: WiringSpec) -> Result<Self> {
        if wiring.n_sensory != cfg.vae.latent_dim
            || wiring.n_inter != cfg.n_inter
            || wiring.n_command != cfg.n_command
            || wiring.n_motor != cfg.n_motor
        {
            return Err(crate::error::Error::integrity(
                "wiring sizes do not match the model configuration",
            ));
        }
        wiring.check_invariants()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vae = Vae::new(cfg.vae, &mut rng)?;
        let ltc = Ltc::new(&wiring, &mut rng);
        let readout = Readout::new(cfg.n_motor, &mut rng);
        Ok(SteerModel {
            cfg,
            vae,
            wiring,
            ltc,
            readout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SteerModel {
            cfg: self.cfg,
            vae: self.vae.zeros_like(),
            wiring: self.wiring.clone(),
            ltc: self.ltc.zeros_like(),
            readout: self.readout.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut m = self.clone();
        m.for_each_tensor_mut(&mut |_, t| n += t.len());
        n
    }

    /// Latent posterior of one planar image `(3, h, w)` with noise off:
    /// returns `(mu, sigma)`.
    pub fn encode_one(&self, x: &ndarray::ArrayView3<F>) -> (Array1<F>, Array1<F>) {
        let x4 = x.to_owned().insert_axis(ndarray::Axis(0));
        let ec = self.vae.encode(x4);
        let mu = ec.mu.row(0).to_owned();
        let sigma = ec.logvar.row(0).mapv(|lv| (lv / c::<F>(2.0)).exp());
        (mu, sigma)
    }

    /// Decodes one latent vector to a planar image `(3, h, w)`.
    pub fn decode_one(&self, z: &ArrayView1<F>) -> ndarray::Array3<F> {
        let z2 = z.to_owned().insert_axis(ndarray::Axis(0));
        let dc = self.vae.decode(z2);
        dc.xhat.index_axis_move(ndarray::Axis(0), 0)
    }

    /// Visits every parameter tensor in canonical (checkpoint manifest)
    /// order: VAE, LTC, read-out. Inherent mirror of [`TensorVisit`] so
    /// callers don't need the trait in scope.
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.vae
            .for_each_tensor_mut(&mut |n, t| f(&format!("vae.{n}"), t));
        self.ltc
            .for_each_tensor_mut(&mut |n, t| f(&format!("ltc.{n}"), t));
        self.readout
            .for_each_tensor_mut(&mut |n, t| f(&format!("readout.{n}"), t));
    }

    /// Steering prediction for a single latent vector: one LTC step from the
    /// zero hidden state, then the read-out.
    pub fn steer_one(&self, z: &ArrayView1<F>) -> F {
        let state = Array2::<F>::zeros((1, self.wiring.n_neurons()));
        let u = z.to_owned().insert_axis(ndarray::Axis(0));
        let next = ltc_step_batch(&state.view(), &u.view(), &self.ltc, &self.wiring, F::one());
        self.readout.forward(&next.view(), &self.wiring)[0]
    }
}

impl<F: Real> TensorVisit<F> for SteerModel<F> {
    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        SteerModel::for_each_tensor_mut(self, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_have_the_documented_shapes() {
        let paper = Profile::Paper.model_config();
        assert_eq!(paper.vae.in_hw, (78, 200));
        assert_eq!(paper.vae.latent_dim, 32);
        let desk = Profile::Desk.model_config();
        assert_eq!(desk.vae.in_hw, (48, 64));
        assert_eq!(desk.vae.latent_dim, 16);
        for cfg in [paper, desk] {
            assert_eq!(cfg.n_inter + cfg.n_command + cfg.n_motor, 19);
            assert_eq!(cfg.sparsity, 0.6);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = Profile::Desk.model_config();
        let a: SteerModel<f32> = SteerModel::new(cfg, 7).unwrap();
        let b: SteerModel<f32> = SteerModel::new(cfg, 7).unwrap();
        assert_eq!(a, b);
        let c0: SteerModel<f32> = SteerModel::new(cfg, 8).unwrap();
        assert_ne!(a, c0);
    }

    #[test]
    fn tensor_visitor_names_are_prefixed_and_stable() {
        let cfg = Profile::Desk.model_config();
        let mut m: SteerModel<f32> = SteerModel::new(cfg, 1).unwrap();
        let mut names = Vec::new();
        m.for_each_tensor_mut(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names.first().unwrap(), "vae.enc0.w");
        assert!(names.contains(&"ltc.tau".to_string()));
        assert_eq!(names.last().unwrap(), "readout.b");
        // unique names
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn steer_one_is_bounded_and_deterministic() {
        let cfg = Profile::Desk.model_config();
        let m: SteerModel<f64> = SteerModel::new(cfg, 3).unwrap();
        let z = Array1::from_shape_fn(16, |i| 0.1 * i as f64 - 0.5);
        let a = m.steer_one(&z.view());
        let b = m.steer_one(&z.view());
        assert_eq!(a, b);
        assert!(a.abs() <= 1.0);
    }
}
