//! Deterministic DDIM inversion and (guided) sampling.
//!
//! With `ᾱ_k` the signal level after `k` steps (`ᾱ = 1` for the clean
//! latent) one step maps `z` between levels `a` and `b` through the shared
//! prediction `ε`:
//!
//! `z' = √b · (z − √(1−a) ε) / √a + √(1−b) ε`.
//!
//! Inversion walks `a → b` upward evaluating `ε` at the destination
//! timestep; optional fixed-point refinement re-evaluates `ε` at the
//! destination latent, which makes the step the exact inverse of the
//! corresponding sampling step.

use std::collections::BTreeMap;

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::backend::{Condition, DenoiserBackend, LatentStack};
use crate::guidance::energy::{EnergyContext, GuidanceEnergy};

pub fn ddim_step(z: &Array4<f64>, eps: &Array4<f64>, from: f64, to: f64) -> Array4<f64> {
    let (sa, sb) = (from.sqrt(), to.sqrt());
    let (na, nb) = ((1.0 - from).sqrt(), (1.0 - to).sqrt());
    let mut out = Array4::zeros(z.dim());
    Zip::from(&mut out).and(z).and(eps).for_each(|o, &zi, &e| {
        *o = sb * (zi - na * e) / sa + nb * e;
    });
    out
}

/// The inverted latent and every intermediate state: `states[0]` is the
/// clean latent and `states[k + 1]` sits at `timesteps[k]`.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub timesteps: Vec<usize>,
    pub states: Vec<Array4<f64>>,
}

impl Inversion {
    pub fn z_t(&self) -> LatentStack {
        LatentStack {
            data: self.states.last().expect("non-empty trajectory").clone(),
            t: self.timesteps.last().copied(),
        }
    }
}

fn level(backend: &dyn DenoiserBackend, timesteps: &[usize], k: Option<usize>) -> f64 {
    k.map_or(1.0, |k| backend.schedule().alpha_bar(timesteps[k]))
}

fn check_finite(z: &Array4<f64>, step: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            message: "non-finite latent".into(),
        })
    }
}

pub fn ddim_invert(
    z0: &Array4<f64>,
    backend: &dyn DenoiserBackend,
    steps: usize,
    cond: &Condition,
    refinement: usize,
) -> Result<Inversion> {
    check_finite(z0, 0)?;
    let timesteps = backend.schedule().ddim_timesteps(steps)?;
    let mut states = vec![z0.clone()];
    for k in 0..steps {
        let from = level(backend, &timesteps, k.checked_sub(1));
        let to = level(backend, &timesteps, Some(k));
        let z = &states[k];
        let eps = backend.predict(z, timesteps[k], cond)?.epsilon;
        let mut next = ddim_step(z, &eps, from, to);
        for _ in 0..refinement {
            let eps = backend.predict(&next, timesteps[k], cond)?.epsilon;
            next = ddim_step(z, &eps, from, to);
        }
        check_finite(&next, timesteps[k])?;
        states.push(next);
    }
    Ok(Inversion { timesteps, states })
}

/// Classifier-free guidance: `ε_u + s (ε_c − ε_u)`. An unconditional
/// condition needs a single evaluation.
pub fn cfg_epsilon(backend: &dyn DenoiserBackend, z: &Array4<f64>, t: usize, cond: &Condition, scale: f64) -> Result<Array4<f64>> {
    let eps_c = backend.predict(z, t, cond)?.epsilon;
    if cond.is_unconditional() || scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = backend.predict(z, t, &cond.dropped())?.epsilon;
    Ok(&eps_u + &((&eps_c - &eps_u) * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: usize,
    pub energy: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_rms: f64,
}

pub struct SampleOptions<'a> {
    pub cond: &'a Condition,
    pub cfg_scale: f64,
    /// Guidance step size; 0 disables guidance.
    pub eta: f64,
    pub energy: Option<&'a dyn GuidanceEnergy>,
}

/// Samples from `inv`'s final latent back to a clean latent. The edited
/// branch starts at `z_T` and evolves deterministically; at each step the
/// energy gradient with respect to the edited latent, normalized to unit
/// RMS, is added to the noise prediction: `ε̃ = ε + η g`.
pub fn guided_sample(inv: &Inversion, backend: &dyn DenoiserBackend, opts: &SampleOptions) -> Result<(Array4<f64>, Vec<StepLog>)> {
    let ts = &inv.timesteps;
    let mut z = inv.states.last().expect("non-empty trajectory").clone();
    let mut log = Vec::new();
    for k in (0..ts.len()).rev() {
        let step = ts.len() - 1 - k;
        let t = ts[k];
        let mut eps = cfg_epsilon(backend, &z, t, opts.cond, opts.cfg_scale)?;
        if let (Some(energy), true) = (opts.energy, opts.eta != 0.0) {
            let eval = energy.evaluate(&EnergyContext {
                backend,
                z_edi: &z,
                z_ori: &inv.states[k + 1],
                t,
                cond: opts.cond,
            })?;
            if !eval.value.is_finite() {
                return Err(Error::Numeric {
                    step,
                    message: format!("guidance energy is {}", eval.value),
                });
            }
            let rms = (eval.grad.iter().map(|g| g * g).sum::<f64>() / eval.grad.len() as f64).sqrt();
            if !rms.is_finite() {
                return Err(Error::Numeric {
                    step,
                    message: "non-finite guidance gradient".into(),
                });
            }
            if rms > 0.0 {
                eps.scaled_add(opts.eta / rms, &eval.grad);
            }
            log.push(StepLog {
                step,
                t,
                energy: eval.value,
                components: eval.components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                grad_rms: rms,
            });
        }
        let from = level(backend, ts, Some(k));
        let to = level(backend, ts, k.checked_sub(1));
        z = ddim_step(&z, &eps, from, to);
        check_finite(&z, step)?;
    }
    Ok((z, log))
}

/// Plain DDIM sampling from `z_T` at the last of `steps` timesteps.
pub fn ddim_sample(z_t: &Array4<f64>, backend: &dyn DenoiserBackend, steps: usize, cond: &Condition, cfg_scale: f64) -> Result<Array4<f64>> {
    let timesteps = backend.schedule().ddim_timesteps(steps)?;
    let inv = Inversion {
        timesteps,
        states: vec![z_t.clone()],
    };
    let opts = SampleOptions {
        cond,
        cfg_scale,
        eta: 0.0,
        energy: None,
    };
    Ok(guided_sample(&inv, backend, &opts)?.0)
}
