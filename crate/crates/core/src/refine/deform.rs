//! Stage one: per-view deformation fields that move Gaussian centers into
//! alignment. Each source view owns a small MLP `f_i` and a Gaussian tagged
//! with view `i` moves to `x + f_i(pe(x))`. Nothing but positions changes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::RigConfig;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::refine::fourier::{embedding_dim, fourier_embed, DEFAULT_BANDS};
use crate::refine::loss::PerceptualLoss;
use crate::refine::optim::{Optimizer, OptimizerKind};
use crate::render::Projection;
use crate::views::MultiViewImageSet;

/// `linear -> ReLU -> linear` mapping an embedding to a displacement.
/// Parameters live in one flat vector: `w1` (hidden × input, row-major),
/// `b1`, `w2` (3 × hidden), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    /// First layer uniform in `±1/√input`; the output layer starts at zero
    /// so the displacement is exactly zero everywhere.
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut params = vec![0.0; Self::param_count(input, hidden)];
        for p in &mut params[..hidden * input + hidden] {
            *p = rng.random_range(-bound..bound);
        }
        Self { input, hidden, params }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        hidden * input + hidden + 3 * hidden + 3
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        (b1, w2, w2 + 3 * self.hidden)
    }

    /// Displacement for embedding `e`; `act` receives the hidden activations.
    pub fn forward(&self, e: &[f64], act: &mut [f64]) -> Vector3<f64> {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        for (j, a) in act.iter_mut().enumerate() {
            let row = &p[j * self.input..(j + 1) * self.input];
            let z = p[b1 + j] + row.iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
            *a = z.max(0.0);
        }
        Vector3::from_fn(|k, _| p[b2 + k] + p[w2 + k * self.hidden..w2 + (k + 1) * self.hidden].iter().zip(act.iter()).map(|(w, h)| w * h).sum::<f64>())
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, e: &[f64], act: &[f64], d_out: &Vector3<f64>, grad: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        for k in 0..3 {
            grad[b2 + k] += d_out[k];
            for j in 0..self.hidden {
                grad[w2 + k * self.hidden + j] += d_out[k] * act[j];
            }
        }
        for j in 0..self.hidden {
            if act[j] <= 0.0 {
                continue;
            }
            let dh = (0..3).map(|k| self.params[w2 + k * self.hidden + j] * d_out[k]).sum::<f64>();
            if dh == 0.0 {
                continue;
            }
            grad[b1 + j] += dh;
            for (g, x) in grad[j * self.input..(j + 1) * self.input].iter_mut().zip(e) {
                *g += dh * x;
            }
        }
    }
}

/// Four per-view deformation MLPs over a shared Fourier embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationNet {
    pub bands: usize,
    pub nets: Vec<Mlp>,
}

impl DeformationNet {
    pub fn new(bands: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = (0..4).map(|_| Mlp::new(embedding_dim(bands), hidden, &mut rng)).collect();
        Self { bands, nets }
    }

    pub fn displacement(&self, view: usize, x: &Vector3<f64>) -> Vector3<f64> {
        let mut act = vec![0.0; self.nets[view].hidden];
        self.nets[view].forward(&fourier_embed(x, self.bands), &mut act)
    }

    /// Positions of `base` after deformation.
    pub fn apply(&self, base: &GaussianCloud) -> Result<GaussianCloud> {
        let ids = view_ids(base)?;
        let mut out = base.clone();
        for (p, &v) in out.positions.iter_mut().zip(ids) {
            *p += self.displacement(v as usize, p);
        }
        Ok(out)
    }

    /// `∂L/∂params` of each net given `∂L/∂position` per Gaussian. A net only
    /// ever sees the Gaussians tagged with its view.
    pub fn gradients(&self, base: &[Vector3<f64>], ids: &[u8], d_pos: &[Vector3<f64>]) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.nets.iter().map(|n| vec![0.0; n.params.len()]).collect();
        let mut act = vec![0.0; self.nets[0].hidden];
        for ((x, &v), g) in base.iter().zip(ids).zip(d_pos) {
            let net = &self.nets[v as usize];
            let e = fourier_embed(x, self.bands);
            net.forward(&e, &mut act);
            net.backward(&e, &act, g, &mut grads[v as usize]);
        }
        grads
    }
}

fn view_ids(cloud: &GaussianCloud) -> Result<&[u8]> {
    let ids = cloud
        .view_ids
        .as_deref()
        .ok_or_else(|| Error::Validation("deformation needs view-tagged Gaussians".into()))?;
    if ids.len() != cloud.len() || ids.iter().any(|&v| v > 3) {
        return Err(Error::Validation("view tags must be one of 0..=3 per Gaussian".into()));
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub bands: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Abort when the loss exceeds this multiple of the initial loss.
    pub divergence_factor: f64,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-5,
            optimizer: OptimizerKind::Adam,
            bands: DEFAULT_BANDS,
            hidden: 64,
            seed: 0,
            divergence_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeformResult {
    pub cloud: GaussianCloud,
    pub net: DeformationNet,
    /// Summed four-view loss before each update.
    pub losses: Vec<f64>,
}

/// Summed loss of the rig renders of `cloud` against `targets`, and its
/// gradient with respect to every Gaussian center.
pub fn multiview_loss(
    cloud: &GaussianCloud,
    targets: &MultiViewImageSet,
    rig: &RigConfig,
    loss: &dyn PerceptualLoss,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let mut total = 0.0;
    let mut grad = vec![Vector3::zeros(); cloud.len()];
    for (cam, target) in rig.cameras()?.iter().zip(&targets.views) {
        let proj = Projection::new(cloud, cam)?;
        let out = proj.forward(rig.background);
        let (l, g) = loss.loss(&out.rgb, &target.rgb)?;
        total += l;
        let cg = proj.backward(cloud, rig.background, &g, None);
        for (acc, d) in grad.iter_mut().zip(&cg.positions) {
            *acc += d;
        }
    }
    Ok((total, grad))
}

/// Trains the four deformation nets jointly on the summed per-view loss and
/// returns the displaced cloud. No densification or pruning happens here.
pub fn optimize_positions(
    cloud: &GaussianCloud,
    targets: &MultiViewImageSet,
    rig: &RigConfig,
    loss: &dyn PerceptualLoss,
    config: &DeformConfig,
) -> Result<DeformResult> {
    cloud.validate()?;
    targets.validate()?;
    rig.validate()?;
    if targets.resolution() != rig.resolution {
        return Err(Error::Validation("target views and rig resolution differ".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::Validation(format!("learning rate {} must be positive", config.lr)));
    }
    let ids = view_ids(cloud)?.to_vec();
    let mut net = DeformationNet::new(config.bands, config.hidden, config.seed);
    let mut opts: Vec<Optimizer> = net
        .nets
        .iter()
        .map(|n| Optimizer::new(config.optimizer, config.lr, n.params.len()))
        .collect();
    let base = cloud.positions.clone();
    let mut current = cloud.clone();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (value, d_pos) = multiview_loss(&current, targets, rig, loss)?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                step: it,
                message: format!("deformation loss is {value}"),
            });
        }
        let limit = config.divergence_factor * losses.first().copied().unwrap_or(value);
        if value > limit {
            return Err(Error::Diverged {
                iteration: it,
                loss: value,
                limit,
            });
        }
        losses.push(value);
        let grads = net.gradients(&base, &ids, &d_pos);
        for ((mlp, opt), g) in net.nets.iter_mut().zip(&mut opts).zip(&grads) {
            opt.step(&mut mlp.params, g);
        }
        for ((p, x), &v) in current.positions.iter_mut().zip(&base).zip(&ids) {
            *p = x + net.displacement(v as usize, x);
        }
    }
    log::info!(
        "deformation: loss {:.3e} -> {:.3e} over {} iterations",
        losses.first().copied().unwrap_or(0.0),
        losses.last().copied().unwrap_or(0.0),
        config.iterations
    );
    Ok(DeformResult {
        cloud: current,
        net,
        losses,
    })
}
