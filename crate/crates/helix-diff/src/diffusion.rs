//! Forward corruption, the epsilon-prediction training loss, and the
//! ancestral reverse sampler over the joint image/annotation latent.

use crate::attention::TextEmbedding;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Paired image and annotation latents at one diffusion timestep.
#[derive(Debug, Clone)]
pub struct JointLatent {
    /// `[b, 3, h, w]` in [-1, 1] scale at t = 0.
    pub image: Tensor,
    /// `[b, 1, h, w]` in [-1, 1] scale at t = 0.
    pub annot: Tensor,
    pub t: usize,
}

impl JointLatent {
    pub fn new(image: Tensor, annot: Tensor, t: usize) -> Result<Self> {
        if image.ndim() != 4 || image.shape[1] != 3 {
            return Err(Error::Dimension(format!(
                "image latent must be [b,3,h,w], got {:?}",
                image.shape
            )));
        }
        let expect = [image.shape[0], 1, image.shape[2], image.shape[3]];
        if annot.shape != expect {
            return Err(Error::Dimension(format!(
                "annotation latent must be {expect:?}, got {:?}",
                annot.shape
            )));
        }
        Ok(JointLatent { image, annot, t })
    }

    pub fn batch(&self) -> usize {
        self.image.shape[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.image.shape[2], self.image.shape[3])
    }

    /// Stack a list of single-sample latents into one batch.
    pub fn stack(items: &[JointLatent]) -> Result<JointLatent> {
        if items.is_empty() {
            return Err(Error::Usage("cannot stack an empty latent list".into()));
        }
        let t = items[0].t;
        let mut image = Vec::new();
        let mut annot = Vec::new();
        for item in items {
            if item.t != t {
                return Err(Error::Usage("stacked latents must share a timestep".into()));
            }
            image.extend_from_slice(&item.image.data);
            annot.extend_from_slice(&item.annot.data);
        }
        let (h, w) = items[0].spatial();
        Ok(JointLatent {
            image: Tensor::from_vec(vec![items.len(), 3, h, w], image),
            annot: Tensor::from_vec(vec![items.len(), 1, h, w], annot),
            t,
        })
    }
}

/// Standard-normal noise shaped like a joint latent.
#[derive(Debug, Clone)]
pub struct NoiseSample {
    pub image: Tensor,
    pub annot: Tensor,
}

impl NoiseSample {
    pub fn draw(rng: &mut Rng, batch: usize, h: usize, w: usize) -> Self {
        let mut image = vec![0.0; batch * 3 * h * w];
        let mut annot = vec![0.0; batch * h * w];
        rng.fill_normal(&mut image);
        rng.fill_normal(&mut annot);
        NoiseSample {
            image: Tensor::from_vec(vec![batch, 3, h, w], image),
            annot: Tensor::from_vec(vec![batch, 1, h, w], annot),
        }
    }

    pub fn zeros(batch: usize, h: usize, w: usize) -> Self {
        NoiseSample {
            image: Tensor::zeros(vec![batch, 3, h, w]),
            annot: Tensor::zeros(vec![batch, 1, h, w]),
        }
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with a per-batch-item timestep.
pub fn corrupt(x0: &Tensor, eps: &Tensor, t: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape != eps.shape {
        return Err(Error::Dimension(format!(
            "corrupt: value shape {:?} vs noise shape {:?}",
            x0.shape, eps.shape
        )));
    }
    if x0.shape[0] != t.len() {
        return Err(Error::Usage(format!(
            "corrupt: {} timesteps for batch of {}",
            t.len(),
            x0.shape[0]
        )));
    }
    let stride = x0.numel() / x0.shape[0];
    let mut out = vec![0.0; x0.numel()];
    for (i, &ti) in t.iter().enumerate() {
        s.check_t(ti)?;
        let ab = s.alpha_bar[ti];
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..stride {
            let idx = i * stride + j;
            out[idx] = cs * x0.data[idx] + cn * eps.data[idx];
        }
    }
    Tensor::new(x0.shape.clone(), out)
}

/// Corrupt both latent parts with one shared timestep.
pub fn q_sample(
    z0: &JointLatent,
    t: usize,
    eps: &NoiseSample,
    s: &NoiseSchedule,
) -> Result<JointLatent> {
    s.check_t(t)?;
    let ts = vec![t; z0.batch()];
    Ok(JointLatent {
        image: corrupt(&z0.image, &eps.image, &ts, s)?,
        annot: corrupt(&z0.annot, &eps.annot, &ts, s)?,
        t,
    })
}

fn reverse_part(x: &Tensor, eps_pred: &Tensor, t: usize, s: &NoiseSchedule, rng: &mut Rng) -> Tensor {
    let ab = s.alpha_bar[t];
    let coeff = s.beta[t] / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / s.alpha[t].sqrt();
    let sigma = s.posterior_variance(t).sqrt();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mu = (x.data[i] - coeff * eps_pred.data[i]) * inv_sqrt_alpha;
        out[i] = if t > 0 { mu + sigma * rng.next_normal() } else { mu };
    }
    Tensor::from_vec(x.shape.clone(), out)
}

/// One ancestral denoising step; deterministic at t = 0.
pub fn reverse_step(
    z_t: &JointLatent,
    eps_pred: &NoiseSample,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<JointLatent> {
    s.check_t(t)?;
    Ok(JointLatent {
        image: reverse_part(&z_t.image, &eps_pred.image, t, s, rng),
        annot: reverse_part(&z_t.annot, &eps_pred.annot, t, s, rng),
        t: t.saturating_sub(1),
    })
}

/// Everything the backbone needs besides the noisy latent itself.
pub struct PredictContext<'a> {
    /// Timestep per batch item.
    pub t: &'a [usize],
    /// Prompt embedding per batch item.
    pub text: &'a [TextEmbedding],
    /// Clean reference images `[b, 3, h, w]` in [-1, 1].
    pub reference: &'a Tensor,
    /// Noise injected into the reference; during training this is the same
    /// realization that corrupted the image latent.
    pub ref_eps: &'a Tensor,
    /// Optional binary control mask `[b, 1, h, w]`.
    pub control: Option<&'a Tensor>,
    pub schedule: &'a NoiseSchedule,
}

/// Anything that can predict the injected noise from a noisy joint latent.
pub trait NoisePredictor {
    fn predict(
        &self,
        tape: &mut Tape,
        z_image: &Tensor,
        z_annot: &Tensor,
        ctx: &PredictContext,
    ) -> Result<(TensorId, TensorId)>;
}

/// One training batch for the denoising loss.
pub struct LossBatch<'a> {
    pub z0: &'a JointLatent,
    pub reference: &'a Tensor,
    pub text: &'a [TextEmbedding],
    pub control: Option<&'a Tensor>,
    pub t: Vec<usize>,
    pub eps: &'a NoiseSample,
}

/// The denoising objective: mean squared error between the injected and the
/// predicted noise, averaged over every element of both latent parts. The
/// reference receives the same image-noise realization before encoding.
pub fn dh_loss(
    tape: &mut Tape,
    model: &dyn NoisePredictor,
    batch: &LossBatch,
    s: &NoiseSchedule,
) -> Result<TensorId> {
    let b = batch.z0.batch();
    if batch.text.len() != b {
        return Err(Error::Usage(format!(
            "loss needs one prompt embedding per batch item: {} for batch of {b}",
            batch.text.len()
        )));
    }
    if batch.t.len() != b {
        return Err(Error::Usage(format!(
            "loss needs one timestep per batch item: {} for batch of {b}",
            batch.t.len()
        )));
    }
    let z_image = corrupt(&batch.z0.image, &batch.eps.image, &batch.t, s)?;
    let z_annot = corrupt(&batch.z0.annot, &batch.eps.annot, &batch.t, s)?;
    let ctx = PredictContext {
        t: &batch.t,
        text: batch.text,
        reference: batch.reference,
        ref_eps: &batch.eps.image,
        control: batch.control,
        schedule: s,
    };
    let (pred_image, pred_annot) = model.predict(tape, &z_image, &z_annot, &ctx)?;

    let n_img = batch.eps.image.numel();
    let n_ann = batch.eps.annot.numel();
    let pi = tape.reshape(pred_image, vec![1, n_img])?;
    let pa = tape.reshape(pred_annot, vec![1, n_ann])?;
    let pred = tape.concat(&[pi, pa], 1)?;
    let mut target = batch.eps.image.data.clone();
    target.extend_from_slice(&batch.eps.annot.data);
    let target = tape.constant(&Tensor::from_vec(vec![1, n_img + n_ann], target));
    tape.mse(pred, target)
}

/// Run the full reverse chain from pure noise; returns the final latents
/// clamped to [-1, 1], shaped `[3, h, w]` and `[1, h, w]`.
pub fn sample(
    model: &dyn NoisePredictor,
    text: &TextEmbedding,
    reference: &Tensor,
    control: Option<&Tensor>,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if reference.ndim() != 4 || reference.shape[0] != 1 || reference.shape[1] != 3 {
        return Err(Error::Dimension(format!(
            "sampling reference must be [1,3,h,w], got {:?}",
            reference.shape
        )));
    }
    let (h, w) = (reference.shape[2], reference.shape[3]);
    let init = NoiseSample::draw(rng, 1, h, w);
    let mut z = JointLatent::new(init.image, init.annot, s.t_steps - 1)?;
    let texts = [text.clone()];
    for t in (0..s.t_steps).rev() {
        // Fresh reference noise at the chain's current level.
        let mut ref_eps = vec![0.0; reference.numel()];
        rng.fill_normal(&mut ref_eps);
        let ref_eps = Tensor::from_vec(reference.shape.clone(), ref_eps);
        let ctx = PredictContext {
            t: &[t],
            text: &texts,
            reference,
            ref_eps: &ref_eps,
            control,
            schedule: s,
        };
        let mut tape = Tape::new();
        let (pi, pa) = model.predict(&mut tape, &z.image, &z.annot, &ctx)?;
        let pred = NoiseSample {
            image: Tensor::from_vec(z.image.shape.clone(), tape.value(pi).to_vec()),
            annot: Tensor::from_vec(z.annot.shape.clone(), tape.value(pa).to_vec()),
        };
        z = reverse_step(&z, &pred, t, s, rng)?;
    }
    let clamp = |t: &Tensor, shape: Vec<usize>| {
        Tensor::from_vec(shape, t.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    };
    Ok((
        clamp(&z.image, vec![3, h, w]),
        clamp(&z.annot, vec![1, h, w]),
    ))
}
