//! Training loop: uniform timestep draws, the denoising loss, Adam updates.

use std::collections::BTreeMap;

use crate::attention::TextEmbedding;
use crate::backbone::{embed_prompt, Model};
use crate::config::RunConfig;
use crate::data::{image_to_latent, mask_to_latent, SamplePair};
use crate::diffusion::{dh_loss, JointLatent, LossBatch, NoiseSample};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-sample tensors precomputed once per run.
pub struct PreparedDataset {
    pub z0_image: Vec<Tensor>,
    pub z0_annot: Vec<Tensor>,
    pub reference: Vec<Tensor>,
    pub text: Vec<TextEmbedding>,
}

pub fn prepare_dataset(samples: &[SamplePair], model: &Model) -> Result<PreparedDataset> {
    if samples.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let size = model.cfg.image_size;
    let mut out = PreparedDataset {
        z0_image: Vec::with_capacity(samples.len()),
        z0_annot: Vec::with_capacity(samples.len()),
        reference: Vec::with_capacity(samples.len()),
        text: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        out.z0_image.push(image_to_latent(&s.image, size));
        out.z0_annot.push(mask_to_latent(&s.mask, size));
        out.reference.push(image_to_latent(&s.reference, size));
        out.text.push(embed_prompt(&s.prompt, &model.vocab)?);
    }
    Ok(out)
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape.clone();
    shape[0] = parts.len();
    let mut data = Vec::with_capacity(parts[0].numel() * parts.len());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(shape, data)
}

pub struct TrainReport {
    /// `(step, loss)` per optimization step.
    pub loss_log: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_log.last().map(|&(_, l)| l)
    }
}

/// Run `cfg.steps` optimization steps. Per step the loop draws batch
/// indices, one timestep per item uniform in `[0, T)`, and fresh noise, in
/// that fixed order, so identical seeds reproduce identical runs.
/// `on_step(step, loss, model)` fires after each parameter update.
pub fn train(
    model: &mut Model,
    prepared: &PreparedDataset,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<TrainReport> {
    let n = prepared.z0_image.len();
    if n == 0 {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let size = model.cfg.image_size;
    let mut rng = Rng::derive(cfg.seed, 0x7261_696e); // training stream
    let mut adam = Adam::new(cfg.lr);
    let mut report = TrainReport {
        loss_log: Vec::with_capacity(cfg.steps),
    };

    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.next_below(n)).collect();
        // Stratified timestep draw: one uniform offset, batch items spread
        // evenly over [0, T). Each t stays marginally uniform while every
        // batch covers the noise range.
        let u = rng.next_f64();
        let ts: Vec<usize> = (0..cfg.batch)
            .map(|i| {
                let pos = (u + i as f64 / cfg.batch as f64).fract();
                ((pos * schedule.t_steps as f64) as usize).min(schedule.t_steps - 1)
            })
            .collect();
        let eps = NoiseSample::draw(&mut rng, cfg.batch, size, size);

        let z0 = JointLatent::new(
            stack(&indices.iter().map(|&i| &prepared.z0_image[i]).collect::<Vec<_>>()),
            stack(&indices.iter().map(|&i| &prepared.z0_annot[i]).collect::<Vec<_>>()),
            0,
        )?;
        let reference = stack(
            &indices
                .iter()
                .map(|&i| &prepared.reference[i])
                .collect::<Vec<_>>(),
        );
        let text: Vec<TextEmbedding> = indices
            .iter()
            .map(|&i| prepared.text[i].clone())
            .collect();

        let batch = LossBatch {
            z0: &z0,
            reference: &reference,
            text: &text,
            control: None,
            t: ts,
            eps: &eps,
        };
        let mut tape = Tape::new();
        let loss_id = dh_loss(&mut tape, model, &batch, schedule)?;
        let loss = tape.value(loss_id)[0];
        if !loss.is_finite() {
            return Err(Error::Validation(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        tape.backward(loss_id)?;
        let grads: BTreeMap<String, Vec<f64>> = tape.param_grads().into_iter().collect();
        adam.step(model.parameters_mut(), &grads);

        report.loss_log.push((step, loss));
        on_step(step, loss, model)?;
    }
    Ok(report)
}

/// Render the loss log in the `step,loss` CSV format.
pub fn loss_csv(log: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for &(step, loss) in log {
        out.push_str(&format!("{step},{loss:.12e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BlockPlacement};
    use crate::data::fixtures::make_sample;
    use crate::schedule::make_linear_schedule;

    fn micro_setup(steps: usize) -> (Model, PreparedDataset, RunConfig, NoiseSchedule) {
        let samples: Vec<SamplePair> = (0..4)
            .map(|i| {
                let (img, mask, cat, ty) = make_sample(5, i);
                SamplePair::from_parts(
                    img,
                    mask,
                    5,
                    format!("{cat} {ty}"),
                    cat.to_string(),
                    ty.to_string(),
                )
                .unwrap()
            })
            .collect();
        let prompts: Vec<String> = samples.iter().map(|s| s.prompt.clone()).collect();
        let cfg = RunConfig {
            image_size: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            d_text: 8,
            vocab_size: 16,
            t_steps: 10,
            batch: 2,
            steps,
            k: 5,
            ..RunConfig::default()
        };
        let model = Model::new(
            BackboneConfig::micro(),
            BlockPlacement::default_for(2),
            &prompts,
            cfg.seed,
            false,
        )
        .unwrap();
        let schedule = make_linear_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let prepared = prepare_dataset(&samples, &model).unwrap();
        (model, prepared, cfg, schedule)
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let run = || {
            let (mut model, prepared, cfg, schedule) = micro_setup(5);
            let report = train(&mut model, &prepared, &cfg, &schedule, |_, _, _| Ok(()))
                .unwrap();
            report.loss_log
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|&(_, l)| l.is_finite() && l > 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_leaves_parameters_untouched() {
        let (mut model, prepared, mut cfg, schedule) = micro_setup(0);
        cfg.steps = 0;
        let before: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| p.tensor.data.clone())
            .collect();
        train(&mut model, &prepared, &cfg, &schedule, |_, _, _| Ok(())).unwrap();
        let after: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| p.tensor.data.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_csv_format_is_stable() {
        let log = vec![(0, 1.0), (1, 0.5)];
        let csv = loss_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,loss"));
        assert_eq!(lines.next(), Some("0,1.000000000000e0"));
    }

    #[test]
    fn empty_dataset_is_fatal() {
        let (mut model, _, cfg, schedule) = micro_setup(1);
        let empty = PreparedDataset {
            z0_image: vec![],
            z0_annot: vec![],
            reference: vec![],
            text: vec![],
        };
        assert!(matches!(
            train(&mut model, &empty, &cfg, &schedule, |_, _, _| Ok(())),
            Err(Error::Usage(_))
        ));
    }
}
