//! Generation: run the reverse chain under prompt/reference/control
//! conditioning and write the decoded image/mask pairs.

use std::path::{Path, PathBuf};

use crate::backbone::{embed_prompt, tokenize, Model};
use crate::data::{
    decode_outputs, image_to_latent, mask_to_control, write_mask, write_ppm, BinaryMask,
    RGBImage, SamplePair,
};
use crate::diffusion::sample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub n: usize,
    pub outdir: &'a Path,
    pub seed: u64,
    /// Optional full-resolution control mask; a mask with no active pixels
    /// is treated as absent.
    pub control: Option<&'a BinaryMask>,
    /// Bypass dataset-based reference selection.
    pub reference: Option<&'a RGBImage>,
}

/// References for a prompt come from its category (the first token),
/// cycling round-robin through the matching dataset samples.
fn reference_pool<'a>(dataset: &'a [SamplePair], prompt: &str) -> Vec<&'a RGBImage> {
    let category = tokenize(prompt).into_iter().next().unwrap_or_default();
    let matching: Vec<&RGBImage> = dataset
        .iter()
        .filter(|s| s.category == category)
        .map(|s| &s.reference)
        .collect();
    if !matching.is_empty() {
        return matching;
    }
    dataset.iter().map(|s| &s.reference).collect()
}

/// Generate `n` image/mask pairs into `outdir` as `gen_NNN.ppm` and
/// `gen_NNN_mask.pgm`. Deterministic per seed: sample `i` runs on the
/// derived stream `i`.
pub fn generate(
    model: &Model,
    schedule: &NoiseSchedule,
    dataset: &[SamplePair],
    req: &GenerateRequest,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let size = model.cfg.image_size;
    let text = embed_prompt(req.prompt, &model.vocab)?;
    let control: Option<Tensor> = match req.control {
        Some(mask) if mask.active_count() > 0 => Some(mask_to_control(mask, size)),
        _ => None,
    };
    let pool: Vec<&RGBImage> = match req.reference {
        Some(r) => vec![r],
        None => reference_pool(dataset, req.prompt),
    };
    if pool.is_empty() && req.n > 0 {
        return Err(Error::Usage(
            "no reference available: dataset is empty and --reference was not given".into(),
        ));
    }
    std::fs::create_dir_all(req.outdir)
        .map_err(|e| Error::io(req.outdir.display().to_string(), e))?;

    let mut written = Vec::with_capacity(req.n);
    for i in 0..req.n {
        let reference = image_to_latent(pool[i % pool.len()], size);
        let mut rng = Rng::derive(req.seed, i as u64);
        let (z_img, z_ann) = sample(
            model,
            &text,
            &reference,
            control.as_ref(),
            schedule,
            &mut rng,
        )?;
        let (image, mask) = decode_outputs(&z_img, &z_ann)?;
        let img_path = req.outdir.join(format!("gen_{i:03}.ppm"));
        let mask_path = req.outdir.join(format!("gen_{i:03}_mask.pgm"));
        write_ppm(&img_path, &image)?;
        write_mask(&mask_path, &mask)?;
        written.push((img_path, mask_path));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BlockPlacement};
    use crate::data::fixtures::make_sample;
    use crate::schedule::make_linear_schedule;

    fn micro_world() -> (Model, Vec<SamplePair>, NoiseSchedule) {
        let samples: Vec<SamplePair> = (0..4)
            .map(|i| {
                let (img, mask, cat, ty) = make_sample(6, i);
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
        let model = Model::new(
            BackboneConfig::micro(),
            BlockPlacement::default_for(2),
            &prompts,
            1,
            false,
        )
        .unwrap();
        let schedule = make_linear_schedule(6, 1e-3, 0.05).unwrap();
        (model, samples, schedule)
    }

    #[test]
    fn zero_requested_samples_writes_nothing() {
        let (model, samples, schedule) = micro_world();
        let dir = tempfile::tempdir().unwrap();
        let req = GenerateRequest {
            prompt: &samples[0].prompt,
            n: 0,
            outdir: dir.path(),
            seed: 3,
            control: None,
            reference: None,
        };
        let written = generate(&model, &schedule, &samples, &req).unwrap();
        assert!(written.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn same_seed_gives_byte_identical_outputs() {
        let (model, samples, schedule) = micro_world();
        let run = |dir: &Path| {
            let req = GenerateRequest {
                prompt: &samples[0].prompt,
                n: 2,
                outdir: dir,
                seed: 9,
                control: None,
                reference: None,
            };
            generate(&model, &schedule, &samples, &req).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let w1 = run(d1.path());
        let w2 = run(d2.path());
        for ((i1, m1), (i2, m2)) in w1.iter().zip(&w2) {
            assert_eq!(std::fs::read(i1).unwrap(), std::fs::read(i2).unwrap());
            assert_eq!(std::fs::read(m1).unwrap(), std::fs::read(m2).unwrap());
        }
    }

    #[test]
    fn all_zero_control_mask_equals_no_control_at_init() {
        // The fusion kernel is zero-initialized, and an empty control mask
        // is dropped before it reaches the model, so the outputs match the
        // unconditioned run byte for byte.
        let (model, samples, schedule) = micro_world();
        let zero_mask = BinaryMask::zeros(8, 8);
        let run = |control: Option<&BinaryMask>, dir: &Path| {
            let req = GenerateRequest {
                prompt: &samples[0].prompt,
                n: 1,
                outdir: dir,
                seed: 4,
                control,
                reference: None,
            };
            let w = generate(&model, &schedule, &samples, &req).unwrap();
            (
                std::fs::read(&w[0].0).unwrap(),
                std::fs::read(&w[0].1).unwrap(),
            )
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        assert_eq!(run(None, d1.path()), run(Some(&zero_mask), d2.path()));
    }

    #[test]
    fn reference_pool_prefers_prompt_category() {
        let (_, samples, _) = micro_world();
        let cat = samples[0].category.clone();
        let pool = reference_pool(&samples, &format!("{cat} whatever"));
        assert!(!pool.is_empty());
        let all = reference_pool(&samples, "unknown category");
        assert_eq!(all.len(), samples.len());
    }
}
