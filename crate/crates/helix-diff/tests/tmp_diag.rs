use helix_diff::checkpoint::load_checkpoint;
use helix_diff::data::load_dataset;
use helix_diff::diffusion::{corrupt, JointLatent, NoiseSample, NoisePredictor, PredictContext};
use helix_diff::rng::Rng;
use helix_diff::schedule::make_linear_schedule;
use helix_diff::tape::Tape;
use helix_diff::train::prepare_dataset;

#[test]
#[ignore]
fn per_t_loss() {
    let ckpt_path = std::env::var("DIAG_CKPT").unwrap();
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    let model = ckpt.instantiate().unwrap();
    let cfg = ckpt.config().unwrap();
    let schedule = make_linear_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
    let (samples, _) = load_dataset(&cfg.dataset, cfg.k).unwrap();
    let prepared = prepare_dataset(&samples, &model).unwrap();
    let size = model.cfg.image_size;
    let mut rng = Rng::new(123);
    for &t in &[0usize, 1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 40, 49] {
        let mut img_total = 0.0;
        let mut ann_total = 0.0;
        let mut count = 0;
        for i in 0..samples.len() {
            let z0 = JointLatent::new(
                prepared.z0_image[i].clone(),
                prepared.z0_annot[i].clone(),
                0,
            )
            .unwrap();
            for _ in 0..2 {
                let eps = NoiseSample::draw(&mut rng, 1, size, size);
                let ts = vec![t];
                let zi = corrupt(&z0.image, &eps.image, &ts, &schedule).unwrap();
                let za = corrupt(&z0.annot, &eps.annot, &ts, &schedule).unwrap();
                let ctx = PredictContext {
                    t: &ts,
                    text: std::slice::from_ref(&prepared.text[i]),
                    reference: &prepared.reference[i],
                    ref_eps: &eps.image,
                    control: None,
                    schedule: &schedule,
                };
                let mut tape = Tape::new();
                let (pi, pa) = model.predict(&mut tape, &zi, &za, &ctx).unwrap();
                let mse = |pred: &[f64], target: &[f64]| -> f64 {
                    pred.iter()
                        .zip(target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / target.len() as f64
                };
                img_total += mse(tape.value(pi), &eps.image.data);
                ann_total += mse(tape.value(pa), &eps.annot.data);
                count += 1;
            }
        }
        println!(
            "t={t:>2}  image_loss={:.4}  annot_loss={:.4}",
            img_total / count as f64,
            ann_total / count as f64
        );
    }
}
