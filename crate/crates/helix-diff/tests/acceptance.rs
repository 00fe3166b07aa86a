//! Acceptance suite: one test per criterion, each printing a
//! `PASS criterion-N <metrics>` line (visible with `--nocapture`).
//!
//! The tests serialize on a mutex because several carry wall-clock budgets.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use helix_diff::attention::{
    annotation_self_attention, concat_attention, cross_jacobian_norm, image_cross_attention,
    AttentionProjections, DomainFeatures, FeatureIds, OutputDomain, ProbeDomain, ZeroConv,
};
use helix_diff::backbone::{count_parameters, BackboneConfig, BlockPlacement};
use helix_diff::check;
use helix_diff::data::{self, load_dataset, read_mask, read_ppm, BinaryMask};
use helix_diff::rng::Rng;
use helix_diff::schedule::make_linear_schedule;
use helix_diff::tape::Tape;
use helix_diff::tensor::Tensor;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_helix-diff")
}

fn run_ok(args: &[&str]) -> std::process::Output {
    let out = Command::new(bin())
        .args(args)
        .output()
        .expect("spawn helix-diff");
    assert!(
        out.status.success(),
        "helix-diff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn rand_feature(rng: &mut Rng, c: usize, hw: usize) -> Tensor {
    Tensor::from_vec(
        vec![1, c, hw],
        (0..c * hw).map(|_| rng.next_normal() * 0.6).collect(),
    )
}

// ── Criterion 1: exact decoupling of the split attention branches ───────

#[test]
fn criterion_01_decoupling_is_exact() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let hw = 3 + rng.next_below(4);
        let c = [2usize, 3, 4][rng.next_below(3)];
        let proj_img = AttentionProjections::init("i", c, c, &mut rng);
        let proj_ann = AttentionProjections::init("a", c, c, &mut rng);
        let mut zeta = ZeroConv::init("z", c, &mut rng);
        for v in zeta.weight.tensor.data.iter_mut() {
            *v = rng.next_normal() * 0.3;
        }
        let probe = DomainFeatures::new(
            rand_feature(&mut rng, c, hw),
            rand_feature(&mut rng, c, hw),
            Some(rand_feature(&mut rng, c, hw)),
        )
        .unwrap();
        let block = |tape: &mut Tape, ids: &FeatureIds| {
            let img = image_cross_attention(tape, ids, &proj_img, &zeta)?;
            let ann = annotation_self_attention(tape, ids, &proj_ann)?;
            Ok((img, ann))
        };
        for (input, output) in [
            (ProbeDomain::Annotation, OutputDomain::Image),
            (ProbeDomain::Image, OutputDomain::Annotation),
            (ProbeDomain::Reference, OutputDomain::Annotation),
        ] {
            let v = cross_jacobian_norm(block, input, output, &probe, seed).unwrap();
            assert_eq!(v, 0.0, "seed {seed} {input:?}->{output:?} leaked {v}");
            worst = worst.max(v);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 10.0, "decoupling probes took {dt:.1}s (budget 10s)");
    println!("PASS criterion-1 decoupling max_norm={worst:.1e} seeds=20 time={dt:.2}s");
}

// ── Criterion 2: the concatenated baseline is entangled ─────────────────

#[test]
fn criterion_02_entangled_baseline() {
    let _guard = serial();
    let mut least = f64::INFINITY;
    let mut worst_rowsum: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(2000 + seed);
        let hw = 3 + rng.next_below(4);
        let c = [2usize, 3, 4][rng.next_below(3)];
        let proj = AttentionProjections::init("c", c, c, &mut rng);
        let probe = DomainFeatures::new(
            rand_feature(&mut rng, c, hw),
            rand_feature(&mut rng, c, hw),
            None,
        )
        .unwrap();
        let block = |tape: &mut Tape, ids: &FeatureIds| {
            let out = concat_attention(tape, ids, &proj)?;
            Ok((out.f_image, out.f_annot))
        };
        for (input, output) in [
            (ProbeDomain::Annotation, OutputDomain::Image),
            (ProbeDomain::Image, OutputDomain::Annotation),
        ] {
            let v = cross_jacobian_norm(block, input, output, &probe, seed).unwrap();
            assert!(v > 1e-3, "seed {seed} probe {v} not clearly entangled");
            least = least.min(v);
        }

        // Partition of unity across the four blocks of the joint softmax.
        let mut tape = Tape::new();
        let ids = probe.bind(&mut tape);
        let out = concat_attention(&mut tape, &ids, &proj).unwrap();
        for (left, right) in [
            (out.blocks.i_i, out.blocks.i_a),
            (out.blocks.a_i, out.blocks.a_a),
        ] {
            let l = tape.value(left);
            let r = tape.value(right);
            for row in 0..hw {
                let sum: f64 = l[row * hw..(row + 1) * hw]
                    .iter()
                    .chain(&r[row * hw..(row + 1) * hw])
                    .sum();
                worst_rowsum = worst_rowsum.max((sum - 1.0).abs());
            }
        }
    }
    assert!(worst_rowsum < 1e-9, "row sums deviate by {worst_rowsum}");
    println!(
        "PASS criterion-2 entanglement min_norm={least:.3e} rowsum_dev={worst_rowsum:.1e} seeds=20"
    );
}

// ── Criterion 3: zero-initialization reductions ─────────────────────────

#[test]
fn criterion_03_zero_init_reductions() {
    let _guard = serial();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let dev = check::zero_init_reduction_deviation(3000 + seed).unwrap();
        assert!(dev < 1e-12, "seed {seed} deviation {dev}");
        worst = worst.max(dev);
    }
    println!("PASS criterion-3 zero_init max_dev={worst:.1e} seeds=10");
}

// ── Criterion 4: fused score output stays in the text-value span ────────

#[test]
fn criterion_04_value_purity() {
    let _guard = serial();
    let residual = check::value_purity_residual(4000, 20).unwrap();
    assert!(residual < 1e-9, "span residual {residual}");
    println!("PASS criterion-4 value_purity max_residual={residual:.1e} cases=20");
}

// ── Criterion 5: full-model gradient fidelity ───────────────────────────

#[test]
fn criterion_05_gradient_fidelity() {
    let _guard = serial();
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let err = check::micro_model_gradient_check(5000 + seed, 20).unwrap();
        assert!(err < 1e-4, "seed {seed} rel err {err}");
        worst = worst.max(err);
    }
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 60.0, "gradient checks took {dt:.1}s (budget 60s)");
    println!(
        "PASS criterion-5 gradient_fidelity max_rel_err={worst:.3e} coords=20x5 time={dt:.1}s"
    );
}

// ── Criterion 6: forward-process statistics ─────────────────────────────

#[test]
fn criterion_06_diffusion_statistics() {
    let _guard = serial();
    let schedule = make_linear_schedule(50, 1e-4, 0.02).unwrap();
    let stats = check::schedule_statistics(6000, &schedule, 10_000).unwrap();
    assert!(
        stats.worst_mean_sigmas < 3.0,
        "mean off by {} standard errors",
        stats.worst_mean_sigmas
    );
    assert!(
        stats.worst_var_rel < 0.05,
        "variance off by {:.1}%",
        stats.worst_var_rel * 100.0
    );
    let inv = check::single_step_inversion_error(6001).unwrap();
    assert!(inv < 1e-10, "single-step inversion error {inv}");
    println!(
        "PASS criterion-6 diffusion_stats mean_sigmas={:.2} var_rel={:.3} inversion={inv:.1e}",
        stats.worst_mean_sigmas, stats.worst_var_rel
    );
}

// ── Criterion 7: overfit convergence and reproduction ───────────────────

fn image_mse_latent(a: &data::RGBImage, b: &data::RGBImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let to = |v: u8| 2.0 * v as f64 / 255.0 - 1.0;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = to(x) - to(y);
            d * d
        })
        .sum();
    sum / a.pixels.len() as f64
}

fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        inter += (x == 1 && y == 1) as usize;
        union += (x == 1 || y == 1) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn criterion_07_overfit_convergence() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fixtures");
    let ckpt = dir.path().join("overfit.dhd");
    let csv = dir.path().join("loss.csv");
    let outdir = dir.path().join("gen");
    run_ok(&[
        "fixtures",
        "--out",
        fixtures.to_str().unwrap(),
        "--seed",
        "40",
        "--count",
        "8",
    ]);

    let t0 = Instant::now();
    run_ok(&[
        "train",
        "--dataset",
        fixtures.to_str().unwrap(),
        "--seed",
        "7",
        "--steps",
        "2000",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--loss-csv",
        csv.to_str().unwrap(),
        "--log-every",
        "0",
    ]);

    let csv_text = std::fs::read_to_string(&csv).unwrap();
    let final_loss: f64 = csv_text
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(
        final_loss < 0.05,
        "final training loss {final_loss} >= 0.05"
    );

    // Reproduce a training pair: condition on its prompt and its own
    // reference image.
    let (samples, _) = load_dataset(&fixtures, 5).unwrap();
    let target = &samples[0];
    let ref_path = dir.path().join("ref.ppm");
    data::write_ppm(&ref_path, &target.reference).unwrap();
    run_ok(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--prompt",
        &target.prompt,
        "--reference",
        ref_path.to_str().unwrap(),
        "-n",
        "1",
        "--outdir",
        outdir.to_str().unwrap(),
        "--seed",
        "77",
    ]);
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(
        elapsed < 15.0 * 60.0,
        "train+generate took {elapsed:.0}s (budget 900s)"
    );

    let gen_img = read_ppm(outdir.join("gen_000.ppm")).unwrap();
    let gen_mask = read_mask(outdir.join("gen_000_mask.pgm")).unwrap();
    let (best_idx, best_mse) = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, image_mse_latent(&gen_img, &s.image)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let iou = mask_iou(&gen_mask, &samples[best_idx].mask);
    assert!(
        best_mse < 0.05,
        "closest training image is at MSE {best_mse:.4}"
    );
    assert!(iou > 0.9, "mask IoU {iou:.3} <= 0.9 (pair {best_idx})");
    println!(
        "PASS criterion-7 overfit final_loss={final_loss:.4} image_mse={best_mse:.4} \
         mask_iou={iou:.3} pair={best_idx} time={elapsed:.0}s"
    );
}

// ── Criterion 8: raw-mask preprocessing against a brute-force oracle ────

fn cell_bounds(extent: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|i| i * extent / k).collect()
}

/// Scan the boundary list per pixel; activate cells owning any anomalous
/// pixel; rasterize by the same per-pixel lookup.
fn raw_mask_oracle(mask: &BinaryMask, k: usize) -> (Vec<bool>, Vec<u8>) {
    let rows = cell_bounds(mask.height, k);
    let cols = cell_bounds(mask.width, k);
    let find = |bounds: &[usize], pos: usize| -> usize {
        (0..k).find(|&i| pos >= bounds[i] && pos < bounds[i + 1]).unwrap()
    };
    let mut grid = vec![false; k * k];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) == 1 {
                grid[find(&rows, r) * k + find(&cols, c)] = true;
            }
        }
    }
    let mut up = vec![0u8; mask.width * mask.height];
    for r in 0..mask.height {
        for c in 0..mask.width {
            if grid[find(&rows, r) * k + find(&cols, c)] {
                up[r * mask.width + c] = 1;
            }
        }
    }
    (grid, up)
}

#[test]
fn criterion_08_preprocessing_exactness() {
    let _guard = serial();
    let mut rng = Rng::new(8000);
    for case in 0..200 {
        let w = 5 + rng.next_below(40);
        let h = 5 + rng.next_below(40);
        let k = 1 + rng.next_below(w.min(h).min(9));
        let density = rng.next_f64() * 0.2;
        let pixels: Vec<u8> = (0..w * h)
            .map(|_| u8::from(rng.next_f64() < density))
            .collect();
        let mask = BinaryMask::new(w, h, pixels).unwrap();
        let raw = data::compute_raw_mask(&mask, k).unwrap();
        let (grid, up) = raw_mask_oracle(&mask, k);
        assert_eq!(raw.grid, grid, "case {case}: {w}x{h} k={k}");
        assert_eq!(raw.upsampled.pixels, up, "case {case}: {w}x{h} k={k}");
    }

    // Single anomalous pixel activates exactly one cell.
    let mut single = BinaryMask::zeros(20, 20);
    single.set(0, 0, 1);
    let raw = data::compute_raw_mask(&single, 5).unwrap();
    assert_eq!(raw.grid.iter().filter(|&&g| g).count(), 1);
    assert_eq!(raw.upsampled.active_count(), 16);
    println!("PASS criterion-8 preprocessing cases=200 single_pixel_cells=1");
}

// ── Criterion 9: determinism and persistence ────────────────────────────

#[test]
fn criterion_09_determinism_and_persistence() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fx");
    run_ok(&[
        "fixtures",
        "--out",
        fixtures.to_str().unwrap(),
        "--seed",
        "9",
        "--count",
        "4",
    ]);
    let fx = fixtures.to_str().unwrap();

    // Byte-identical outputs require byte-identical configuration, so both
    // runs use the same relative output paths in their own working dirs.
    let run_train = |tag: &str| -> (Vec<u8>, Vec<u8>, PathBuf) {
        let cwd = dir.path().join(format!("run_{tag}"));
        std::fs::create_dir_all(&cwd).unwrap();
        let out = Command::new(bin())
            .current_dir(&cwd)
            .args([
                "train",
                "--dataset",
                fx,
                "--seed",
                "11",
                "--checkpoint",
                "model.dhd",
                "--loss-csv",
                "loss.csv",
                "--log-every",
                "0",
                "--set",
                "image_size=16",
                "--set",
                "channel_mult=1,2",
                "--set",
                "base_channels=8",
                "--set",
                "t_steps=10",
                "--set",
                "batch=2",
                "--set",
                "steps=30",
            ])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "train failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        (
            std::fs::read(cwd.join("model.dhd")).unwrap(),
            std::fs::read(cwd.join("loss.csv")).unwrap(),
            cwd.join("model.dhd"),
        )
    };
    let (ckpt_a, csv_a, ckpt_path) = run_train("a");
    let (ckpt_b, csv_b, _) = run_train("b");
    assert_eq!(csv_a, csv_b, "loss.csv differs between identical runs");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");

    // Generated outputs are byte-identical for identical seeds.
    let gen = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let outdir = dir.path().join(format!("gen_{tag}"));
        run_ok(&[
            "generate",
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--prompt",
            "checker blot",
            "--dataset",
            fx,
            "-n",
            "2",
            "--outdir",
            outdir.to_str().unwrap(),
            "--seed",
            "5",
        ]);
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&outdir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let g1 = gen("1");
    let g2 = gen("2");
    assert_eq!(g1.len(), 4);
    assert_eq!(g1, g2, "generated files differ between identical seeds");

    // Save -> load -> save is byte-identical.
    let loaded = helix_diff::checkpoint::load_checkpoint(&ckpt_path).unwrap();
    let reencoded = helix_diff::checkpoint::encode(&loaded);
    assert_eq!(reencoded, ckpt_a, "save->load->save changed bytes");

    // A flipped payload byte is caught by the checksum.
    let mut corrupted = ckpt_a.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x10;
    let bad_path = dir.path().join("bad.dhd");
    std::fs::write(&bad_path, &corrupted).unwrap();
    let out = Command::new(bin())
        .args([
            "generate",
            "--checkpoint",
            bad_path.to_str().unwrap(),
            "--prompt",
            "checker blot",
            "--dataset",
            fx,
            "-n",
            "1",
            "--outdir",
            dir.path().join("gen_bad").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success(), "corrupted checkpoint was accepted");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("corrupt"),
        "unexpected error message: {stderr}"
    );
    println!("PASS criterion-9 determinism files=loss.csv,checkpoint,4xPNM corruption=detected");
}

// ── Criterion 10: ablation placement presets ────────────────────────────

#[test]
fn criterion_10_ablation_presets() {
    let _guard = serial();
    // Parameter counts at the reference configuration follow the subset
    // relations of the placement grid.
    let cfg = BackboneConfig::default();
    let count = |name: &str| {
        count_parameters(&cfg, &BlockPlacement::preset(name, cfg.depth).unwrap()).unwrap()
    };
    let (t1, t2, t3, t4) = (
        count("tab7-1"),
        count("tab7-2"),
        count("tab7-3"),
        count("tab7-4"),
    );
    assert!(t2 < t1, "tab7-2 ({t2}) should be smaller than tab7-1 ({t1})");
    assert!(t2 < t3, "tab7-2 ({t2}) should be smaller than tab7-3 ({t3})");
    assert!(t3 < t4, "tab7-3 ({t3}) should be smaller than tab7-4 ({t4})");

    // Every preset trains 50 steps without error on a small configuration.
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fx");
    run_ok(&[
        "fixtures",
        "--out",
        fixtures.to_str().unwrap(),
        "--seed",
        "10",
        "--count",
        "4",
    ]);
    for preset in ["tab7-1", "tab7-2", "tab7-3", "tab7-4"] {
        let ckpt = dir.path().join(format!("{preset}.dhd"));
        let csv = dir.path().join(format!("{preset}.csv"));
        run_ok(&[
            "train",
            "--dataset",
            fixtures.to_str().unwrap(),
            "--preset",
            preset,
            "--seed",
            "3",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--loss-csv",
            csv.to_str().unwrap(),
            "--log-every",
            "0",
            "--set",
            "image_size=16",
            "--set",
            "channel_mult=1,1,1,1",
            "--set",
            "base_channels=8",
            "--set",
            "t_steps=10",
            "--set",
            "batch=2",
            "--set",
            "steps=50",
        ]);
        assert!(ckpt.exists());
        let csv_text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(csv_text.lines().count(), 51, "{preset} wrote a full log");
    }
    println!(
        "PASS criterion-10 ablation counts: tab7-2={t2} < tab7-1={t1}, tab7-2 < tab7-3={t3} < tab7-4={t4}; 4x50 steps trained"
    );
}

// ── The invariant suite itself stays green and machine-parseable ────────

#[test]
fn invariant_suite_passes_and_fails_on_negative_control() {
    let _guard = serial();
    let out = run_ok(&["check", "--seed", "5"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines.len() >= 12);
    for line in &lines {
        assert!(
            line.starts_with("PASS ") || line.starts_with("FAIL "),
            "unparseable report line: {line}"
        );
        assert!(line.split_whitespace().count() >= 3);
    }
    assert!(lines.iter().all(|l| l.starts_with("PASS ")));

    // Hidden ungrouped-convolution switch must flip the decoupling check,
    // and the exit code counts the failures.
    let out = Command::new(bin())
        .args(["check", "--seed", "5", "--debug-entangle"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "expected exactly one failure");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("FAIL decouple.backbone_no_ssm"),
        "{stdout}"
    );
    println!("PASS invariant-suite lines={} negative_control=flips", lines.len());
}
