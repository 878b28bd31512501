//! End-to-end pipeline tests on a miniature synthetic corpus: training
//! determinism, checkpoint resume, evaluation report structure, and the CLI
//! surface.

use std::path::{Path, PathBuf};
use std::process::Command;

use cofsep::checkpoint::load_checkpoint;
use cofsep::config::{Config, Profile};
use cofsep::evaluation::{evaluate_model, pairwise_matrix};
use cofsep::manifest::{Manifest, Split};
use cofsep::synth::SynthSpec;
use cofsep::training::{sample_example, train_cof, ClipCache, TrainOptions};

fn mini_corpus(dir: &Path, n_videos: usize) -> Manifest {
    SynthSpec {
        n_videos,
        categories: 2,
        seed: 11,
        with_flows: false,
        include_static: false,
    }
    .generate(dir)
    .unwrap()
}

fn quick_cfg() -> Config {
    let mut cfg = Config::for_profile(Profile::Toy);
    cfg.seed = 21;
    cfg.batch_size = 2;
    cfg.total_iters = 3;
    cfg.checkpoint_every = 100;
    cfg
}

#[test]
fn training_is_deterministic_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(&dir.path().join("corpus"), 6);
    let cfg = quick_cfg();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let ck_a = train_cof(&cfg, &manifest, &out_a, &TrainOptions::default()).unwrap();
    let ck_b = train_cof(&cfg, &manifest, &out_b, &TrainOptions::default()).unwrap();

    let log_a = std::fs::read(out_a.join("loss_log.csv")).unwrap();
    let log_b = std::fs::read(out_b.join("loss_log.csv")).unwrap();
    assert_eq!(log_a, log_b, "loss logs differ");
    assert_eq!(
        std::fs::read(&ck_a).unwrap(),
        std::fs::read(&ck_b).unwrap(),
        "final checkpoints differ"
    );
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(&dir.path().join("corpus"), 6);

    // Uninterrupted: 4 iterations.
    let mut cfg = quick_cfg();
    cfg.total_iters = 4;
    cfg.checkpoint_every = 2;
    let out_full = dir.path().join("full");
    let ck_full = train_cof(&cfg, &manifest, &out_full, &TrainOptions::default()).unwrap();

    // Resume from the periodic checkpoint written at iteration 2 and run
    // the remaining schedule in a fresh directory.
    let resume_from = out_full.join("ckpt_000002.ckpt");
    assert!(resume_from.exists());
    let out_resumed = dir.path().join("resumed");
    let ck_resumed = train_cof(
        &cfg,
        &manifest,
        &out_resumed,
        &TrainOptions {
            resume: Some(resume_from),
            init_weights: None,
        },
    )
    .unwrap();

    let full = load_checkpoint(&ck_full).unwrap();
    let resumed = load_checkpoint(&ck_resumed).unwrap();
    assert_eq!(full.iteration, resumed.iteration);
    for (name, t) in full.params.iter() {
        let r = resumed.params.get(name).unwrap();
        for (a, b) in t.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6, "{name} diverged: {a} vs {b}");
        }
    }

    // The resumed loss rows match the uninterrupted curve.
    let rows = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("loss_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(String::from)
            .collect()
    };
    let full_rows = rows(&out_full);
    let resumed_rows = rows(&out_resumed);
    assert_eq!(&full_rows[2..], &resumed_rows[..]);
}

#[test]
fn example_sampling_is_reproducible_and_masks_partition() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(dir.path(), 6);
    let cfg = quick_cfg();
    let entries = manifest.require_split(Split::Train).unwrap();
    let cache = ClipCache::new();
    let a = sample_example(&entries, &cfg, &cache, 99, true).unwrap();
    let b = sample_example(&entries, &cfg, &cache, 99, true).unwrap();
    assert_eq!(a.source_ids, b.source_ids);
    assert_eq!(a.mix_warped.mags(), b.mix_warped.mags());
    for (m1, m2) in a.gt_masks.iter().zip(&b.gt_masks) {
        assert_eq!(m1.values(), m2.values());
    }
    for (c1, c2) in a.clips.iter().zip(&b.clips) {
        assert_eq!(c1.frames, c2.frames);
    }
    // Dominance masks partition the grid.
    for i in 0..a.gt_masks[0].values().numel() {
        let total: f64 = a.gt_masks.iter().map(|m| m.values().data()[i]).sum();
        assert_eq!(total, 1.0);
    }
}

#[test]
fn initial_loss_sits_near_ln2() {
    // Random init drives probabilities near 0.5, so the first logged loss of
    // a single-stage run lands in ln 2 +/- 0.2.
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(&dir.path().join("corpus"), 6);
    let mut cfg = quick_cfg().with_stages(1);
    cfg.batch_size = 4;
    cfg.total_iters = 1;
    let out = dir.path().join("train");
    train_cof(&cfg, &manifest, &out, &TrainOptions::default()).unwrap();
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    let first = log.lines().nth(1).unwrap();
    let loss: f64 = first.split(',').nth(1).unwrap().parse().unwrap();
    assert!(
        (loss - std::f64::consts::LN_2).abs() <= 0.2,
        "initial loss {loss}"
    );
}

/// Long-run loss trend (the default suite covers the same behavior through
/// the acceptance SDR criteria; this literal check needs a ~2000-iteration
/// training run, so it only runs on demand).
#[test]
#[ignore = "long training run; invoke explicitly with --ignored"]
fn loss_halves_within_2000_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = SynthSpec {
        n_videos: 60,
        categories: 4,
        seed: 5,
        with_flows: false,
        include_static: false,
    }
    .generate(&dir.path().join("corpus"))
    .unwrap();
    let mut cfg = Config::for_profile(Profile::Toy);
    cfg.seed = 7;
    cfg.total_iters = 2000;
    let out = dir.path().join("train");
    train_cof(&cfg, &manifest, &out, &TrainOptions::default()).unwrap();
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    let loss_at = |line: &str| -> f64 { line.split(',').nth(1).unwrap().parse().unwrap() };
    let lines: Vec<&str> = log.lines().skip(1).collect();
    let initial = loss_at(lines.first().unwrap());
    let final_loss = loss_at(lines.last().unwrap());
    assert!(
        final_loss < 0.5 * initial,
        "loss {initial} -> {final_loss} did not halve"
    );
}

#[test]
fn evaluation_report_has_stage_oracle_and_mix_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(dir.path(), 8);
    let mut cfg = quick_cfg();
    cfg.total_iters = 1;
    let out = dir.path().join("train");
    let ckpt = train_cof(&cfg, &manifest, &out, &TrainOptions::default()).unwrap();
    let model =
        cofsep::checkpoint::model_from_checkpoint(&load_checkpoint(&ckpt).unwrap()).unwrap();

    let mixtures = 2;
    let report = evaluate_model(&model, &manifest, 5, mixtures).unwrap();
    // Rows per mixture: sources x (J stages + oracle + mix).
    let expected = mixtures * 2 * (model.cfg.stages + 2);
    assert_eq!(report.rows.len(), expected);
    let summary = report.summary();
    for stage in ["1", "2", "oracle", "mix"] {
        assert!(summary.contains_key(stage), "missing {stage} rows");
    }
    // The ideal mask bounds the untrained cascade and the mixture baseline.
    let oracle = summary["oracle"].mean_sdr;
    assert!(oracle > summary["mix"].mean_sdr);
    assert!(oracle > summary["2"].mean_sdr);

    let csv = report.to_csv();
    assert!(csv.starts_with("mixture_id,source_id,stage,sdr,sir,sar\n"));
    assert_eq!(csv.lines().count(), expected + 1);
}

#[test]
fn external_weights_mark_vision_namespaces_as_pretrained() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(&dir.path().join("corpus"), 6);
    let mut cfg = quick_cfg();
    cfg.total_iters = 1;
    let donor_dir = dir.path().join("donor");
    let donor = train_cof(&cfg, &manifest, &donor_dir, &TrainOptions::default()).unwrap();

    let out = dir.path().join("warm");
    let ckpt = train_cof(
        &cfg,
        &manifest,
        &out,
        &TrainOptions {
            resume: None,
            init_weights: Some(donor),
        },
    )
    .unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert!(
        loaded.pretrained.iter().any(|p| p.contains(".vision.")),
        "vision namespaces marked pretrained: {:?}",
        loaded.pretrained
    );
    assert!(loaded.pretrained.iter().any(|p| p == "sslm."));
}

#[test]
fn pairwise_matrix_is_symmetric_with_labeled_categories() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = mini_corpus(dir.path(), 10);
    let mut cfg = quick_cfg();
    cfg.total_iters = 1;
    let out = dir.path().join("train");
    let ckpt = train_cof(&cfg, &manifest, &out, &TrainOptions::default()).unwrap();
    let model =
        cofsep::checkpoint::model_from_checkpoint(&load_checkpoint(&ckpt).unwrap()).unwrap();

    let pm = pairwise_matrix(&model, &manifest, 5, 1).unwrap();
    assert_eq!(pm.categories, vec!["tone0".to_string(), "tone1".into()]);
    assert_eq!(pm.cell(0, 1), pm.cell(1, 0));
    assert!(pm.cell(0, 1).is_some());
    let csv = pm.to_csv();
    assert!(csv.starts_with("category,tone0,tone1\n"));
}

// ---- CLI surface ----------------------------------------------------------------

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cofsep"))
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_print_one_machine_parsable_line() {
    let out = bin()
        .args(["train", "--manifest", "/nonexistent.jsonl", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert!(line.starts_with("error: kind="), "got: {line}");
}

#[test]
fn cli_end_to_end_separate_emits_per_stage_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let status = bin()
        .args(["generate-synth", "--out"])
        .arg(&corpus)
        .args(["--videos", "6", "--categories", "2", "--seed", "3"])
        .status()
        .unwrap();
    assert!(status.success());

    let train_dir = dir.path().join("train");
    let cfg_file = dir.path().join("run.cfg");
    std::fs::write(&cfg_file, "batch_size = 2\ntotal_iters = 2\n").unwrap();
    let status = bin()
        .args(["--config"])
        .arg(&cfg_file)
        .args(["--seed", "4", "--profile", "toy", "train", "--manifest"])
        .arg(corpus.join("manifest.jsonl"))
        .arg("--out")
        .arg(&train_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = train_dir.join("final.ckpt");
    assert!(ckpt.exists());

    // Separate one synthetic mixture from two corpus clips.
    let sep_out = dir.path().join("separated");
    let status = bin()
        .args(["separate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--mixture")
        .arg(corpus.join("vid_000/audio.wav"))
        .arg("--clips")
        .arg(corpus.join("vid_000/frames"))
        .arg(corpus.join("vid_001/frames"))
        .arg("--out")
        .arg(&sep_out)
        .status()
        .unwrap();
    assert!(status.success());
    // 2 stages x 2 sources: wav + mask png + mask tensor + spectrogram.
    for stage in 1..=2 {
        for src in 0..2 {
            for name in [
                format!("source{src}.wav"),
                format!("source{src}_mask.png"),
                format!("source{src}_mask.cot"),
                format!("source{src}_spectrogram.cot"),
            ] {
                let p = sep_out.join(format!("stage{stage}")).join(name);
                assert!(p.exists(), "missing {}", p.display());
            }
        }
    }

    // Localize writes the mask and masked-frame panels.
    let loc_out = dir.path().join("localized");
    let status = bin()
        .args(["localize", "--checkpoint"])
        .arg(&ckpt)
        .arg("--frame")
        .arg(corpus.join("vid_000/frames"))
        .arg("--out")
        .arg(&loc_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(loc_out.join("location_mask.png").exists());
    assert!(loc_out.join("masked_frame.png").exists());

    // Evaluate and re-render the CSV through `report`.
    let eval_out = dir.path().join("eval");
    let status = bin()
        .args(["evaluate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--manifest")
        .arg(corpus.join("manifest.jsonl"))
        .arg("--out")
        .arg(&eval_out)
        .args(["--mixtures", "1", "--seed", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(eval_out.join("eval_rows.csv").exists());
    assert!(eval_out.join("eval_summary.json").exists());

    let report_out = dir.path().join("report");
    let out = bin()
        .args(["report", "--csv"])
        .arg(eval_out.join("eval_rows.csv"))
        .arg("--out")
        .arg(&report_out)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean SDR"), "{stdout}");
    assert!(report_out.join("sdr_chart.png").exists());
}

#[test]
fn cli_train_twice_same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert!(bin()
        .args(["generate-synth", "--out"])
        .arg(&corpus)
        .args(["--videos", "6", "--categories", "2", "--seed", "3"])
        .status()
        .unwrap()
        .success());
    let cfg_file = dir.path().join("run.cfg");
    std::fs::write(&cfg_file, "batch_size = 2\ntotal_iters = 2\n").unwrap();
    let mut outs: Vec<PathBuf> = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("train{run}"));
        assert!(bin()
            .args(["--config"])
            .arg(&cfg_file)
            .args(["--seed", "7", "train", "--manifest"])
            .arg(corpus.join("manifest.jsonl"))
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .success());
        outs.push(out);
    }
    assert_eq!(
        std::fs::read(outs[0].join("final.ckpt")).unwrap(),
        std::fs::read(outs[1].join("final.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(outs[0].join("loss_log.csv")).unwrap(),
        std::fs::read(outs[1].join("loss_log.csv")).unwrap()
    );
}
