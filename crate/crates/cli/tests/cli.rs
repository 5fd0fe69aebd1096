//! End-to-end tests of the `voxtex` binary: dataset generation, manifest
//! integrity, training resume determinism, generation determinism, baking
//! round trips and eval exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use voxtex_core::baking::masked_psnr;
use voxtex_core::io::read_grid;
use voxtex_core::numerics::Grid;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voxtex")
}

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.txt");
    let body = format!(
        "config_version = 1\nseed = 5\nimage_res = 16\ntexture_res = 64\n\
         schedule_steps = 30\nwarmup_steps = 4\ntrain_steps = 8\ncheckpoint_every = 6\n\
         sample_steps = 4\nn_views = 4\nmeshes = cube,sphere,torus\n{extra}"
    );
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn default_dataset_has_three_meshes_and_six_views_each() {
    let tmp = tempfile::tempdir().unwrap();
    // Spec default: 3 meshes × 6 views → manifest with 18 view entries.
    let cfg = tmp.path().join("cfg.txt");
    fs::write(
        &cfg,
        "config_version = 1\nseed = 9\nimage_res = 16\ntexture_res = 32\nn_views = 6\n",
    )
    .unwrap();
    assert_ok(&run(
        &["gen-dataset", "--config", "cfg.txt", "--out", "ds"],
        tmp.path(),
    ));
    let manifest = fs::read_to_string(tmp.path().join("ds/manifest.txt")).unwrap();
    let entries = manifest.lines().filter(|l| l.starts_with("entry ")).count();
    assert_eq!(entries, 18);
    let samples = manifest.lines().filter(|l| l.starts_with("sample ")).count();
    assert_eq!(samples, 3);
}

#[test]
fn same_seed_reproduces_dataset_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "a"], tmp.path()));
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "b"], tmp.path()));
    for rel in [
        "manifest.txt",
        "cube_00/view_00.vxg",
        "cube_00/texture.png",
        "torus_00/cond_02_ccm.vxg",
        "sphere_00/view_03.png",
    ] {
        let a = fs::read(tmp.path().join("a").join(rel)).unwrap();
        let b = fs::read(tmp.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical-seed runs");
    }
}

#[test]
fn corrupt_manifest_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "ds"], tmp.path()));
    let manifest_path = tmp.path().join("ds/manifest.txt");
    let tampered = fs::read_to_string(&manifest_path)
        .unwrap()
        .replace("pattern=checker", "pattern=chequer");
    fs::write(&manifest_path, tampered).unwrap();
    let out = run(
        &["train", "--config", "cfg.txt", "--dataset", "ds", "--out", "run"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn unknown_config_key_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.txt"), "config_version = 1\nnope = 1\n").unwrap();
    let out = run(&["gen-dataset", "--config", "bad.txt", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "meshes = cube\nn_views = 2\n");
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "ds"], tmp.path()));
    // Uninterrupted run: 12 total steps, checkpoint at step 6.
    assert_ok(&run(
        &["train", "--config", "cfg.txt", "--dataset", "ds", "--out", "full"],
        tmp.path(),
    ));
    // Resume from the mid checkpoint into a fresh directory.
    assert_ok(&run(
        &[
            "train",
            "--config",
            "cfg.txt",
            "--dataset",
            "ds",
            "--out",
            "resumed",
            "--resume",
            "full/checkpoint_000006.vxc",
        ],
        tmp.path(),
    ));
    let full_log = fs::read_to_string(tmp.path().join("full/train_log.csv")).unwrap();
    let resumed_log = fs::read_to_string(tmp.path().join("resumed/train_log.csv")).unwrap();
    let tail_of_full: Vec<&str> = full_log
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() >= 6)
        .collect();
    let resumed_rows: Vec<&str> = resumed_log.lines().skip(1).collect();
    assert_eq!(
        tail_of_full, resumed_rows,
        "resumed losses must match the uninterrupted run step-for-step"
    );
    // Final checkpoints of both runs agree bit-for-bit.
    let a = fs::read(tmp.path().join("full/checkpoint_final.vxc")).unwrap();
    let b = fs::read(tmp.path().join("resumed/checkpoint_final.vxc")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generate_is_deterministic_and_respects_view_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "meshes = cube\nn_views = 2\n");
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "ds"], tmp.path()));
    assert_ok(&run(
        &["train", "--config", "cfg.txt", "--dataset", "ds", "--out", "run"],
        tmp.path(),
    ));
    let ckpt = "run/checkpoint_final.vxc";
    let refimg = "ds/cube_00/view_00.png";
    for out in ["g1", "g2"] {
        assert_ok(&run(
            &[
                "generate", "--config", "cfg.txt", "--checkpoint", ckpt, "--mesh", "sphere",
                "--ref-image", refimg, "--seed", "7", "--out", out,
            ],
            tmp.path(),
        ));
    }
    let a = fs::read(tmp.path().join("g1/view_00.vxg")).unwrap();
    let b = fs::read(tmp.path().join("g2/view_00.vxg")).unwrap();
    assert_eq!(a, b, "same seed must reproduce identical outputs");

    // 12 views is the ceiling; 13 is a validation error.
    let out = run(
        &[
            "generate", "--config", "cfg.txt", "--checkpoint", ckpt, "--mesh", "sphere",
            "--ref-image", refimg, "--views", "13", "--out", "g13",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_ok(&run(
        &[
            "generate", "--config", "cfg.txt", "--checkpoint", ckpt, "--mesh", "sphere",
            "--ref-image", refimg, "--views", "12", "--out", "g12",
        ],
        tmp.path(),
    ));
    let count = fs::read_dir(tmp.path().join("g12"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".png")
        })
        .count();
    assert_eq!(count, 12);
}

#[test]
fn bake_of_ground_truth_renders_recovers_texture() {
    let tmp = tempfile::tempdir().unwrap();
    // Render the dataset at 128² so the round trip is measured at matched
    // resolutions.
    fs::write(
        tmp.path().join("cfg.txt"),
        "config_version = 1\nseed = 3\nimage_res = 128\ntexture_res = 128\nn_views = 6\nmeshes = sphere\n",
    )
    .unwrap();
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "ds"], tmp.path()));
    assert_ok(&run(
        &[
            "bake", "--config", "cfg.txt", "--mesh", "sphere", "--images", "ds/sphere_00",
            "--resolution", "128", "--out", "baked",
        ],
        tmp.path(),
    ));
    let baked = read_grid(&tmp.path().join("baked/texture.vxg")).unwrap();
    let coverage = read_grid(&tmp.path().join("baked/texture_coverage.vxg")).unwrap();
    let gt = read_grid(&tmp.path().join("ds/sphere_00/texture.vxg")).unwrap();
    let flat_cov = Grid::new(vec![128 * 128], coverage.data().to_vec()).unwrap();
    let psnr = masked_psnr(&baked, &gt, &flat_cov, 3).unwrap();
    assert!(psnr > 30.0, "bake round-trip psnr {psnr:.2} dB");
    let report = fs::read_to_string(tmp.path().join("baked/lad_report.txt")).unwrap();
    let lad: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("lad: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(lad < 1e-3, "ground-truth partials lad {lad}");
}

#[test]
fn eval_exit_codes_follow_threshold_contract() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.txt"),
        "config_version = 1\nseed = 4\nimage_res = 32\ntexture_res = 32\nn_views = 4\nmeshes = sphere\n",
    )
    .unwrap();
    // Identical constant views → zero LAD → exit 0 even at threshold 0.
    let const_dir = tmp.path().join("const");
    fs::create_dir_all(&const_dir).unwrap();
    for vi in 0..4 {
        let img = Grid::filled(vec![32 * 32, 3], 0.6);
        voxtex_core::io::write_grid(&const_dir.join(format!("view_{vi:02}.vxg")), &img).unwrap();
    }
    let out = run(
        &[
            "eval", "--config", "cfg.txt", "--mesh", "sphere", "--images", "const",
            "--resolution", "32", "--threshold", "0",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("lad: 0.000000"));

    // Disagreeing views → positive LAD → threshold 0 fails with exit 4.
    let vary_dir = tmp.path().join("vary");
    fs::create_dir_all(&vary_dir).unwrap();
    for vi in 0..4 {
        let img = Grid::filled(vec![32 * 32, 3], 0.2 + vi as f32 * 0.2);
        voxtex_core::io::write_grid(&vary_dir.join(format!("view_{vi:02}.vxg")), &img).unwrap();
    }
    let out = run(
        &[
            "eval", "--config", "cfg.txt", "--mesh", "sphere", "--images", "vary",
            "--resolution", "32", "--threshold", "0",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));

    // Mismatched image/camera counts are a validation error.
    fs::remove_file(vary_dir.join("view_03.vxg")).unwrap();
    let out = run(
        &[
            "eval", "--config", "cfg.txt", "--mesh", "sphere", "--images", "vary",
            "--resolution", "32",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn artifacts_carry_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert_ok(&run(&["gen-dataset", "--config", "cfg.txt", "--out", "ds"], tmp.path()));
    let info = fs::read_to_string(tmp.path().join("ds/run_info.txt")).unwrap();
    let hash_line = info.lines().find(|l| l.starts_with("config_hash = ")).unwrap();
    let manifest = fs::read_to_string(tmp.path().join("ds/manifest.txt")).unwrap();
    assert!(manifest.contains(hash_line.trim_start_matches("config_hash = ").trim()));
}

#[test]
fn output_root_env_var_redirects_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    fs::create_dir_all(&root).unwrap();
    write_config(tmp.path(), "meshes = cube\nn_views = 1\n");
    let out = Command::new(bin())
        .args(["gen-dataset", "--config", "cfg.txt", "--out", "nested/ds"])
        .current_dir(tmp.path())
        .env("VOXTEX_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("nested/ds/manifest.txt").exists());
    assert!(!tmp.path().join("nested").exists());
}
