use std::path::Path;
use std::process::{Command, Output};

fn eqillum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqillum"))
        .args(args)
        .env_remove("EQILLUM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = eqillum(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "height = 16\nwidth = 32\npatches = 4\nchannels = 4\nblocks = 1\nlatent_dim = 27\n\
decoder_embed = 8\ndecoder_attention = 8\ndecoder_hidden = 16\ndecoder_res_blocks = 1\nframe_hidden = 4\n\
steps = 3\nbatch_size = 2\nfit_iterations = 5\n";

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(eqillum(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(eqillum(&["frobnicate"]).status.code(), Some(2));
    let missing_seed = eqillum(&["train", "--data", "x", "--out", "y"]);
    assert_eq!(missing_seed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_seed.stderr).contains("--seed"));
    assert_eq!(
        eqillum(&["fit", "--checkpoint", "c", "--input", "i", "--out", "o"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        eqillum(&[
            "train",
            "--data",
            "x",
            "--out",
            "y",
            "--seed",
            "1",
            "--latent-dim",
            "12"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = eqillum(&[
        "train",
        "--data",
        s(&dir.path().join("nope")),
        "--out",
        "c.bin",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = eqillum(&[
        "encode",
        "--checkpoint",
        s(&dir.path().join("missing")),
        "--input",
        "x",
        "--out",
        "z",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = d.join("data");
    ok(&[
        "gen",
        "--out",
        s(&data),
        "--count",
        "4",
        "--height",
        "16",
        "--width",
        "32",
        "--seed",
        "1",
    ]);

    let (c1, c2) = (d.join("a.ckpt"), d.join("b.ckpt"));
    for c in [&c1, &c2] {
        ok(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--seed",
            "7",
            "--out",
            s(c),
        ]);
    }
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());

    let ad = d.join("ad.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--baseline",
        "autodecoder",
        "--out",
        s(&ad),
    ]);
    assert_ne!(std::fs::read(&ad).unwrap(), std::fs::read(&c1).unwrap());

    let map = data.join("sky_00000.hdr");
    let (z1, z2) = (d.join("z1.txt"), d.join("z2.txt"));
    ok(&["encode", "--checkpoint", s(&c1), "--input", s(&map), "--out", s(&z1)]);
    ok(&[
        "fit",
        "--checkpoint",
        s(&c1),
        "--input",
        s(&map),
        "--seed",
        "3",
        "--out",
        s(&z2),
    ]);

    let (r1, r2) = (d.join("r1.hdr"), d.join("r2.hdr"));
    ok(&[
        "decode",
        "--checkpoint",
        s(&c1),
        "--latent",
        s(&z1),
        "--out",
        s(&r1),
        "--png",
        s(&d.join("r1.png")),
    ]);
    ok(&["decode", "--checkpoint", s(&c1), "--latent", s(&z2), "--out", s(&r2)]);
    let frames = d.join("frames");
    ok(&[
        "interp",
        "--checkpoint",
        s(&c1),
        "--from",
        s(&z1),
        "--to",
        s(&z2),
        "--steps",
        "5",
        "--out",
        s(&d.join("strip.png")),
        "--frames",
        s(&frames),
    ]);
    let count = std::fs::read_dir(&frames).unwrap().count();
    assert_eq!(count, 5);
    assert_eq!(
        std::fs::read(frames.join("frame_000.hdr")).unwrap(),
        std::fs::read(&r1).unwrap()
    );
    assert_eq!(
        std::fs::read(frames.join("frame_004.hdr")).unwrap(),
        std::fs::read(&r2).unwrap()
    );

    let (e1, e2) = (d.join("e1.txt"), d.join("e2.txt"));
    for e in [&e1, &e2] {
        ok(&[
            "eval",
            "--checkpoint",
            s(&ad),
            "--data",
            s(&data),
            "--seed",
            "5",
            "--out",
            s(e),
            "--uniqueness",
            "--targets",
            "1",
            "--consistency",
            "--pairs",
            "20",
            "--limit",
            "2",
        ]);
    }
    let report = std::fs::read_to_string(&e1).unwrap();
    assert_eq!(report, std::fs::read_to_string(&e2).unwrap());
    for key in [
        "psnr_ldr",
        "ssim",
        "psnr_hdr",
        "uniqueness",
        "reconstruction_consistency",
        "image.00001",
    ] {
        assert!(report.contains(key), "missing {key} in\n{report}");
    }
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eqillum"))
        .args([
            "gen", "--out", "skies", "--count", "2", "--height", "4", "--width", "8", "--seed", "2",
        ])
        .env("EQILLUM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("skies/sky_00001.hdr").exists());
}

#[test]
fn equivariance_suite_passes_on_an_untrained_model() {
    let out = ok(&["check-equivariance", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("encoder-mean-roll"));
    assert!(!text.contains("FAIL"), "{text}");
}
