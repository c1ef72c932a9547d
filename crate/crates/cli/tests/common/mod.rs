//! Shared fixtures for the binary-level tests: a reduced-cost config, tiny
//! images, and process helpers. Not every test binary uses every helper.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffmatch::config::RunConfig;

pub fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffmatch"));
    // Tests choose cache locations explicitly; the developer's environment
    // must not leak in.
    cmd.env_remove("DIFFMATCH_CACHE");
    cmd
}

/// A toy-backend configuration cheap enough to run many commands per test:
/// two rounds of six steps, three inference crops, and a coarse grid.
pub fn fast_config(dir: &Path, seed: u64) -> PathBuf {
    let mut config = RunConfig::default();
    config.seed = seed;
    config.hp.n_embeddings = 2;
    config.hp.opt_steps = 6;
    config.hp.n_inference_crops = 3;
    config.hp.loss_resolution = (32, 32);
    let path = dir.join("fast.cfg");
    std::fs::write(&path, config.to_config_text()).unwrap();
    path
}

/// Deterministic gradient image; `tint` separates source from target.
pub fn write_png(path: &Path, w: u32, h: u32, tint: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([
            (x * 5 % 256) as u8,
            (y * 6 % 256) as u8,
            ((x + y + tint) % 256) as u8,
        ])
    });
    img.save(path).unwrap();
}

pub fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn assert_fails(out: &Output) -> String {
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.starts_with("error: "), "stderr should carry the error, got: {stderr}");
    stderr
}
