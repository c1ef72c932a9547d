//! Ensemble reuse across targets: matching a second target against the
//! same source must pull the ensembles from the cache and spend forwards
//! on inference only.

mod common;

use std::sync::atomic::Ordering;

use diffmatch::backend::toy::{make_toy_backend, CountingBackend};
use diffmatch::config::RunConfig;
use diffmatch::optim::EmbeddingCache;
use diffmatch::types::Point;
use diffmatch_cli::args::{CommonArgs, MatchArgs};
use diffmatch_cli::commands::run_match;
use diffmatch_cli::session::{Session, TOY_EMBED_DIM, TOY_GRID, TOY_TOKENS, TOY_WEIGHT_SEED};

#[test]
fn second_target_runs_inference_only() {
    let dir = tempfile::tempdir().unwrap();
    for (name, tint) in [("s.png", 0), ("t1.png", 70), ("t2.png", 140)] {
        common::write_png(&dir.path().join(name), 48, 40, tint);
    }

    let mut config = RunConfig::default();
    config.seed = 5;
    config.hp.n_embeddings = 2;
    config.hp.opt_steps = 6;
    config.hp.n_inference_crops = 3;
    config.hp.loss_resolution = (32, 32);
    config.validate().unwrap();

    let cache_dir = dir.path().join("cache");
    let cache = EmbeddingCache::new(&cache_dir, config.embedding_digest());
    let session = Session { config: config.clone(), cache, cache_dir };

    let (toy, _) = make_toy_backend(
        TOY_GRID,
        TOY_TOKENS,
        TOY_EMBED_DIM,
        Point { x: 0.5, y: 0.5 },
        TOY_WEIGHT_SEED,
    )
    .unwrap();
    let backend = CountingBackend::new(toy);
    let (_, forwards) = backend.counters();

    let args_for = |target: &str, out: &str| MatchArgs {
        common: CommonArgs::default(),
        source: dir.path().join("s.png"),
        targets: vec![dir.path().join(target)],
        queries: vec!["0.4,0.6".into()],
        keypoint_file: None,
        out: dir.path().join(out),
        overlay: false,
    };

    run_match(&args_for("t1.png", "m1.txt"), &session, &backend).unwrap();
    let after_first = forwards.load(Ordering::Relaxed);

    run_match(&args_for("t2.png", "m2.txt"), &session, &backend).unwrap();
    let after_second = forwards.load(Ordering::Relaxed);

    // Two members times three crops, and nothing else: the second target
    // found the source's ensemble in the cache.
    let inference_only = 2 * 3;
    assert_eq!(after_second - after_first, inference_only);
    assert!(
        after_first > 2 * inference_only,
        "the first run should also pay for optimization, saw {after_first} forwards"
    );

    // Re-matching the first target costs the same inference-only budget
    // and reproduces its result file.
    run_match(&args_for("t1.png", "m1-again.txt"), &session, &backend).unwrap();
    assert_eq!(forwards.load(Ordering::Relaxed) - after_second, inference_only);
    let m1 = std::fs::read(dir.path().join("m1.txt")).unwrap();
    assert_eq!(m1, std::fs::read(dir.path().join("m1-again.txt")).unwrap());

    // A cold-cache matching run over both targets at once lands on the
    // concatenation of the per-target runs: results do not depend on what
    // the cache held beforehand.
    let cache_dir2 = dir.path().join("cache2");
    let session2 = Session {
        config: config.clone(),
        cache: EmbeddingCache::new(&cache_dir2, config.embedding_digest()),
        cache_dir: cache_dir2,
    };
    let both = MatchArgs {
        targets: vec![dir.path().join("t1.png"), dir.path().join("t2.png")],
        ..args_for("t1.png", "m-both.txt")
    };
    run_match(&both, &session2, &backend).unwrap();
    let mut expected = m1;
    expected.extend_from_slice(&std::fs::read(dir.path().join("m2.txt")).unwrap());
    assert_eq!(std::fs::read(dir.path().join("m-both.txt")).unwrap(), expected);
}
