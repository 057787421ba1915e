//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! Run with `cargo test --release --test acceptance`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use degas::glo::{lap1_loss, lap_pyramid, lap_reconstruct};
use degas::harness::checkpoint::Checkpoint;
use degas::harness::dataset::{decode_dataset, encode_dataset, read_dataset};
use degas::harness::gradsuite::{run_suite, SUITE_TOL};
use degas::harness::pipeline::{
    evaluate, prune_checkpoint, random_baseline, run_retrain_job, run_search_job, RETRAIN_CKPT, SEARCH_CKPT,
};
use degas::harness::{parse_config, parse_genotype, render_toy, serialize_genotype, RunConfig};
use degas::pruning::{count_architectures, prune};
use degas::search_space::{build_supergraph, EdgeClass, GraphSpec};
use degas::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{draw, flatten, four_nodes, oracle, oracle_lap1};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> RunConfig {
    parse_config(&fs::read_to_string(workspace().join("configs/toy_search.conf")).unwrap()).unwrap()
}

fn quiet() -> impl FnMut(&str) {
    |_| {}
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let rows = run_suite(SUITE_TOL);
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &rows {
        check(r.pass && r.seeds >= 5, format!("{} failed ({:?})", r.label, r.error))?;
    }
    check(rows.len() >= 18, format!("only {} rows", rows.len()))?;
    check(secs <= 300.0, format!("took {secs:.0}s"))?;
    Ok(format!("{} rows, max rel err {worst:.2e}, {secs:.1}s", rows.len()))
}

fn combinatorics() -> Outcome {
    let a = count_architectures(&[4, 4, 4, 7, 7, 7, 5, 9, 9]).to_string();
    let b = count_architectures(&[9, 9, 9, 4, 4, 4, 5, 5, 5, 5, 5]).to_string();
    check(a == "8890560" && b == "145800000", format!("{a}, {b}"))?;
    Ok(format!("{a} and {b}"))
}

fn census() -> Outcome {
    let mut net = build_supergraph(&GraphSpec::new(3, 1, 4, 8, 16), 0).map_err(|e| e.to_string())?;
    let count = |c: EdgeClass| net.edges.iter().filter(|e| e.class == c).count();
    let got = (count(EdgeClass::DirectUpsample), count(EdgeClass::DirectNormal), count(EdgeClass::Residual));
    check(got == (3, 3, 5), format!("{got:?}"))?;
    let z = Tensor::randn(&[1, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(0));
    let y = net.generate(&z, degas::tensor::Mode::Eval).map_err(|e| e.to_string())?;
    check(y.shape() == [1, 3, 32, 32], format!("output {:?}", y.shape()))?;
    Ok("3 upsample / 3 normal / 5 residual edges, 32x32x3 output".into())
}

fn pruning_oracle() -> Outcome {
    let t = four_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let a = draw(&t, &mut rng, i % 2 == 0);
        let g = prune(&t, &a).map_err(|e| e.to_string())?;
        check(flatten(&g) == oracle(&t, &a), format!("mismatch on draw {i}"))?;
        let mut b = a.clone();
        for (k, ea) in b.iter_mut().enumerate() {
            let c = [1.0, -2.0, 8.0][k % 3];
            ea.alpha.iter_mut().for_each(|x| *x += c);
        }
        check(prune(&t, &b).map_err(|e| e.to_string())? == g, format!("shift changed draw {i}"))?;
    }
    Ok("1000 draws match the brute-force oracle, shifts exact".into())
}

fn pyramid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut rec, mut lap) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::rand_uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
        let back = lap_reconstruct(&lap_pyramid(&x, 3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        rec = rec.max(back.max_abs_diff(&x));
        let got = lap1_loss(&x, &y, 3).map_err(|e| e.to_string())?;
        lap = lap.max((got - oracle_lap1(&x, &y, 3)).abs());
    }
    check(rec <= 1e-9, format!("reconstruction error {rec:e}"))?;
    check(lap <= 1e-9, format!("lap1 differs from oracle by {lap:e}"))?;
    Ok(format!("reconstruction {rec:.1e}, lap1 vs oracle {lap:.1e}"))
}

struct Toy {
    cfg: RunConfig,
    train: Tensor,
    heldout: Tensor,
    dir: tempfile::TempDir,
}

impl Toy {
    /// The bundled data files, which must match the renderer at seeds 1 and 2.
    fn new() -> Toy {
        let cfg = toy_config();
        let size = cfg.base << cfg.stages;
        let load = |p: &Option<PathBuf>| read_dataset(&workspace().join(p.as_ref().unwrap())).unwrap();
        let (train, heldout) = (load(&cfg.dataset), load(&cfg.eval_dataset));
        assert_eq!(train, render_toy(512, size, 1), "bundled training set is stale");
        assert_eq!(heldout, render_toy(256, size, 2), "bundled held-out set is stale");
        Toy {
            train,
            heldout,
            cfg,
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn search_dir(&self, seed: u64) -> PathBuf {
        self.dir.path().join(format!("search{seed}"))
    }

    fn search(&self, seed: u64) -> Result<Vec<f64>, String> {
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        let out = self.search_dir(seed);
        let r = run_search_job(&cfg, &self.train, &out, false, None, &mut quiet()).map_err(|e| e.to_string())?;
        Ok(r.history.iter().map(|h| h.w_loss).collect())
    }

    /// Retrains `g` with a fixed seed and scores samples against held-out images.
    fn retrain_fid(&self, g: &degas::search_space::Genotype, name: &str) -> Result<f64, String> {
        let mut cfg = self.cfg.clone();
        cfg.seed = 1;
        let out = self.dir.path().join(name);
        run_retrain_job(&cfg, g, &self.train, &out, false, None, &mut quiet()).map_err(|e| e.to_string())?;
        let ck = Checkpoint::load(&out.join(RETRAIN_CKPT)).map_err(|e| e.to_string())?;
        Ok(evaluate(&ck, &self.heldout, 0, None).map_err(|e| e.to_string())?.proxy_fid)
    }
}

fn descent(toy: &Toy) -> Outcome {
    let t = Instant::now();
    let w = toy.search(1)?;
    let secs = t.elapsed().as_secs_f64();
    check(w.len() == 30, format!("{} epochs", w.len()))?;
    check(w[9] < w[0], format!("epoch 10 w_loss {:.4} not below epoch 1 {:.4}", w[9], w[0]))?;
    let ratio = w[w.len() - 1] / w[0];
    check(secs <= 1800.0, format!("took {secs:.0}s"))?;
    check(ratio <= 0.5, format!("w_loss {:.4} -> {:.4} (ratio {ratio:.3})", w[0], w[w.len() - 1]))?;
    Ok(format!("w_loss {:.4} -> {:.4} (ratio {ratio:.3}), {secs:.0}s", w[0], w[w.len() - 1]))
}

fn ablation(toy: &Toy) -> Outcome {
    let mut base = Vec::new();
    for s in 101..104 {
        let g = random_baseline(&toy.cfg, s).map_err(|e| e.to_string())?;
        base.push(toy.retrain_fid(&g, &format!("random{s}"))?);
    }
    let mut sorted = base.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    let mut wins = 0;
    let mut searched = Vec::new();
    for seed in 1..4 {
        // seed 1 was searched by the descent criterion
        if !toy.search_dir(seed).join(SEARCH_CKPT).exists() {
            toy.search(seed)?;
        }
        let g = prune_checkpoint(&toy.search_dir(seed).join(SEARCH_CKPT)).map_err(|e| e.to_string())?;
        let fid = toy.retrain_fid(&g, &format!("searched{seed}"))?;
        if fid <= median {
            wins += 1;
        }
        searched.push(fid);
    }
    let msg = format!("searched {searched:.3?} vs random median {median:.3} (of {base:.3?}), {wins}/3");
    check(wins >= 2, msg.clone())?;
    Ok(msg)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = "stages = 1\nn = 1\nbase = 4\nlatent_dim = 6\nchannels = 4\nbatch_size = 4\nepochs = 4\nlevels = 2\nseed = 7\n";
    let cfg = parse_config(text).map_err(|e| e.to_string())?;
    let imgs = render_toy(16, 8, 3);
    let run = |name: &str, split: bool| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        if split {
            run_search_job(&cfg, &imgs, &out, false, Some(2), &mut quiet()).map_err(|e| e.to_string())?;
            run_search_job(&cfg, &imgs, &out, true, None, &mut quiet()).map_err(|e| e.to_string())?;
        } else {
            run_search_job(&cfg, &imgs, &out, false, None, &mut quiet()).map_err(|e| e.to_string())?;
        }
        Ok(out.join(SEARCH_CKPT))
    };
    let (a, b, c) = (run("a", false)?, run("b", false)?, run("c", true)?);
    let ga = serialize_genotype(&prune_checkpoint(&a).map_err(|e| e.to_string())?);
    let gb = serialize_genotype(&prune_checkpoint(&b).map_err(|e| e.to_string())?);
    let gc = serialize_genotype(&prune_checkpoint(&c).map_err(|e| e.to_string())?);
    check(ga == gb, "reruns gave different genotypes")?;
    check(ga == gc, "resumed run gave a different genotype")?;
    let load = |p: &Path| {
        let mut ck = Checkpoint::load(p).unwrap();
        ck.config.out = PathBuf::new();
        ck.to_bytes()
    };
    check(load(&a) == load(&c), "resumed checkpoint differs from uninterrupted run")?;
    check(parse_genotype(&ga).map(|g| serialize_genotype(&g)).ok().as_deref() == Some(ga.as_str()), "genotype text round trip")?;
    let bytes = encode_dataset(&imgs).map_err(|e| e.to_string())?;
    let again = encode_dataset(&decode_dataset(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    check(bytes == again, "dataset round trip")?;
    Ok("genotypes, resumed checkpoint and file formats byte-identical".into())
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("PASS {label}: {msg} [{secs:.1}s]");
            true
        }
        Err(msg) => {
            println!("FAIL {label}: {msg} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test` passes libtest flags; a name filter other than ours skips the suite
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let toy = Toy::new();
    let results = [
        run("1 gradient suite", gradient_suite),
        run("2 search-space counts", combinatorics),
        run("3 topology census", census),
        run("4 pruning oracle", pruning_oracle),
        run("5 pyramid exactness", pyramid),
        run("6 end-to-end descent", || descent(&toy)),
        run("7 ablation ordering", || ablation(&toy)),
        run("8 determinism and persistence", determinism),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
