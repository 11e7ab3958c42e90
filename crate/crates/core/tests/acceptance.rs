//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per criterion
//! and exits non-zero if any criterion fails.
//!
//! The training-based criteria run the real CLI pipeline at the default desk
//! scale, so a full run takes about an hour of CPU time.

use std::path::Path;
use std::time::Instant;

use cdr::autodiff::{grad_check, AutodiffError, Graph, ParamStore, Tensor, Var};
use cdr::contrastive::{self, LossVariant, ScoreMatrix, SimilarityKind};
use cdr::datagen::{Dataset, DatasetSpec, Paradigm, Split};
use cdr::eval::{self, Prop1Config, Regime};
use cdr::models::ModelConfig;
use cdr::renderer::TextureFamily;
use cdr::training::{self, Model, TrainConfig, TrainError};
use cdr::worldsim::{self, SceneConfig, FRAME_DT, SUBSTEPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs one criterion and prints its line; a panic counts as a failure.
fn check<T>(name: &str, f: impl FnOnce() -> T, judge: impl FnOnce(&T) -> Outcome) -> (bool, Option<T>) {
    let start = Instant::now();
    let (o, value) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(v) => (judge(&v), Some(v)),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (outcome(false, format!("panicked: {msg}")), None)
        }
    };
    let tag = if o.pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    (o.pass, value)
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    check(name, f, |o| outcome(o.pass, o.detail.clone())).0
}

fn minutes(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- CLI driving

fn cli(dir: &Path, args: &[&str]) -> String {
    let mut full = vec!["cdr".to_string(), "--config".into(), dir.join("cdr.toml").display().to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let cwd = std::env::current_dir().unwrap();
    std::env::set_current_dir(dir).unwrap();
    let r = cdr::cli::run(full, &mut out);
    std::env::set_current_dir(cwd).unwrap();
    if let Err(e) = r {
        panic!("cdr {}: {}", args.join(" "), e.line());
    }
    String::from_utf8(out).unwrap()
}

/// Value of `key=` in the first line that starts with `prefix` and has that key.
fn field(output: &str, prefix: &str, key: &str) -> f64 {
    let pat = format!("{key}=");
    output
        .lines()
        .filter(|l| l.starts_with(prefix))
        .find_map(|l| l.split_whitespace().find_map(|w| w.strip_prefix(&pat)))
        .unwrap_or_else(|| panic!("no `{prefix} ... {key}=` line in\n{output}"))
        .parse()
        .unwrap()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cdr.toml"), config).unwrap();
    dir
}

/// Controlled train, pool and query datasets at the default scale.
fn gen_controlled(dir: &Path) {
    cli(dir, &["gen-data", "--paradigm", "controlled", "--out", "train.cdrd"]);
    cli(dir, &["gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "200", "--out", "pool.cdrd"]);
    cli(dir, &[
        "gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "100", "--seed-offset", "100000", "--out", "queries.cdrd",
    ]);
}

struct Trained {
    best_val_loss: f64,
    minutes: f64,
}

fn train(dir: &Path, loss: &str) -> Trained {
    let start = Instant::now();
    let out = cli(dir, &["train", "--loss", loss, "--dataset", "train.cdrd", "--out", &format!("{loss}.ckpt")]);
    Trained {
        best_val_loss: field(&out, "trained", "best_val_loss"),
        minutes: minutes(start),
    }
}

// ------------------------------------------------------------------ criteria

fn tiny_model() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        latent_dim: 3,
        conv_channels: [2, 3],
        encoder_hidden: 6,
        action_hidden: 5,
        action_code: 3,
        trunk_hidden: 6,
        gru_hidden: 4,
        horizons: 2,
        context_frames: 2,
        ..ModelConfig::default()
    }
}

fn small_dataset(paradigm: Paradigm, episodes: usize, frames: usize, res_pool: &[TextureFamily]) -> Dataset {
    let scene = match paradigm {
        Paradigm::Controlled => SceneConfig::controlled_default(),
        Paradigm::Uncontrolled => SceneConfig::uncontrolled_default(),
    };
    Dataset::generate(&DatasetSpec {
        paradigm,
        split: Split::Train,
        scene: &scene,
        family_pool: res_pool,
        frames,
        episodes,
        first_seed: 0,
        config_hash: [0; 32],
    })
    .unwrap()
}

fn as_autodiff(e: TrainError) -> AutodiffError {
    match e {
        TrainError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut parts = Vec::new();
    // full models under every loss variant
    let cases = [
        (Paradigm::Controlled, LossVariant::Cdr),
        (Paradigm::Controlled, LossVariant::Naive),
        (Paradigm::Controlled, LossVariant::SameDomain),
        (Paradigm::Uncontrolled, LossVariant::Cdr),
    ];
    for (paradigm, variant) in cases {
        let cfg = tiny_model();
        let similarity = match paradigm {
            Paradigm::Controlled => SimilarityKind::DotExp,
            Paradigm::Uncontrolled => SimilarityKind::Bilinear,
        };
        let model = Model::init(paradigm, similarity, &cfg, 3).unwrap();
        let ds = small_dataset(paradigm, 8, 5, &TextureFamily::ALL);
        let layout = TrainConfig::default().layout(paradigm, &cfg);
        let batch = cdr::datagen::build_batch(&ds, variant, &layout, &mut ChaCha8Rng::seed_from_u64(1), 4).unwrap();
        let r = grad_check(&model.params, |g| model.batch_loss(g, &batch, variant).map_err(as_autodiff), 1e-5, 400).unwrap();
        parts.push(format!("{}/{}={:.1e}", paradigm.name(), variant.name(), r.max_rel_error));
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    // each similarity kind inside InfoNCE
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let rand_t = |rng: &mut ChaCha8Rng, r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    store.insert("p", rand_t(&mut rng, 6, 4)).unwrap();
    store.insert("l", rand_t(&mut rng, 6, 4)).unwrap();
    store.insert_glorot(SimilarityKind::BILINEAR_PARAM, &[4, 4], 4, 4, &mut rng).unwrap();
    for kind in [SimilarityKind::DotExp, SimilarityKind::Bilinear, SimilarityKind::NegL2, SimilarityKind::Cosine] {
        let r = grad_check(
            &store,
            |g: &mut Graph| -> Result<Var, AutodiffError> {
                let (p, l) = (g.param("p")?, g.param("l")?);
                let logits = contrastive::graph_logits(g, p, l, kind).unwrap();
                Ok(contrastive::graph_info_nce(g, logits).unwrap())
            },
            1e-5,
            1000,
        )
        .unwrap();
        parts.push(format!("{kind:?}={:.1e}", r.max_rel_error));
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    outcome(worst <= 1e-4, format!("max_rel_error={worst:.2e} (<= 1e-4) over {checked} coords [{}]", parts.join(" ")))
}

fn loss_identities() -> Outcome {
    let n = 7;
    let uniform = contrastive::info_nce(&ScoreMatrix::from_scores(n, &vec![2.5; n * n]).unwrap());
    let one = contrastive::info_nce(&ScoreMatrix::from_scores(1, &[3.0]).unwrap());
    let two = contrastive::info_nce(&ScoreMatrix::from_scores(2, &[2.0, 1.0, 1.0, 2.0]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..9).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect() };
    let (p, l) = (rows(&mut rng), rows(&mut rng));
    // with e' = e the CDR labels are the naive labels, so both losses see the same rows
    let cdr = contrastive::cdr_loss(&p, &l, SimilarityKind::DotExp, None).unwrap();
    let naive = contrastive::naive_dr_loss(&p, &l, SimilarityKind::DotExp, None).unwrap();
    let e_uniform = (uniform - (n as f64).ln()).abs();
    let e_two = (two + (2.0f64 / 3.0).ln()).abs();
    let pass = e_uniform <= 1e-10 && one == 0.0 && e_two <= 1e-10 && cdr.to_bits() == naive.to_bits();
    outcome(
        pass,
        format!("|uniform - log N|={e_uniform:.1e} N=1 loss={one} |[[2,1],[1,2]] + log(2/3)|={e_two:.1e} cdr==naive bitwise={}", cdr.to_bits() == naive.to_bits()),
    )
}

fn initialization() -> Outcome {
    let log_n = (N as f64).ln();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    let cases = [
        (Paradigm::Controlled, LossVariant::Cdr),
        (Paradigm::Controlled, LossVariant::Naive),
        (Paradigm::Controlled, LossVariant::SameDomain),
        (Paradigm::Uncontrolled, LossVariant::Cdr),
        (Paradigm::Uncontrolled, LossVariant::Naive),
    ];
    let (pool, _) = cdr::renderer::split_families(&TextureFamily::ALL, 2, 0).unwrap();
    for (paradigm, variant) in cases {
        let frames = if paradigm == Paradigm::Controlled { 15 } else { 30 };
        let ds = small_dataset(paradigm, 200, frames, &pool);
        let cfg = TrainConfig { loss: variant, ..TrainConfig::default() };
        let model = Model::init(paradigm, cfg.similarity_for(paradigm), &ModelConfig::default(), cfg.seed).unwrap();
        let loss = training::evaluate_loss(&model, &ds, &cfg, variant).unwrap();
        parts.push(format!("{}/{}={loss:.4}", paradigm.name(), variant.name()));
        worst = worst.max((loss - log_n).abs());
    }
    outcome(worst <= 0.1, format!("max |loss - log 64|={worst:.4} (<= 0.1) [{}]", parts.join(" ")))
}

fn proposition_one() -> Outcome {
    let start = Instant::now();
    let cfg = Prop1Config::default();
    let indep = eval::prop1_experiment(&cfg, Regime::Independent).unwrap();
    let dep = eval::prop1_experiment(&cfg, Regime::Dependent).unwrap();
    let small = indep.count_ratio_at_most(0.05);
    let subst = indep
        .trials
        .iter()
        .map(|t| (t.loss_substituted - t.loss_full).abs() / t.loss_full.abs().max(1e-12))
        .fold(0.0, f64::max);
    let mins = minutes(start);
    let pass = small >= 8 && dep.median_ratio >= 10.0 * indep.median_ratio && subst <= 0.02 && mins < 5.0;
    outcome(
        pass,
        format!(
            "indep ratio<=0.05 in {small}/10 (>= 8), median indep={:.4} dep={:.4} (dep >= 10x), substitution rel err={subst:.2e} (<= 0.02), {mins:.1} min (< 5)",
            indep.median_ratio, dep.median_ratio
        ),
    )
}

struct Pipeline {
    _dir: tempfile::TempDir,
    cdr: Trained,
    naive: Trained,
    invariance: [(f64, f64); 2],
    retrieval: [(f64, f64, f64); 2],
    retrieval_minutes: f64,
}

/// Trains CDR and naive DR on one controlled dataset and evaluates both.
fn representation_pipeline() -> Pipeline {
    let dir = workspace("");
    let d = dir.path();
    gen_controlled(d);
    let cdr = train(d, "cdr");
    let naive = train(d, "naive");
    let mut invariance = [(0.0, 0.0); 2];
    let mut retrieval = [(0.0, 0.0, 0.0); 2];
    let start = Instant::now();
    for (i, loss) in ["cdr", "naive"].iter().enumerate() {
        let ckpt = format!("{loss}.ckpt");
        let inv = cli(d, &["eval-invariance", "--checkpoint", &ckpt]);
        invariance[i] = (field(&inv, "invariance", "cos_mean"), field(&inv, "invariance", "mse_mean"));
        let ret = cli(d, &["eval-retrieval", "--checkpoint", &ckpt, "--pool", "pool.cdrd", "--queries", "queries.cdrd", "--split", "ood"]);
        retrieval[i] = (
            field(&ret, "retrieval", "iou_mean"),
            field(&ret, "retrieval", "distance_mean"),
            field(&ret, "retrieval", "random_iou"),
        );
        println!("  {loss}: {} {}", inv.lines().last().unwrap(), ret.lines().last().unwrap());
    }
    Pipeline {
        _dir: dir,
        cdr,
        naive,
        invariance,
        retrieval,
        retrieval_minutes: minutes(start),
    }
}

fn invariance(p: &Pipeline) -> Outcome {
    let [(cos_c, mse_c), (cos_n, mse_n)] = p.invariance;
    let pass = cos_c >= 0.8 && cos_c >= cos_n + 0.05 && mse_c < mse_n && p.cdr.minutes < 30.0 && p.naive.minutes < 30.0;
    outcome(
        pass,
        format!(
            "cos cdr={cos_c:.4} naive={cos_n:.4} (cdr >= 0.8, >= naive + 0.05), mse cdr={mse_c:.4} naive={mse_n:.4} (cdr lower), training {:.1}/{:.1} min (< 30 each)",
            p.cdr.minutes, p.naive.minutes
        ),
    )
}

fn retrieval(p: &Pipeline) -> Outcome {
    let [(iou_c, dist_c, random), (iou_n, dist_n, _)] = p.retrieval;
    let pass = iou_c > iou_n && iou_c > random && iou_n > random && dist_c < dist_n && p.retrieval_minutes < 10.0;
    outcome(
        pass,
        format!(
            "ood iou cdr={iou_c:.4} naive={iou_n:.4} random={random:.4} (cdr > naive, both > random), distance cdr={dist_c:.4} naive={dist_n:.4} (cdr lower), eval {:.1} min (< 10)",
            p.retrieval_minutes
        ),
    )
}

fn mi_bound(p: &Pipeline) -> Outcome {
    let bound = contrastive::mi_lower_bound(p.cdr.best_val_loss, N);
    outcome(bound > 1.0, format!("log 64 - val loss={bound:.4} (> 1.0)"))
}

/// Planning uses models trained with the L2 similarity, the metric the planner scores with.
fn planning() -> Outcome {
    let dir = workspace("[training]\nsimilarity = \"neg_l2\"\n");
    let d = dir.path();
    gen_controlled(d);
    train(d, "cdr");
    train(d, "naive");
    let start = Instant::now();
    let mut finals = [[0.0; 2]; 2];
    let mut initial = 0.0;
    let mut random = 0.0;
    for (i, loss) in ["cdr", "naive"].iter().enumerate() {
        for (j, goal) in ["same", "different"].iter().enumerate() {
            let out = cli(d, &["plan", "--checkpoint", &format!("{loss}.ckpt"), "--goal-domain", goal]);
            println!("  {loss}: {}", out.lines().last().unwrap());
            finals[i][j] = field(&out, "plan", "planner");
            if i == 0 && j == 0 {
                initial = field(&out, "plan", "initial");
                random = field(&out, "plan", "random");
            }
        }
    }
    let mins = minutes(start);
    let [[c_same, c_diff], [n_same, n_diff]] = finals;
    let degrade = |same: f64, diff: f64| (diff - same) / same;
    let (dc, dn) = (degrade(c_same, c_diff), degrade(n_same, n_diff));
    let pass = c_same < 0.5 * initial && c_same < random && dc < dn && mins < 10.0;
    outcome(
        pass,
        format!(
            "cdr final={c_same:.4} initial={initial:.4} (< 0.5x) random={random:.4} (cdr lower), relative degradation cdr={dc:.4} naive={dn:.4} (cdr smaller), {mins:.1} min (< 10)"
        ),
    )
}

fn determinism() -> Outcome {
    let small = "seed = 3\n[model]\nresolution = 16\n[data]\ncontrolled_episodes = 40\n[training]\nepochs = 2\nbatch_size = 8\nmax_batches_per_epoch = 3\neval_batches = 2\n[evaluation]\npool_size = 40\nqueries = 10\ninvariance_pairs = 16\n";
    let run = || {
        let dir = workspace(small);
        let d = dir.path();
        cli(d, &["gen-data", "--paradigm", "controlled", "--out", "train.cdrd"]);
        cli(d, &["gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "10", "--out", "pool.cdrd"]);
        cli(d, &["gen-data", "--paradigm", "controlled", "--split", "test", "--episodes", "5", "--seed-offset", "1000", "--out", "q.cdrd"]);
        cli(d, &["train", "--loss", "cdr", "--dataset", "train.cdrd", "--out", "cdr.ckpt"]);
        let inv = cli(d, &["eval-invariance", "--checkpoint", "cdr.ckpt"]);
        let ret = cli(d, &["eval-retrieval", "--checkpoint", "cdr.ckpt", "--pool", "pool.cdrd", "--queries", "q.cdrd", "--split", "ood"]);
        let files: Vec<Vec<u8>> = ["train.cdrd", "pool.cdrd", "q.cdrd", "cdr.ckpt", "cdr.ckpt.metrics"]
            .iter()
            .map(|f| std::fs::read(d.join(f)).unwrap())
            .collect();
        (files, inv + &ret)
    };
    let (a, b) = (run(), run());
    let same_files = a.0 == b.0;
    let same_reports = a.1 == b.1;
    outcome(
        same_files && same_reports,
        format!("datasets, checkpoint and metric log identical={same_files}, eval reports identical={same_reports}"),
    )
}

fn physics() -> Outcome {
    let scene = SceneConfig::uncontrolled_default();
    let h = FRAME_DT / SUBSTEPS as f64;
    let (mut containment, mut dissipation, mut momentum, mut checked_momentum) = (0, 0, 0, 0);
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = worldsim::sample_initial_state(&mut rng, &scene).unwrap();
        let push = worldsim::sample_initial_impulse(&mut rng, &scene).unwrap();
        for t in 0..30 {
            let action = (t == 0).then_some(&push);
            let (next, contacts) = worldsim::step_with_contacts(&s, action, FRAME_DT).unwrap();
            if next.check_containment(1e-9).is_err() {
                containment += 1;
            }
            if action.is_none() {
                if next.kinetic_energy() > s.kinetic_energy() * (1.0 + 1e-12) + 1e-15 {
                    dissipation += 1;
                }
                if contacts.wall == 0 && contacts.pair == 0 {
                    checked_momentum += 1;
                    let factor = (1.0 - s.drag_coeff * h).powi(SUBSTEPS as i32);
                    let (p, q) = (s.momentum(), next.momentum());
                    let tol = 1e-9 * p.norm().max(1e-12);
                    if (q.x - factor * p.x).abs() > tol || (q.y - factor * p.y).abs() > tol {
                        momentum += 1;
                    }
                }
            }
            s = next;
        }
    }
    outcome(
        containment + dissipation + momentum == 0,
        format!(
            "1000 episodes x 30 frames: containment violations={containment} energy increases={dissipation} momentum violations={momentum} (over {checked_momentum} contact-free frames)"
        ),
    )
}

fn main() {
    let mut ok = true;
    ok &= run("gradient correctness", gradients);
    ok &= run("loss identities", loss_identities);
    ok &= run("initialization sanity", initialization);
    ok &= run("separable encoder ignores independent nuisance", proposition_one);
    let (pass, p) = check("invariance to texture", representation_pipeline, invariance);
    ok &= pass;
    match p {
        Some(p) => {
            ok &= run("ood retrieval", || retrieval(&p));
            ok &= run("mutual information bound", || mi_bound(&p));
        }
        None => {
            ok = false;
            println!("[FAIL] ood retrieval: training pipeline failed");
            println!("[FAIL] mutual information bound: training pipeline failed");
        }
    }
    ok &= run("latent planning", planning);
    ok &= run("determinism", determinism);
    ok &= run("physics invariants", physics);
    if !ok {
        std::process::exit(1);
    }
}
