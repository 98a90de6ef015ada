//! The acceptance run: one PASS/FAIL line per criterion, exit status 1 if
//! any fails. Training budgets are cut down from the shipped defaults so the
//! whole run fits in the test-suite time limit; each check prints the values
//! it compared.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[path = "../../core/tests/support/gradients.rs"]
mod gradients;
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use radvl::ablate::{cmd_ablate, VARIANTS};
use radvl::checkpoint::Checkpoint;
use radvl::commands::{cmd_gen_corpus, cmd_pipeline, load_corpus, Global, Layout};
use radvl::config::RunConfig;
use radvl::pipeline::{run_eval, run_stage2, Component, StageCache};
use radvl_core::corpus::{io, Corpus, CorpusConfig, Split};
use radvl_core::eval::{eval_reports, eval_vqa, EvalOptions, System, TaskSelection};
use radvl_core::lm::{
    default_vocab, max_drift, reg_loss, reg_value, total_loss, train_stage1, train_stage2, LmConfig, LmModel,
    TokenizedCorpus, TrainingConfig,
};
use radvl_core::tensor::{Tape, Tensor};
use radvl_core::tokenizer::{
    recon_parts, train_tokenizer, FeatureEncoder, LossWeights, ReconParts, TokenizerArch, TokenizerTrainConfig,
};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

struct Runner {
    failed: usize,
}

impl Runner {
    fn run(&mut self, id: &str, title: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_text(p)));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id} {title}: {detail} [{secs:.1}s]");
    }
}

// ------------------------------------------------------------------ configs

/// Defaults with the training budgets the acceptance run can afford.
fn base_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.tokenizer.training.steps = 1000;
    cfg.lm.stage1.steps = 800;
    cfg.lm.stage2.steps = 1200;
    cfg
}

fn ablation_config() -> RunConfig {
    let mut cfg = base_config();
    cfg.lm.stage1.steps = 100;
    cfg.lm.stage2.steps = 100;
    cfg.eval.splits = vec![Split::Val];
    cfg
}

fn tiny_config() -> RunConfig {
    let text = include_str!("../../../configs/tiny.json");
    RunConfig::from_json(text, "configs/tiny.json").expect("tiny config parses")
}

struct Shared {
    root: PathBuf,
    corpus: Corpus,
    cache: StageCache,
}

impl Shared {
    /// The default corpus, rendered where the ablation expects it, and the
    /// stage cache the ablation uses, so tokenizers and stage-1 models
    /// trained for one criterion are reused by the others.
    fn new(root: &Path) -> Self {
        let g = Global { config: ablation_config(), out: root.to_path_buf(), force: false, workers: 1 };
        cmd_gen_corpus(&g).expect("corpus renders");
        let corpus = load_corpus(&Layout::new(root).corpus()).expect("corpus loads");
        Self { root: root.to_path_buf(), corpus, cache: StageCache::new(root.join("ablation").join("cache")) }
    }
}

// --------------------------------------------------------------- criteria

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (name, check) in gradients::ALL {
        if let Err(p) = catch_unwind(check) {
            failures.push(format!("{name}: {}", panic_text(p)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    ensure(secs < 60.0, format!("{} groups within bounds in {secs:.1}s (limit 60s)", gradients::ALL.len()))
}

fn loss_identities() -> Check {
    let corpus = Corpus::generate(&CorpusConfig { train: 2, val: 1, test: 1, seed: 3, ..CorpusConfig::default() }, 1)
        .map_err(|e| e.to_string())?;
    let mut phi = FeatureEncoder::init(32, 32, 7).map_err(|e| e.to_string())?;
    phi.frozen = true;
    let image = |i: usize| Tensor::new(vec![32, 32], corpus.items[i].pixels.clone()).unwrap();
    let (x, y) = (image(0), image(1));
    let w = LossWeights::default();

    let same = recon_parts(&x, &x, &w, &phi).map_err(|e| e.to_string())?;
    if same != ReconParts::default() {
        return Err(format!("loss of x against itself is {same:?}"));
    }
    let p = recon_parts(&x, &y, &w, &phi).map_err(|e| e.to_string())?;
    let residual = (p.total - (p.pixel + w.lambda_grad * p.grad + w.lambda_feat * p.feat)).abs();
    if !(residual <= 1e-12 && p.grad > 0.0 && p.feat > 0.0) {
        return Err(format!("decomposition residual {residual:e} for {p:?}"));
    }
    for (lg, lf) in [(0.0, 0.0), (w.lambda_grad, 0.0), (0.0, w.lambda_feat)] {
        let q = recon_parts(&x, &y, &LossWeights { lambda_grad: lg, lambda_feat: lf, ..w }, &phi).map_err(|e| e.to_string())?;
        let want = q.pixel + lg * q.grad + lf * q.feat;
        if (q.total - want).abs() > 1e-12 || q.pixel != p.pixel {
            return Err(format!("weights ({lg}, {lf}) give total {} instead of {want}", q.total));
        }
    }

    let vocab = default_vocab(8).map_err(|e| e.to_string())?;
    let cfg = LmConfig { vocab_size: vocab.len(), d_model: 8, heads: 2, layers: 1, ff: 16, context: 32 };
    let model = LmModel::init(cfg.clone(), 1).map_err(|e| e.to_string())?;
    let other = LmModel::init(cfg, 2).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, true);
    let on_tape = reg_loss(&mut tape, &vars, &model.params, &model.params).map_err(|e| e.to_string())?;
    let self_reg = tape.value(on_tape).item();
    let self_value = reg_value(&model.params, &model.params).map_err(|e| e.to_string())?;
    let self_drift = max_drift(&model.params, &model.params).map_err(|e| e.to_string())?;
    if self_reg != 0.0 || self_value != 0.0 || self_drift != 0.0 {
        return Err(format!("reg(θ, θ) = {self_reg}, {self_value}; drift {self_drift}"));
    }
    let reg = reg_value(&model.params, &other.params).map_err(|e| e.to_string())?;
    let (task, recon) = (1.75, 0.125);
    let checks = [
        (total_loss(task, recon, reg, 0.0), task + recon),
        (total_loss(task, 0.0, reg, 0.0), task),
        (total_loss(task, recon, reg, 2.0), task + recon + 2.0 * reg),
        (total_loss(task, recon, 0.0, 5.0), task + recon),
    ];
    for (got, want) in checks {
        if got != want {
            return Err(format!("total loss {got} instead of {want}"));
        }
    }
    Ok(format!("recon(x,x)=0, decomposition residual {residual:.1e}, reg(θ,θ)=0, λ=0 toggles exact"))
}

fn metric_oracles() -> Check {
    let mut failures = Vec::new();
    for (name, check) in oracles::ALL {
        if let Err(p) = catch_unwind(check) {
            failures.push(format!("{name}: {}", panic_text(p)));
        }
    }
    if !failures.is_empty() {
        return Err(failures.join("; "));
    }
    Ok(format!("{} fixture checks agree with the oracles", oracles::ALL.len()))
}

fn overfit() -> Check {
    let start = Instant::now();
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let corpus = Corpus::generate(&CorpusConfig { train: 32, val: 4, test: 4, seed: 0, ..CorpusConfig::default() }, 1)
        .map_err(|e| err(&e))?;
    // φ only feeds the feature term here; a fixed random encoder keeps the
    // run short.
    let mut phi = FeatureEncoder::init(32, 32, 0).map_err(|e| err(&e))?;
    phi.frozen = true;
    let tcfg = TokenizerTrainConfig { steps: 500, max_val_pixel: 1.0, ..TokenizerTrainConfig::default() };
    let tokenizer = train_tokenizer(&corpus, &phi, &TokenizerArch::default(), &tcfg, 0).map_err(|e| err(&e))?.tokenizer;
    let codes = TokenizedCorpus::new(&tokenizer, &corpus).map_err(|e| err(&e))?;
    let vocab = default_vocab(tokenizer.arch.codebook_size).map_err(|e| err(&e))?;
    let model = LmModel::init(LmConfig::new(vocab.len()), 0).map_err(|e| err(&e))?;
    let s1 = TrainingConfig { steps: 300, lr: 3e-3, lambda_reg: 0.0, ..TrainingConfig::default() };
    let stage1 = train_stage1(model, &vocab, &corpus, &codes, &s1, 0).map_err(|e| err(&e))?.model;
    let s2 = TrainingConfig { steps: 500, lr: 2e-3, lambda_reg: 1e-3, ..TrainingConfig::default() };
    let stage2 = train_stage2(stage1.clone(), &stage1.params, &vocab, &corpus, &codes, &s2, 0.0, 0).map_err(|e| err(&e))?.model;

    let sys = System { vocab: &vocab, model: &stage2, tokenizer: &tokenizer, phi: &phi, instructions: true };
    let opts = EvalOptions::default();
    let reports = eval_reports(&sys, &corpus, Split::Train, &opts, 1).map_err(|e| err(&e))?.metrics;
    let vqa = eval_vqa(&sys, &corpus, Split::Train, &opts, 1).map_err(|e| err(&e))?.metrics;
    let secs = start.elapsed().as_secs_f64();
    let (exact, f1, acc) = (reports["exact_match"], reports["finding_f1"], vqa["accuracy"]);
    ensure(
        exact >= 0.9 && f1 >= 0.95 && acc >= 0.95 && secs < 300.0,
        format!(
            "exact_match {exact:.3} (≥0.90), finding_f1 {f1:.3} (≥0.95), vqa accuracy {acc:.3} (≥0.95), {secs:.0}s (<300s)"
        ),
    )
}

fn clinical_loss_grad_part(shared: &Shared) -> Check {
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    let mut strict = true;
    for k in 0..3 {
        let with = RunConfig { seed: k, ..base_config() };
        let mut without = with.clone();
        without.tokenizer.training.weights.lambda_grad = 0.0;
        let grad = |cfg: &RunConfig| -> Result<f64, String> {
            let ck = shared.cache.tokenizer(cfg, &shared.corpus).map_err(|e| e.to_string())?;
            Ok(ck.header.summary["val_grad"])
        };
        let (a, b) = (grad(&with)?, grad(&without)?);
        strict &= a < b;
        gaps.push(1.0 - a / b);
        lines.push(format!("seed {k}: {a:.5} vs {b:.5}"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    ensure(
        strict && mean >= 0.10,
        format!("val grad part λ_grad 0.5 vs 0 ({}); mean gap {:.1}% (≥10%)", lines.join(", "), mean * 100.0),
    )
}

fn ablation_ordering(shared: &Shared) -> Check {
    let g = Global { config: ablation_config(), out: shared.root.clone(), force: true, workers: 1 };
    let table = cmd_ablate(&g).map_err(|e| e.to_string())?;
    let means: BTreeMap<&str, f64> = VARIANTS
        .iter()
        .map(|v| Ok((*v, table.mean(v, "bleu").ok_or_else(|| format!("no BLEU for {v}"))?)))
        .collect::<Result<_, String>>()?;
    let full = means["full"];
    let ok = means.values().all(|&m| full >= m);
    let parts: Vec<String> = VARIANTS.iter().map(|v| format!("{v} {:.4}", means[v])).collect();
    ensure(ok, format!("mean BLEU over 3 seeds: {}", parts.join(", ")))
}

fn held_out(shared: &Shared) -> Check {
    let cfg = base_config();
    let models = shared.cache.models(&cfg, &shared.corpus).map_err(|e| e.to_string())?;
    let (report, _) = run_eval(&cfg, &models, &shared.corpus, Split::Test, TaskSelection::ALL, 1).map_err(|e| e.to_string())?;
    let get = |task: &str, m: &str| report.get(task, m).ok_or_else(|| format!("missing {task}.{m}"));
    let (f1, auroc) = (get("report", "finding_f1")?, get("vqa", "auroc")?);
    let (fid, noise) = (get("image", "fid_proxy")?, get("image", "fid_proxy_noise")?);
    ensure(
        f1 >= 0.70 && auroc >= 0.85 && fid.is_finite() && fid < noise,
        format!("test finding_f1 {f1:.3} (≥0.70), vqa auroc {auroc:.3} (≥0.85), fid_proxy {fid:.3} vs noise {noise:.3}"),
    )
}

fn regularisation_binding(shared: &Shared) -> Check {
    let base = base_config();
    let tok = shared.cache.tokenizer(&base, &shared.corpus).map_err(|e| e.to_string())?;
    let stage1 = shared.cache.stage1(&base, &shared.corpus).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for k in 0..3 {
        let mut drift = [0.0; 2];
        for (j, lambda) in [1e4, 0.0].into_iter().enumerate() {
            let mut cfg = RunConfig { seed: k, ..base.clone() };
            cfg.lm.stage2.steps = 60;
            cfg.lm.stage2.lambda_reg = lambda;
            let run = run_stage2(&cfg, &shared.corpus, &tok, Some(&stage1)).map_err(|e| e.to_string())?;
            drift[j] = run.checkpoint.header.summary["max_drift"];
        }
        ok &= drift[0] < 1e-3 && drift[1] > 1e-2;
        lines.push(format!("seed {k}: {:.2e} / {:.2e}", drift[0], drift[1]));
    }
    ensure(ok, format!("max drift with λ_reg 1e4 (<1e-3) / 0 (>1e-2): {}", lines.join(", ")))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn without_wall_clock(csv: &[u8]) -> Vec<String> {
    let text = String::from_utf8_lossy(csv);
    text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

fn determinism_and_formats(root: &Path) -> Check {
    let runs = [root.join("a"), root.join("b")];
    for (out, workers) in runs.iter().zip([1, 3]) {
        let g = Global { config: tiny_config(), out: out.clone(), force: false, workers };
        cmd_pipeline(&g).map_err(|e| e.to_string())?;
    }
    // Wall-clock times may differ: the timings sidecar and the last column
    // of metrics.csv. Everything else, metrics.json included, must match.
    let files: Vec<PathBuf> = files_under(&runs[0]).into_iter().filter(|p| !p.ends_with("timings.jsonl")).collect();
    let other: Vec<PathBuf> = files_under(&runs[1]).into_iter().filter(|p| !p.ends_with("timings.jsonl")).collect();
    if files != other {
        return Err("the two runs wrote different file sets".into());
    }
    for f in &files {
        let (a, b) = (std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap());
        let same = if f.ends_with("metrics.csv") { without_wall_clock(&a) == without_wall_clock(&b) } else { a == b };
        if !same {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    if !files.iter().any(|f| f.ends_with("metrics.json")) {
        return Err("no metrics.json written".into());
    }

    let layout = Layout::new(&runs[0]);
    for c in Component::ALL {
        let dir = layout.checkpoint(c);
        let copy = root.join("resaved").join(c.name());
        Checkpoint::load(&dir).and_then(|ck| ck.save(&copy, false)).map_err(|e| e.to_string())?;
        for f in files_under(&dir) {
            if std::fs::read(dir.join(&f)).unwrap() != std::fs::read(copy.join(&f)).unwrap() {
                return Err(format!("{} checkpoint file {} changed on load/save", c.name(), f.display()));
            }
        }
    }

    let pgms: Vec<&PathBuf> = files.iter().filter(|f| f.extension().is_some_and(|e| e == "pgm")).collect();
    let generated = pgms.iter().filter(|f| f.starts_with("eval")).count();
    for f in &pgms {
        let bytes = std::fs::read(runs[0].join(f)).unwrap();
        let (h, w, pixels) = io::decode_pgm(&bytes).map_err(|e| format!("{}: {e}", f.display()))?;
        let again = io::encode_pgm(&pixels, h, w, "");
        if io::decode_pgm(&again).map_err(|e| e.to_string())?.2 != pixels {
            return Err(format!("{} does not survive a reread", f.display()));
        }
    }
    if generated == 0 {
        return Err("no generated images to reread".into());
    }
    Ok(format!(
        "{} files byte-identical across two runs (1 vs 3 workers), 4 checkpoints round-trip, {} PGMs reread ({generated} generated)",
        files.len(),
        pgms.len()
    ))
}

fn main() {
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    let mut runner = Runner { failed: 0 };
    runner.run("AC1", "gradient correctness", gradient_correctness);
    runner.run("AC2", "loss identities", loss_identities);
    runner.run("AC3", "metric oracle equivalence", metric_oracles);
    runner.run("AC4", "overfit reproduction", overfit);
    let shared = Shared::new(&dir.path().join("default"));
    runner.run("AC5a", "clinical loss lowers the edge residual", || clinical_loss_grad_part(&shared));
    runner.run("AC5b", "ablation ordering", || ablation_ordering(&shared));
    runner.run("AC6", "held-out generalisation", || held_out(&shared));
    runner.run("AC7", "regularisation binding", || regularisation_binding(&shared));
    runner.run("AC8", "determinism and formats", || determinism_and_formats(&dir.path().join("tiny")));
    println!("acceptance: {} failed, {:.0}s total", runner.failed, start.elapsed().as_secs_f64());
    if runner.failed > 0 {
        std::process::exit(1);
    }
}
