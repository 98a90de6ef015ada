//! The run directory layout and the `gen-corpus`, `train`, `eval` and
//! `pipeline` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radvl_core::corpus::{build_corpus, io, Corpus, CorpusManifest, Split, Task};
use radvl_core::eval::{MetricsReport, TaskSelection, Transcript};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{self, run_eval, summary_line, write_file, Component, Models, Trained};

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct Global {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pub workers: usize,
}

/// Where a run keeps its artifacts.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, c: Component) -> PathBuf {
        self.root.join("checkpoints").join(c.name())
    }

    pub fn curve(&self, c: Component) -> PathBuf {
        self.root.join("curves").join(format!("{}.csv", c.name()))
    }

    pub fn eval(&self, split: Split) -> PathBuf {
        self.root.join("eval").join(split.name())
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.jsonl")
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    target: &'a str,
    seconds: f64,
}

/// Wall-clock times go to a sidecar so the artifacts themselves stay
/// reproducible byte for byte.
fn record_time(layout: &Layout, command: &str, target: &str, start: Instant) -> Result<()> {
    let seconds = start.elapsed().as_secs_f64();
    eprintln!("{command} {target}: {seconds:.1}s");
    fs::create_dir_all(&layout.root).map_err(|e| CliError::io(&layout.root, e))?;
    Ok(io::append_jsonl(&layout.timings(), &Timing { command, target, seconds })?)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Missing(format!("no corpus at {}; run `radvl gen-corpus` first", dir.display())));
    }
    Ok(Corpus::load(dir)?)
}

fn load_checkpoint(layout: &Layout, c: Component) -> Result<Checkpoint> {
    let dir = layout.checkpoint(c);
    if !dir.join(crate::checkpoint::HEADER).exists() {
        return Err(CliError::Missing(format!(
            "no {} checkpoint at {}; run `radvl train --stage {}` first",
            c.name(),
            dir.display(),
            c.name()
        )));
    }
    Checkpoint::load(&dir)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.display().to_string()));
    }
    Ok(())
}

pub fn cmd_gen_corpus(g: &Global) -> Result<CorpusManifest> {
    let start = Instant::now();
    let layout = Layout::new(&g.out);
    let dir = layout.corpus();
    refuse_existing(&dir, g.force)?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let manifest = build_corpus(&g.config.corpus, &dir, g.workers)?;
    let count = |s: Split| manifest.counts.get(&s).copied().unwrap_or(0);
    println!(
        "corpus {}: train {} val {} test {} vqa {}",
        dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.vqa_count
    );
    record_time(&layout, "gen-corpus", "corpus", start)?;
    Ok(manifest)
}

/// Trains one stage from the checkpoints already in the run directory.
pub fn cmd_train(g: &Global, stage: Component) -> Result<Checkpoint> {
    let start = Instant::now();
    let layout = Layout::new(&g.out);
    let target = layout.checkpoint(stage);
    refuse_existing(&target, g.force)?;
    let corpus = load_corpus(&layout.corpus())?;
    let cfg = &g.config;
    let trained: Trained = match stage {
        Component::Phi => pipeline::run_phi(cfg, &corpus)?,
        Component::Tokenizer => pipeline::run_tokenizer(cfg, &corpus, &load_checkpoint(&layout, Component::Phi)?)?,
        Component::Stage1 => pipeline::run_stage1(cfg, &corpus, &load_checkpoint(&layout, Component::Tokenizer)?)?,
        Component::Stage2 => {
            let tok = load_checkpoint(&layout, Component::Tokenizer)?;
            let s1 = if cfg.ablation.two_stage { Some(load_checkpoint(&layout, Component::Stage1)?) } else { None };
            pipeline::run_stage2(cfg, &corpus, &tok, s1.as_ref())?
        }
    };
    trained.checkpoint.save(&target, g.force)?;
    if let Some(curve) = &trained.curve {
        write_file(&layout.curve(stage), curve.as_bytes())?;
    }
    println!("{}", summary_line(&trained.checkpoint));
    record_time(&layout, "train", stage.name(), start)?;
    Ok(trained.checkpoint)
}

/// Writes `metrics.json`, `metrics.csv`, `transcripts.jsonl` and generated
/// images under `dir`.
pub fn write_eval(dir: &Path, report: &MetricsReport, transcripts: &mut [Transcript], height: usize, width: usize) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
    for t in transcripts.iter_mut().filter(|t| t.task == Task::ReportToCxr && !t.pixels.is_empty()) {
        let name = format!("{}.pgm", t.id);
        io::write_pgm(&images.join(&name), &t.pixels, height, width, &format!("generated {}", t.id))?;
        t.output_image_path = Some(format!("images/{name}"));
    }
    io::write_jsonl(&dir.join("transcripts.jsonl"), transcripts)?;
    write_file(&dir.join("metrics.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("metrics.csv"), report.to_csv().as_bytes())
}

pub fn load_models(layout: &Layout, corpus: &Corpus, lm: Option<&Path>) -> Result<Models> {
    let phi = load_checkpoint(layout, Component::Phi)?;
    let tok = load_checkpoint(layout, Component::Tokenizer)?;
    let lm = match lm {
        Some(dir) => Checkpoint::load(dir)?,
        None => load_checkpoint(layout, Component::Stage2)?,
    };
    Models::from_checkpoints(Some(corpus), &phi, &tok, &lm)
}

pub fn cmd_eval(g: &Global, split: Option<Split>, tasks: TaskSelection, lm: Option<&Path>) -> Result<Vec<MetricsReport>> {
    let layout = Layout::new(&g.out);
    let splits = split.map_or_else(|| g.config.eval.splits.clone(), |s| vec![s]);
    for &s in &splits {
        refuse_existing(&layout.eval(s).join("metrics.json"), g.force)?;
    }
    let corpus = load_corpus(&layout.corpus())?;
    let models = load_models(&layout, &corpus, lm)?;
    let mut reports = Vec::new();
    for s in splits {
        let start = Instant::now();
        let (report, mut transcripts) = run_eval(&g.config, &models, &corpus, s, tasks, g.workers)?;
        let arch = &models.tokenizer.arch;
        write_eval(&layout.eval(s), &report, &mut transcripts, arch.height, arch.width)?;
        print_report(&report);
        record_time(&layout, "eval", s.name(), start)?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn print_report(report: &MetricsReport) {
    for (task, metrics) in &report.metrics {
        let parts: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{} {task} (n={}): {}", report.split, report.counts.get(task).copied().unwrap_or(0), parts.join(" "));
    }
}

/// Corpus, all four stages and evaluation in one go.
pub fn cmd_pipeline(g: &Global) -> Result<Vec<MetricsReport>> {
    cmd_gen_corpus(g)?;
    for c in Component::ALL {
        if c == Component::Stage1 && !g.config.ablation.two_stage {
            continue;
        }
        cmd_train(g, c)?;
    }
    cmd_eval(g, None, TaskSelection::ALL, None)
}
