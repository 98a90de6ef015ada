//! The four-way ablation over three training seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use radvl_core::corpus::Corpus;
use radvl_core::eval::TaskSelection;

use crate::commands::{cmd_gen_corpus, load_corpus, Global, Layout};
use crate::config::{AblationFlags, RunConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{run_eval, write_file, StageCache};

pub const SEEDS: u64 = 3;

/// Ablation variants in report order; `full` comes first.
pub const VARIANTS: [&str; 4] = ["full", "no_clinical_loss", "no_task_instructions", "no_two_stage"];

pub fn flags_for(variant: &str) -> AblationFlags {
    let mut f = AblationFlags::default();
    match variant {
        "no_clinical_loss" => f.clinical_loss = false,
        "no_task_instructions" => f.task_instructions = false,
        "no_two_stage" => f.two_stage = false,
        _ => {}
    }
    f
}

/// Report metrics compared across variants, BLEU first.
pub const METRICS: [&str; 5] = ["bleu", "rouge_l", "meteor", "cider", "finding_f1"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    /// variant → seed → metric → value
    pub cells: BTreeMap<String, BTreeMap<u64, BTreeMap<String, f64>>>,
    pub seeds: Vec<u64>,
}

impl AblationTable {
    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let runs = self.cells.get(variant)?;
        let vals: Vec<f64> = runs.values().filter_map(|m| m.get(metric).copied()).collect();
        (vals.len() == self.seeds.len() && !vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    fn value(&self, variant: &str, seed: u64, metric: &str) -> Option<f64> {
        self.cells.get(variant)?.get(&seed)?.get(metric).copied()
    }

    /// One row per variant: BLEU per seed, its mean and difference from
    /// `full`, then the means of the other report metrics. Missing runs are
    /// left blank.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut header = vec!["config".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("bleu_seed{s}")));
        header.push("bleu_mean".into());
        header.push("bleu_delta_vs_full".into());
        header.extend(METRICS[1..].iter().map(|m| format!("{m}_mean")));
        let mut out = header.join(",") + "\n";
        let full = self.mean("full", "bleu");
        for v in VARIANTS {
            let mut row = vec![v.to_string()];
            row.extend(self.seeds.iter().map(|&s| cell(self.value(v, s, "bleu"))));
            let mean = self.mean(v, "bleu");
            row.push(cell(mean));
            row.push(cell(mean.zip(full).map(|(m, f)| m - f)));
            row.extend(METRICS[1..].iter().map(|m| cell(self.mean(v, m))));
            out += &(row.join(",") + "\n");
        }
        out
    }

    /// Mean difference `a − b` for every ordered pair of variants and metric.
    pub fn deltas_csv(&self) -> String {
        let mut out = String::from("config_a,config_b,metric,delta\n");
        for (i, a) in VARIANTS.iter().enumerate() {
            for b in &VARIANTS[i + 1..] {
                for m in METRICS {
                    if let (Some(x), Some(y)) = (self.mean(a, m), self.mean(b, m)) {
                        let _ = writeln!(out, "{a},{b},{m},{}", x - y);
                    }
                }
            }
        }
        out
    }
}

fn ensure_corpus(g: &Global, layout: &Layout) -> Result<Corpus> {
    if !layout.corpus().join("manifest.json").exists() {
        cmd_gen_corpus(&Global { force: false, ..g.clone() })?;
    }
    let corpus = load_corpus(&layout.corpus())?;
    if corpus.manifest.config != g.config.corpus {
        return Err(CliError::Lineage(format!(
            "{} was generated with a different corpus config; use another --out",
            layout.corpus().display()
        )));
    }
    Ok(corpus)
}

fn write_tables(dir: &Path, table: &AblationTable) -> Result<()> {
    write_file(&dir.join("ablation.csv"), table.to_csv().as_bytes())?;
    write_file(&dir.join("ablation_deltas.csv"), table.deltas_csv().as_bytes())
}

/// Trains and evaluates every variant for seeds `seed, seed+1, seed+2`,
/// reusing stages the variants share. The corpus is the same for all runs.
/// On failure the tables are still written with the runs that finished.
pub fn cmd_ablate(g: &Global) -> Result<AblationTable> {
    let layout = Layout::new(&g.out);
    let dir = g.out.join("ablation");
    let csv = dir.join("ablation.csv");
    if csv.exists() && !g.force {
        return Err(CliError::Exists(csv.display().to_string()));
    }
    let corpus = ensure_corpus(g, &layout)?;
    let cache = StageCache::new(dir.join("cache"));
    let split = g.config.eval.splits[0];
    let mut table = AblationTable { seeds: (0..SEEDS).map(|k| g.config.seed + k).collect(), ..Default::default() };
    let seeds = table.seeds.clone();
    for seed in seeds {
        for variant in VARIANTS {
            let cfg = RunConfig { seed, ablation: flags_for(variant), ..g.config.clone() };
            eprintln!("ablation {variant} seed {seed}");
            let run = cache.models(&cfg, &corpus).and_then(|models| {
                let tasks = TaskSelection { report: true, image: false, vqa: false };
                run_eval(&cfg, &models, &corpus, split, tasks, g.workers)
            });
            let (report, _) = match run {
                Ok(r) => r,
                Err(e) => {
                    write_tables(&dir, &table)?;
                    return Err(e);
                }
            };
            write_file(&dir.join("runs").join(format!("{variant}-seed{seed}.json")), report.to_json().as_bytes())?;
            let metrics = report.metrics.get("report").cloned().unwrap_or_default();
            table.cells.entry(variant.to_string()).or_default().insert(seed, metrics);
        }
    }
    write_tables(&dir, &table)?;
    print!("{}", table.to_csv());
    Ok(table)
}
