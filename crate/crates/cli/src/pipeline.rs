//! Training stages as functions from inputs to checkpoints, the models they
//! rebuild, and a content-addressed cache shared by ablations.

use std::path::{Path, PathBuf};

use radvl_core::corpus::{Corpus, Split};
use radvl_core::eval::{evaluate, MetricsReport, System, TaskSelection, Transcript};
use radvl_core::lm::{
    default_vocab, max_drift, train_stage1, train_stage2, LmConfig, LmModel, StageCurveRow, TokenizedCorpus,
    TrainingConfig, UnifiedVocab,
};
use radvl_core::tokenizer::{
    curve_csv, pretrain_phi, train_tokenizer, FeatureEncoder, PhiConfig, TokenizerArch, TokenizerTrainConfig,
    VqTokenizer,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Phi,
    Tokenizer,
    Stage1,
    Stage2,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Phi, Component::Tokenizer, Component::Stage1, Component::Stage2];

    pub fn name(self) -> &'static str {
        match self {
            Component::Phi => "phi",
            Component::Tokenizer => "tokenizer",
            Component::Stage1 => "stage1",
            Component::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiHyper {
    pub height: usize,
    pub width: usize,
    pub training: PhiConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerHyper {
    pub arch: TokenizerArch,
    /// Effective settings, after the clinical-loss toggle.
    pub training: TokenizerTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmHyper {
    pub model: LmConfig,
    pub training: TrainingConfig,
    /// Stage 2 only: `stage1` or `random`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
}

/// SHA-256 of the corpus manifest, which pins its configuration and counts.
pub fn corpus_hash(corpus: &Corpus) -> String {
    hex::encode(Sha256::digest(serde_json::to_string(&corpus.manifest).expect("manifest serialises").as_bytes()))
}

fn stamp(ck: &mut Checkpoint, cfg: &RunConfig, seed: u64, key: &str, corpus: &Corpus) {
    ck.header.seed = seed;
    ck.header.config_hash = cfg.hash();
    ck.header.stage_key = key.to_string();
    ck.header.lineage.insert("corpus".into(), corpus_hash(corpus));
}

/// Fails unless `ck` was trained on `corpus`.
pub fn check_corpus(ck: &Checkpoint, corpus: &Corpus) -> Result<()> {
    expect_lineage(ck, "corpus", &corpus_hash(corpus))
}

pub fn expect_lineage(ck: &Checkpoint, key: &str, hash: &str) -> Result<()> {
    match ck.header.lineage.get(key) {
        Some(h) if h == hash => Ok(()),
        Some(h) => Err(CliError::Lineage(format!(
            "{} checkpoint was built from {key} {}, but the {key} in use is {}",
            ck.header.component,
            short(h),
            short(hash)
        ))),
        None => Err(CliError::Lineage(format!("{} checkpoint records no {key} lineage", ck.header.component))),
    }
}

pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn expect_component(ck: &Checkpoint, component: Component) -> Result<()> {
    if ck.header.component != component.name() {
        return Err(CliError::Input(format!("expected a {} checkpoint, found {}", component.name(), ck.header.component)));
    }
    Ok(())
}

pub fn phi_of(ck: &Checkpoint) -> Result<FeatureEncoder> {
    expect_component(ck, Component::Phi)?;
    let h: PhiHyper = ck.hyper()?;
    ck.expect_layout(&FeatureEncoder::init(h.height, h.width, 0)?.params)?;
    Ok(FeatureEncoder { params: ck.params.clone(), height: h.height, width: h.width, frozen: true })
}

pub fn tokenizer_of(ck: &Checkpoint) -> Result<VqTokenizer> {
    expect_component(ck, Component::Tokenizer)?;
    let h: TokenizerHyper = ck.hyper()?;
    ck.expect_layout(&VqTokenizer::init(h.arch.clone(), 0)?.params)?;
    Ok(VqTokenizer { arch: h.arch, params: ck.params.clone() })
}

pub fn lm_of(ck: &Checkpoint) -> Result<LmModel> {
    if ck.header.component != "stage1" && ck.header.component != "stage2" {
        return Err(CliError::Input(format!("expected a language-model checkpoint, found {}", ck.header.component)));
    }
    let h: LmHyper = ck.hyper()?;
    ck.expect_layout(&LmModel::init(h.model.clone(), 0)?.params)?;
    Ok(LmModel { config: h.model, params: ck.params.clone() })
}

pub fn vocab_for(tokenizer: &VqTokenizer) -> Result<UnifiedVocab> {
    Ok(default_vocab(tokenizer.arch.codebook_size)?)
}

fn lm_curve_csv(rows: &[StageCurveRow]) -> String {
    let mut s = String::from("step,task,reg,total\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.task, r.reg, r.total));
    }
    s
}

fn tail_mean(values: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator) -> f64 {
    let n = values.len().min(50);
    if n == 0 {
        return 0.0;
    }
    values.rev().take(n).sum::<f64>() / n as f64
}

/// A trained stage: its checkpoint and, where the stage produces one, its
/// loss curve as CSV.
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub curve: Option<String>,
}

pub fn run_phi(cfg: &RunConfig, corpus: &Corpus) -> Result<Trained> {
    let seed = cfg.seed_for("phi");
    let (phi, report) = pretrain_phi(corpus, &cfg.phi, seed)?;
    let hyper = PhiHyper { height: phi.height, width: phi.width, training: cfg.phi.clone() };
    let mut ck = Checkpoint::new("phi", phi.params, serde_json::to_value(hyper).expect("hyper serialises"));
    stamp(&mut ck, cfg, seed, &cfg.stage_keys().phi, corpus);
    ck.header.summary.insert("val_macro_auroc".into(), report.macro_auroc);
    ck.header.summary.insert("final_loss".into(), report.final_loss);
    for (kind, a) in &report.val_auroc {
        ck.header.summary.insert(format!("val_auroc.{}", kind.name()), *a);
    }
    Ok(Trained { checkpoint: ck, curve: None })
}

pub fn run_tokenizer(cfg: &RunConfig, corpus: &Corpus, phi_ck: &Checkpoint) -> Result<Trained> {
    check_corpus(phi_ck, corpus)?;
    let phi = phi_of(phi_ck)?;
    let seed = cfg.seed_for("tokenizer");
    let training = cfg.tokenizer_training();
    let run = train_tokenizer(corpus, &phi, &cfg.tokenizer.arch, &training, seed)?;
    if run.dead_code_alarm {
        eprintln!("warning: tokenizer uses only {:.0}% of its codebook", run.usage_fraction * 100.0);
    }
    let hyper = TokenizerHyper { arch: cfg.tokenizer.arch.clone(), training };
    let mut ck = Checkpoint::new("tokenizer", run.tokenizer.params, serde_json::to_value(hyper).expect("hyper serialises"));
    stamp(&mut ck, cfg, seed, &cfg.stage_keys().tokenizer, corpus);
    ck.header.lineage.insert("phi".into(), phi_ck.params_hash().to_string());
    let s = &mut ck.header.summary;
    s.insert("val_total".into(), run.val.total);
    s.insert("val_pixel".into(), run.val.pixel);
    s.insert("val_grad".into(), run.val.grad);
    s.insert("val_feat".into(), run.val.feat);
    s.insert("usage_fraction".into(), run.usage_fraction);
    Ok(Trained { checkpoint: ck, curve: Some(curve_csv(&run.curve)) })
}

fn lm_inputs(corpus: &Corpus, tok_ck: &Checkpoint) -> Result<(VqTokenizer, UnifiedVocab, TokenizedCorpus)> {
    check_corpus(tok_ck, corpus)?;
    let tokenizer = tokenizer_of(tok_ck)?;
    let vocab = vocab_for(&tokenizer)?;
    let codes = TokenizedCorpus::new(&tokenizer, corpus)?;
    Ok((tokenizer, vocab, codes))
}

fn fresh_model(cfg: &RunConfig, vocab: &UnifiedVocab) -> Result<LmModel> {
    Ok(LmModel::init(cfg.lm_config(vocab.len()), cfg.seed_for("lm-init"))?)
}

pub fn run_stage1(cfg: &RunConfig, corpus: &Corpus, tok_ck: &Checkpoint) -> Result<Trained> {
    let (_, vocab, codes) = lm_inputs(corpus, tok_ck)?;
    let seed = cfg.seed_for("stage1");
    let training = cfg.stage1_training();
    let run = train_stage1(fresh_model(cfg, &vocab)?, &vocab, corpus, &codes, &training, seed)?;
    let hyper = LmHyper { model: run.model.config.clone(), training, init: None };
    let mut ck = Checkpoint::new("stage1", run.model.params, serde_json::to_value(hyper).expect("hyper serialises"));
    stamp(&mut ck, cfg, seed, &cfg.stage_keys().stage1, corpus);
    ck.header.lineage.insert("tokenizer".into(), tok_ck.params_hash().to_string());
    ck.header.summary.insert("final_loss".into(), tail_mean(run.curve.iter().map(|r| r.task)));
    Ok(Trained { checkpoint: ck, curve: Some(lm_curve_csv(&run.curve)) })
}

/// Stage 2 from the stage-1 checkpoint (which becomes the anchor), or from
/// a random initialisation anchored to itself when `stage1` is `None`.
pub fn run_stage2(cfg: &RunConfig, corpus: &Corpus, tok_ck: &Checkpoint, stage1: Option<&Checkpoint>) -> Result<Trained> {
    let (_, vocab, codes) = lm_inputs(corpus, tok_ck)?;
    let init = match stage1 {
        Some(s1) => {
            expect_component(s1, Component::Stage1)?;
            check_corpus(s1, corpus)?;
            expect_lineage(s1, "tokenizer", tok_ck.params_hash())?;
            let model = lm_of(s1)?;
            if model.config != cfg.lm_config(vocab.len()) {
                return Err(CliError::Lineage("stage1 checkpoint architecture differs from the lm config".into()));
            }
            model
        }
        None => fresh_model(cfg, &vocab)?,
    };
    let anchor = init.params.clone();
    let seed = cfg.seed_for("stage2");
    let training = cfg.stage2_training();
    let recon = tok_ck.header.summary.get("val_total").copied().unwrap_or(0.0);
    let run = train_stage2(init, &anchor, &vocab, corpus, &codes, &training, recon, seed)?;
    let drift = max_drift(&run.model.params, &anchor)?;
    let hyper = LmHyper {
        model: run.model.config.clone(),
        training,
        init: Some(if stage1.is_some() { "stage1" } else { "random" }.into()),
    };
    let mut ck = Checkpoint::new("stage2", run.model.params, serde_json::to_value(hyper).expect("hyper serialises"));
    stamp(&mut ck, cfg, seed, &cfg.stage_keys().stage2, corpus);
    ck.header.lineage.insert("tokenizer".into(), tok_ck.params_hash().to_string());
    ck.header.lineage.insert("anchor".into(), radvl_core::nn::params_hash(&anchor));
    if let Some(s1) = stage1 {
        ck.header.lineage.insert("stage1".into(), s1.params_hash().to_string());
    }
    let s = &mut ck.header.summary;
    s.insert("final_task_loss".into(), tail_mean(run.curve.iter().map(|r| r.task)));
    s.insert("final_reg".into(), run.curve.last().map_or(0.0, |r| r.reg));
    s.insert("max_drift".into(), drift);
    Ok(Trained { checkpoint: ck, curve: Some(lm_curve_csv(&run.curve)) })
}

/// The three checkpoints evaluation needs, with their lineage verified.
pub struct Models {
    pub phi: FeatureEncoder,
    pub tokenizer: VqTokenizer,
    pub vocab: UnifiedVocab,
    pub model: LmModel,
    pub instructions: bool,
    pub phi_hash: String,
}

impl Models {
    pub fn from_checkpoints(corpus: Option<&Corpus>, phi: &Checkpoint, tok: &Checkpoint, lm: &Checkpoint) -> Result<Self> {
        if let Some(c) = corpus {
            for ck in [phi, tok, lm] {
                check_corpus(ck, c)?;
            }
        }
        expect_lineage(tok, "phi", phi.params_hash())
            .map_err(|e| CliError::Lineage(format!("φ hash mismatch between tokenizer and evaluation features: {e}")))?;
        expect_lineage(lm, "tokenizer", tok.params_hash())?;
        let tokenizer = tokenizer_of(tok)?;
        let vocab = vocab_for(&tokenizer)?;
        let model = lm_of(lm)?;
        if model.config.vocab_size != vocab.len() {
            return Err(CliError::Lineage(format!(
                "language model has {} ids but the tokenizer implies {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        let hyper: LmHyper = lm.hyper()?;
        Ok(Self {
            phi: phi_of(phi)?,
            tokenizer,
            vocab,
            model,
            instructions: hyper.training.instructions,
            phi_hash: phi.params_hash().to_string(),
        })
    }

    pub fn system(&self) -> System<'_> {
        System {
            vocab: &self.vocab,
            model: &self.model,
            tokenizer: &self.tokenizer,
            phi: &self.phi,
            instructions: self.instructions,
        }
    }
}

pub fn run_eval(
    cfg: &RunConfig,
    models: &Models,
    corpus: &Corpus,
    split: Split,
    tasks: TaskSelection,
    workers: usize,
) -> Result<(MetricsReport, Vec<Transcript>)> {
    let start = std::time::Instant::now();
    let (mut report, transcripts) =
        evaluate(&models.system(), corpus, split, tasks, &cfg.eval.options, cfg.seed_for("eval"), workers)?;
    report.run_id = format!("{}-s{}", short(&cfg.hash()), cfg.seed);
    report.stage = "stage2".into();
    report.config_hash = cfg.hash();
    report.seed = cfg.seed;
    report.version = VERSION.into();
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    if let Some((task, metric)) = report.first_non_finite() {
        return Err(CliError::Numeric(format!("{task}.{metric} is not finite")));
    }
    Ok((report, transcripts))
}

/// Stage checkpoints stored under their content keys, so configurations that
/// share a prefix of the pipeline train it once.
pub struct StageCache {
    pub root: PathBuf,
    /// Retrain even when a cached checkpoint exists.
    pub refresh: bool,
}

impl StageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), refresh: false }
    }

    pub fn path(&self, component: Component, key: &str) -> PathBuf {
        self.root.join(format!("{}-{}", component.name(), &key[..16]))
    }

    fn get_or(&self, component: Component, key: &str, train: impl FnOnce() -> Result<Trained>) -> Result<Checkpoint> {
        let dir = self.path(component, key);
        if !self.refresh && dir.exists() {
            let ck = Checkpoint::load(&dir)?;
            if ck.header.stage_key == key {
                return Ok(ck);
            }
        }
        let start = std::time::Instant::now();
        let t = train()?;
        eprintln!("  trained {} in {:.1}s", component.name(), start.elapsed().as_secs_f64());
        t.checkpoint.save(&dir, true)?;
        if let Some(curve) = &t.curve {
            write_file(&dir.with_extension("csv"), curve.as_bytes())?;
        }
        Ok(t.checkpoint)
    }

    pub fn phi(&self, cfg: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
        self.get_or(Component::Phi, &cfg.stage_keys().phi, || run_phi(cfg, corpus))
    }

    pub fn tokenizer(&self, cfg: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
        let phi = self.phi(cfg, corpus)?;
        self.get_or(Component::Tokenizer, &cfg.stage_keys().tokenizer, || run_tokenizer(cfg, corpus, &phi))
    }

    pub fn stage1(&self, cfg: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
        let tok = self.tokenizer(cfg, corpus)?;
        self.get_or(Component::Stage1, &cfg.stage_keys().stage1, || run_stage1(cfg, corpus, &tok))
    }

    pub fn stage2(&self, cfg: &RunConfig, corpus: &Corpus) -> Result<Checkpoint> {
        let tok = self.tokenizer(cfg, corpus)?;
        let s1 = if cfg.ablation.two_stage { Some(self.stage1(cfg, corpus)?) } else { None };
        self.get_or(Component::Stage2, &cfg.stage_keys().stage2, || run_stage2(cfg, corpus, &tok, s1.as_ref()))
    }

    /// Every checkpoint of a configuration, trained as needed.
    pub fn models(&self, cfg: &RunConfig, corpus: &Corpus) -> Result<Models> {
        let phi = self.phi(cfg, corpus)?;
        let tok = self.tokenizer(cfg, corpus)?;
        let s2 = self.stage2(cfg, corpus)?;
        Models::from_checkpoints(Some(corpus), &phi, &tok, &s2)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Summary values of a checkpoint, for printing.
pub fn summary_line(ck: &Checkpoint) -> String {
    let parts: Vec<String> = ck.header.summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    format!("{} [{}] {}", ck.header.component, short(ck.params_hash()), parts.join(" "))
}
