//! The run configuration: one JSON document covering every stage.

use std::path::Path;

use radvl_core::corpus::{CorpusConfig, Split};
use radvl_core::eval::EvalOptions;
use radvl_core::lm::{LmConfig, TaskMix, TrainingConfig};
use radvl_core::seed;
use radvl_core::tokenizer::{LossWeights, PhiConfig, TokenizerArch, TokenizerTrainConfig};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds every training stage and sampled evaluation. The corpus has its
    /// own seed; `--seed` overrides both.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub phi: PhiConfig,
    pub tokenizer: TokenizerSection,
    pub lm: LmSection,
    pub ablation: AblationFlags,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub arch: TokenizerArch,
    pub training: TokenizerTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub context: usize,
    pub stage1: StageSection,
    pub stage2: Stage2Section,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub steps: usize,
    /// Sequences per step (stage 1 spends two per image/report pair).
    pub batch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the squared distance to the stage-1 parameters.
    pub lambda_reg: f64,
    pub task_mix: TaskMix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// False trains the tokenizer with λ_grad = λ_feat = 0.
    pub clinical_loss: bool,
    /// False pads out task markers and instruction words in stage 2 and at
    /// evaluation.
    pub task_instructions: bool,
    /// False skips stage 1: stage 2 starts from (and is anchored to) a random
    /// initialisation.
    pub two_stage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub splits: Vec<Split>,
    pub options: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            phi: PhiConfig::default(),
            tokenizer: TokenizerSection::default(),
            lm: LmSection::default(),
            ablation: AblationFlags::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for LmSection {
    fn default() -> Self {
        let m = LmConfig::new(0);
        Self {
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            ff: m.ff,
            context: m.context,
            stage1: StageSection::default(),
            stage2: Stage2Section::default(),
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        Self { steps: 4000, batch: 16, lr: 1e-3 }
    }
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self { steps: 2000, batch: 16, lr: 3e-4, lambda_reg: 1e-3, task_mix: TaskMix::default() }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { clinical_loss: true, task_instructions: true, two_stage: true }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { splits: vec![Split::Test], options: EvalOptions::default() }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    check(v >= 0.0 && v.is_finite(), || format!("{name} must be a finite value ≥ 0, got {v}"))
}

fn positive(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v.is_finite(), || format!("{name} must be positive, got {v}"))
}

impl RunConfig {
    /// Parses JSON text; errors carry `origin:line:column`.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies a `--seed` override to the run and the corpus.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        check(c.train > 0, || "corpus.train must be positive".into())?;
        let arch = &self.tokenizer.arch;
        arch.validate()?;
        check(arch.height == c.height && arch.width == c.width, || {
            format!("tokenizer.arch is {}×{} but corpus images are {}×{}", arch.height, arch.width, c.height, c.width)
        })?;
        let t = &self.tokenizer.training;
        t.weights.validate()?;
        positive("tokenizer.training.lr", t.lr)?;
        check(t.batch > 0, || "tokenizer.training.batch must be positive".into())?;
        positive("phi.lr", self.phi.lr)?;
        check(self.phi.batch > 0, || "phi.batch must be positive".into())?;
        self.lm_config(1).validate()?;
        let (s1, s2) = (&self.lm.stage1, &self.lm.stage2);
        positive("lm.stage1.lr", s1.lr)?;
        positive("lm.stage2.lr", s2.lr)?;
        check(s1.batch >= 2, || "lm.stage1.batch must be at least 2 (one pair)".into())?;
        check(s2.batch > 0, || "lm.stage2.batch must be positive".into())?;
        nonneg("lm.stage2.lambda_reg", s2.lambda_reg)?;
        s2.task_mix.counts(s2.batch)?;
        check(!self.eval.splits.is_empty(), || "eval.splits must name at least one split".into())?;
        positive("eval.options.image_temperature", self.eval.options.image_temperature)?;
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serialises").as_bytes()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn schema_json() -> String {
        let mut s = serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serialises");
        s.push('\n');
        s
    }

    /// Seed of one training component, derived from the run seed.
    pub fn seed_for(&self, component: &str) -> u64 {
        seed::derive(self.seed, component, 0)
    }

    /// Loss weights after the clinical-loss toggle.
    pub fn tokenizer_weights(&self) -> LossWeights {
        let mut w = self.tokenizer.training.weights;
        if !self.ablation.clinical_loss {
            w.lambda_grad = 0.0;
            w.lambda_feat = 0.0;
        }
        w
    }

    pub fn tokenizer_training(&self) -> TokenizerTrainConfig {
        TokenizerTrainConfig { weights: self.tokenizer_weights(), ..self.tokenizer.training.clone() }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        let l = &self.lm;
        LmConfig { vocab_size, d_model: l.d_model, heads: l.heads, layers: l.layers, ff: l.ff, context: l.context }
    }

    pub fn stage1_training(&self) -> TrainingConfig {
        let s = &self.lm.stage1;
        TrainingConfig { steps: s.steps, batch: s.batch, lr: s.lr, lambda_reg: 0.0, ..TrainingConfig::default() }
    }

    pub fn stage2_training(&self) -> TrainingConfig {
        let s = &self.lm.stage2;
        TrainingConfig {
            steps: s.steps,
            batch: s.batch,
            lr: s.lr,
            lambda_reg: s.lambda_reg,
            task_mix: s.task_mix,
            instructions: self.ablation.task_instructions,
        }
    }

    /// Content keys of each training stage: a stage's key changes exactly
    /// when something that determines its checkpoint changes.
    pub fn stage_keys(&self) -> StageKeys {
        let key = |v: serde_json::Value| hex::encode(Sha256::digest(v.to_string().as_bytes()));
        let phi = key(serde_json::json!({ "corpus": self.corpus, "phi": self.phi, "seed": self.seed_for("phi") }));
        let tokenizer = key(serde_json::json!({
            "phi": phi,
            "arch": self.tokenizer.arch,
            "training": self.tokenizer_training(),
            "seed": self.seed_for("tokenizer"),
        }));
        let model = self.lm_config(0);
        let stage1 = key(serde_json::json!({
            "tokenizer": tokenizer,
            "model": model,
            "training": self.stage1_training(),
            "seed": self.seed_for("stage1"),
        }));
        let stage2 = key(serde_json::json!({
            "init": if self.ablation.two_stage { stage1.clone() } else { format!("random:{tokenizer}") },
            "model": model,
            "training": self.stage2_training(),
            "seed": self.seed_for("stage2"),
        }));
        StageKeys { phi, tokenizer, stage1, stage2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageKeys {
    pub phi: String,
    pub tokenizer: String,
    pub stage1: String,
    pub stage2: String,
}
