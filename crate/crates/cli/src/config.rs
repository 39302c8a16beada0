use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use siu_core::eval::EvalConfig;
use siu_core::exposurelab::LabConfig;
use siu_core::selfdata::GenParams;
use siu_core::trainer::TrainConfig;
use siu_core::{LossScope, ToyLmConfig};

/// Where generations come from: the in-process toy model or an HTTP server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Toy,
    Remote(String),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(BackendSpec::Toy),
            _ => match s.strip_prefix("remote:") {
                Some(url) if url.starts_with("http://") || url.starts_with("https://") => Ok(BackendSpec::Remote(url.to_string())),
                _ => Err(format!("backend {s:?} is neither \"toy\" nor \"remote:http(s)://...\"")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormatName {
    Jsonl,
    PlainDir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    pub format: CorpusFormatName,
    pub name: String,
    /// Fixed unrelated instruction-response pool (JSONL).
    pub unrelated_path: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: None, format: CorpusFormatName::Jsonl, name: "corpus".into(), unrelated_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// "toy" or "remote:URL".
    pub spec: String,
    /// Toy base model; an untrained model from `model` when absent.
    pub base_checkpoint: Option<PathBuf>,
    pub model: ToyLmConfig,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            spec: "toy".into(),
            base_checkpoint: None,
            model: ToyLmConfig { seq_len: 1024, ..ToyLmConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerChoice {
    ByteLevel,
    Bpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub kind: TokenizerChoice,
    pub merges: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { kind: TokenizerChoice::ByteLevel, merges: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfDataSection {
    pub temperature: f64,
    pub max_total_tokens: usize,
    pub completion_tokens: usize,
    pub workers: usize,
    /// Unrelated pairs mixed into the fine-tuning set; one per related pair when absent.
    pub unrelated_count: Option<usize>,
}

impl Default for SelfDataSection {
    fn default() -> Self {
        let g = GenParams::default();
        SelfDataSection {
            temperature: g.temperature,
            max_total_tokens: g.max_total_tokens,
            completion_tokens: g.completion_tokens,
            workers: g.workers,
            unrelated_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBuildSection {
    pub batch_size: usize,
    pub seq_len: usize,
    pub loss_scope: LossScope,
}

impl Default for DataBuildSection {
    fn default() -> Self {
        DataBuildSection { batch_size: 8, seq_len: 1024, loss_scope: LossScope::FullResponse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub items_path: Option<PathBuf>,
    pub methods: Vec<String>,
    /// Method whose scores define RELATED-HARD.
    pub base_method: String,
    pub hard_threshold: f64,
    /// Per-method backend overrides ("toy" or "remote:URL").
    pub method_backends: BTreeMap<String, String>,
    #[serde(flatten)]
    pub run: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            items_path: None,
            methods: ["mixinst", "fact_ft", "naive", "context_aware"].map(String::from).to_vec(),
            base_method: "mixinst".into(),
            hard_threshold: 0.5,
            method_backends: BTreeMap::new(),
            run: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabSection {
    pub seeds: Vec<u64>,
    pub null_control: bool,
    #[serde(flatten)]
    pub config: LabConfig,
}

impl Default for LabSection {
    fn default() -> Self {
        LabSection { seeds: vec![0, 1, 2], null_control: false, config: LabConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub backend: BackendSection,
    pub tokenizer: TokenizerSection,
    pub selfdata: SelfDataSection,
    pub databuild: DataBuildSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub lab: LabSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            backend: BackendSection::default(),
            tokenizer: TokenizerSection::default(),
            selfdata: SelfDataSection::default(),
            databuild: DataBuildSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            lab: LabSection::default(),
        }
    }
}

pub const KNOWN_METHODS: [&str; 4] = ["mixinst", "fact_ft", "naive", "context_aware"];

/// Reads TOML or JSON (by extension), then applies `SIU_*` overrides from `env`.
/// Only parsing happens here; see [`PipelineConfig::validate`].
///
/// Both layers are merged key by key onto the serialized defaults, so a partial
/// nested table such as `[lab.finetune]` keeps the lab's own defaults for the
/// keys it leaves out.
///
/// `SIU_SEED=3` sets `seed`; nested keys are joined by double underscores, so
/// `SIU_DATABUILD__BATCH_SIZE=4` sets `databuild.batch_size`. Values are parsed
/// as JSON when possible and taken as strings otherwise.
pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig, Vec<String>> {
    let file = match path {
        None => Value::Object(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| vec![format!("{}: {e}", p.display())])?;
            let is_json = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                serde_json::from_str(&text).map_err(|e| vec![format!("{}: {e}", p.display())])?
            } else {
                let t: toml::Value = toml::from_str(&text).map_err(|e| vec![format!("{}: {e}", p.display())])?;
                serde_json::to_value(t).map_err(|e| vec![e.to_string()])?
            }
        }
    };
    let mut tree = serde_json::to_value(PipelineConfig::default()).expect("defaults serialize");
    merge(&mut tree, file);
    let mut errors = Vec::new();
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with("SIU_")).collect();
    overrides.sort();
    for (k, v) in overrides {
        if k == "SIU_LOG" {
            continue;
        }
        let keys: Vec<String> = k["SIU_".len()..].split("__").map(str::to_ascii_lowercase).collect();
        if keys.iter().any(String::is_empty) {
            errors.push(format!("{k}: malformed override name"));
            continue;
        }
        let parsed = serde_json::from_str(&v).unwrap_or(Value::String(v));
        let mut patch = parsed;
        for k in keys.iter().rev() {
            patch = serde_json::json!({ k.as_str(): patch });
        }
        merge(&mut tree, patch);
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    serde_json::from_value(tree).map_err(|e| vec![e.to_string()])
}

// Objects merge recursively; anything else replaces. A tagged enum whose `kind`
// changes is replaced whole, since the old variant's fields don't apply.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if o.get("kind").map_or(true, |k| b.get("kind") == Some(k)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl PipelineConfig {
    /// Every violation, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = BackendSpec::parse(&self.backend.spec) {
            v.push(format!("backend.spec: {e}"));
        }
        if let Err(e) = self.backend.model.validate() {
            v.push(format!("backend.model: {e}"));
        }
        if self.backend.model.seq_len != self.databuild.seq_len {
            v.push(format!(
                "backend.model.seq_len {} must equal databuild.seq_len {}",
                self.backend.model.seq_len, self.databuild.seq_len
            ));
        }
        if self.databuild.batch_size == 0 {
            v.push("databuild.batch_size must be positive".into());
        }
        if self.databuild.seq_len < 2 {
            v.push("databuild.seq_len must be at least 2".into());
        }
        if self.tokenizer.kind == TokenizerChoice::Bpe && self.tokenizer.merges == 0 {
            v.push("tokenizer.merges must be positive for bpe".into());
        }
        if !(self.selfdata.temperature >= 0.0) {
            v.push(format!("selfdata.temperature {} must be non-negative", self.selfdata.temperature));
        }
        if self.selfdata.workers == 0 {
            v.push("selfdata.workers must be positive".into());
        }
        if let Err(e) = self.train.validate() {
            v.push(format!("train: {e}"));
        }
        if self.eval.methods.is_empty() {
            v.push("eval.methods is empty".into());
        }
        for m in &self.eval.methods {
            if !KNOWN_METHODS.contains(&m.as_str()) {
                v.push(format!("eval.methods: unknown method {m:?} (expected one of {KNOWN_METHODS:?})"));
            }
        }
        if !KNOWN_METHODS.contains(&self.eval.base_method.as_str()) {
            v.push(format!("eval.base_method: unknown method {:?}", self.eval.base_method));
        }
        if !(0.0..=1.0).contains(&self.eval.hard_threshold) {
            v.push(format!("eval.hard_threshold {} not in [0, 1]", self.eval.hard_threshold));
        }
        for (m, spec) in &self.eval.method_backends {
            if let Err(e) = BackendSpec::parse(spec) {
                v.push(format!("eval.method_backends.{m}: {e}"));
            }
        }
        if self.eval.run.workers == 0 {
            v.push("eval.workers must be positive".into());
        }
        if !(self.eval.run.decode.temperature >= 0.0) {
            v.push("eval.decode.temperature must be non-negative".into());
        }
        if let siu_core::eval::ScorerSpec::Remote { endpoint } = &self.eval.run.scorer {
            if endpoint.is_empty() {
                v.push("eval.scorer: remote scorer needs an endpoint".into());
            }
        }
        if self.lab.seeds.is_empty() {
            v.push("lab.seeds is empty".into());
        }
        if let Err(e) = self.lab.config.validate() {
            v.push(format!("lab: {e}"));
        }
        v
    }

    pub fn backend_spec(&self) -> BackendSpec {
        BackendSpec::parse(&self.backend.spec).expect("validated")
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            temperature: self.selfdata.temperature,
            max_total_tokens: self.selfdata.max_total_tokens,
            completion_tokens: self.selfdata.completion_tokens,
            seed: self.seed,
            workers: self.selfdata.workers,
            log_path: None,
            manifest_path: None,
        }
    }
}
