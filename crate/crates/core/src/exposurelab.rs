//! Synthetic old-fact / new-fact testbed for the exposure-bias effect.
//!
//! A toy model is pretrained on question-answer pairs stating the old value of
//! every entity, then fine-tuned on the new values of an updated subset under the
//! naïve and the context-aware objective. Both branches start from the same
//! checkpoint, see the same number of tokens per step, and are probed at fixed
//! step intervals for the probability of old versus new answers.

use std::fmt::Write as _;
use std::io;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, LanguageModel, ScoreRequest, ToyBackend};
use crate::checkpoint::Checkpoint;
use crate::corpus::Article;
use crate::databuild::{pack_and_chunk, tokenize_with_mask, DataBuildError, MaskedTokenSeq, PackedBatchSet};
use crate::model::{ToyLm, ToyLmConfig};
use crate::selfdata::{InstructionResponsePair, PairOrigin};
use crate::templates::{
    alpaca_prompt, context_aware_response, forcing_suffix, render_context_aware, render_naive,
    TemplateError, TemplateKind, TrainingSample, ANSWER_MARKER,
};
use crate::text::collapse_whitespace;
use crate::tokenizer::Tokenizer;
use crate::trainer::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("lab config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataBuildError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Naive,
    ContextAware,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Naive => "naive",
            Objective::ContextAware => "context_aware",
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Capitalized name of two or three consonant-vowel syllables, sometimes closed by a
/// consonant. Mixed lengths keep packed samples from starting only at even offsets.
fn random_name(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut s = String::with_capacity(2 * syllables + 1);
    for k in 0..syllables {
        let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char;
        s.push(if k == 0 { c.to_ascii_uppercase() } else { c });
        s.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    if rng.random_bool(0.5) {
        s.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
    }
    s
}

fn prefix_related(a: &str, b: &str) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub entities: Vec<String>,
    pub old_values: Vec<String>,
    /// `Some` for the updated subset.
    pub new_values: Vec<Option<String>>,
    pub attribute_template: String,
    pub question_template: String,
    pub article_template: String,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn updated(&self) -> Vec<usize> {
        (0..self.entities.len()).filter(|&i| self.new_values[i].is_some()).collect()
    }

    pub fn unchanged(&self) -> Vec<usize> {
        (0..self.entities.len()).filter(|&i| self.new_values[i].is_none()).collect()
    }

    pub fn question(&self, e: usize) -> String {
        self.question_template.replace("{E}", &self.entities[e])
    }

    pub fn fact(&self, e: usize, value: &str) -> String {
        self.attribute_template.replace("{E}", &self.entities[e]).replace("{V}", value)
    }

    /// One-sentence news article announcing the new value, for updated entities.
    pub fn article(&self, e: usize) -> Option<Article> {
        let v = self.new_values[e].as_ref()?;
        let body = self.article_template.replace("{E}", &self.entities[e]).replace("{V}", v);
        Some(Article::new(format!("news-{}", self.entities[e]), body))
    }

    /// Value the world currently holds for `e`.
    pub fn current_value(&self, e: usize) -> &str {
        self.new_values[e].as_deref().unwrap_or(&self.old_values[e])
    }

    /// Every old and new value.
    pub fn answer_strings(&self) -> Vec<&str> {
        self.old_values.iter().map(String::as_str).chain(self.new_values.iter().flatten().map(String::as_str)).collect()
    }
}

/// Entities, old values and new values are distinct names of varying length;
/// no answer string is a prefix of another.
pub fn make_world(n_entities: usize, n_updated: usize, seed: u64) -> Result<SyntheticWorld, LabError> {
    if n_updated > n_entities {
        return Err(LabError::Config(format!("n_updated {n_updated} exceeds n_entities {n_entities}")));
    }
    if 2 * n_entities + n_updated > 2000 {
        return Err(LabError::Config("world too large for the name space".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities: Vec<String> = Vec::with_capacity(n_entities);
    while entities.len() < n_entities {
        let n = random_name(&mut rng);
        if !entities.contains(&n) {
            entities.push(n);
        }
    }
    let mut answers: Vec<String> = Vec::with_capacity(n_entities + n_updated);
    while answers.len() < n_entities + n_updated {
        let n = random_name(&mut rng);
        if !entities.contains(&n) && !answers.iter().any(|a| prefix_related(a, &n)) {
            answers.push(n);
        }
    }
    let old_values = answers[..n_entities].to_vec();
    let mut new_values = vec![None; n_entities];
    let mut picked = index::sample(&mut rng, n_entities, n_updated).into_vec();
    picked.sort_unstable();
    for (k, e) in picked.into_iter().enumerate() {
        new_values[e] = Some(answers[n_entities + k].clone());
    }
    Ok(SyntheticWorld {
        entities,
        old_values,
        new_values,
        attribute_template: "the manager of {E} is {V}".into(),
        question_template: "who is the manager of {E}?".into(),
        article_template: "Breaking: the manager of {E} is now {V}.".into(),
        seed,
    })
}

fn qa(world: &SyntheticWorld, e: usize, value: &str, source: Option<&Article>) -> InstructionResponsePair {
    InstructionResponsePair {
        instruction: world.question(e),
        response: value.to_string(),
        source_article_id: source.map(|a| a.id.clone()),
        origin: if source.is_some() { PairOrigin::SelfGenerated } else { PairOrigin::FixedUnrelated },
    }
}

/// `repeats` naïve QA samples per entity stating its old value, shuffled by `seed`.
pub fn gen_pretrain_corpus(world: &SyntheticWorld, repeats: usize, seed: u64) -> Result<Vec<TrainingSample>, LabError> {
    if repeats == 0 {
        return Err(LabError::Config("repeats must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(repeats * world.n_entities());
    for _ in 0..repeats {
        for e in 0..world.n_entities() {
            out.push(render_naive(&qa(world, e, &world.old_values[e], None))?);
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Non-updated entities used as unrelated samples; identical for both objectives.
pub fn unrelated_entities(world: &SyntheticWorld, unrelated_count: usize) -> Result<Vec<usize>, LabError> {
    let pool = world.unchanged();
    if unrelated_count > pool.len() {
        return Err(LabError::Config(format!("unrelated_count {unrelated_count} exceeds {} unchanged entities", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ 0x5eed);
    let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), unrelated_count).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// New-value samples for the updated entities plus `unrelated_count` old-value
/// samples for unchanged ones. The context-aware variant grounds updated samples
/// in their synthetic article and gives unrelated samples the "None" context; the
/// naïve variant uses plain Alpaca samples for both, so counts match.
pub fn gen_update_data(
    world: &SyntheticWorld,
    objective: Objective,
    unrelated_count: usize,
) -> Result<Vec<TrainingSample>, LabError> {
    let updated = world.updated();
    if updated.is_empty() && unrelated_count == 0 {
        return Err(LabError::Config("no updated entities and no unrelated samples".into()));
    }
    let mut out = Vec::new();
    for e in updated {
        let article = world.article(e).expect("updated entity has an article");
        let pair = qa(world, e, world.current_value(e), Some(&article));
        out.push(match objective {
            Objective::Naive => render_naive(&pair)?,
            Objective::ContextAware => render_context_aware(&pair, Some(&article))?,
        });
    }
    for e in unrelated_entities(world, unrelated_count)? {
        let pair = qa(world, e, &world.old_values[e], None);
        out.push(match objective {
            Objective::Naive => render_naive(&pair)?,
            Objective::ContextAware => render_context_aware(&pair, None)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub n_entities: usize,
    pub n_updated: usize,
    pub pretrain_repeats: usize,
    pub unrelated_count: usize,
    pub seed: u64,
    pub model: ToyLmConfig,
    pub batch_size: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub checkpoint_every: usize,
    /// BPE merges learned from the world's texts; 0 keeps the byte-level tokenizer.
    pub bpe_merges: usize,
    /// Steps between old-fact checks during pretraining.
    pub pretrain_check_every: usize,
    pub pretrain_target_p_old: f64,
    /// Training data is packed this many times with different orders, so sample
    /// boundaries fall at different row positions.
    pub repacks: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            n_entities: 10,
            n_updated: 4,
            pretrain_repeats: 50,
            unrelated_count: 4,
            seed: 0,
            model: ToyLmConfig {
                vocab_size: 259,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                seq_len: 128,
                init_seed: 0,
                init_scale: 0.02,
            },
            batch_size: 2,
            pretrain: TrainConfig {
                peak_lr: 3e-3,
                warmup_steps: 20,
                check_interval: 0,
                max_steps: 3000,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                peak_lr: 3e-4,
                warmup_steps: 0,
                check_interval: 0,
                max_steps: 1200,
                ..TrainConfig::default()
            },
            checkpoint_every: 50,
            bpe_merges: 400,
            pretrain_check_every: 50,
            pretrain_target_p_old: 0.9,
            repacks: 8,
        }
    }
}

impl LabConfig {
    /// The same experiment under another seed (world, init and data order).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.model.init_seed = seed;
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c
    }

    /// The degenerate world: nothing changes and every entity is restated with a "None" context.
    pub fn null_control(&self) -> Self {
        let mut c = self.clone();
        c.n_updated = 0;
        c.unrelated_count = c.n_entities;
        c
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.checkpoint_every == 0 || self.pretrain_check_every == 0 || self.batch_size == 0 || self.repacks == 0 {
            return Err(LabError::Config(
                "checkpoint_every, pretrain_check_every, batch_size and repacks must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pretrain_target_p_old) {
            return Err(LabError::Config(format!("pretrain_target_p_old {} not in [0, 1]", self.pretrain_target_p_old)));
        }
        if self.finetune.check_interval != 0 {
            return Err(LabError::Config("fine-tuning runs a fixed budget; set finetune.check_interval = 0".into()));
        }
        self.model.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens_seen: usize,
    /// Mean over updated entities of P(old value | question).
    pub p_old: f64,
    /// Mean over updated entities of P(new value | question).
    pub p_new: f64,
    /// Share of updated entities answered with the new value; `None` without updated entities.
    pub new_accuracy: Option<f64>,
    /// Share of unchanged entities still answered with the old value.
    pub retained_accuracy: Option<f64>,
    /// Share of context-aware probes that never produced the answer marker.
    pub fallback_rate: f64,
    /// Context-aware only: mean P(new | question, article given as context).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_new_given_article: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub seed: u64,
    pub n_entities: usize,
    pub n_updated: usize,
    pub checkpoint_every: usize,
    pub tokens_per_step: usize,
    pub pretrain_steps: usize,
    pub pretrain_converged: bool,
    pub pretrain_p_old: f64,
    pub pretrain_p_new: f64,
    /// (P(old), P(new)) per updated entity after pretraining, in `updated()` order.
    pub pretrain_entities: Vec<(f64, f64)>,
    pub naive: Vec<CurvePoint>,
    pub context_aware: Vec<CurvePoint>,
    pub crossover_naive: Option<usize>,
    pub crossover_context_aware: Option<usize>,
    pub final_accuracy_naive: Option<f64>,
    pub final_accuracy_context_aware: Option<f64>,
}

/// Outcome of the directional comparison between the two branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    /// First checkpoint where context-aware new-fact accuracy is at least 0.9.
    pub context_aware_step: Option<usize>,
    /// Naïve new-fact accuracy at that checkpoint.
    pub naive_accuracy_then: Option<f64>,
    /// Sum of P(old) over first-quartile checkpoints, per branch.
    pub early_old_mass_naive: f64,
    pub early_old_mass_context_aware: f64,
    pub holds: bool,
}

impl BiasReport {
    pub fn curve(&self, objective: Objective) -> &[CurvePoint] {
        match objective {
            Objective::Naive => &self.naive,
            Objective::ContextAware => &self.context_aware,
        }
    }

    pub fn first_step_reaching(&self, objective: Objective, accuracy: f64) -> Option<usize> {
        self.curve(objective).iter().find(|p| p.new_accuracy.is_some_and(|a| a >= accuracy)).map(|p| p.step)
    }

    /// Context-aware reaches 0.9 accuracy at a checkpoint where naïve is still at
    /// most 0.6, and over the first quarter of fine-tuning (excluding the shared
    /// starting point) naïve puts strictly more mass on old values.
    pub fn directional(&self) -> Directional {
        let ca_step = self.first_step_reaching(Objective::ContextAware, 0.9);
        let naive_then = ca_step
            .and_then(|s| self.naive.iter().find(|p| p.step == s))
            .and_then(|p| p.new_accuracy);
        let last = self.naive.last().map_or(0, |p| p.step);
        let early = |c: &[CurvePoint]| c.iter().filter(|p| p.step > 0 && 4 * p.step <= last).map(|p| p.p_old).sum::<f64>();
        let (mn, mc) = (early(&self.naive), early(&self.context_aware));
        Directional {
            context_aware_step: ca_step,
            naive_accuracy_then: naive_then,
            early_old_mass_naive: mn,
            early_old_mass_context_aware: mc,
            holds: naive_then.is_some_and(|a| a <= 0.6) && mn > mc,
        }
    }

    /// One JSON object per line: a summary record, then one record per curve point.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            seed: u64,
            n_entities: usize,
            n_updated: usize,
            checkpoint_every: usize,
            tokens_per_step: usize,
            pretrain_steps: usize,
            pretrain_converged: bool,
            pretrain_p_old: f64,
            pretrain_p_new: f64,
            pretrain_entities: &'a [(f64, f64)],
            crossover_naive: Option<usize>,
            crossover_context_aware: Option<usize>,
            final_accuracy_naive: Option<f64>,
            final_accuracy_context_aware: Option<f64>,
            directional: &'a Directional,
        }
        #[derive(Serialize)]
        struct Point<'a> {
            record: &'static str,
            objective: &'static str,
            #[serde(flatten)]
            point: &'a CurvePoint,
        }
        let d = self.directional();
        let mut out = serde_json::to_string(&Summary {
            record: "summary",
            seed: self.seed,
            n_entities: self.n_entities,
            n_updated: self.n_updated,
            checkpoint_every: self.checkpoint_every,
            tokens_per_step: self.tokens_per_step,
            pretrain_steps: self.pretrain_steps,
            pretrain_converged: self.pretrain_converged,
            pretrain_p_old: self.pretrain_p_old,
            pretrain_p_new: self.pretrain_p_new,
            pretrain_entities: &self.pretrain_entities,
            crossover_naive: self.crossover_naive,
            crossover_context_aware: self.crossover_context_aware,
            final_accuracy_naive: self.final_accuracy_naive,
            final_accuracy_context_aware: self.final_accuracy_context_aware,
            directional: &d,
        })
        .expect("serializable");
        out.push('\n');
        for obj in [Objective::Naive, Objective::ContextAware] {
            for p in self.curve(obj) {
                out.push_str(&serde_json::to_string(&Point { record: "point", objective: obj.as_str(), point: p }).expect("serializable"));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("objective,step,tokens_seen,p_old,p_new,new_accuracy,retained_accuracy,fallback_rate\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for obj in [Objective::Naive, Objective::ContextAware] {
            for p in self.curve(obj) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    obj.as_str(),
                    p.step,
                    p.tokens_seen,
                    p.p_old,
                    p.p_new,
                    opt(p.new_accuracy),
                    opt(p.retained_accuracy),
                    p.fallback_rate
                );
            }
        }
        s
    }

    /// Line chart of P(old) and P(new) per objective over fine-tuning steps.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 40.0);
        let max_step = self.naive.iter().chain(&self.context_aware).map(|p| p.step).max().unwrap_or(1).max(1) as f64;
        let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / max_step;
        let y = |p: f64| h - pad - (h - 2.0 * pad) * p.clamp(0.0, 1.0);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{pad}\" y=\"{t}\">P(answer | question), seed {seed}</text>\n\
             <text x=\"{r}\" y=\"{lb}\" text-anchor=\"end\">step (max {ms})</text>\n",
            b = h - pad,
            r = w - pad,
            t = pad - 12.0,
            lb = h - 8.0,
            seed = self.seed,
            ms = max_step,
        );
        let series = [
            (Objective::Naive, "old", "#d62728", "6 3"),
            (Objective::Naive, "new", "#d62728", ""),
            (Objective::ContextAware, "old", "#1f77b4", "6 3"),
            (Objective::ContextAware, "new", "#1f77b4", ""),
        ];
        for (k, (obj, which, color, dash)) in series.iter().enumerate() {
            let pts: Vec<String> = self
                .curve(*obj)
                .iter()
                .map(|p| format!("{:.1},{:.1}", x(p.step), y(if *which == "old" { p.p_old } else { p.p_new })))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"{dash}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
            let ly = pad + 14.0 * k as f64;
            let _ = writeln!(
                s,
                "<line x1=\"{a}\" y1=\"{ly}\" x2=\"{b}\" y2=\"{ly}\" stroke=\"{color}\" stroke-dasharray=\"{dash}\" stroke-width=\"2\"/><text x=\"{c}\" y=\"{ty}\">{} P({which})</text>",
                obj.as_str(),
                a = w - pad - 150.0,
                b = w - pad - 125.0,
                c = w - pad - 120.0,
                ty = ly + 4.0,
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_files(&self, dir: &Path, stem: &str) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.jsonl")), self.to_jsonl())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.svg")), self.to_svg())
    }
}

/// Byte-level tokenizer, or BPE learned from every text form a run trains or probes on.
pub fn lab_tokenizer(world: &SyntheticWorld, cfg: &LabConfig) -> Result<Tokenizer, LabError> {
    if cfg.bpe_merges == 0 {
        return Ok(Tokenizer::byte_level());
    }
    let mut texts = Vec::new();
    for e in 0..world.n_entities() {
        let old = qa(world, e, &world.old_values[e], None);
        texts.push(render_naive(&old)?.full_text);
        texts.push(render_context_aware(&old, None)?.full_text);
        if let Some(article) = world.article(e) {
            let new = qa(world, e, world.current_value(e), Some(&article));
            texts.push(render_naive(&new)?.full_text);
            texts.push(render_context_aware(&new, Some(&article))?.full_text);
        }
    }
    Ok(Tokenizer::train_bpe(texts.iter().map(String::as_str), cfg.bpe_merges))
}

fn pack(samples: &[TrainingSample], cfg: &LabConfig, tok: &Tokenizer, order_seeds: &[u64]) -> Result<PackedBatchSet, LabError> {
    let seqs: Vec<MaskedTokenSeq> = samples.iter().map(|s| tokenize_with_mask(s, tok)).collect::<Result<_, _>>()?;
    let mut set: Option<PackedBatchSet> = None;
    for &seed in order_seeds {
        let p = pack_and_chunk(&seqs, cfg.batch_size, cfg.model.seq_len, seed, &tok.spec())?;
        match &mut set {
            None => set = Some(p),
            Some(s) => s.segments.extend(p.segments),
        }
    }
    Ok(set.expect("at least one order seed"))
}

fn repack_seeds(cfg: &LabConfig) -> Vec<u64> {
    (0..cfg.repacks as u64).map(|k| cfg.seed.wrapping_mul(1_000).wrapping_add(k)).collect()
}

/// Context an answer is read from, in the objective's evaluation format.
struct Probe {
    context: String,
    fallback: bool,
}

/// Context-aware probes let the model write its own context up to the answer
/// marker. As in evaluation, output that lacks the marker or never restates the
/// question is replaced by the forced "None" context.
fn probe_context(backend: &ToyBackend, objective: Objective, question: &str) -> Result<Probe, LabError> {
    let prompt = alpaca_prompt(question);
    match objective {
        Objective::Naive => Ok(Probe { context: prompt, fallback: false }),
        Objective::ContextAware => {
            let tok = backend.tokenizer().expect("toy backend has a tokenizer");
            let seq_len = backend.model().config().seq_len;
            let budget = (seq_len - 8).min(tok.count(&prompt) + 160);
            let req = GenerationRequest {
                stop_sequences: vec![ANSWER_MARKER.to_string()],
                ..GenerationRequest::greedy(prompt.as_str(), budget)
            };
            let g = backend.generate(&req)?;
            if g.stop_sequence.is_some() && collapse_whitespace(&g.text).contains(&collapse_whitespace(question)) {
                Ok(Probe { context: format!("{prompt}{}{ANSWER_MARKER} ", g.text), fallback: false })
            } else {
                Ok(Probe { context: format!("{prompt}{} ", forcing_suffix(question)), fallback: true })
            }
        }
    }
}

fn answers_with(backend: &ToyBackend, context: &str, value: &str) -> Result<bool, LabError> {
    let tok = backend.tokenizer().expect("toy backend has a tokenizer");
    let n = tok.count(context) + tok.count(value);
    let g = backend.generate(&GenerationRequest::greedy(context, n + 1))?;
    Ok(g.text.trim_start().starts_with(value))
}

fn prob(backend: &ToyBackend, context: &str, continuation: &str) -> Result<f64, LabError> {
    Ok(backend.score_logprob(&ScoreRequest::new(context, continuation))?.exp())
}

/// Share of entities whose old value the model gives in the plain Alpaca format,
/// and the mean probability of those values.
pub fn old_fact_recall(world: &SyntheticWorld, model: &ToyLm, tok: &Tokenizer) -> Result<(f64, f64), LabError> {
    let backend = ToyBackend::new(model.clone(), tok.clone())?;
    let (mut ok, mut p) = (0, 0.0);
    for e in 0..world.n_entities() {
        let ctx = alpaca_prompt(&world.question(e));
        if answers_with(&backend, &ctx, &world.old_values[e])? {
            ok += 1;
        }
        p += prob(&backend, &ctx, &world.old_values[e])?;
    }
    let n = world.n_entities().max(1) as f64;
    Ok((ok as f64 / n, p / n))
}

fn evaluate(
    world: &SyntheticWorld,
    model: &ToyLm,
    tok: &Tokenizer,
    objective: Objective,
    step: usize,
    tokens_per_step: usize,
) -> Result<CurvePoint, LabError> {
    let backend = ToyBackend::new(model.clone(), tok.clone())?;
    let updated = world.updated();
    let (mut p_old, mut p_new, mut correct, mut fallbacks, mut probes) = (0.0, 0.0, 0, 0, 0);
    let mut p_art = 0.0;
    for &e in &updated {
        let q = world.question(e);
        let new = world.new_values[e].as_deref().expect("updated");
        let probe = probe_context(&backend, objective, &q)?;
        probes += 1;
        fallbacks += usize::from(probe.fallback);
        p_old += prob(&backend, &probe.context, &world.old_values[e])?;
        p_new += prob(&backend, &probe.context, new)?;
        if answers_with(&backend, &probe.context, new)? {
            correct += 1;
        }
        if objective == Objective::ContextAware {
            let article = world.article(e).expect("updated");
            let ctx = format!("{}{}", alpaca_prompt(&q), context_aware_response(Some(&article.body), &q, ""));
            p_art += prob(&backend, &ctx, new)?;
        }
    }
    let unchanged = world.unchanged();
    let mut kept = 0;
    for &e in &unchanged {
        let probe = probe_context(&backend, objective, &world.question(e))?;
        probes += 1;
        fallbacks += usize::from(probe.fallback);
        if answers_with(&backend, &probe.context, &world.old_values[e])? {
            kept += 1;
        }
    }
    let nu = updated.len().max(1) as f64;
    Ok(CurvePoint {
        step,
        tokens_seen: step * tokens_per_step,
        p_old: p_old / nu,
        p_new: p_new / nu,
        new_accuracy: (!updated.is_empty()).then(|| correct as f64 / nu),
        retained_accuracy: (!unchanged.is_empty()).then(|| kept as f64 / unchanged.len() as f64),
        fallback_rate: if probes == 0 { 0.0 } else { fallbacks as f64 / probes as f64 },
        p_new_given_article: (objective == Objective::ContextAware && !updated.is_empty()).then(|| p_art / nu),
    })
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub steps: usize,
    /// The stopping condition was met before `max_steps`.
    pub converged: bool,
}

/// Language-model pretraining on the old-fact corpus (loss on every token), stopped
/// at the first check where all old facts are answered with mean probability at
/// least `pretrain_target_p_old`.
pub fn pretrain(world: &SyntheticWorld, cfg: &LabConfig, tok: &Tokenizer) -> Result<Pretrained, LabError> {
    let mut corpus = gen_pretrain_corpus(world, cfg.pretrain_repeats, cfg.seed)?;
    for s in &mut corpus {
        s.loss_start = 0;
        s.loss_end = s.full_text.len();
    }
    let data = pack(&corpus, cfg, tok, &repack_seeds(cfg))?;
    let init = trainer::init_model(ToyLmConfig { vocab_size: tok.vocab_size(), ..cfg.model.clone() })?;
    let mut converged = false;
    let mut err = None;
    let out = trainer::train_with_hook(init, &data, &cfg.pretrain, |step, model| {
        if step % cfg.pretrain_check_every != 0 {
            return ControlFlow::Continue(());
        }
        match old_fact_recall(world, model, tok) {
            Ok((acc, p)) if acc >= 1.0 && p >= cfg.pretrain_target_p_old => {
                converged = true;
                ControlFlow::Break(())
            }
            Ok(_) => ControlFlow::Continue(()),
            Err(e) => {
                err = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Pretrained { steps: out.steps_run, checkpoint: out.checkpoint, converged })
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub curve: Vec<CurvePoint>,
    pub checkpoint: Checkpoint,
}

/// Fine-tunes `start` under `objective`, probing every `checkpoint_every` steps (and at step 0).
pub fn finetune_branch(
    world: &SyntheticWorld,
    start: &Checkpoint,
    tok: &Tokenizer,
    objective: Objective,
    cfg: &LabConfig,
) -> Result<Branch, LabError> {
    let samples = gen_update_data(world, objective, cfg.unrelated_count)?;
    let data = pack(&samples, cfg, tok, &repack_seeds(cfg))?;
    let tokens_per_step = cfg.batch_size * cfg.model.seq_len;
    let mut curve = vec![evaluate(world, &start.model, tok, objective, 0, tokens_per_step)?];
    let mut err = None;
    let mut ck = start.clone();
    ck.train_log.clear();
    let out = trainer::train_with_hook(ck, &data, &cfg.finetune, |step, model| {
        if step % cfg.checkpoint_every == 0 {
            match evaluate(world, model, tok, objective, step, tokens_per_step) {
                Ok(p) => curve.push(p),
                Err(e) => {
                    err = Some(e);
                    return ControlFlow::Break(());
                }
            }
        }
        ControlFlow::Continue(())
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(Branch { curve, checkpoint: out.checkpoint }),
    }
}

fn crossover(curve: &[CurvePoint]) -> Option<usize> {
    curve.iter().find(|p| p.p_new > p.p_old).map(|p| p.step)
}

/// Pretrains once, then runs both fine-tuning branches from the same checkpoint.
pub fn run_experiment(cfg: &LabConfig) -> Result<BiasReport, LabError> {
    cfg.validate()?;
    let world = make_world(cfg.n_entities, cfg.n_updated, cfg.seed)?;
    Ok(run_experiment_on(&world, cfg)?.report)
}

/// Everything a lab run produces.
#[derive(Debug, Clone)]
pub struct LabOutcome {
    pub report: BiasReport,
    pub tokenizer: Tokenizer,
    pub pretrained: Checkpoint,
    pub naive: Checkpoint,
    pub context_aware: Checkpoint,
}

pub fn run_experiment_on(world: &SyntheticWorld, cfg: &LabConfig) -> Result<LabOutcome, LabError> {
    cfg.validate()?;
    let tok = lab_tokenizer(world, cfg)?;
    let pre = pretrain(world, cfg, &tok)?;
    log::info!("seed {}: pretrained for {} steps (converged: {})", cfg.seed, pre.steps, pre.converged);
    let start = pre.checkpoint;
    let backend = ToyBackend::new(start.model.clone(), tok.clone())?;
    let updated = world.updated();
    let mut pretrain_entities = Vec::with_capacity(updated.len());
    for &e in &updated {
        let ctx = alpaca_prompt(&world.question(e));
        let po = prob(&backend, &ctx, &world.old_values[e])?;
        let pn = prob(&backend, &ctx, world.new_values[e].as_deref().expect("updated"))?;
        pretrain_entities.push((po, pn));
    }
    let nu = updated.len().max(1) as f64;
    let po = pretrain_entities.iter().map(|p| p.0).sum::<f64>();
    let pn = pretrain_entities.iter().map(|p| p.1).sum::<f64>();
    let (naive, ca) = rayon::join(
        || finetune_branch(world, &start, &tok, Objective::Naive, cfg),
        || finetune_branch(world, &start, &tok, Objective::ContextAware, cfg),
    );
    let (naive_branch, ca_branch) = (naive?, ca?);
    let (naive, context_aware) = (naive_branch.curve, ca_branch.curve);
    let report = BiasReport {
        seed: cfg.seed,
        n_entities: world.n_entities(),
        n_updated: updated.len(),
        checkpoint_every: cfg.checkpoint_every,
        tokens_per_step: cfg.batch_size * cfg.model.seq_len,
        pretrain_steps: pre.steps,
        pretrain_converged: pre.converged,
        pretrain_p_old: po / nu,
        pretrain_p_new: pn / nu,
        pretrain_entities,
        crossover_naive: crossover(&naive),
        crossover_context_aware: crossover(&context_aware),
        final_accuracy_naive: naive.last().and_then(|p| p.new_accuracy),
        final_accuracy_context_aware: context_aware.last().and_then(|p| p.new_accuracy),
        naive,
        context_aware,
    };
    Ok(LabOutcome {
        report,
        tokenizer: tok,
        pretrained: start,
        naive: naive_branch.checkpoint,
        context_aware: ca_branch.checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureProbe {
    /// P(response | question, context_k) in the context-aware format.
    pub conditionals: Vec<f64>,
    pub prior: Vec<f64>,
    /// Σ_k prior_k · conditional_k.
    pub mixture: f64,
    /// P(response | question) in the plain Alpaca format.
    pub unconditioned: f64,
    /// Whether `unconditioned` lies within [min_k, max_k] of the conditionals.
    pub inside_hull: bool,
}

/// Scores `response` under each context and mixes the conditionals with `prior`
/// (uniform when `None`).
pub fn mixture_probe(
    backend: &dyn LanguageModel,
    question: &str,
    response: &str,
    contexts: &[String],
    prior: Option<&[f64]>,
) -> Result<MixtureProbe, LabError> {
    if contexts.is_empty() {
        return Err(LabError::Config("mixture_probe needs at least one context".into()));
    }
    let prior: Vec<f64> = match prior {
        Some(p) => p.to_vec(),
        None => vec![1.0 / contexts.len() as f64; contexts.len()],
    };
    if prior.len() != contexts.len() || prior.iter().any(|&p| !(p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(LabError::Config("prior must be a probability vector with one weight per context".into()));
    }
    let prompt = alpaca_prompt(question);
    let mut conditionals = Vec::with_capacity(contexts.len());
    for c in contexts {
        let ctx = format!("{prompt}{}", context_aware_response(Some(c), question, ""));
        conditionals.push(backend.score_logprob(&ScoreRequest::new(ctx, response))?.exp());
    }
    let mixture = mix(&conditionals, &prior);
    let unconditioned = backend.score_logprob(&ScoreRequest::new(prompt, response))?.exp();
    let lo = conditionals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = conditionals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MixtureProbe { conditionals, prior, mixture, unconditioned, inside_hull: lo <= unconditioned && unconditioned <= hi })
}

/// Convex combination; a weight of exactly 1 returns that conditional unchanged.
fn mix(conditionals: &[f64], prior: &[f64]) -> f64 {
    if let Some(k) = prior.iter().position(|&p| p == 1.0) {
        return conditionals[k];
    }
    conditionals.iter().zip(prior).map(|(c, p)| c * p).sum()
}

/// Kind of template a lab sample was rendered with.
pub fn sample_objective(sample: &TrainingSample) -> Option<Objective> {
    match sample.template_kind {
        TemplateKind::Naive => Some(Objective::Naive),
        TemplateKind::ContextAware => Some(Objective::ContextAware),
        TemplateKind::Fact => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::templates::{CONTEXT_PREFIX, THEREFORE};

    #[test]
    fn world_shape() {
        let w = make_world(10, 4, 3).unwrap();
        assert_eq!(w.n_entities(), 10);
        assert_eq!(w.updated().len(), 4);
        for e in w.updated() {
            assert_ne!(w.old_values[e], w.new_values[e].clone().unwrap());
        }
        assert_eq!(w, make_world(10, 4, 3).unwrap());
        assert!(make_world(3, 4, 0).is_err());
        let null = make_world(10, 0, 3).unwrap();
        assert!(null.updated().is_empty());
    }

    #[test]
    fn answers_are_prefix_free() {
        for seed in 0..20 {
            let w = make_world(10, 4, seed).unwrap();
            let tok = Tokenizer::byte_level();
            let answers: Vec<Vec<u32>> = w.answer_strings().iter().map(|a| tok.encode(a)).collect();
            for (i, a) in answers.iter().enumerate() {
                for (j, b) in answers.iter().enumerate() {
                    if i != j {
                        assert!(!b.starts_with(a), "seed {seed}: {a:?} prefixes {b:?}");
                    }
                }
            }
            let mut all: Vec<&String> = w.entities.iter().chain(&w.old_values).chain(w.new_values.iter().flatten()).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 24);
        }
    }

    #[test]
    fn pretrain_corpus_uses_old_values_only() {
        let w = make_world(10, 4, 1).unwrap();
        let c = gen_pretrain_corpus(&w, 3, 1).unwrap();
        assert_eq!(c.len(), 30);
        let olds: Vec<&str> = w.old_values.iter().map(String::as_str).collect();
        for s in &c {
            assert!(olds.contains(&s.loss_text()));
            for v in w.new_values.iter().flatten() {
                assert!(!s.full_text.contains(v.as_str()));
            }
        }
    }

    #[test]
    fn update_data_is_balanced() {
        let w = make_world(10, 4, 2).unwrap();
        let n = gen_update_data(&w, Objective::Naive, 2).unwrap();
        let c = gen_update_data(&w, Objective::ContextAware, 2).unwrap();
        assert_eq!((n.len(), c.len()), (6, 6));
        for e in w.updated() {
            let body = w.article(e).unwrap().body;
            assert!(c.iter().any(|s| s.full_text.contains(&format!("{CONTEXT_PREFIX}{body}{THEREFORE}"))));
        }
        let none = c.iter().filter(|s| s.full_text.contains(&format!("{CONTEXT_PREFIX}None{THEREFORE}"))).count();
        assert_eq!(none, 2);
        assert!(c.iter().all(|s| sample_objective(s) == Some(Objective::ContextAware)));
        assert!(gen_update_data(&make_world(10, 0, 2).unwrap(), Objective::Naive, 0).is_err());
        assert!(gen_update_data(&w, Objective::Naive, 7).is_err());
    }

    #[test]
    fn mixture_identities() {
        let tok = Tokenizer::byte_level();
        let cfg = ToyLmConfig { d_model: 16, n_layers: 1, n_heads: 2, seq_len: 256, init_scale: 0.3, ..ToyLmConfig::default() };
        let b = ToyBackend::new(ToyLm::init(cfg).unwrap(), tok).unwrap();
        let one = mixture_probe(&b, "q?", "Kemo", &["ctx".into()], None).unwrap();
        assert_eq!(one.mixture, one.conditionals[0]);
        let two = ["a b".to_string(), "None".to_string()];
        let first = mixture_probe(&b, "q?", "Kemo", &two, Some(&[1.0, 0.0])).unwrap();
        assert_eq!(first.mixture, first.conditionals[0]);
        let second = mixture_probe(&b, "q?", "Kemo", &two, Some(&[0.0, 1.0])).unwrap();
        assert_eq!(second.mixture, second.conditionals[1]);
        assert!(mixture_probe(&b, "q?", "Kemo", &two, Some(&[0.5, 0.6])).is_err());
        assert!(mixture_probe(&b, "q?", "Kemo", &[], None).is_err());
    }
}
