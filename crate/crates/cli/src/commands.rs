use std::fmt;
use std::path::{Path, PathBuf};

use siu_core::backend::RemoteBackend;
use siu_core::checkpoint::Checkpoint;
use siu_core::corpus::{ingest_corpus, load_pairs, Corpus, CorpusFormat};
use siu_core::databuild::{pack_and_chunk, tokenize_with_mask, truncate_sample, DataBuildError, PackedBatchSet};
use siu_core::eval::{
    aggregate_report, build_related_hard, evaluate_method, grounding_match, grounding_summary, EvalError, EvalItem, EvalRecord,
    Scorer, Subset,
};
use siu_core::exposurelab::{run_experiment, LabError};
use siu_core::selfdata::{assemble_dataset, default_unrelated_count, generate_pairs, SelfDataError};
use siu_core::templates::{render_context_aware_with, render_fact, render_naive, TrainingSample};
use siu_core::text::{read_jsonl, write_jsonl};
use siu_core::trainer::{self, TrainError};
use siu_core::{BackendError, LanguageModel, ToyBackend, ToyLm, ToyLmConfig, Tokenizer};

use crate::config::{BackendSpec, CorpusFormatName, PipelineConfig, TokenizerChoice};
use crate::manifest::RunManifest;
use crate::{FormatArg, Method};

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Stage(String),
    Backend(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
            CliError::Backend(_) => 4,
        }
    }

    fn stage(e: impl fmt::Display) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(v) => write!(f, "config: {}", v.join("; ")),
            CliError::Stage(m) => write!(f, "{m}"),
            CliError::Backend(m) => write!(f, "backend: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<DataBuildError> for CliError {
    fn from(e: DataBuildError) -> Self {
        CliError::stage(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::stage(e)
    }
}

impl From<SelfDataError> for CliError {
    fn from(e: SelfDataError) -> Self {
        match e {
            SelfDataError::Backend { .. } => CliError::Backend(e.to_string()),
            SelfDataError::Config { .. } => CliError::Config(vec![e.to_string()]),
            other => CliError::stage(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(_) | EvalError::ScorerUnavailable(_) => CliError::Backend(e.to_string()),
            other => CliError::stage(other),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(m) => CliError::Config(vec![m]),
            LabError::Backend(b) => b.into(),
            other => CliError::stage(other),
        }
    }
}

pub struct Context {
    cfg: PipelineConfig,
    out: PathBuf,
    config_path: Option<PathBuf>,
}

fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Stage(format!("missing upstream artifact {} (produced by `siu {producer}`)", path.display())))
    }
}

impl Context {
    pub fn new(cfg: PipelineConfig, out: PathBuf, config_path: Option<PathBuf>) -> Self {
        Context { cfg, out, config_path }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn dir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let d = self.path(rel);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        let json = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut m = RunManifest::new(command, &json, self.config_path.as_deref());
        m.seed("seed", self.cfg.seed);
        m
    }

    fn finish(&self, m: &RunManifest, stem: &str) -> Result<(), CliError> {
        m.write(&self.dir("manifests")?, stem)?;
        Ok(())
    }

    fn corpus(&self) -> Result<Corpus, CliError> {
        let p = self.path("corpus.jsonl");
        require(&p, "ingest")?;
        ingest_corpus(&p, CorpusFormat::Jsonl).map_err(CliError::stage)
    }

    /// The run's tokenizer, created on first use and reused by every later stage.
    fn tokenizer(&self) -> Result<Tokenizer, CliError> {
        let p = self.path("tokenizer.json");
        if p.exists() {
            let mut tok: Tokenizer = serde_json::from_slice(&std::fs::read(&p)?).map_err(CliError::stage)?;
            tok.rebuild_index();
            return Ok(tok);
        }
        let tok = match self.cfg.tokenizer.kind {
            TokenizerChoice::ByteLevel => Tokenizer::byte_level(),
            TokenizerChoice::Bpe => {
                let corpus = self.corpus()?;
                let mut texts: Vec<String> = corpus.articles.iter().map(|a| a.body.clone()).collect();
                let unrelated = self.path("unrelated.jsonl");
                if unrelated.exists() {
                    for pr in load_pairs(&unrelated).map_err(CliError::stage)? {
                        texts.push(pr.instruction);
                        texts.push(pr.response);
                    }
                }
                Tokenizer::train_bpe(texts.iter().map(String::as_str), self.cfg.tokenizer.merges)
            }
        };
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(&p, serde_json::to_vec(&tok).map_err(CliError::stage)?)?;
        Ok(tok)
    }

    fn base_checkpoint(&self, tok: &Tokenizer) -> Result<Checkpoint, CliError> {
        match &self.cfg.backend.base_checkpoint {
            Some(p) => {
                require(p, "train")?;
                let ck = Checkpoint::load(p).map_err(CliError::stage)?;
                if ck.model.config().vocab_size != tok.vocab_size() {
                    return Err(CliError::Stage(format!(
                        "base checkpoint vocab {} does not match tokenizer vocab {}",
                        ck.model.config().vocab_size,
                        tok.vocab_size()
                    )));
                }
                Ok(ck)
            }
            None => {
                let cfg = ToyLmConfig { vocab_size: tok.vocab_size(), ..self.cfg.backend.model.clone() };
                Ok(Checkpoint::new(ToyLm::init(cfg).map_err(CliError::stage)?))
            }
        }
    }

    fn backend(&self, spec: &BackendSpec, model: impl FnOnce() -> Result<Checkpoint, CliError>) -> Result<Box<dyn LanguageModel>, CliError> {
        Ok(match spec {
            BackendSpec::Remote(url) => Box::new(RemoteBackend::new(url)),
            BackendSpec::Toy => Box::new(ToyBackend::new(model()?.model, self.tokenizer()?)?),
        })
    }

    pub fn ingest(&self, input: Option<PathBuf>, format: Option<FormatArg>) -> Result<(), CliError> {
        let input = input
            .or_else(|| self.cfg.corpus.path.clone())
            .ok_or_else(|| CliError::Config(vec!["corpus.path is not set and --input was not given".into()]))?;
        let format = match format {
            Some(FormatArg::Jsonl) => CorpusFormat::Jsonl,
            Some(FormatArg::PlainDir) => CorpusFormat::PlainDir,
            None => match self.cfg.corpus.format {
                CorpusFormatName::Jsonl => CorpusFormat::Jsonl,
                CorpusFormatName::PlainDir => CorpusFormat::PlainDir,
            },
        };
        if !input.exists() {
            return Err(CliError::Stage(format!("corpus input {} does not exist", input.display())));
        }
        let mut corpus = ingest_corpus(&input, format).map_err(CliError::stage)?;
        corpus.name = self.cfg.corpus.name.clone();
        std::fs::create_dir_all(&self.out)?;
        let out = self.path("corpus.jsonl");
        corpus.write_jsonl(&out).map_err(CliError::stage)?;
        let mut m = self.manifest("ingest");
        m.input(&input)?.output(&out)?;
        if let Some(u) = &self.cfg.corpus.unrelated_path {
            require(u, "ingest")?;
            let pool = load_pairs(u).map_err(CliError::stage)?;
            if let Some(bad) = pool.iter().position(|p| p.is_related()) {
                return Err(CliError::Stage(format!("{}: pair {bad} is grounded; the unrelated pool must not be", u.display())));
            }
            let dst = self.path("unrelated.jsonl");
            write_jsonl(&dst, &pool)?;
            m.input(u)?.output(&dst)?;
        }
        self.finish(&m, "ingest")?;
        println!("ingested {} articles into {}", corpus.len(), out.display());
        Ok(())
    }

    pub fn gendata(&self) -> Result<(), CliError> {
        let corpus = self.corpus()?;
        let spec = self.cfg.backend_spec();
        let backend = self.backend(&spec, || self.base_checkpoint(&self.tokenizer()?))?;
        let dir = self.dir("selfdata")?;
        let mut params = self.cfg.gen_params();
        params.log_path = Some(dir.join("generation.log.jsonl"));
        params.manifest_path = Some(dir.join("manifest.jsonl"));
        let related = generate_pairs(&corpus, backend.as_ref(), &params)?;
        let related_path = dir.join("related.jsonl");
        write_jsonl(&related_path, &related)?;

        let pool_path = self.path("unrelated.jsonl");
        let pool = if pool_path.exists() { load_pairs(&pool_path).map_err(CliError::stage)? } else { Vec::new() };
        let count = match self.cfg.selfdata.unrelated_count {
            Some(n) => n,
            None => {
                let want = default_unrelated_count(&related);
                if want > pool.len() {
                    log::warn!("unrelated pool has {} pairs, fewer than the {want} related ones; using all", pool.len());
                }
                want.min(pool.len())
            }
        };
        let ds = assemble_dataset(&related, &pool, count, self.cfg.seed)?;
        if ds.pairs.is_empty() {
            return Err(CliError::Stage("self data creation produced no pairs".into()));
        }
        let dataset = self.path("dataset.jsonl");
        write_jsonl(&dataset, &ds.pairs)?;
        let mut m = self.manifest("gendata");
        m.input(&self.path("corpus.jsonl"))?;
        if pool_path.exists() {
            m.input(&pool_path)?;
        }
        m.output(&related_path)?.output(&dataset)?;
        self.finish(&m, "gendata")?;
        println!("{} related + {} unrelated pairs -> {}", ds.related.len(), ds.unrelated.len(), dataset.display());
        Ok(())
    }

    fn samples(&self, method: Method, corpus: &Corpus, tok: &Tokenizer) -> Result<Vec<TrainingSample>, CliError> {
        if method == Method::FactFt {
            return Ok(corpus.articles.iter().map(render_fact).collect());
        }
        let dataset = self.path("dataset.jsonl");
        require(&dataset, "gendata")?;
        let pairs = load_pairs(&dataset).map_err(CliError::stage)?;
        corpus.check_grounding(&pairs).map_err(CliError::stage)?;
        let budget = self.cfg.databuild.seq_len - 1;
        pairs
            .iter()
            .map(|p| {
                let s = match method {
                    Method::Naive => render_naive(p),
                    _ => {
                        let article = p.source_article_id.as_deref().and_then(|id| corpus.get(id));
                        render_context_aware_with(p, article, self.cfg.databuild.loss_scope)
                    }
                }
                .map_err(CliError::stage)?;
                Ok(truncate_sample(&s, budget, tok)?)
            })
            .collect()
    }

    pub fn build(&self, method: Method) -> Result<(), CliError> {
        let corpus = self.corpus()?;
        let tok = self.tokenizer()?;
        let samples = self.samples(method, &corpus, &tok)?;
        let seqs = samples.iter().map(|s| tokenize_with_mask(s, &tok)).collect::<Result<Vec<_>, _>>()?;
        let db = &self.cfg.databuild;
        let packed = pack_and_chunk(&seqs, db.batch_size, db.seq_len, self.cfg.seed, &tok.spec())?;
        let dir = self.dir("build")?;
        let pack = dir.join(format!("{}.pack", method.as_str()));
        packed.save(&pack)?;
        let rendered = dir.join(format!("{}.samples.jsonl", method.as_str()));
        write_jsonl(&rendered, &samples)?;
        let mut m = self.manifest(&format!("build {}", method.as_str()));
        m.seed("order_seed", self.cfg.seed);
        m.input(&self.path("corpus.jsonl"))?.input(&self.path("tokenizer.json"))?;
        if method != Method::FactFt {
            m.input(&self.path("dataset.jsonl"))?;
        }
        m.output(&pack)?.output(&rendered)?;
        self.finish(&m, &format!("build-{}", method.as_str()))?;
        println!(
            "{}: {} samples, {} segments of {}x{}, {} loss tokens -> {}",
            method.as_str(),
            samples.len(),
            packed.segments.len(),
            db.batch_size,
            db.seq_len,
            packed.total_masked(),
            pack.display()
        );
        Ok(())
    }

    pub fn train(&self, method: Method) -> Result<(), CliError> {
        let pack = self.path(&format!("build/{}.pack", method.as_str()));
        require(&pack, &format!("build --method {}", method.as_str()))?;
        let data = PackedBatchSet::load(&pack)?;
        let tok = self.tokenizer()?;
        let base = self.base_checkpoint(&tok)?;
        let outcome = trainer::train(base, &data, &self.cfg.train)?;
        let dir = self.dir("checkpoints")?;
        let ck = dir.join(format!("{}.ckpt", method.as_str()));
        let log = dir.join(format!("{}.log.jsonl", method.as_str()));
        outcome.checkpoint.save(&ck).map_err(CliError::stage)?;
        outcome.checkpoint.save_log(&log)?;
        let mut m = self.manifest(&format!("train {}", method.as_str()));
        m.seed("train_seed", self.cfg.train.seed).seed("init_seed", self.cfg.backend.model.init_seed);
        m.input(&pack)?;
        if let Some(b) = &self.cfg.backend.base_checkpoint {
            m.input(b)?;
        }
        m.output(&ck)?.output(&log)?;
        self.finish(&m, &format!("train-{}", method.as_str()))?;
        println!(
            "{}: {} steps, converged {}, last accuracy {:?} -> {}",
            method.as_str(),
            outcome.steps_run,
            outcome.converged,
            outcome.last_accuracy,
            ck.display()
        );
        Ok(())
    }

    fn method_backend(&self, method: &str) -> Result<Box<dyn LanguageModel>, CliError> {
        let spec = match self.cfg.eval.method_backends.get(method) {
            Some(s) => BackendSpec::parse(s).expect("validated"),
            None if method == "mixinst" => self.cfg.backend_spec(),
            None => BackendSpec::Toy,
        };
        self.backend(&spec, || {
            if method == "mixinst" {
                self.base_checkpoint(&self.tokenizer()?)
            } else {
                let p = self.path(&format!("checkpoints/{method}.ckpt"));
                require(&p, &format!("train --method {method}"))?;
                Checkpoint::load(&p).map_err(CliError::stage)
            }
        })
    }

    pub fn eval(&self, methods: Option<Vec<String>>) -> Result<(), CliError> {
        let methods = methods.unwrap_or_else(|| self.cfg.eval.methods.clone());
        let bad: Vec<String> =
            methods.iter().filter(|m| !crate::config::KNOWN_METHODS.contains(&m.as_str())).map(|m| format!("unknown method {m:?}")).collect();
        if !bad.is_empty() {
            return Err(CliError::Config(bad));
        }
        let items_path = self
            .cfg
            .eval
            .items_path
            .clone()
            .ok_or_else(|| CliError::Config(vec!["eval.items_path is not set".into()]))?;
        require(&items_path, "ingest")?;
        let mut items = Vec::new();
        for (line, row) in read_jsonl::<EvalItem>(&items_path)? {
            items.push(row.map_err(|e| CliError::Stage(format!("{}:{line}: {e}", items_path.display())))?);
        }
        let corpus = self.corpus()?;
        let mut records: Vec<EvalRecord> = Vec::new();
        for m in &methods {
            let backend = self.method_backend(m)?;
            log::info!("evaluating {m} on {} items", items.len());
            records.extend(evaluate_method(backend.as_ref(), m, m == "context_aware", &items, &corpus, &self.cfg.eval.run)?);
        }

        let base = &self.cfg.eval.base_method;
        if methods.contains(base) {
            let base_related: Vec<EvalRecord> =
                records.iter().filter(|r| &r.method == base && r.source_article_id.is_some()).cloned().collect();
            let hard = build_related_hard(&base_related, self.cfg.eval.hard_threshold)?;
            for r in records.iter_mut().filter(|r| hard.contains(&r.id)) {
                if !r.subsets.contains(&Subset::RelatedHard) {
                    r.subsets.push(Subset::RelatedHard);
                }
            }
            log::info!("RELATED_HARD: {} items", hard.len());
        } else {
            log::warn!("base method {base} not evaluated; RELATED_HARD stays empty");
        }

        let dir = self.dir("eval")?;
        let rec_path = dir.join("records.jsonl");
        write_jsonl(&rec_path, &records)?;
        let report = aggregate_report(&records);
        let (rj, rm) = (dir.join("report.jsonl"), dir.join("report.md"));
        std::fs::write(&rj, report.to_jsonl())?;
        std::fs::write(&rm, report.to_markdown())?;
        let mut m = self.manifest("eval");
        m.seed("decode_seed", self.cfg.eval.run.decode.seed);
        m.input(&items_path)?.input(&self.path("corpus.jsonl"))?;
        for meth in methods.iter().filter(|m| m.as_str() != "mixinst") {
            m.input(&self.path(&format!("checkpoints/{meth}.ckpt")))?;
        }
        if methods.iter().any(|m| m == "context_aware") {
            let scorer = Scorer::from_spec(&self.cfg.eval.run.scorer);
            let matches = records
                .iter()
                .filter(|r| r.method == "context_aware" && r.source_article_id.is_some())
                .map(|r| grounding_match(r, &corpus, &scorer))
                .collect::<Result<Vec<_>, _>>()?;
            let g = dir.join("grounding.json");
            std::fs::write(&g, serde_json::to_string_pretty(&grounding_summary(&matches)).map_err(CliError::stage)?)?;
            m.output(&g)?;
        }
        m.output(&rec_path)?.output(&rj)?.output(&rm)?;
        self.finish(&m, "eval")?;
        print!("{}", report.to_markdown());
        Ok(())
    }

    pub fn lab(&self, null_control: bool) -> Result<(), CliError> {
        let dir = self.dir("lab")?;
        let mut m = self.manifest("lab");
        let mut summary = String::new();
        let null = null_control || self.cfg.lab.null_control;
        for &seed in &self.cfg.lab.seeds {
            let mut lcfg = self.cfg.lab.config.with_seed(seed);
            if null {
                lcfg = lcfg.null_control();
            }
            let report = run_experiment(&lcfg)?;
            let stem = format!("bias_seed{seed}");
            report.write_files(&dir, &stem)?;
            for ext in ["jsonl", "csv", "svg"] {
                m.output(&dir.join(format!("{stem}.{ext}")))?;
            }
            m.seed(&format!("lab_seed_{seed}"), seed);
            let d = report.directional();
            let line = serde_json::json!({
                "seed": seed,
                "null_control": null,
                "directional": d,
                "final_accuracy_naive": report.final_accuracy_naive,
                "final_accuracy_context_aware": report.final_accuracy_context_aware,
                "final_retained_naive": report.naive.last().and_then(|p| p.retained_accuracy),
                "final_retained_context_aware": report.context_aware.last().and_then(|p| p.retained_accuracy),
            });
            summary.push_str(&line.to_string());
            summary.push('\n');
            println!("{line}");
        }
        let s = dir.join("summary.jsonl");
        std::fs::write(&s, summary)?;
        m.output(&s)?;
        self.finish(&m, "lab")?;
        Ok(())
    }
}
