use std::path::{Path, PathBuf};
use std::time::Duration;

use dermachat_core::data::{read_jsonl, write_jsonl, CaptionPair, Stage};
use dermachat_core::eval::fixtures::synthetic_human_latency;
use dermachat_core::eval::{aggregate, load_probe_cases, probe_behavior, read_baseline, read_records, write_plot_csv, write_report_csv};
use dermachat_core::ingest::{load_class_tree, load_concept_dataset, merge_stage2, ColumnMapping};
use dermachat_core::prompts::{fit_prompt, Turn, CANONICAL_PROMPTS, DIAGNOSIS_QUERY};
use dermachat_core::synth::{generate_corpus, read_corpus, SynthSpec};
use dermachat_core::taxonomy::{ConceptTaxonomy, DiseaseTaxonomy};
use dermachat_core::train::{pretrain_stage0, resume_stage, run_desk, train_stage, DeskPlan, DeskScale, TrainConfig, TrainState, TrainingData, FINAL_CHECKPOINT};
use dermachat_core::{checkpoint, GenerationSettings, Image, ModelConfig, PipelineModel, Tokenizer};
use dermachat_serve::bench::{latency_bench, offline_session_check, write_samples_csv, BenchCase, Client};
use dermachat_serve::guard::Target;
use dermachat_serve::ServeConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::settings::{ConfigFile, Flags, RunManifest};
use crate::{BenchArgs, Cli, CliError, Command, EvalCommand, IngestCommand};

type CliResult<T> = Result<T, CliError>;

fn required<T: Clone>(v: &Option<T>, what: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Validation(format!("missing {what} (flag or config file)")))
}

fn emit(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON values serialize"));
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

/// Runs `work` between writing and finalising the run manifest in `out`.
fn with_manifest<C: Serialize>(
    out: &Path,
    subcommand: &str,
    config: &C,
    file: &ConfigFile,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    work: impl FnOnce() -> CliResult<Vec<PathBuf>>,
) -> CliResult<()> {
    let m = RunManifest::begin(out, subcommand, config, file.path.as_deref(), inputs, seed)?;
    let outcome = work();
    let outputs = outcome.as_ref().map(Clone::clone).unwrap_or_default();
    m.finish(out, &outcome, outputs)?;
    outcome.map(|_| ())
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth_data(&file, Flags::new().set("spec.n_images", a.n).set("spec.seed", a.seed).set("out", a.out)),
        Command::Ingest(IngestCommand::Concepts { csv, images, out }) => {
            ingest_concepts(&file, Flags::new().set("csv", csv).set("images", images).set("out", out))
        }
        Command::Ingest(IngestCommand::Classes { root, out, max_text_len }) => {
            ingest_classes(&file, Flags::new().set("root", root).set("out", out).set("max_text_len", max_text_len))
        }
        Command::Ingest(IngestCommand::Merge { inputs, out }) => {
            let inputs = (!inputs.is_empty()).then_some(inputs);
            ingest_merge(&file, Flags::new().set("inputs", inputs).set("out", out))
        }
        Command::PretrainVision(a) => {
            pretrain(&file, Flags::new().set("corpus", a.corpus).set("out", a.out).set("plan.model.seed", a.seed))
        }
        Command::Train(a) => train(
            &file,
            Flags::new()
                .set("stage", a.stage)
                .set("data", a.data)
                .set("init", a.init)
                .set("resume", a.resume)
                .set("out", a.out)
                .switch("desk_scale", a.desk_scale)
                .set("train.seed", a.seed),
        ),
        Command::Ablation(a) => {
            ablation(&file, Flags::new().set("corpus", a.corpus).set("out", a.out).set("plan.n_train", a.n_train))
        }
        Command::Generate(a) => {
            let prompts = (!a.prompts.is_empty()).then_some(a.prompts);
            generate(
                &file,
                Flags::new()
                    .set("checkpoint", a.checkpoint)
                    .set("image", a.image)
                    .set("prompts", prompts)
                    .set("generation.max_new_tokens", a.max_new_tokens)
                    .set("generation.seed", a.seed)
                    .set("out", a.out),
            )
        }
        Command::Serve(a) => serve(
            &file,
            Flags::new()
                .set("checkpoint", a.checkpoint)
                .set("bind", a.bind)
                .set("port", a.port)
                .set("static_dir", a.static_dir)
                .set("persist_dir", a.persist_dir)
                .set("eval_records", a.eval_records)
                .set("max_upload_bytes", a.max_upload_bytes)
                .set("request_timeout_s", a.request_timeout_s)
                .set("session_ttl_s", a.session_ttl_s)
                .set("workers", a.workers),
        ),
        Command::Eval(EvalCommand::Aggregate { records, out }) => {
            eval_aggregate(&file, Flags::new().set("records", records).set("out", out))
        }
        Command::Eval(EvalCommand::Bench(a)) | Command::Bench(a) => bench(&file, bench_flags(a)),
        Command::Eval(EvalCommand::Probe { checkpoint, corpus, skip, out }) => eval_probe(
            &file,
            Flags::new().set("checkpoint", checkpoint).set("corpus", corpus).set("skip", skip).set("out", out),
        ),
        Command::Eval(EvalCommand::Guard { url, pid, image, out }) => {
            eval_guard(&file, Flags::new().set("url", url).set("pid", pid).set("image", image).set("out", out))
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SynthDataSettings {
    out: Option<PathBuf>,
    spec: SynthSpec,
}

fn synth_data(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: SynthDataSettings = file.resolve("synth-data", Flags::new(), flags)?;
    let out = required(&s.out, "--out")?;
    s.spec.validate()?;
    with_manifest(&out, "synth-data", &s, file, vec![], Some(s.spec.seed), || {
        let corpus = generate_corpus(&s.spec)?;
        corpus.write(&out)?;
        emit(&json!({
            "out": out,
            "images": corpus.images.len(),
            "classes": corpus.manifest.rule.class_names(),
        }));
        Ok(vec![out.join("manifest.json"), out.join("stage1.jsonl"), out.join("stage2.jsonl"), out.join("images")])
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct IngestConceptsSettings {
    csv: Option<PathBuf>,
    images: Option<PathBuf>,
    out: Option<PathBuf>,
    mapping: ColumnMapping,
}

/// Pairs written to `out/pairs.jsonl` resolve against `out`, so image paths
/// are made absolute first.
fn absolute_images(pairs: &mut [CaptionPair], root: &Path) -> CliResult<()> {
    let root = root.canonicalize().map_err(|e| CliError::Validation(format!("{}: {e}", root.display())))?;
    for p in pairs {
        p.image = root.join(&p.image).to_string_lossy().into_owned();
    }
    Ok(())
}

fn ingest_concepts(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: IngestConceptsSettings = file.resolve("ingest-concepts", Flags::new(), flags)?;
    let (csv, out) = (required(&s.csv, "--csv")?, required(&s.out, "--out")?);
    let images = s.images.clone().or_else(|| csv.parent().map(Path::to_path_buf)).unwrap_or_default();
    with_manifest(&out, "ingest-concepts", &s, file, vec![csv.clone(), images.clone()], None, || {
        let (mut pairs, summary) = load_concept_dataset(&csv, &images, &ConceptTaxonomy::default(), &s.mapping)?;
        absolute_images(&mut pairs, &images)?;
        write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
        let summary_path = write_json(&out.join("summary.json"), &summary)?;
        emit(&serde_json::to_value(&summary).expect("summary serializes"));
        Ok(vec![out.join("pairs.jsonl"), summary_path])
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct IngestClassesSettings {
    root: Option<PathBuf>,
    out: Option<PathBuf>,
    max_text_len: usize,
}

impl Default for IngestClassesSettings {
    fn default() -> Self {
        Self { root: None, out: None, max_text_len: ModelConfig::default().max_text_len }
    }
}

fn ingest_classes(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: IngestClassesSettings = file.resolve("ingest-classes", Flags::new(), flags)?;
    let (root, out) = (required(&s.root, "--root")?, required(&s.out, "--out")?);
    with_manifest(&out, "ingest-classes", &s, file, vec![root.clone()], None, || {
        let (mut pairs, summary) = load_class_tree(&root, &DiseaseTaxonomy::default(), s.max_text_len)?;
        absolute_images(&mut pairs, &root)?;
        write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
        let summary_path = write_json(&out.join("summary.json"), &summary)?;
        emit(&serde_json::to_value(&summary).expect("summary serializes"));
        Ok(vec![out.join("pairs.jsonl"), summary_path])
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct IngestMergeSettings {
    inputs: Vec<PathBuf>,
    out: Option<PathBuf>,
}

fn ingest_merge(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: IngestMergeSettings = file.resolve("ingest-merge", Flags::new(), flags)?;
    let out = required(&s.out, "--out")?;
    with_manifest(&out, "ingest-merge", &s, file, s.inputs.clone(), None, || {
        let mut sources = Vec::new();
        for p in &s.inputs {
            let set = read_jsonl(p)?;
            let pairs = set
                .pairs
                .iter()
                .map(|pair| {
                    let mut q = pair.clone();
                    q.image = set.image_path(pair).to_string_lossy().into_owned();
                    q
                })
                .collect();
            sources.push(pairs);
        }
        let (merged, report) = merge_stage2(&sources)?;
        write_jsonl(&out.join("pairs.jsonl"), &merged)?;
        let report_path = write_json(&out.join("merge.json"), &report)?;
        emit(&serde_json::to_value(&report).expect("report serializes"));
        Ok(vec![out.join("pairs.jsonl"), report_path])
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PretrainSettings {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    plan: DeskPlan,
}

pub const BASE_CHECKPOINT: &str = "base.ckpt";

fn pretrain(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: PretrainSettings = file.resolve("pretrain-vision", Flags::new(), flags)?;
    let (corpus_dir, out) = (required(&s.corpus, "--corpus")?, required(&s.out, "--out")?);
    with_manifest(&out, "pretrain-vision", &s, file, vec![corpus_dir.clone()], Some(s.plan.model.seed), || {
        let corpus = read_corpus(&corpus_dir)?;
        let stage0 = pretrain_stage0(&s.plan, &corpus.manifest.rule, corpus.stage1.iter().chain(&corpus.stage2))?;
        let ckpt = out.join(BASE_CHECKPOINT);
        checkpoint::save::<()>(&ckpt, &stage0.model, None)?;
        let report = json!({
            "checkpoint": ckpt,
            "vision_final_loss": stage0.vision.losses.last(),
            "vision_label_accuracy": stage0.vision.train_accuracy,
            "decoder_final_loss": stage0.decoder.losses.last(),
        });
        let report_path = write_json(&out.join("pretrain.json"), &report)?;
        emit(&report);
        Ok(vec![ckpt, report_path])
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    stage: u8,
    data: Option<PathBuf>,
    init: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
    desk_scale: bool,
    /// Architecture of a fresh model when neither `init` nor `resume` is given.
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            stage: 1,
            data: None,
            init: None,
            resume: None,
            out: None,
            desk_scale: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Vocabulary for a model built straight from a pair file.
fn fresh_tokenizer(pairs: &[CaptionPair]) -> Tokenizer {
    let mut texts: Vec<String> = CANONICAL_PROMPTS.iter().map(|s| s.to_string()).collect();
    texts.push(DIAGNOSIS_QUERY.to_string());
    texts.push(dermachat_core::prompts::render(&[], ""));
    texts.extend(pairs.iter().map(|p| p.text.clone()));
    Tokenizer::build(texts.iter().map(String::as_str), false)
}

fn train(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let mut s: TrainSettings = file.resolve("train", Flags::new(), flags)?;
    let stage = Stage::try_from(s.stage)?;
    s.train.stage = stage;
    if s.desk_scale && s.train.desk_scale_override.is_none() {
        s.train.desk_scale_override = Some(DeskScale::standard());
    }
    s.train.resume_from = s.resume.clone();
    s.train.validate()?;
    let (data_path, out) = (required(&s.data, "--data")?, required(&s.out, "--out")?);
    let mut inputs = vec![data_path.clone()];
    inputs.extend(s.init.iter().chain(&s.resume).cloned());
    with_manifest(&out, "train", &s, file, inputs, Some(s.train.seed), || {
        let set = read_jsonl(&data_path)?;
        let (mut model, state) = match (&s.resume, &s.init) {
            (Some(r), _) => {
                let loaded = checkpoint::load(r)?;
                let state: Option<TrainState> = loaded.state()?;
                let state = state.ok_or_else(|| {
                    CliError::Validation(format!("{} holds no training state to resume from", r.display()))
                })?;
                (loaded.model, Some(state))
            }
            (None, Some(i)) => (checkpoint::load(i)?.model, None),
            (None, None) => (PipelineModel::new(s.model.clone(), fresh_tokenizer(&set.pairs))?, None),
        };
        let items = set.pairs.iter().map(|p| (p.clone(), Image::load(&set.image_path(p)))).collect();
        let data = TrainingData::prepare(&model, items)?;
        let report = match state {
            Some(st) => resume_stage(&mut model, &data, &s.train, Some(&out), st)?,
            None => train_stage(&mut model, &data, &s.train, Some(&out))?,
        };
        let summary = json!({
            "stage": stage.number(),
            "steps": report.steps,
            "tail_loss": report.tail_loss(20),
            "accounting": report.accounting,
            "checkpoint": out.join(FINAL_CHECKPOINT),
        });
        emit(&summary);
        Ok(vec![out.join(FINAL_CHECKPOINT), out.join(dermachat_core::train::METRICS_FILE)])
    })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AblationSettings {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    plan: DeskPlan,
}

fn ablation(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: AblationSettings = file.resolve("ablation", Flags::new(), flags)?;
    let (corpus_dir, out) = (required(&s.corpus, "--corpus")?, required(&s.out, "--out")?);
    with_manifest(&out, "ablation", &s, file, vec![corpus_dir.clone()], Some(s.plan.model.seed), || {
        let corpus = read_corpus(&corpus_dir)?;
        let (_, report) = run_desk(&s.plan, &corpus, Some(&out))?;
        eprint!("{}", report.table());
        let value = json!({ "report": report, "combined_dominates": report.combined_dominates() });
        let path = write_json(&out.join("ablation.json"), &value)?;
        emit(&value);
        Ok(vec![path])
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenerateSettings {
    checkpoint: Option<PathBuf>,
    image: Option<PathBuf>,
    prompts: Vec<String>,
    generation: GenerationSettings,
    out: Option<PathBuf>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            image: None,
            prompts: CANONICAL_PROMPTS.iter().map(|s| s.to_string()).collect(),
            generation: GenerationSettings::default(),
            out: None,
        }
    }
}

fn generate(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: GenerateSettings = file.resolve("generate", Flags::new(), flags)?;
    let (ckpt, image_path) = (required(&s.checkpoint, "--checkpoint")?, required(&s.image, "--image")?);
    let work = || -> CliResult<Vec<PathBuf>> {
        let model = checkpoint::load(&ckpt)?.model;
        let image = Image::load(&image_path)?.resized(model.config().image_size);
        let prefix = model.prefix_for_image(&image)?;
        let mut history: Vec<Turn> = Vec::new();
        let mut transcript = Vec::new();
        for p in &s.prompts {
            let rendered = fit_prompt(model.tokenizer(), &history, p, model.config().max_text_len, s.generation.max_new_tokens);
            let g = model.generate(&prefix, &rendered.tokens, &s.generation)?;
            transcript.push(json!({ "prompt": p, "reply": g.text, "truncated": rendered.truncated(), "finish": g.finish }));
            history.push(Turn::user(p.clone()));
            history.push(Turn::assistant(g.text));
        }
        let value = json!({ "turns": transcript });
        emit(&value);
        match &s.out {
            Some(out) => Ok(vec![write_json(&out.join("transcript.json"), &value)?]),
            None => Ok(vec![]),
        }
    };
    match &s.out {
        Some(out) => with_manifest(out, "generate", &s, file, vec![ckpt.clone(), image_path.clone()], Some(s.generation.seed), work),
        None => work().map(|_| ()),
    }
}

fn serve(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let mut env = ServeConfig { ..Default::default() };
    let defaults = serde_json::to_value(&env).expect("config serializes");
    env.apply_env(|k| std::env::var(k).ok())?;
    let mut env_flags = Flags::new();
    let env_value = serde_json::to_value(&env).expect("config serializes");
    for (k, v) in env_value.as_object().expect("object") {
        if defaults.get(k) != Some(v) {
            env_flags = env_flags.set(k, Some(v.clone()));
        }
    }
    let cfg: ServeConfig = file.resolve("serve", env_flags, flags)?;
    cfg.validate()?;
    if cfg.checkpoint.is_none() {
        return Err(CliError::Validation("missing --checkpoint (flag, config file or DERMACHAT_CHECKPOINT)".into()));
    }
    dermachat_serve::run(cfg)?;
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AggregateSettings {
    records: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn eval_aggregate(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: AggregateSettings = file.resolve("eval-aggregate", Flags::new(), flags)?;
    let records_path = required(&s.records, "--records")?;
    let work = || -> CliResult<Vec<PathBuf>> {
        let records = read_records(&records_path)?;
        let report = aggregate(&records)?;
        eprint!("{}", report.table());
        emit(&serde_json::to_value(&report).expect("report serializes"));
        match &s.out {
            Some(out) => {
                let csv = out.join("report.csv");
                write_report_csv(&csv, &report)?;
                Ok(vec![write_json(&out.join("report.json"), &report)?, csv])
            }
            None => Ok(vec![]),
        }
    };
    match &s.out {
        Some(out) => with_manifest(out, "eval-aggregate", &s, file, vec![records_path.clone()], None, work),
        None => work().map(|_| ()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ProbeSettings {
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    skip: usize,
    generation: GenerationSettings,
    out: Option<PathBuf>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { checkpoint: None, corpus: None, skip: 0, generation: DeskPlan::default().generation, out: None }
    }
}

fn eval_probe(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: ProbeSettings = file.resolve("eval-probe", Flags::new(), flags)?;
    let (ckpt, corpus) = (required(&s.checkpoint, "--checkpoint")?, required(&s.corpus, "--corpus")?);
    let work = || -> CliResult<Vec<PathBuf>> {
        let model = checkpoint::load(&ckpt)?.model;
        let (cases, classes) = load_probe_cases(&corpus)?;
        let cases = cases.get(s.skip..).unwrap_or(&[]);
        let scores = probe_behavior(&model, cases, &classes, &s.generation)?;
        let value = serde_json::to_value(&scores).expect("scores serialize");
        emit(&json!({
            "cases": scores.cases,
            "concept_recall": scores.concept_recall,
            "class_accuracy": scores.class_accuracy,
            "chance": scores.chance,
        }));
        match &s.out {
            Some(out) => Ok(vec![write_json(&out.join("probe.json"), &value)?]),
            None => Ok(vec![]),
        }
    };
    match &s.out {
        Some(out) => with_manifest(out, "eval-probe", &s, file, vec![ckpt.clone(), corpus.clone()], None, work),
        None => work().map(|_| ()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct BenchSettings {
    url: String,
    corpus: Option<PathBuf>,
    images: Option<PathBuf>,
    cases: usize,
    baseline: Option<PathBuf>,
    timeout_s: f64,
    out: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            corpus: None,
            images: None,
            cases: 10,
            baseline: None,
            timeout_s: ServeConfig::default().request_timeout_s,
            out: None,
        }
    }
}

fn bench_flags(a: BenchArgs) -> Flags {
    Flags::new()
        .set("url", a.url)
        .set("corpus", a.corpus)
        .set("images", a.images)
        .set("cases", a.cases)
        .set("baseline", a.baseline)
        .set("timeout_s", a.timeout_s)
        .set("out", a.out)
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    out.sort();
    Ok(out)
}

fn bench_cases(s: &BenchSettings) -> CliResult<Vec<BenchCase>> {
    let paths: Vec<(String, PathBuf)> = match (&s.corpus, &s.images) {
        (Some(c), _) => {
            let m = dermachat_core::synth::read_manifest(&c.join("manifest.json"))?;
            m.images.iter().map(|p| (format!("case-{:03}", p.index + 1), c.join(&p.image))).collect()
        }
        (None, Some(d)) => image_files(d)?
            .into_iter()
            .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p))
            .collect(),
        (None, None) => return Err(CliError::Validation("bench needs --corpus or --images".into())),
    };
    paths
        .into_iter()
        .take(s.cases)
        .map(|(case_id, p)| {
            let image_png = std::fs::read(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            Ok(BenchCase { case_id, image_png })
        })
        .collect()
}

fn bench(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: BenchSettings = file.resolve("bench", Flags::new(), flags)?;
    let cases = bench_cases(&s)?;
    let baseline = match &s.baseline {
        Some(p) => read_baseline(p)?,
        None => synthetic_human_latency()?,
    };
    let timeout = Duration::from_secs_f64(s.timeout_s);
    let work = || -> CliResult<Vec<PathBuf>> {
        let client = Client::new(&s.url, timeout)?;
        let report = latency_bench(&client, &cases, &baseline, timeout)?;
        let c = &report.comparison;
        eprintln!(
            "service p50/p90/p99 = {:.3}/{:.3}/{:.3} s, baseline p50 = {:.1} s, ratio {:.1}",
            c.service.p50, c.service.p90, c.service.p99, c.baseline.p50, c.p50_ratio
        );
        emit(&json!({ "comparison": c, "cases": report.cases, "replies": report.samples.len(), "all_within_timeout": report.all_within_timeout }));
        match &s.out {
            Some(out) => {
                let samples = out.join("samples.csv");
                write_samples_csv(&samples, &report.samples)?;
                let plot = out.join("plot.csv");
                let service: Vec<f64> = report.samples.iter().map(|r| r.latency_s).collect();
                write_plot_csv(&plot, &service, &baseline)?;
                Ok(vec![write_json(&out.join("bench.json"), &report)?, samples, plot])
            }
            None => Ok(vec![]),
        }
    };
    match &s.out {
        Some(out) => with_manifest(out, "bench", &s, file, s.corpus.iter().chain(&s.images).chain(&s.baseline).cloned().collect(), None, work),
        None => work().map(|_| ()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GuardSettings {
    url: String,
    pid: Option<u32>,
    image: Option<PathBuf>,
    interval_ms: u64,
    timeout_s: f64,
    out: Option<PathBuf>,
}

impl Default for GuardSettings {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8080".into(),
            pid: None,
            image: None,
            interval_ms: 1,
            timeout_s: ServeConfig::default().request_timeout_s,
            out: None,
        }
    }
}

fn eval_guard(file: &ConfigFile, flags: Flags) -> CliResult<()> {
    let s: GuardSettings = file.resolve("eval-guard", Flags::new(), flags)?;
    let image_png = match &s.image {
        Some(p) => std::fs::read(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => generate_corpus(&SynthSpec { n_images: 1, ..SynthSpec::default() })?.images[0].to_png()?,
    };
    let target = s.pid.map_or(Target::SelfProcess, Target::Pid);
    let client = Client::new(&s.url, Duration::from_secs_f64(s.timeout_s))?;
    client.ensure_ready()?;
    let (report, replies) = offline_session_check(&client, image_png, target, Duration::from_millis(s.interval_ms))?;
    let value = json!({ "passed": report.passed(), "violations": report.violations(), "report": report, "replies": replies.len() });
    emit(&value);
    if let Some(out) = &s.out {
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
        write_json(&out.join("guard.json"), &value)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("offline guard failed: {}", report.violations().join("; "))))
    }
}
