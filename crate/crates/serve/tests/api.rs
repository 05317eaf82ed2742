use std::time::Duration;

use dermachat_core::eval::fixtures::synthetic_human_latency;
use dermachat_core::synth::{generate_corpus, SynthSpec};
use dermachat_core::train::desk_tokenizer;
use dermachat_core::{Image, ModelConfig, PipelineModel};
use dermachat_serve::bench::{latency_bench, offline_session_check, write_samples_csv, BenchCase, Client};
use dermachat_serve::guard::Target;
use dermachat_serve::{AppState, BackgroundServer, ServeConfig, ServeError};
use serde_json::{json, Value};

const PROMPTS: [&str; 4] = [
    "Could you describe the skin disease in this image for me?",
    "Please provide a paragraph listing additional features you observed in the image.",
    "Based on the previous information, please provide a detailed explanation of the cause of this skin disease.",
    "What treatment and medication should be recommended for this case?",
];

fn tiny_model() -> PipelineModel {
    let corpus = generate_corpus(&SynthSpec { n_images: 4, ..SynthSpec::default() }).unwrap();
    let tk = desk_tokenizer(&corpus.manifest.rule, corpus.stage1.iter().chain(&corpus.stage2));
    let cfg = ModelConfig { d_vision: 16, d_decoder: 16, ..ModelConfig::default() };
    PipelineModel::new(cfg, tk).unwrap()
}

fn test_config() -> ServeConfig {
    let mut c = ServeConfig { port: 0, workers: 2, request_timeout_s: 30.0, ..ServeConfig::default() };
    c.generation.max_new_tokens = 8;
    c
}

fn start(cfg: ServeConfig) -> BackgroundServer {
    BackgroundServer::start(AppState::with_model(cfg, tiny_model()).unwrap()).unwrap()
}

fn client(server: &BackgroundServer) -> Client {
    Client::new(&server.url(), Duration::from_secs(30)).unwrap()
}

fn png(fill: [u8; 3]) -> Vec<u8> {
    let mut img = Image::new(64, 64, fill);
    img.put(10, 10, [255, 255, 255]);
    img.to_png().unwrap()
}

fn http_status(e: ServeError) -> (u16, String) {
    match e {
        ServeError::Http { status, message, .. } => (status, message),
        other => panic!("expected an HTTP error, got {other}"),
    }
}

#[test]
fn sessions_start_empty_with_distinct_ids() {
    let server = start(test_config());
    let c = client(&server);
    let ids: std::collections::HashSet<String> = (0..100).map(|_| c.create_session(None).unwrap()).collect();
    assert_eq!(ids.len(), 100);
    let id = ids.iter().next().unwrap();
    assert_eq!(id.len(), 32);
    let view = c.session(id).unwrap();
    assert!(view.turns.is_empty() && !view.has_image && !view.embedding_cached);
    assert_eq!(http_status(c.session("0123").unwrap_err()).0, 404);
}

#[test]
fn loading_model_answers_503_with_retry_hint() {
    let state = AppState::new(test_config()).unwrap();
    let server = BackgroundServer::start(state).unwrap();
    let http = reqwest::blocking::Client::builder().no_proxy().build().unwrap();
    let r = http.post(format!("{}/sessions", server.url())).send().unwrap();
    assert_eq!(r.status().as_u16(), 503);
    assert_eq!(r.headers()["retry-after"], "2");
    let body: Value = r.json().unwrap();
    assert!(body["error"].as_str().unwrap().contains("loading"));
    assert!(matches!(client(&server).ensure_ready(), Err(ServeError::Unreachable { .. })));
}

#[test]
fn upload_contract() {
    let server = start(ServeConfig { max_upload_bytes: 20_000, ..test_config() });
    let c = client(&server);
    let id = c.create_session(None).unwrap();

    let up = c.upload_image(&id, png([200, 80, 80]), "a.png").unwrap();
    assert!(up.embedding_cached);
    assert_eq!((up.image.width, up.image.height), (64, 64));
    assert!(c.session(&id).unwrap().embedding_cached);

    let (status, _) = http_status(c.upload_image(&id, b"just some text".to_vec(), "notes.txt").unwrap_err());
    assert_eq!(status, 415);
    let (status, msg) = http_status(c.upload_image(&id, vec![0u8; 30_000], "big.png").unwrap_err());
    assert_eq!(status, 413);
    assert!(msg.contains("20000"), "{msg}");

    let big = Image::new(300, 200, [1, 2, 3]).to_png().unwrap();
    let up = c.upload_image(&id, big, "wide.png").unwrap();
    assert_eq!((up.image.original_width, up.image.width), (300, 64));

    c.message(&id, PROMPTS[0], None).unwrap();
    assert_eq!(c.session(&id).unwrap().turns.len(), 2);
    let again = c.upload_image(&id, png([10, 10, 10]), "b.png").unwrap();
    assert_eq!(again.turn_count, 0);
    assert!(c.session(&id).unwrap().turns.is_empty());
}

#[test]
fn message_contract_and_isolation() {
    let server = start(test_config());
    let c = client(&server);
    let a = c.create_session(None).unwrap();

    let (status, msg) = http_status(c.message(&a, PROMPTS[0], None).unwrap_err());
    assert_eq!(status, 409);
    assert!(msg.contains("upload"), "{msg}");

    c.upload_image(&a, png([200, 80, 80]), "a.png").unwrap();
    assert_eq!(http_status(c.message(&a, "   ", None).unwrap_err()).0, 422);

    let mut replies = Vec::new();
    for (i, p) in PROMPTS.iter().enumerate() {
        let r = c.message(&a, p, None).unwrap();
        assert_eq!(r.turn_count, 2 * (i + 1));
        assert!(r.latency_ms > 0.0);
        replies.push(r.reply);
    }
    let view = c.session(&a).unwrap();
    let roles: Vec<String> = view.turns.iter().map(|t| format!("{:?}", t.role)).collect();
    assert_eq!(roles, ["User", "Assistant"].repeat(4));
    assert_eq!(view.turns[0].text, PROMPTS[0]);
    assert!(view.turns.iter().skip(1).step_by(2).all(|t| t.latency_ms.is_some()));

    let b = c.create_session(None).unwrap();
    c.upload_image(&b, png([200, 80, 80]), "a.png").unwrap();
    assert_eq!(c.message(&b, PROMPTS[0], None).unwrap().reply, replies[0]);
}

#[test]
fn long_dialogue_reports_truncation() {
    let server = start(test_config());
    let c = client(&server);
    let id = c.create_session(None).unwrap();
    c.upload_image(&id, png([90, 60, 30]), "a.png").unwrap();
    let mut truncated = false;
    for _ in 0..8 {
        let r = c.message(&id, PROMPTS[2], None).unwrap();
        truncated |= r.truncated;
        if r.truncated {
            assert!(r.dropped_turns > 0);
        }
    }
    assert!(truncated);
}

#[test]
fn requests_past_the_timeout_fail_instead_of_hanging() {
    let server = start(ServeConfig { request_timeout_s: 1e-6, ..test_config() });
    let c = client(&server);
    let id = c.create_session(None).unwrap();
    // decoding a large image takes well past the timer's 1 ms granularity
    let big = Image::new(3000, 3000, [1, 1, 1]).to_png().unwrap();
    let (status, msg) = http_status(c.upload_image(&id, big, "a.png").unwrap_err());
    assert_eq!(status, 504);
    assert!(msg.contains("timeout"));
}

#[test]
fn prompts_endpoint_is_verbatim() {
    let server = start(test_config());
    assert_eq!(client(&server).prompts().unwrap(), PROMPTS);
}

#[test]
fn eval_capture_validates_and_appends() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("records.jsonl");
    let server = start(ServeConfig { eval_records: Some(log.clone()), ..test_config() });
    let http = reqwest::blocking::Client::builder().no_proxy().build().unwrap();
    let url = format!("{}/eval/records", server.url());
    let record = json!({
        "case_id": "case-001", "rater_id": "rater-1", "latency_s": 2.5,
        "ratings": ["strongly agree", "agree", "neutral", "agree", "agree", "strongly agree", "disagree"],
    });
    assert_eq!(http.post(&url).json(&record).send().unwrap().status().as_u16(), 201);
    let mut short = record.clone();
    short["ratings"].as_array_mut().unwrap().pop();
    let r = http.post(&url).json(&short).send().unwrap();
    assert_eq!(r.status().as_u16(), 422);
    assert!(r.text().unwrap().contains("missing items [7]"));
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(lines.contains("case-001"));
}

#[test]
fn sessions_survive_a_restart_when_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServeConfig { persist_dir: Some(dir.path().to_path_buf()), ..test_config() };
    let (id, first) = {
        let server = start(cfg.clone());
        let c = client(&server);
        let id = c.create_session(None).unwrap();
        c.upload_image(&id, png([20, 120, 40]), "a.png").unwrap();
        let r = c.message(&id, PROMPTS[0], None).unwrap();
        (id, r.reply)
    };
    let server = start(cfg);
    let c = client(&server);
    let view = c.session(&id).unwrap();
    assert_eq!(view.turns.len(), 2);
    assert_eq!(view.turns[1].text, first);
    assert!(view.has_image && !view.embedding_cached);
    c.message(&id, PROMPTS[1], None).unwrap();
    assert!(c.session(&id).unwrap().embedding_cached);
}

#[test]
fn static_bundle_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>t</title>").unwrap();
    let server = start(ServeConfig { static_dir: Some(dir.path().to_path_buf()), ..test_config() });
    let http = reqwest::blocking::Client::builder().no_proxy().build().unwrap();
    let body = http.get(format!("{}/", server.url())).send().unwrap().text().unwrap();
    assert!(body.contains("<title>t</title>"));
    assert!(client(&server).prompts().is_ok());
}

#[test]
fn bind_configuration() {
    assert!(test_config().startup_warnings().is_empty());
    let open = ServeConfig { bind: "0.0.0.0".into(), ..test_config() };
    assert!(open.startup_warnings()[0].contains("non-loopback"));
    assert!(ServeConfig { bind: "example.org".into(), ..test_config() }.validate().is_err());
    assert!(ServeConfig { bind: "localhost".into(), ..test_config() }.validate().is_ok());

    let mut c = ServeConfig::default();
    c.apply_env(|k| (k == "DERMACHAT_PORT").then(|| "9001".to_string())).unwrap();
    assert_eq!(c.port, 9001);
    assert!(c.apply_env(|k| (k == "DERMACHAT_PORT").then(|| "x".to_string())).is_err());
}

#[test]
fn full_session_makes_no_outbound_connections() {
    let server = start(test_config());
    let c = client(&server);
    let (report, replies) =
        offline_session_check(&c, png([200, 80, 80]), Target::SelfProcess, Duration::from_millis(1)).unwrap();
    assert_eq!(replies.len(), 4);
    assert!(report.passed(), "{:?}", report.violations());
    assert!(report.sockets_seen > 0 && report.samples > 1);
}

#[test]
fn bench_runs_every_prompt_and_rejects_bad_input() {
    let server = start(test_config());
    let c = client(&server);
    let human = synthetic_human_latency().unwrap();
    let timeout = Duration::from_secs(30);
    assert!(matches!(latency_bench(&c, &[], &human, timeout), Err(ServeError::Validation(_))));

    let cases: Vec<BenchCase> =
        (0..2).map(|i| BenchCase { case_id: format!("c{i}"), image_png: png([40 * i as u8, 90, 90]) }).collect();
    let report = latency_bench(&c, &cases, &human, timeout).unwrap();
    assert_eq!(report.samples.len(), 8);
    assert!(report.all_within_timeout);
    assert!(report.comparison.service_faster);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("samples.csv");
    write_samples_csv(&p, &report.samples).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 9);

    let addr = server.addr;
    server.stop().unwrap();
    let gone = Client::new(&format!("http://{addr}"), Duration::from_secs(2)).unwrap();
    assert!(matches!(latency_bench(&gone, &cases, &human, timeout), Err(ServeError::Unreachable { .. })));
}
