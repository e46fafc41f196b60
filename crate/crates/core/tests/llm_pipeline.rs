use std::path::Path;
use std::process::{Command, Output};

use nbest_rescore::llmclient::mock::MockServer;
use nbest_rescore::pipeline::{EvaluationSummary, ExperimentConfig, FUSION_SYSTEM};

const SECRET: &str = "sk-pipeline-test-93ab0c";

fn run(config: &Path, out: &Path, key: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nbest-rescore"));
    cmd.args(["run", "--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .env("RUST_LOG", "info")
        .env_remove("NBEST_PIPELINE_TEST_KEY");
    if let Some(k) = key {
        cmd.env("NBEST_PIPELINE_TEST_KEY", k);
    }
    cmd.output().unwrap()
}

fn llm_config(dir: &Path, server: &MockServer) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::quick();
    cfg.llm.enabled = true;
    cfg.llm.endpoint.base_url = server.base_url();
    cfg.llm.endpoint.model_name = "mock".into();
    cfg.llm.endpoint.api_key_env = "NBEST_PIPELINE_TEST_KEY".into();
    cfg.llm.endpoint.rate_limit = 0.0;
    cfg.llm.endpoint.backoff_initial_ms = 1;
    let path = dir.join("llm.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn all_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            all_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn llm_feature_joins_the_fusion_without_leaking_the_key() {
    let server = MockServer::start().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = llm_config(dir.path(), &server);
    let out_dir = dir.path().join("run");
    let out = run(&config, &out_dir, Some(SECRET));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(server.request_count() > 0);

    let summary = EvaluationSummary::load(&out_dir).unwrap();
    let names: Vec<&str> = summary.sets["test"].iter().map(|r| r.system.as_str()).collect();
    assert!(names.contains(&"llm") && names.contains(&FUSION_SYSTEM), "{names:?}");

    let logs = [out.stdout, out.stderr].concat();
    assert!(!String::from_utf8_lossy(&logs).contains(SECRET));
    let mut files = Vec::new();
    all_files(&out_dir, &mut files);
    for f in files {
        let bytes = std::fs::read(&f).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains(SECRET), "key written to {}", f.display());
    }

    // A warm feature cache means rescoring needs no more requests.
    let before = server.request_count();
    std::fs::remove_dir_all(out_dir.join("score/features")).unwrap();
    let again = run(&config, &out_dir, Some(SECRET));
    assert!(again.status.success());
    assert_eq!(server.request_count(), before);
}

#[test]
fn missing_key_exits_4() {
    let server = MockServer::start().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = llm_config(dir.path(), &server);
    let out = run(&config, &dir.path().join("run"), None);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NBEST_PIPELINE_TEST_KEY"));
}

#[test]
fn failing_endpoint_exits_4() {
    let server = MockServer::start().unwrap();
    server.script([nbest_rescore::llmclient::mock::Scripted::Status(401); 1]);
    let dir = tempfile::tempdir().unwrap();
    let config = llm_config(dir.path(), &server);
    let out = run(&config, &dir.path().join("run"), Some(SECRET));
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).contains(SECRET));
}
