use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn lexprep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexprep"))
        .args(args)
        .env_remove("LEXPREP_API_KEY")
        .output()
        .expect("binary runs")
}

fn run_all(out: &Path, seed: Option<&str>) -> Output {
    let cfg = fixture("pipeline.toml");
    let mut args = vec!["all", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--mock-endpoint"];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    lexprep(&args)
}

fn files_under(root: &Path, dirs: &[&str]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for d in dirs {
        for e in std::fs::read_dir(root.join(d)).unwrap() {
            let p = e.unwrap().path();
            out.insert(format!("{d}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn write_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(fixture("pipeline.toml")).unwrap();
    let text = edit(text).replace("path = \"", &format!("path = \"{}/", fixture("").display()));
    let p = dir.join("pipeline.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_fixture_ok() {
    let cfg = fixture("pipeline.toml");
    let o = lexprep(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_reports_diagnostics_with_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), |t| {
        t.replace("context_length = 2048", "context_length = 0")
            .replace("id = \"lexglue-ledgar\"", "id = \"lexglue-eurlex\"")
    });
    let o = lexprep(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pack.context_length"), "{err}");
    assert!(err.contains("excluded"), "{err}");
}

#[test]
fn unreadable_config_is_fatal() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "seed = ").unwrap();
    assert_eq!(lexprep(&["validate", "--config", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn pack_before_mix_names_missing_artifact() {
    let d = tempfile::tempdir().unwrap();
    let cfg = fixture("pipeline.toml");
    let o = lexprep(&["pack", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("datasets/mix.jsonl"), "{err}");
}

#[test]
fn real_endpoint_required_without_mock() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), |t| {
        let start = t.find("[transform.endpoint]").unwrap();
        let end = t[start..].find("\n\n").unwrap() + start;
        format!("{}{}", &t[..start], &t[end..])
    });
    let out = d.path().join("run");
    let c = cfg.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(lexprep(&["ingest", "--config", c, "--out", o]).status.code(), Some(0));
    let r = lexprep(&["transform", "--config", c, "--out", o]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("transform.endpoint"));
}

#[test]
fn full_run_is_reproducible_and_fully_manifested() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, None), (&b, None), (&c, Some("99"))] {
        let o = run_all(dir.path(), seed);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files_under(a.path(), &["datasets", "reports"]);
    let fb = files_under(b.path(), &["datasets", "reports"]);
    assert_eq!(fa, fb);

    let manifests = files_under(a.path(), &["manifests"]);
    assert_eq!(manifests.len(), 5);
    let mut digested: BTreeMap<String, usize> = BTreeMap::new();
    for bytes in manifests.values() {
        let m: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        for o in m["outputs"].as_array().unwrap() {
            *digested.entry(o["path"].as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    assert_eq!(digested.keys().cloned().collect::<Vec<_>>(), fa.keys().cloned().collect::<Vec<_>>());
    assert!(digested.values().all(|&n| n == 1));

    let fc = files_under(c.path(), &["datasets"]);
    assert_ne!(fa["datasets/mix.jsonl"], fc["datasets/mix.jsonl"]);
    let hash = |root: &Path| {
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(root.join("manifests/mix.json")).unwrap()).unwrap();
        m["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash(a.path()), hash(c.path()));
}
