use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value as Json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planout"))
}

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/corpus")
        .join(format!("{name}.planout"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Json {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    serde_json::from_str(stdout(o).trim()).unwrap()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let f = corpus("voter");
    let args = ["--format", "json", "run", f.to_str().unwrap(), "--input", "userid=1234"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    assert_eq!(v["experiment"], "voter");
    assert_eq!(v["params"]["cond_probs"], serde_json::json!([0.5, 0.98]));
}

#[test]
fn compiled_ir_runs_like_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let ir = dir.path().join("two_factor.json");
    let src = corpus("two_factor");
    let o = run(&["compile", src.to_str().unwrap(), "-o", ir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    for id in ["1", "77", "abc"] {
        let from_src = run(&["--format", "json", "run", src.to_str().unwrap(), "--input", &format!("cookieid={id}")]);
        let from_ir = run(&[
            "--format",
            "json",
            "run",
            ir.to_str().unwrap(),
            "--exp",
            "two_factor",
            "--input",
            &format!("cookieid={id}"),
        ]);
        assert_eq!(json(&from_src)["params"], json(&from_ir)["params"]);
    }

    // decompiling the IR gives source that compiles to the same IR
    let dec = run(&["decompile", ir.to_str().unwrap()]);
    let again = dir.path().join("again.planout");
    std::fs::write(&again, dec.stdout).unwrap();
    let a = run(&["compile", again.to_str().unwrap()]);
    assert_eq!(stdout(&a).trim(), std::fs::read_to_string(&ir).unwrap().trim());
}

#[test]
fn script_errors_exit_1_with_located_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.planout");
    std::fs::write(&bad, "a = 1;\nx = uniformChoice(choices=[1, 2], unit=);\n").unwrap();
    let o = run(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bad.planout:2:"), "{err}");
    assert!(err.contains("error:"), "{err}");

    let missing = run(&["run", "/nonexistent/x.planout"]);
    assert_eq!(missing.status.code(), Some(1));

    let no_input = run(&["run", corpus("two_factor").to_str().unwrap()]);
    assert_eq!(no_input.status.code(), Some(1));
    assert!(stderr(&no_input).contains("cookieid"));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
}

#[test]
fn simulate_reports_six_cells() {
    let f = corpus("two_factor");
    let o = run(&["--format", "json", "simulate", f.to_str().unwrap(), "--n", "30000", "--pairs", "button_color,button_text"]);
    let v = json(&o);
    assert_eq!(v["n"], 30000);
    let joint = &v["joint"][0]["counts"];
    let mut cells = 0;
    let mut total = 0;
    for row in joint.as_object().unwrap().values() {
        for c in row.as_object().unwrap().values() {
            cells += 1;
            total += c.as_u64().unwrap();
        }
    }
    assert_eq!(cells, 6);
    assert_eq!(total, 30000);

    let table = run(&["simulate", f.to_str().unwrap(), "--n", "1000"]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("button_text"));

    // two unit inputs: inference refuses, a grid works
    let sc = corpus("collapse_story");
    let o = run(&["simulate", sc.to_str().unwrap(), "--n", "100"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--unit"));
    let o = run(&["--format", "json", "simulate", sc.to_str().unwrap(), "--n", "2000", "--grid", "viewerid=100", "--grid", "storyid=20"]);
    let v = json(&o);
    let rate = v["parameters"]["collapse_story"]["counts"]["1"].as_u64().unwrap() as f64 / 2000.0;
    assert!((rate - 0.05).abs() < 0.02, "{rate}");
    let o = run(&["simulate", sc.to_str().unwrap(), "--n", "2001", "--grid", "viewerid=100", "--grid", "storyid=20"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn input_json_supplies_lists() {
    let f = corpus("social_cues");
    let o = run(&[
        "--format",
        "json",
        "run",
        f.to_str().unwrap(),
        "--input",
        "userid=5",
        "--input",
        "pageid=9",
        "--input-json",
        r#"liking_friends=["ann","bo","cy","di"]"#,
    ]);
    let v = json(&o);
    let n = v["params"]["num_cues"].as_i64().unwrap();
    assert!((1..=3).contains(&n));
    assert_eq!(v["params"]["friends_shown"].as_array().unwrap().len() as i64, n);

    let bad = run(&["run", f.to_str().unwrap(), "--input-json", "liking_friends=[oops"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn overrides_freeze_parameters() {
    let f = corpus("voter");
    let o = run(&[
        "--format",
        "json",
        "run",
        f.to_str().unwrap(),
        "--input",
        "userid=3",
        "--override",
        "has_banner=0",
        "--override",
        "button_text:hello,extra:2",
    ]);
    let v = json(&o);
    assert_eq!(v["params"]["has_banner"], 0);
    assert_eq!(v["params"]["button_text"], "hello");
    assert_eq!(v["overrides"]["extra"], 2);
}

#[test]
fn namespace_admin_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let s = store.to_str().unwrap();
    let voter = corpus("voter");
    let fig = corpus("two_factor");

    let v = json(&run(&["--format", "json", "ns", "--store", s, "create", "web", "--unit", "userid", "--segments", "100", "--default", "has_banner=0"]));
    assert_eq!(v["version"], 1);
    json(&run(&["--format", "json", "ns", "--store", s, "alloc", "web", "voter", voter.to_str().unwrap(), "--segments", "40"]));

    // stale version is refused
    let o = run(&["ns", "--store", s, "--expected-version", "1", "alloc", "web", "late", fig.to_str().unwrap(), "--segments", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version"));

    // asking for more than is free
    let o = run(&["ns", "--store", s, "alloc", "web", "huge", fig.to_str().unwrap(), "--segments", "61"]);
    assert_eq!(o.status.code(), Some(1));

    let map = json(&run(&["--format", "json", "ns", "--store", s, "map", "web"]));
    assert_eq!(map["free_segments"], 60);
    let owned = map["segments"].as_array().unwrap().iter().filter(|x| *x == "voter").count();
    assert_eq!(owned, 40);

    // every unit in a voter segment is in the experiment, the rest get launch values
    let mut inside = 0;
    for id in 0..30 {
        let a = json(&run(&["--format", "json", "ns", "--store", s, "assign", "web", &id.to_string()]));
        let seg = a["segment"].as_u64().unwrap() as usize;
        let owner = &map["segments"][seg];
        if owner == "voter" {
            inside += 1;
            assert_eq!(a["experiment"], "voter");
            assert!(a["params"]["has_feed_stories"].is_i64());
        } else {
            assert!(a["experiment"].is_null());
            assert_eq!(a["params"]["has_banner"], 0);
        }
    }
    assert!(inside > 0);

    let d = json(&run(&["--format", "json", "ns", "--store", s, "defaults", "web", "color=red", "--unset", "has_banner"]));
    assert_eq!(d["launch_defaults"], serde_json::json!({ "color": "red" }));

    let o = json(&run(&["--format", "json", "ns", "--store", s, "dealloc", "web", "voter"]));
    assert_eq!(o["prior_status"], "active");
    let list = json(&run(&["--format", "json", "ns", "--store", s, "list"]));
    assert_eq!(list["namespaces"][0]["free_segments"], 100);
    assert_eq!(list["namespaces"][0]["experiments"][0]["status"], "deallocated");

    let o = run(&["ns", "--store", s, "map", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ns_without_a_store_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["ns", "list"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("store"));
}

#[test]
fn config_file_supplies_the_store() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("planout.toml"), "store = \"cfg-store.jsonl\"\n").unwrap();
    let o = run_in(dir.path(), &["ns", "create", "app", "--unit", "userid", "--segments", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("cfg-store.jsonl").exists());

    // explicit --config pointing elsewhere
    let other = dir.path().join("other.toml");
    std::fs::write(&other, format!("store = {:?}\n", dir.path().join("second.jsonl"))).unwrap();
    let o = run_in(dir.path(), &["--config", other.to_str().unwrap(), "ns", "list"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("app"));

    std::fs::write(dir.path().join("bad.toml"), "stor = 1\n").unwrap();
    let o = run_in(dir.path(), &["--config", "bad.toml", "ns", "list"]);
    assert_eq!(o.status.code(), Some(1));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http(addr: &str, request: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(request.as_bytes()).unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s.jsonl");
    let log = dir.path().join("exposures.jsonl");
    let child = bin()
        .args(["serve", "--port", "0", "--store", store.to_str().unwrap()])
        .args(["--exposure-log", log.to_str().unwrap()])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut server = Server(child);
    let mut line = String::new();
    BufReader::new(server.0.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();

    let body = r#"{"expected_version":0,"name":"web","primary_unit":"userid","num_segments":50}"#;
    let resp = http(
        &addr,
        &format!(
            "POST /namespaces HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    );
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");

    let resp = http(&addr, "GET /namespaces HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"web\""));
    drop(server);
    assert!(std::fs::read_to_string(&store).unwrap().contains("create_namespace"));
}
