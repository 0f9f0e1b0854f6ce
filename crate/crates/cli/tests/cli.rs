use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::{json, Value};
use tracebox_core::chat::RecordingTransport;
use tracebox_core::harness::{evaluate, ChatModelClient, EvalOptions};
use tracebox_core::pipeline::REFLECTION_MARKER;
use tracebox_core::template::PromptTemplate;
use tracebox_testkit::{always_a_response, bench40, fixture_path, mock_endpoint, oracle_response, ScriptedModel};

fn tracebox(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tracebox"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "tracebox {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn conformance_corpus_passes() {
    let out = tracebox(&[
        "parser",
        "conformance",
        "--corpus",
        p(&fixture_path("parser_conformance.jsonl")),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("65/65 cases passed"), "{stdout}");
}

#[test]
fn data_commands_chain_and_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let raw: String = (0..30)
        .map(|i| {
            let extra = if i % 3 == 0 { "" } else { " then [0.5, 0.5, 0.9, 0.8]" };
            json!({
                "id": format!("r{i}"), "image": format!("img/{i}.jpg"), "width": 640, "height": 480,
                "question": "Which?", "answer": "A", "source": "unit",
                "reasoning": format!("Look at [0.1, 0.1, 0.3, 0.2]{extra}."),
            })
            .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(d.join("raw.jsonl"), raw).unwrap();

    let run = |tag: &str| {
        let abs = d.join(format!("abs_{tag}.jsonl"));
        let multi = d.join(format!("multi_{tag}.jsonl"));
        let refl = d.join(format!("refl_{tag}.jsonl"));
        tracebox(&["data", "denormalize", "--in", p(&d.join("raw.jsonl")), "--out", p(&abs)]);
        tracebox(&["data", "filter-multibox", "--in", p(&abs), "--out", p(&multi)]);
        tracebox(&[
            "--seed",
            "4",
            "data",
            "inject-reflection",
            "--in",
            p(&multi),
            "--out",
            p(&refl),
            "--fraction",
            "0.5",
        ]);
        [abs, multi, refl].map(|f| std::fs::read(f).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);

    let abs = lines(&d.join("abs_a.jsonl"));
    assert_eq!(abs.len(), 30);
    assert_eq!(abs[0]["steps"][1]["box"], json!([64.0, 48.0, 192.0, 96.0]));
    assert_eq!(abs[0]["source"], "unit");
    assert_eq!(lines(&d.join("multi_a.jsonl")).len(), 20);
    let refl = lines(&d.join("refl_a.jsonl"));
    assert_eq!(refl.len(), 20);
    let modified: Vec<_> = refl.iter().filter(|r| r.get("decoy_step").is_some()).collect();
    assert!(!modified.is_empty() && modified.len() < 20);
    for r in modified {
        assert!(r.to_string().contains(REFLECTION_MARKER));
    }
}

#[test]
fn counting_from_visdrone_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ann = String::new();
    for i in 0..7 {
        ann.push_str(&format!("{},{},20,20,1,4,0,0\n", i * 30, 10));
    }
    ann.push_str("0,0,50,50,0,1,0,0\n0,0,10,10,1,0,0,0\n");
    std::fs::write(d.join("0001.txt"), ann).unwrap();
    std::fs::write(
        d.join("list.jsonl"),
        json!({"id": "0001", "image_ref": "img/0001.jpg", "dims": {"width": 400, "height": 300}, "visdrone": "0001.txt"})
            .to_string()
            + "\n",
    )
    .unwrap();
    tracebox(&[
        "--seed",
        "1",
        "data",
        "make-counting",
        "--in",
        p(&d.join("list.jsonl")),
        "--out",
        p(&d.join("q.jsonl")),
    ]);
    let q = lines(&d.join("q.jsonl"));
    assert_eq!(q.len(), 1);
    assert_eq!(q[0]["gt_count"], 7);
    assert_eq!(q[0]["question"], "How many car are in the image?");
    assert_eq!(q[0]["options"].as_array().unwrap().len(), 4);
}

async fn record(
    dir: &Path,
    name: &str,
    reply: fn(&tracebox_core::harness::BenchmarkSample) -> String,
) -> std::path::PathBuf {
    let samples = bench40();
    let template = PromptTemplate::eval_v1();
    let cassette = dir.join(format!("{name}.cassette.jsonl"));
    let rec = RecordingTransport::create(ScriptedModel::new(&samples, &template, reply), &cassette).unwrap();
    let client = ChatModelClient::new(Arc::new(rec), mock_endpoint("scripted"));
    evaluate(&client, &samples, &template, 0, &EvalOptions::default()).await;
    cassette
}

const CONFIG: &str = r#"
[model]
base_url = "http://127.0.0.1:9/v1"
model = "scripted"
timeout_secs = 5
max_retries = 0
max_tokens = 512
temperature = 0.0

[eval]
max_in_flight = 4
max_retries = 0
"#;

#[tokio::test]
async fn eval_replay_report_and_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let oracle = record(d, "oracle", oracle_response).await;
    let guess = record(d, "guess", always_a_response).await;
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    let dataset = fixture_path("bench40.jsonl");

    for (cassette, out) in [(&oracle, "run_oracle"), (&guess, "run_guess")] {
        let stdout = tracebox(&[
            "--config",
            p(&d.join("cfg.toml")),
            "eval",
            "run",
            "--dataset",
            p(&dataset),
            "--out",
            p(&d.join(out)),
            "--cassette-mode",
            "replay",
            "--cassette",
            p(cassette),
        ])
        .stdout;
        let stdout = String::from_utf8(stdout).unwrap();
        assert!(stdout.contains("unanswered 0"), "{stdout}");
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run_oracle/report.json")).unwrap()).unwrap();
    assert_eq!(report["overall_accuracy"], 100.0);
    assert_eq!(report["miou"], 1.0);
    assert_eq!(report["model"], "scripted");
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run_guess/report.json")).unwrap()).unwrap();
    assert_eq!(report["overall_accuracy"], 25.0);

    let files = ["report.json", "report.md", "per_category.csv", "histograms.csv"];
    let before: Vec<_> = files
        .iter()
        .map(|f| std::fs::read(d.join("run_guess").join(f)).unwrap())
        .collect();
    tracebox(&[
        "eval",
        "report",
        "--dataset",
        p(&dataset),
        "--out",
        p(&d.join("run_guess")),
    ]);
    let after: Vec<_> = files
        .iter()
        .map(|f| std::fs::read(d.join("run_guess").join(f)).unwrap())
        .collect();
    assert_eq!(before, after);

    // both models are right exactly on the ten "A" questions
    tracebox(&[
        "eval",
        "filter-consensus",
        "--in",
        p(&dataset),
        "--records",
        p(&d.join("run_oracle/records.jsonl")),
        "--records",
        p(&d.join("run_guess/records.jsonl")),
        "--out",
        p(&d.join("consensus.jsonl")),
    ]);
    let kept = lines(&d.join("consensus.jsonl"));
    assert_eq!(kept.len(), 30);
    assert!(kept.iter().all(|s| s["answer"] != "A"));

    tracebox(&[
        "data",
        "filter-hard",
        "--in",
        p(&dataset),
        "--records",
        p(&d.join("run_guess/records.jsonl")),
        "--out",
        p(&d.join("hard.jsonl")),
    ]);
    assert_eq!(lines(&d.join("hard.jsonl")).len(), 30);
}

#[test]
fn replay_miss_leaves_questions_unanswered() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let out = tracebox(&[
        "--config",
        p(&d.join("cfg.toml")),
        "eval",
        "run",
        "--dataset",
        p(&fixture_path("bench40.jsonl")),
        "--out",
        p(&d.join("run")),
        "--cassette-mode",
        "replay",
        "--cassette",
        p(&d.join("empty.jsonl")),
    ]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("unanswered 40"));
}

#[tokio::test]
async fn serve_answers_health_and_rewards() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_tracebox"))
        .args(["serve", "--bind", &format!("127.0.0.1:{port}")])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let client = reqwest::Client::new();
    let mut health = None;
    for _ in 0..100 {
        if let Ok(r) = client.get(format!("{base}/v1/health")).send().await {
            health = Some(r.json::<Value>().await.unwrap());
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    }
    let health = health.expect("server came up");
    assert_eq!(health["status"], "ok");
    let resp: Value = client
        .post(format!("{base}/v1/rewards"))
        .json(
            &json!({"items": [{"response_text": "<think>[0,0,2,2]</think><answer>A</answer>",
                                 "ground_truth": {"answer_kind": "mcq", "answer": "A", "boxes": [[0,0,2,2]]}}]}),
        )
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(resp["items"][0]["reward"]["total"], 3.0);
}
