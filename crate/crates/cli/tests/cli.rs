use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use seqattn_core::config::{ModelConfig, TrainConfig};
use seqattn_core::synth::hex_digest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqattn"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run(args: &[&str]) -> Output {
    ok(bin().args(args).output().unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 64,
            grid_side: 8,
            d_e: 8,
            d_h: 8,
            d_z: 4,
            d_s: 8,
            emb_dim: 6,
            d_cond: 4,
            gen_channels: 3,
            disc_channels: 3,
            enc_channels: 3,
            damsm_channels: 3,
            vocab_size: 8,
            max_len: 12,
            use_attention: true,
        },
        batch_size: 4,
        epochs: 1,
        damsm_epochs: 1,
        ..TrainConfig::default()
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        self.0.kill().ok();
        self.0.wait().ok();
    }
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        run(&["gen-data", "--out", p(d), "--count", "6", "--seed", "4"]);
    }
    let ma = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.lines().count(), 6);
    assert_eq!(
        ma,
        std::fs::read_to_string(b.join("manifest.jsonl")).unwrap()
    );
    let first: serde_json::Value = serde_json::from_str(ma.lines().next().unwrap()).unwrap();
    let turns = first["turns"].as_array().unwrap();
    assert!(
        (4..=6).contains(&turns.len()),
        "initial turn plus 3..=5 edits"
    );
    assert_eq!(turns[0]["description"], "");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate=3\n").unwrap();
    let data = dir.path().join("data");
    run(&["gen-data", "--out", p(&data), "--count", "2"]);
    let out = bin()
        .args([
            "train",
            "--data",
            p(&data),
            "--out",
            p(&dir.path().join("m.sqag")),
        ])
        .args(["--config", p(&cfg)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `learning_rate`"));
    let out = bin()
        .args(["chat", "--ckpt", p(&dir.path().join("missing.sqag"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .args([
            "gen-data",
            "--out",
            p(&data),
            "--t-min",
            "4",
            "--t-max",
            "2",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn train_eval_chat_and_serve() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let test = dir.path().join("test");
    let cfg = dir.path().join("tiny.cfg");
    let ckpt = dir.path().join("model.sqag");
    let proxy = dir.path().join("proxy.sqpx");
    let report = dir.path().join("report.json");
    std::fs::write(&cfg, tiny_config().to_kv()).unwrap();
    run(&["gen-data", "--out", p(&data), "--count", "8", "--seed", "1"]);
    run(&["gen-data", "--out", p(&test), "--count", "6", "--seed", "2"]);

    run(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&ckpt),
        "--config",
        p(&cfg),
        "--seed",
        "3",
    ]);
    let log = std::fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(seqattn_core::trainer::CSV_HEADER));
    assert_eq!(lines.count(), 2, "8 sequences in batches of 4");

    // ablation flags and the seed land in the saved config
    let abl = dir.path().join("abl.sqag");
    run(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&abl),
        "--config",
        p(&cfg),
        "--no-attn",
        "--no-damsm",
    ]);
    let ck = seqattn_core::checkpoint::Checkpoint::load(&abl).unwrap();
    let saved = seqattn_core::Trainer::from_checkpoint(&ck).unwrap().cfg;
    assert!(!saved.model.use_attention && !saved.use_damsm);

    run(&["train-proxy", "--out", p(&proxy), "--steps", "2"]);
    run(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&test),
        "--proxy",
        p(&proxy),
        "--out",
        p(&report),
        "--splits",
        "2",
    ]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["is_mean"].as_f64().unwrap() >= 1.0 - 1e-9);
    assert!(r["fid"].as_f64().unwrap() >= -1e-6);
    let s = r["ssim_mean"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert_eq!(r["sequences"], 6);

    let chat_dir = dir.path().join("chat");
    let mut child = bin()
        .args(["chat", "--ckpt", p(&ckpt), "--out-dir", p(&chat_dir)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"make it red\n:quit\n")
        .unwrap();
    let out = ok(child.wait_with_output().unwrap());
    assert!(String::from_utf8_lossy(&out.stdout).contains("turn 1/10"));
    assert!(chat_dir.join("chat-0_turn01.png").exists());

    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let _server = Server(
        bin()
            .args(["serve", "--ckpt", p(&ckpt), "--port", &port.to_string()])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    let health = loop {
        if let Some(body) = get(port, "/v1/health") {
            break body;
        }
        assert!(
            start.elapsed() < Duration::from_secs(30),
            "server did not come up"
        );
        std::thread::sleep(Duration::from_millis(100));
    };
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    let digest = hex_digest(&std::fs::read(&ckpt).unwrap());
    assert!(health.contains(&digest), "{health}");
}
