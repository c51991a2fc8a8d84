//! Runs the `decode` binary and talks to its HTTP service.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const BIN: &str = env!("CARGO_BIN_EXE_decode");

pub fn decode(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn decode")
}

/// Runs `decode` and panics with its stderr unless it exits 0.
pub fn decode_ok(args: &[&str]) -> String {
    let out = decode(args);
    assert!(
        out.status.success(),
        "decode {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small κ = 0.3 run: dataset, stage 1, a perfect-expert gate, evaluation
/// and a three-point sweep.
pub fn pipeline(dir: &Path) {
    let out = s(dir);
    decode_ok(&[
        "generate", "--out", out, "--seed", "11", "--kappa", "0.3", "--n-train", "400", "--n-val", "100", "--n-test",
        "150",
    ]);
    decode_ok(&["train-cbm", "--out", out, "--seed", "2", "--epochs", "10"]);
    decode_ok(&[
        "train-gate", "--out", out, "--rho", "0", "--expert-seed", "5", "--seed", "4", "--epochs", "10",
    ]);
    decode_ok(&["evaluate", "--out", out]);
    decode_ok(&[
        "sweep", "--out", out, "--rho", "0", "--expert-seed", "5", "--seed", "4", "--epochs", "5", "--lambda-grid",
        "0,1,10",
    ]);
}

/// A fresh directory under the cargo test tmpdir.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A running `decode serve`, killed on drop.
pub struct Server {
    child: Child,
    pub port: u16,
}

impl Server {
    pub fn start(dir: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--out", s(dir), "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let port = line
            .trim()
            .rsplit(':')
            .next()
            .and_then(|p| p.parse().ok())
            .unwrap_or_else(|| panic!("unexpected banner '{line}'"));
        Self { child, port }
    }

    pub fn get(&self, path: &str) -> (u16, serde_json::Value) {
        self.request("GET", path, None)
    }

    pub fn post(&self, path: &str, body: &str) -> (u16, serde_json::Value) {
        self.request("POST", path, Some(body))
    }

    /// One HTTP/1.1 exchange over a fresh connection.
    pub fn request(&self, method: &str, path: &str, body: Option<&str>) -> (u16, serde_json::Value) {
        let (status, text) = self.raw(method, path, body);
        (status, serde_json::from_str(&text).unwrap_or_else(|e| panic!("{e}: {text}")))
    }

    pub fn raw(&self, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
        let mut stream = TcpStream::connect(("127.0.0.1", self.port)).unwrap();
        let body = body.unwrap_or("");
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        let mut response = String::new();
        stream.read_to_string(&mut response).unwrap();
        let (head, payload) = response.split_once("\r\n\r\n").expect("HTTP response");
        let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        (status, payload.to_string())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
