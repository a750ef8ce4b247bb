#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use forcegrasp::eval::{CompressionComparison, EvalReport};

pub const BIN: &str = env!("CARGO_BIN_EXE_forcegrasp");

/// Run the CLI binary with `args`, panicking with its stderr on failure.
pub fn cli(args: &[&str]) -> Output {
    let out = cli_status(args);
    assert!(
        out.status.success(),
        "forcegrasp {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn cli_status(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("FORCEGRASP_LOG", "warn")
        .output()
        .expect("spawning the forcegrasp binary")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Artifacts of one default-config pipeline run:
/// gen-data, train both variants, eval both, report.
pub struct Pipeline {
    pub dir: tempfile::TempDir,
    pub gen_time: Duration,
    pub train_time: Duration,
    pub eval_time: Duration,
    pub report_stdout: String,
}

impl Pipeline {
    pub fn run(extra: &[&str]) -> Pipeline {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_path_buf();
        let o = path_str(&out).to_string();
        let with = |args: &[&str]| -> Vec<String> {
            let mut v: Vec<String> = vec!["--out".into(), o.clone()];
            v.extend(extra.iter().map(|s| s.to_string()));
            v.extend(args.iter().map(|s| s.to_string()));
            v
        };
        let run = |args: Vec<String>| {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            cli(&refs)
        };
        let dataset = out.join("episodes.jsonl");
        let t = Instant::now();
        run(with(&["gen-data"]));
        let gen_time = t.elapsed();

        let t = Instant::now();
        for variant in ["forceful", "position-only"] {
            run(with(&[
                "train",
                "--dataset",
                path_str(&dataset),
                "--variant",
                variant,
            ]));
        }
        let train_time = t.elapsed();

        let t = Instant::now();
        for ckpt in ["forceful.ckpt", "position_only.ckpt"] {
            run(with(&[
                "eval",
                "--checkpoint",
                path_str(&out.join(ckpt)),
                "--dataset",
                path_str(&dataset),
            ]));
        }
        let report = run(with(&[
            "report",
            "--eval",
            path_str(&out.join("eval_forceful.json")),
            "--eval",
            path_str(&out.join("eval_position_only.json")),
        ]));
        let eval_time = t.elapsed();
        Pipeline {
            dir,
            gen_time,
            train_time,
            eval_time,
            report_stdout: String::from_utf8_lossy(&report.stdout).into_owned(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    pub fn report(&self, agent: &str) -> EvalReport {
        serde_json::from_slice(&self.bytes(&format!("eval_{agent}.json"))).unwrap()
    }

    pub fn comparison(&self) -> CompressionComparison {
        serde_json::from_slice(&self.bytes("comparison.json")).unwrap()
    }

    pub fn losses(&self, variant: &str) -> Vec<f64> {
        let mut r = csv::Reader::from_path(self.path(&format!("{variant}_loss.csv"))).unwrap();
        r.records()
            .map(|rec| rec.unwrap()[1].parse().unwrap())
            .collect()
    }
}

pub fn decile_means(losses: &[f64]) -> (f64, f64) {
    let n = (losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..n]), mean(&losses[losses.len() - n..]))
}
