//! Test child for the JSON-lines simulator protocol.
//!
//! Arguments: ` [--model echo|linear-gaussian] [--reverse N]
//!         [--crash-above V] [--error-above V] [--garbage-above V] [--delay-ms MS]`
//!
//! `--reverse N` buffers N requests and answers them in reverse order.
//! The `*-above` switches trigger on `theta[0] > V`.

use std::io::{BufRead, Write};

use super::{LinearGaussian, Simulator};
use serde::Deserialize;
use serde_json::json;

#[derive(Deserialize)]
struct Request {
    id: u64,
    theta: Vec<f64>,
    #[serde(default)]
    seed: u64,
}

#[derive(Default)]
struct Options {
    model: String,
    reverse: usize,
    crash_above: Option<f64>,
    error_above: Option<f64>,
    garbage_above: Option<f64>,
    delay_ms: u64,
}

fn parse_args(args: impl IntoIterator<Item = String>) -> Result<Options, String> {
    let mut opts = Options {
        model: "echo".into(),
        reverse: 1,
        ..Options::default()
    };
    let mut args = args.into_iter();
    while let Some(flag) = args.next() {
        let mut value = || args.next().ok_or(format!("{flag} needs a value"));
        let num = |v: String| v.parse::<f64>().map_err(|e| e.to_string());
        match flag.as_str() {
            "--model" => opts.model = value()?,
            "--reverse" => opts.reverse = value()?.parse().map_err(|e| format!("{e}"))?,
            "--crash-above" => opts.crash_above = Some(num(value()?)?),
            "--error-above" => opts.error_above = Some(num(value()?)?),
            "--garbage-above" => opts.garbage_above = Some(num(value()?)?),
            "--delay-ms" => opts.delay_ms = value()?.parse().map_err(|e| format!("{e}"))?,
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(opts)
}

fn above(theta: &[f64], limit: Option<f64>) -> bool {
    matches!((theta.first(), limit), (Some(&t), Some(l)) if t > l)
}

fn answer(req: &Request, opts: &Options) -> String {
    if above(&req.theta, opts.garbage_above) {
        return "this is not json".into();
    }
    if above(&req.theta, opts.error_above) {
        return json!({"id": req.id, "error": "theta rejected by mock"}).to_string();
    }
    let x = match opts.model.as_str() {
        "linear-gaussian" => LinearGaussian::new(req.theta.len().max(1))
            .map_err(|e| e.to_string())
            .and_then(|m| m.simulate(&req.theta, req.seed).map_err(|e| e.to_string())),
        _ => Ok(req.theta.clone()),
    };
    match x {
        Ok(x) => json!({"v": 1, "id": req.id, "x": x}).to_string(),
        Err(e) => json!({"id": req.id, "error": e}).to_string(),
    }
}

/// Serve requests from stdin until it closes. Returns the process exit code;
/// `--crash-above` exits the process directly.
pub fn serve(args: impl IntoIterator<Item = String>) -> i32 {
    let opts = match parse_args(args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("mock simulator: {e}");
            return 2;
        }
    };
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut buffer: Vec<String> = Vec::new();
    let flush = |buffer: &mut Vec<String>, out: &mut std::io::StdoutLock| {
        for line in buffer.drain(..).rev() {
            let _ = writeln!(out, "{line}");
        }
        let _ = out.flush();
    };
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("mock simulator: bad request: {e}");
                continue;
            }
        };
        if above(&req.theta, opts.crash_above) {
            std::process::exit(3);
        }
        if opts.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(opts.delay_ms));
        }
        buffer.push(answer(&req, &opts));
        if buffer.len() >= opts.reverse.max(1) {
            flush(&mut buffer, &mut out);
        }
    }
    flush(&mut buffer, &mut out);
    0
}
