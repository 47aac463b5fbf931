//! Minimal detector for exercising the stdio protocol.
//!
//! Sends the handshake, then answers every request with one box in the
//! top-left corner of the resized region. Every `N`-th request (N from
//! `--oob-every`, default 10) instead gets a box that overshoots the bottom
//! right corner by 2 px, which the host has to clamp.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Deserialize)]
struct Request {
    id: u64,
    region: [f64; 4],
    target_width: u32,
}

#[derive(Serialize)]
struct Box {
    bbox: [f64; 4],
    score: f64,
    category_id: u64,
}

#[derive(Serialize)]
struct Response {
    id: u64,
    detections: Vec<Box>,
}

fn oob_every() -> u64 {
    let args: Vec<String> = std::env::args().collect();
    args.iter()
        .position(|a| a == "--oob-every")
        .and_then(|i| args.get(i + 1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(10)
}

fn answer(req: &Request, oob_every: u64) -> Response {
    let [x0, y0, x1, y1] = req.region;
    let w = f64::from(req.target_width);
    let h = (y1 - y0) * w / (x1 - x0);
    let bbox = if oob_every > 0 && req.id % oob_every == oob_every - 1 {
        [w / 2.0, h / 2.0, w + 2.0, h + 2.0]
    } else {
        [0.0, 0.0, (w / 4.0).max(1.0), (h / 4.0).max(1.0)]
    };
    Response {
        id: req.id,
        detections: vec![Box {
            bbox,
            score: 0.5,
            category_id: 1,
        }],
    }
}

fn main() -> io::Result<()> {
    let every = oob_every();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, r#"{{"protocol": "slicekit-detect", "version": 1}}"#)?;
    out.flush()?;
    for line in io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("echo-detector: bad request: {e}");
                std::process::exit(1);
            }
        };
        serde_json::to_writer(&mut out, &answer(&req, every))?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}
