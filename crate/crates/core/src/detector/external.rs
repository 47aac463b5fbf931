//! Line-delimited JSON protocol to an external detector process.
//!
//! The child announces itself with
//! `{"protocol": "slicekit-detect", "version": 1}` and then answers each
//! request line with exactly one response line:
//!
//! ```text
//! -> {"id": 4, "image": "a.png", "region": [0, 0, 640, 640], "target_width": 1280}
//! <- {"id": 4, "detections": [{"bbox": [x0, y0, x1, y1], "score": 0.8, "category_id": 1}]}
//! ```
//!
//! Boxes are in resized-region coordinates. Boxes that leave the resized
//! region are clamped to it with a warning.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{DetectError, DetectRequest, Detector, StoredDetection};
use crate::bbox::BBox;
use crate::coco::{Detection, DetectionSource};

pub const PROTOCOL_NAME: &str = "slicekit-detect";
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub image: String,
    pub region: [f64; 4],
    pub target_width: u32,
}

pub type WireDetection = StoredDetection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    /// Shell command line that starts one detector process.
    pub command: String,
    pub workers: usize,
    pub timeout: Duration,
}

impl ExternalConfig {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            workers: 1,
            timeout: Duration::from_secs(300),
        }
    }
}

/// Protocol counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExternalStats {
    pub requests: u64,
    pub clamped_boxes: u64,
    pub dropped_boxes: u64,
}

struct Worker {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<io::Result<String>>,
}

pub struct ExternalDetector {
    config: ExternalConfig,
    workers: Vec<Mutex<Worker>>,
    requests: AtomicU64,
    clamped: AtomicU64,
    dropped: AtomicU64,
}

impl ExternalDetector {
    /// Starts `config.workers` child processes and checks their handshakes.
    pub fn spawn(config: ExternalConfig) -> Result<Self, DetectError> {
        let n = config.workers.max(1);
        let mut workers = Vec::with_capacity(n);
        for _ in 0..n {
            workers.push(Mutex::new(Self::spawn_worker(&config)?));
        }
        Ok(Self {
            config,
            workers,
            requests: AtomicU64::new(0),
            clamped: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> ExternalStats {
        ExternalStats {
            requests: self.requests.load(Ordering::Relaxed),
            clamped_boxes: self.clamped.load(Ordering::Relaxed),
            dropped_boxes: self.dropped.load(Ordering::Relaxed),
        }
    }

    fn shell(command: &str) -> Command {
        if cfg!(windows) {
            let mut c = Command::new("cmd");
            c.arg("/C").arg(command);
            c
        } else {
            let mut c = Command::new("sh");
            c.arg("-c").arg(command);
            c
        }
    }

    fn spawn_worker(config: &ExternalConfig) -> Result<Worker, DetectError> {
        let command = &config.command;
        let mut child = Self::shell(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| DetectError::Spawn {
                command: command.clone(),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().ok_or_else(|| DetectError::Exited {
            command: command.clone(),
            message: "stdout unavailable".into(),
        })?;

        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut worker = Worker {
            child,
            stdin,
            lines,
        };
        if let Err(e) = Self::handshake(&mut worker, config) {
            let _ = worker.child.kill();
            let _ = worker.child.wait();
            return Err(e);
        }
        Ok(worker)
    }

    fn handshake(worker: &mut Worker, config: &ExternalConfig) -> Result<(), DetectError> {
        let command = &config.command;
        let line = Self::read_line(worker, command, config.timeout)?;
        let hs: Handshake = serde_json::from_str(&line).map_err(|e| DetectError::Protocol {
            command: command.clone(),
            line: line.clone(),
            message: format!("bad handshake: {e}"),
        })?;
        if hs.protocol != PROTOCOL_NAME || hs.version != PROTOCOL_VERSION {
            return Err(DetectError::Protocol {
                command: command.clone(),
                line,
                message: format!("expected protocol {PROTOCOL_NAME} version {PROTOCOL_VERSION}"),
            });
        }
        Ok(())
    }

    fn read_line(worker: &mut Worker, command: &str, timeout: Duration) -> Result<String, DetectError> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match worker.lines.recv_timeout(remaining) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => {
                    return Err(DetectError::Exited {
                        command: command.to_owned(),
                        message: e.to_string(),
                    })
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(DetectError::Timeout {
                        command: command.to_owned(),
                        secs: timeout.as_secs(),
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let status = worker
                        .child
                        .try_wait()
                        .ok()
                        .flatten()
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| "end of output".into());
                    return Err(DetectError::Exited {
                        command: command.to_owned(),
                        message: status,
                    });
                }
            }
        }
    }

    fn exchange(&self, worker: &mut Worker, request: &DetectRequest) -> Result<WireResponse, DetectError> {
        let command = &self.config.command;
        let image = request
            .image
            .path()
            .ok_or_else(|| DetectError::NeedsPath {
                command: command.clone(),
            })?
            .to_string_lossy()
            .into_owned();
        let wire = WireRequest {
            id: request.request_id,
            image,
            region: request.region.to_xyxy(),
            target_width: request.target_width,
        };
        let mut line = serde_json::to_string(&wire).expect("request serialization is infallible");
        line.push('\n');
        let stdin = worker.stdin.as_mut().ok_or_else(|| DetectError::Exited {
            command: command.clone(),
            message: "stdin closed".into(),
        })?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| DetectError::Exited {
                command: command.clone(),
                message: e.to_string(),
            })?;

        let reply = Self::read_line(worker, command, self.config.timeout)?;
        let response: WireResponse = serde_json::from_str(&reply).map_err(|e| DetectError::Protocol {
            command: command.clone(),
            line: reply.clone(),
            message: e.to_string(),
        })?;
        if response.id != request.request_id {
            return Err(DetectError::Protocol {
                command: command.clone(),
                line: reply,
                message: format!("expected response id {}", request.request_id),
            });
        }
        Ok(response)
    }

    fn convert(&self, request: &DetectRequest, response: WireResponse) -> Result<Vec<Detection>, DetectError> {
        let (w, h) = request.resized_extent();
        let mut out = Vec::with_capacity(response.detections.len());
        for d in response.detections {
            let malformed = |message: String| DetectError::Protocol {
                command: self.config.command.clone(),
                line: serde_json::to_string(&d).unwrap_or_default(),
                message,
            };
            if !(0.0..=1.0).contains(&d.score) {
                return Err(malformed(format!("score {} outside [0, 1]", d.score)));
            }
            let bbox = BBox::try_from(d.bbox).map_err(|e| malformed(e.to_string()))?;
            let Some(clamped) = bbox.clamp_to(w, h) else {
                warn!(
                    "request {}: box {bbox} lies outside the {w}x{h} region, dropped",
                    request.request_id
                );
                self.dropped.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            if clamped != bbox {
                warn!(
                    "request {}: box {bbox} clamped to the {w}x{h} region",
                    request.request_id
                );
                self.clamped.fetch_add(1, Ordering::Relaxed);
            }
            out.push(Detection {
                category_id: d.category_id,
                score: d.score,
                bbox: clamped,
                source: DetectionSource::FullImage,
            });
        }
        Ok(out)
    }
}

impl Detector for ExternalDetector {
    fn detect(&self, request: &DetectRequest) -> Result<Vec<Detection>, DetectError> {
        let slot = (request.request_id % self.workers.len() as u64) as usize;
        let mut worker = self.workers[slot].lock().unwrap_or_else(|e| e.into_inner());
        let response = self.exchange(&mut worker, request)?;
        drop(worker);
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.convert(request, response)
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        for worker in &self.workers {
            let mut worker = worker.lock().unwrap_or_else(|e| e.into_inner());
            worker.stdin.take();
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match worker.child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = worker.child.kill();
                        let _ = worker.child.wait();
                        break;
                    }
                }
            }
        }
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::detector::ImageRef;
    use std::path::PathBuf;

    fn request(id: u64) -> DetectRequest {
        DetectRequest {
            request_id: id,
            image_id: 1,
            image: ImageRef::Path(PathBuf::from("img.png")),
            region: BBox::new(0.0, 0.0, 100.0, 50.0).unwrap(),
            target_width: 200,
        }
    }

    fn spawn(script: &str) -> Result<ExternalDetector, DetectError> {
        let mut cfg = ExternalConfig::new(script);
        cfg.timeout = Duration::from_secs(5);
        ExternalDetector::spawn(cfg)
    }

    const HANDSHAKE: &str = r#"echo '{"protocol": "slicekit-detect", "version": 1}'"#;

    #[test]
    fn empty_answer() {
        let script = format!(
            r#"{HANDSHAKE}; while read line; do echo '{{"id": 7, "detections": []}}'; done"#
        );
        let det = spawn(&script).unwrap();
        assert!(det.detect(&request(7)).unwrap().is_empty());
        assert_eq!(det.stats().requests, 1);
    }

    #[test]
    fn out_of_bounds_box_is_clamped() {
        let script = format!(
            r#"{HANDSHAKE}; while read line; do echo '{{"id": 1, "detections": [{{"bbox": [150, 10, 202, 40], "score": 0.5, "category_id": 2}}]}}'; done"#
        );
        let det = spawn(&script).unwrap();
        let out = det.detect(&request(1)).unwrap();
        assert_eq!(out[0].bbox.to_xyxy(), [150.0, 10.0, 200.0, 40.0]);
        assert_eq!(det.stats().clamped_boxes, 1);
    }

    #[test]
    fn closed_stdout_names_the_command() {
        let script = format!("{HANDSHAKE}; read line; exit 0");
        let det = spawn(&script).unwrap();
        let err = det.detect(&request(1)).unwrap_err();
        assert!(matches!(err, DetectError::Exited { .. }), "{err:?}");
        assert!(err.to_string().contains("read line"));
    }

    #[test]
    fn malformed_line_is_echoed() {
        let script = format!("{HANDSHAKE}; while read line; do echo 'not json'; done");
        let det = spawn(&script).unwrap();
        let err = det.detect(&request(1)).unwrap_err();
        assert!(matches!(err, DetectError::Protocol { ref line, .. } if line == "not json"));
    }

    #[test]
    fn mismatched_id_is_a_protocol_error() {
        let script = format!(
            r#"{HANDSHAKE}; while read line; do echo '{{"id": 99, "detections": []}}'; done"#
        );
        let det = spawn(&script).unwrap();
        assert!(matches!(det.detect(&request(1)), Err(DetectError::Protocol { .. })));
    }

    #[test]
    fn bad_handshake_is_rejected() {
        let err = spawn(r#"echo '{"protocol": "other", "version": 1}'; cat"#).err().unwrap();
        assert!(matches!(err, DetectError::Protocol { .. }));
    }

    #[test]
    fn silent_child_times_out() {
        let mut cfg = ExternalConfig::new("sleep 5");
        cfg.timeout = Duration::from_millis(200);
        let err = ExternalDetector::spawn(cfg).err().unwrap();
        assert!(matches!(err, DetectError::Timeout { .. }));
    }
}
