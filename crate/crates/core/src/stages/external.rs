//! Backends served by a child process speaking line-delimited JSON on
//! stdin/stdout. One request line in, one response line out, matched by id.
//! Anything the process writes to stderr is kept as diagnostics.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    BackendDescriptor, Classifier, ClassifierInput, Detector, FrameInput, Mask, MaskRle, RegionProposal,
    SegmentInput, Segmenter, StageError,
};

pub const DEFAULT_EXTERNAL_TIMEOUT_SECS: u64 = 120;
const MAX_DIAGNOSTICS: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalInput {
    Path(String),
    PngBase64(String),
}

impl ExternalInput {
    pub fn png(img: &RgbImage) -> Result<Self, StageError> {
        let mut buf = Vec::new();
        PngEncoder::new(&mut buf)
            .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
            .map_err(|e| StageError::Config(format!("cannot encode PNG: {e}")))?;
        Ok(ExternalInput::PngBase64(BASE64.encode(buf)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRequest {
    pub id: String,
    pub role: String,
    pub input: ExternalInput,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExternalResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<Vec<RegionProposal>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<MaskRle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn tail(s: &str) -> String {
    let s = s.trim();
    if s.len() <= MAX_DIAGNOSTICS {
        return s.to_owned();
    }
    let mut start = s.len() - MAX_DIAGNOSTICS;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_owned()
}

fn spawn(command: &str) -> std::io::Result<Child> {
    Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
}

fn collect_stderr(child: &mut Child) -> JoinHandle<String> {
    let mut err = child.stderr.take().expect("stderr piped");
    thread::spawn(move || {
        let mut s = String::new();
        let _ = err.read_to_string(&mut s);
        s
    })
}

fn stream_lines(child: &mut Child) -> Receiver<std::io::Result<String>> {
    let out = child.stdout.take().expect("stdout piped");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(out).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

/// One long-lived child process.
struct Worker {
    backend: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Option<JoinHandle<String>>,
}

impl Worker {
    fn start(backend: &str, command: &str) -> Result<Self, StageError> {
        let mut child = spawn(command).map_err(|e| StageError::Backend {
            backend: backend.to_owned(),
            message: format!("cannot start {command:?}: {e}"),
            diagnostics: String::new(),
        })?;
        let stdin = child.stdin.take();
        let stderr = Some(collect_stderr(&mut child));
        let lines = stream_lines(&mut child);
        Ok(Self { backend: backend.to_owned(), child, stdin, lines, stderr })
    }

    /// Kills the process and returns what it wrote to stderr.
    fn shutdown(&mut self) -> String {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.stderr.take().and_then(|h| h.join().ok()).map(|s| tail(&s)).unwrap_or_default()
    }

    fn failed(&mut self, message: String) -> StageError {
        let diagnostics = self.shutdown();
        StageError::Backend { backend: self.backend.clone(), message, diagnostics }
    }

    fn call(&mut self, req: &ExternalRequest, timeout: Duration) -> Result<ExternalResponse, StageError> {
        let line = serde_json::to_string(req).expect("request serializes");
        let stdin = self.stdin.as_mut().expect("worker alive");
        if let Err(e) = writeln!(stdin, "{line}").and_then(|()| stdin.flush()) {
            return Err(self.failed(format!("cannot write request: {e}")));
        }
        let reply = match self.lines.recv_timeout(timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(self.failed(format!("cannot read response: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                self.shutdown();
                return Err(StageError::Timeout { backend: self.backend.clone(), secs: timeout.as_secs() });
            }
            Err(RecvTimeoutError::Disconnected) => {
                let _ = self.child.wait();
                let status = self.child.try_wait().ok().flatten();
                let msg = match status {
                    Some(s) => format!("process exited ({s}) before responding"),
                    None => "process closed stdout before responding".into(),
                };
                return Err(self.failed(msg));
            }
        };
        let resp = parse_response(&self.backend, &reply)?;
        if resp.id != req.id {
            self.shutdown();
            return Err(StageError::Protocol {
                backend: self.backend.clone(),
                message: format!("response id {:?} does not match request id {:?}", resp.id, req.id),
                line: reply,
            });
        }
        if let Some(err) = &resp.error {
            return Err(StageError::Backend {
                backend: self.backend.clone(),
                message: format!("request {} failed: {err}", req.id),
                diagnostics: String::new(),
            });
        }
        Ok(resp)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn parse_response(backend: &str, line: &str) -> Result<ExternalResponse, StageError> {
    serde_json::from_str(line).map_err(|e| StageError::Protocol {
        backend: backend.to_owned(),
        message: format!("unparseable response: {e}"),
        line: line.to_owned(),
    })
}

/// Idle worker processes for one backend; a caller checks one out per
/// request so concurrent pipeline workers each talk to their own process.
/// A worker that fails is discarded and replaced on the next checkout.
pub struct ExternalPool {
    backend: String,
    command: String,
    timeout: Duration,
    version: String,
    inline: bool,
    idle: Mutex<Vec<Worker>>,
    next_id: AtomicU64,
}

impl ExternalPool {
    pub fn new(backend: &str, command: &str, timeout: Duration) -> Self {
        Self {
            backend: backend.to_owned(),
            command: command.to_owned(),
            timeout,
            version: format!("external:{command}"),
            inline: false,
            idle: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, StageError> {
        let command = desc
            .get_str("command")
            .ok_or_else(|| StageError::Config(format!("backend {:?} requires a command", desc.id)))?;
        let secs = desc.get_parsed("timeout_secs")?.unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_SECS);
        let mut pool = Self::new(&desc.id, &command, Duration::from_secs(secs));
        if let Some(v) = desc.get_str("version") {
            pool.version = v;
        }
        pool.inline = desc.get_parsed("inline")?.unwrap_or(false);
        Ok(pool)
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn request(&self, role: &str, input: ExternalInput, params: serde_json::Value) -> Result<ExternalResponse, StageError> {
        let id = format!("{}-{}", self.backend, self.next_id.fetch_add(1, Ordering::Relaxed));
        let req = ExternalRequest { id, role: role.to_owned(), input, params };
        let worker = self.idle.lock().expect("pool lock").pop();
        let mut worker = match worker {
            Some(w) => w,
            None => Worker::start(&self.backend, &self.command)?,
        };
        let resp = worker.call(&req, self.timeout);
        if matches!(resp, Ok(_) | Err(StageError::Backend { .. })) && worker.stdin.is_some() {
            self.idle.lock().expect("pool lock").push(worker);
        }
        resp
    }

    fn missing(&self, what: &str, resp: &ExternalResponse) -> StageError {
        StageError::Protocol {
            backend: self.backend.clone(),
            message: format!("response lacks {what}"),
            line: serde_json::to_string(resp).unwrap_or_default(),
        }
    }
}

pub struct ExternalDetector {
    pool: ExternalPool,
}

impl ExternalDetector {
    pub fn new(pool: ExternalPool) -> Self {
        Self { pool }
    }
}

impl Detector for ExternalDetector {
    fn id(&self) -> &str {
        self.pool.backend()
    }

    fn version(&self) -> String {
        self.pool.version().to_owned()
    }

    fn needs_pixels(&self) -> bool {
        self.pool.inline
    }

    fn propose(&self, input: &FrameInput<'_>, min_confidence: f64) -> Result<Vec<RegionProposal>, StageError> {
        let payload = match (self.pool.inline, input.pixels, input.file) {
            (true, Some(px), _) => ExternalInput::png(px)?,
            (false, _, Some(path)) => ExternalInput::Path(path.display().to_string()),
            (false, Some(px), None) => ExternalInput::png(px)?,
            _ => {
                return Err(StageError::MissingPixels {
                    backend: self.pool.backend().to_owned(),
                    image_id: input.image.image_id.clone(),
                })
            }
        };
        let params = json!({ "image_id": input.image.image_id, "min_confidence": min_confidence });
        let resp = self.pool.request("detector", payload, params)?;
        match resp.proposals {
            Some(p) => Ok(p),
            None => Err(self.pool.missing("proposals", &resp)),
        }
    }
}

pub struct ExternalSegmenter {
    pool: ExternalPool,
}

impl ExternalSegmenter {
    pub fn new(pool: ExternalPool) -> Self {
        Self { pool }
    }
}

impl Segmenter for ExternalSegmenter {
    fn id(&self) -> &str {
        self.pool.backend()
    }

    fn version(&self) -> String {
        self.pool.version().to_owned()
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn segment(&self, input: &SegmentInput<'_>) -> Result<Mask, StageError> {
        let crop = input.crop.ok_or_else(|| StageError::MissingPixels {
            backend: self.pool.backend().to_owned(),
            image_id: input.image.image_id.clone(),
        })?;
        let r = input.rect;
        let params = json!({ "image_id": input.image.image_id, "box_index": input.box_index, "rect": [r.x0, r.y0, r.x1, r.y1] });
        let resp = self.pool.request("segmenter", ExternalInput::png(crop)?, params)?;
        let Some(rle) = resp.mask_rle.clone() else {
            return Err(self.pool.missing("mask_rle", &resp));
        };
        Mask::try_from(rle).map_err(|message| StageError::Protocol {
            backend: self.pool.backend().to_owned(),
            message,
            line: serde_json::to_string(&resp).unwrap_or_default(),
        })
    }
}

pub struct ExternalClassifier {
    pool: ExternalPool,
    classes: usize,
    labels: Option<Vec<String>>,
}

impl ExternalClassifier {
    pub fn new(pool: ExternalPool, desc: &BackendDescriptor) -> Result<Self, StageError> {
        let classes: usize = desc
            .get_parsed("classes")?
            .ok_or_else(|| StageError::Config(format!("backend {:?} must declare its class count", desc.id)))?;
        let labels = desc.get_labels();
        if let Some(l) = &labels {
            if l.len() != classes {
                return Err(StageError::Config(format!(
                    "backend {:?} declares {classes} classes but {} labels",
                    desc.id,
                    l.len()
                )));
            }
        }
        Ok(Self { pool, classes, labels })
    }
}

impl Classifier for ExternalClassifier {
    fn id(&self) -> &str {
        self.pool.backend()
    }

    fn version(&self) -> String {
        self.pool.version().to_owned()
    }

    fn needs_pixels(&self) -> bool {
        true
    }

    fn declared_classes(&self) -> Option<usize> {
        Some(self.classes)
    }

    fn declared_labels(&self) -> Option<Vec<String>> {
        self.labels.clone()
    }

    fn score(&self, input: &ClassifierInput<'_>, n_classes: usize) -> Result<Vec<f64>, StageError> {
        let px = input.pixels.ok_or_else(|| StageError::MissingPixels {
            backend: self.pool.backend().to_owned(),
            image_id: input.image_id.to_owned(),
        })?;
        let params = json!({
            "image_id": input.image_id,
            "scale": input.scale.to_string(),
            "masked": input.masked,
            "classes": n_classes,
        });
        let resp = self.pool.request("classifier", ExternalInput::png(px)?, params)?;
        match resp.scores {
            Some(s) => Ok(s),
            None => Err(self.pool.missing("scores", &resp)),
        }
    }
}

/// Runs one process over a batch of requests: writes every request, closes
/// stdin, and collects the responses. Responses come back in request order.
/// A nonzero exit fails the whole batch, discarding responses already read.
pub fn run_external_backend(
    backend: &str,
    command: &str,
    requests: &[ExternalRequest],
    timeout: Duration,
) -> Result<Vec<ExternalResponse>, StageError> {
    let fail = |message: String, diagnostics: String| StageError::Backend {
        backend: backend.to_owned(),
        message,
        diagnostics,
    };
    let mut child = spawn(command).map_err(|e| fail(format!("cannot start {command:?}: {e}"), String::new()))?;
    let stderr = collect_stderr(&mut child);
    let lines = stream_lines(&mut child);
    let mut stdin = child.stdin.take().expect("stdin piped");
    let payload: Vec<String> = requests.iter().map(|r| serde_json::to_string(r).expect("request serializes")).collect();
    let writer = thread::spawn(move || -> std::io::Result<()> {
        for l in payload {
            writeln!(stdin, "{l}")?;
        }
        stdin.flush()
    });

    let deadline = Instant::now() + timeout;
    let mut raw = Vec::with_capacity(requests.len());
    let mut timed_out = false;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match lines.recv_timeout(left) {
            Ok(Ok(l)) => {
                if !l.trim().is_empty() {
                    raw.push(l);
                }
            }
            Ok(Err(e)) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(fail(format!("cannot read response: {e}"), stderr.join().map(|s| tail(&s)).unwrap_or_default()));
            }
            Err(RecvTimeoutError::Timeout) => {
                timed_out = true;
                break;
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    if timed_out {
        let _ = child.kill();
        let _ = child.wait();
        return Err(StageError::Timeout { backend: backend.to_owned(), secs: timeout.as_secs() });
    }
    let status = child.wait().map_err(|e| fail(format!("cannot wait for process: {e}"), String::new()))?;
    let write_result = writer.join().unwrap_or(Ok(()));
    let diagnostics = stderr.join().map(|s| tail(&s)).unwrap_or_default();
    if !status.success() {
        return Err(fail(format!("process exited with {status}"), diagnostics));
    }
    if let Err(e) = write_result {
        return Err(fail(format!("process stopped reading requests: {e}"), diagnostics));
    }

    let mut by_id: HashMap<String, ExternalResponse> = HashMap::with_capacity(raw.len());
    for l in &raw {
        let resp = parse_response(backend, l)?;
        if by_id.insert(resp.id.clone(), resp).is_some() {
            return Err(StageError::Protocol { backend: backend.to_owned(), message: "duplicate response id".into(), line: l.clone() });
        }
    }
    let mut out = Vec::with_capacity(requests.len());
    for req in requests {
        match by_id.remove(&req.id) {
            Some(r) => out.push(r),
            None => {
                return Err(StageError::Protocol {
                    backend: backend.to_owned(),
                    message: format!("no response for request {:?}", req.id),
                    line: String::new(),
                })
            }
        }
    }
    if let Some(extra) = by_id.into_keys().next() {
        return Err(StageError::Protocol {
            backend: backend.to_owned(),
            message: format!("response for unknown request id {extra:?}"),
            line: String::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stages::{classify, BackendKind, BackendRole, Scale};
    use crate::taxonomy::TaxonomyRegistry;
    use image::Rgb;

    // Echoes each request id back with a fixed score vector.
    const ECHO_SCORES: &str =
        r#"sed -u 's/^{"id":"\([^"]*\)".*/{"id":"\1","scores":[0.1,0.2,0.3,0.4]}/'"#;

    fn req(id: &str) -> ExternalRequest {
        ExternalRequest {
            id: id.into(),
            role: "classifier".into(),
            input: ExternalInput::Path(format!("/data/{id}.png")),
            params: serde_json::Value::Null,
        }
    }

    #[test]
    fn request_wire_shape() {
        let r = req("a");
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"id":"a","role":"classifier","input":{"path":"/data/a.png"}}"#
        );
        let back: ExternalRequest = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn batch_round_trips_one_hundred_ids() {
        let reqs: Vec<_> = (0..100).map(|i| req(&format!("r{i}"))).collect();
        let out = run_external_backend("echo", ECHO_SCORES, &reqs, Duration::from_secs(30)).unwrap();
        assert_eq!(out.len(), 100);
        for (q, r) in reqs.iter().zip(&out) {
            assert_eq!(q.id, r.id);
            assert_eq!(r.scores.as_deref(), Some(&[0.1, 0.2, 0.3, 0.4][..]));
        }
    }

    #[test]
    fn nonzero_exit_discards_partial_output() {
        let cmd = r#"read l; echo '{"id":"r0","scores":[1.0]}'; echo boom >&2; exit 3"#;
        let err = run_external_backend("bad", cmd, &[req("r0"), req("r1")], Duration::from_secs(30)).unwrap_err();
        match err {
            StageError::Backend { message, diagnostics, .. } => {
                assert!(message.contains("exit"), "{message}");
                assert_eq!(diagnostics, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_response_is_protocol_error() {
        let cmd = r#"read l; echo '{"id":"r0","scores":[1.0]}'; cat >/dev/null"#;
        let err = run_external_backend("short", cmd, &[req("r0"), req("r1")], Duration::from_secs(30)).unwrap_err();
        assert!(matches!(err, StageError::Protocol { .. }), "{err:?}");
    }

    #[test]
    fn batch_timeout() {
        let err = run_external_backend("slow", "sleep 5", &[req("r0")], Duration::from_millis(300)).unwrap_err();
        assert!(matches!(err, StageError::Timeout { .. }), "{err:?}");
    }

    fn classifier(command: &str, timeout: u64) -> ExternalClassifier {
        let desc = BackendDescriptor::new("ext", BackendKind::ExternalProcess, BackendRole::Classifier)
            .with("command", command)
            .with("classes", "4")
            .with("timeout_secs", timeout.to_string().as_str());
        desc.validate().unwrap();
        ExternalClassifier::new(ExternalPool::from_descriptor(&desc).unwrap(), &desc).unwrap()
    }

    #[test]
    fn pooled_classifier_reuses_process() {
        let c = classifier(ECHO_SCORES, 30);
        let reg = TaxonomyRegistry::builtin();
        let px = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        for _ in 0..5 {
            let input = ClassifierInput { image_id: "x", scale: Scale::Global, masked: false, pixels: Some(&px) };
            let s = classify(&c, &input, reg.get("four_class").unwrap()).unwrap();
            assert_eq!(s.argmax(), 3);
        }
        assert_eq!(c.pool.idle.lock().unwrap().len(), 1);
    }

    #[test]
    fn pooled_timeout_and_crash() {
        let px = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        let input = ClassifierInput { image_id: "x", scale: Scale::Global, masked: false, pixels: Some(&px) };
        let slow = classifier("sleep 10", 1);
        assert!(matches!(slow.score(&input, 4), Err(StageError::Timeout { .. })));
        let crash = classifier("echo dying >&2; exit 1", 30);
        match crash.score(&input, 4) {
            Err(StageError::Backend { diagnostics, .. }) => assert_eq!(diagnostics, "dying"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(crash.pool.idle.lock().unwrap().is_empty());
    }

    #[test]
    fn png_payload_decodes() {
        let px = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8, y as u8, 7]));
        let ExternalInput::PngBase64(b64) = ExternalInput::png(&px).unwrap() else { panic!() };
        let bytes = BASE64.decode(b64).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back, px);
    }
}
