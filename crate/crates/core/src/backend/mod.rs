//! External detector processes driven over their standard streams.
//!
//! Bulk data (manifests, images, models) travels as files; the control channel
//! carries one small message per line, strictly alternating request and response.

pub mod protocol;
mod serve;

pub use serve::serve;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::annotations::{load_manifest, save_manifest, Dataset, DatasetKind};
use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{nms, Detection};
use crate::pipeline::{with_absolute_files, DetectorBackend, PredictOutcome, TrainRequest, TrainResult};
use protocol::{Capability, Request, Response, PROTOCOL_VERSION};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const STDERR_LIMIT: usize = 64 * 1024;

pub struct BackendHandle {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    pub version: u32,
    pub capabilities: BTreeSet<Capability>,
    /// Per-command response timeout.
    pub timeout: Duration,
    /// Directory for manifests handed to the backend.
    pub scratch: PathBuf,
    next_id: u64,
    broken: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainDone {
    pub model: PathBuf,
    pub val_map: f64,
}

/// Launch `command` (program and whitespace-separated arguments) and complete the
/// hello exchange within `handshake_timeout`.
pub fn spawn_backend(command: &str, handshake_timeout: Duration) -> Result<BackendHandle> {
    let mut parts = command.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| Error::validation("backend command is empty"))?;
    let mut child = Command::new(program)
        .args(parts)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Backend(format!("cannot launch backend {command:?}: {e}")))?;

    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, lines) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let stderr = Arc::new(Mutex::new(String::new()));
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let sink = Arc::clone(&stderr);
    thread::spawn(move || {
        let mut buf = [0u8; 4096];
        while let Ok(n) = err_pipe.read(&mut buf) {
            if n == 0 {
                break;
            }
            let mut s = sink.lock().expect("stderr lock");
            if s.len() < STDERR_LIMIT {
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
            }
        }
    });

    let scratch = std::env::temp_dir().join(format!("semidet-backend-{}-{}", std::process::id(), child.id()));
    let mut h = BackendHandle {
        stdin: child.stdin.take(),
        child,
        lines,
        stderr,
        version: 0,
        capabilities: BTreeSet::new(),
        timeout: Duration::from_secs(3600),
        scratch,
        next_id: 1,
        broken: false,
    };
    h.send(&Request::Hello { version: PROTOCOL_VERSION })
        .map_err(|e| h.with_diagnostics(format!("handshake failed: {e}")))?;
    match h.receive(handshake_timeout, "handshake")? {
        Response::Hello { version, capabilities } => {
            if version != PROTOCOL_VERSION {
                h.abort();
                return Err(Error::Backend(format!(
                    "backend speaks protocol version {version}, engine requires {PROTOCOL_VERSION}"
                )));
            }
            h.version = version;
            h.capabilities = capabilities.into_iter().collect();
            Ok(h)
        }
        Response::Error { message, .. } => {
            h.abort();
            Err(Error::Backend(format!("backend refused handshake: {message}")))
        }
        other => {
            h.abort();
            Err(Error::Backend(format!("expected hello from backend, got {other:?}")))
        }
    }
}

impl BackendHandle {
    pub fn has(&self, c: Capability) -> bool {
        self.capabilities.contains(&c)
    }

    fn diagnostics(&self) -> String {
        let s = self.stderr.lock().expect("stderr lock");
        let t = s.trim();
        if t.is_empty() {
            String::new()
        } else {
            format!("; backend stderr: {t}")
        }
    }

    fn with_diagnostics(&mut self, msg: String) -> Error {
        self.abort();
        // Give the stderr reader a moment to drain after the child is gone.
        thread::sleep(Duration::from_millis(50));
        Error::Backend(format!("{msg}{}", self.diagnostics()))
    }

    fn abort(&mut self) {
        self.broken = true;
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn send(&mut self, req: &Request) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "backend input closed"))?;
        let mut line = serde_json::to_string(req).expect("request serializes");
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()
    }

    fn receive(&mut self, timeout: Duration, what: &str) -> Result<Response> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line).map_err(|e| {
                self.with_diagnostics(format!("malformed message from backend during {what}: {e}: {line:?}"))
            }),
            Ok(Err(e)) => Err(self.with_diagnostics(format!("cannot read backend output during {what}: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(self.with_diagnostics(format!(
                "backend did not answer {what} within {:.1} s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait().map(|s| s.to_string()).unwrap_or_else(|e| e.to_string());
                Err(self.with_diagnostics(format!("backend exited during {what} ({status})")))
            }
        }
    }

    /// Send one command and wait for its answer; any mismatched reply aborts the session.
    fn call(&mut self, make: impl FnOnce(u64) -> Request, what: &str) -> Result<Response> {
        if self.broken {
            return Err(Error::Backend("backend session was aborted earlier".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let req = make(id);
        if let Err(e) = self.send(&req) {
            return Err(self.with_diagnostics(format!("cannot send {what} to backend: {e}")));
        }
        let resp = self.receive(self.timeout, what)?;
        match resp {
            Response::Error { id: rid, message } if rid.is_none() || rid == Some(id) => Err(Error::Backend(message)),
            r if r.id() == Some(id) => Ok(r),
            other => Err(self.with_diagnostics(format!(
                "out-of-order message from backend (expected reply to {what} #{id}): {other:?}"
            ))),
        }
    }

    fn require(&self, c: Capability) -> Result<()> {
        if self.has(c) {
            Ok(())
        } else {
            Err(Error::Backend(format!("backend does not offer {c:?}")))
        }
    }

    pub fn request_train(
        &mut self,
        labeled: &Path,
        pseudo: Option<&Path>,
        val: &Path,
        init_model: Option<&Path>,
        model_out: &Path,
        config: &TrainConfig,
    ) -> Result<TrainDone> {
        self.require(Capability::Train)?;
        if let Some(p) = pseudo {
            let d = load_manifest(p)?;
            if d.kind != DatasetKind::Pseudo || !d.is_policy_applied() {
                return Err(Error::validation(format!(
                    "{}: pseudo manifest must be policy-applied (status and weight on every label) before it is sent",
                    p.display()
                )));
            }
        }
        let resp = self.call(
            |id| Request::Train {
                id,
                labeled: labeled.to_path_buf(),
                pseudo: pseudo.map(Path::to_path_buf),
                val: val.to_path_buf(),
                init_model: init_model.map(Path::to_path_buf),
                model_out: model_out.to_path_buf(),
                config: config.clone(),
            },
            "train",
        )?;
        match resp {
            Response::TrainDone { model, val_map, .. } => {
                if !(0.0..=1.0).contains(&val_map) {
                    return Err(Error::validation(format!("backend reported val_map {val_map} outside [0, 1]")));
                }
                Ok(TrainDone { model, val_map })
            }
            other => Err(self.with_diagnostics(format!("unexpected reply to train: {other:?}"))),
        }
    }

    /// Run the model on every image of a manifest. The backend's detection file is
    /// validated, and per-class NMS is applied here when the backend did not.
    pub fn request_predict(
        &mut self,
        model: &Path,
        images: &Path,
        output: &Path,
        score_floor: f64,
        nms_iou: f64,
    ) -> Result<Dataset> {
        self.require(Capability::Predict)?;
        let input = load_manifest(images)?;
        let resp = self.call(
            |id| Request::Predict {
                id,
                model: model.to_path_buf(),
                images: images.to_path_buf(),
                output: output.to_path_buf(),
                score_floor,
                nms_iou,
            },
            "predict",
        )?;
        let (out_path, did_nms) = match resp {
            Response::PredictDone { output, nms, .. } => (output, nms),
            other => return Err(self.with_diagnostics(format!("unexpected reply to predict: {other:?}"))),
        };
        let dets = load_manifest(&out_path)?;
        check_detections(&input, &dets, &out_path)?;
        Ok(if did_nms { dets } else { apply_nms(&dets, nms_iou) })
    }

    pub fn request_save(&mut self, model: &Path, path: &Path) -> Result<()> {
        self.require(Capability::Save)?;
        match self.call(|id| Request::Save { id, model: model.into(), path: path.into() }, "save")? {
            Response::Save { .. } => Ok(()),
            other => Err(self.with_diagnostics(format!("unexpected reply to save: {other:?}"))),
        }
    }

    /// Returns the backend's model reference for the loaded file.
    pub fn request_load(&mut self, path: &Path) -> Result<PathBuf> {
        self.require(Capability::Load)?;
        match self.call(|id| Request::Load { id, path: path.into() }, "load")? {
            Response::Load { model, .. } => Ok(model.unwrap_or_else(|| path.to_path_buf())),
            other => Err(self.with_diagnostics(format!("unexpected reply to load: {other:?}"))),
        }
    }

    /// Ask the backend to exit and wait up to `timeout` for it.
    pub fn shutdown(mut self, timeout: Duration) -> Result<()> {
        let sent = self.send(&Request::Shutdown);
        self.stdin = None;
        let deadline = std::time::Instant::now() + timeout;
        loop {
            if let Some(status) = self.child.try_wait().map_err(|e| Error::Backend(e.to_string()))? {
                self.broken = true;
                return if status.success() || sent.is_err() {
                    Ok(())
                } else {
                    Err(Error::Backend(format!("backend exited with {status}{}", self.diagnostics())))
                };
            }
            if std::time::Instant::now() >= deadline {
                return Err(self.with_diagnostics("backend did not exit after shutdown".into()));
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    fn scratch_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.scratch).map_err(|e| Error::io(&self.scratch, e))?;
        Ok(self.scratch.join(name))
    }
}

impl Drop for BackendHandle {
    fn drop(&mut self) {
        if !self.broken {
            let _ = self.send(&Request::Shutdown);
            self.stdin = None;
            thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        let _ = fs::remove_dir_all(&self.scratch);
    }
}

/// Backend output must be a valid detections manifest over the requested images.
fn check_detections(input: &Dataset, dets: &Dataset, path: &Path) -> Result<()> {
    if dets.kind != DatasetKind::Detections {
        return Err(Error::validation(format!("{}: expected a detections manifest, found {}", path.display(), dets.kind)));
    }
    if dets.catalog != input.catalog {
        return Err(Error::validation(format!("{}: class catalog differs from the input", path.display())));
    }
    let known: BTreeSet<u64> = input.images.iter().map(|i| i.id).collect();
    if let Some(im) = dets.images.iter().find(|i| !known.contains(&i.id)) {
        return Err(Error::validation(format!("{}: image {} was not requested", path.display(), im.id)));
    }
    Ok(())
}

/// Per-image, per-class NMS over a detections dataset; annotation ids are reassigned.
pub fn apply_nms(d: &Dataset, iou: f64) -> Dataset {
    let mut by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for a in &d.annotations {
        by_image.entry(a.image_id).or_default().push(Detection {
            bbox: a.bbox,
            class_id: a.class_id,
            score: a.score.unwrap_or(0.0),
        });
    }
    let mut out = d.clone();
    out.annotations.clear();
    for im in &d.images {
        for det in nms(by_image.get(&im.id).map(Vec::as_slice).unwrap_or(&[]), iou) {
            let id = out.annotations.len() as u64 + 1;
            out.annotations.push(crate::annotations::Annotation {
                score: Some(det.score),
                ..crate::annotations::Annotation::ground_truth(id, im.id, det.class_id, det.bbox)
            });
        }
    }
    out
}

impl DetectorBackend for BackendHandle {
    fn name(&self) -> &str {
        "external"
    }

    fn train(&mut self, req: &TrainRequest) -> Result<TrainResult> {
        if let Some(p) = req.pseudo {
            if !p.is_policy_applied() {
                return Err(Error::validation("pseudo labels must be policy-applied before training"));
            }
        }
        let n = self.next_id;
        let labeled = self.scratch_file(&format!("train{n}_labeled.manifest"))?;
        save_manifest(&with_absolute_files(req.labeled)?, &labeled)?;
        let val = self.scratch_file(&format!("train{n}_val.manifest"))?;
        save_manifest(&with_absolute_files(req.val)?, &val)?;
        let pseudo = match req.pseudo {
            Some(p) => {
                let path = self.scratch_file(&format!("train{n}_pseudo.manifest"))?;
                save_manifest(&with_absolute_files(p)?, &path)?;
                Some(path)
            }
            None => None,
        };
        let done = self.request_train(&labeled, pseudo.as_deref(), &val, req.init_model, req.output, req.config)?;
        Ok(TrainResult { model: done.model, val_map: done.val_map, history: Vec::new() })
    }

    fn predict(&mut self, model: &Path, images: &Dataset, score_floor: f64, nms_iou: f64) -> Result<PredictOutcome> {
        let n = self.next_id;
        let input = self.scratch_file(&format!("predict{n}_images.manifest"))?;
        save_manifest(&with_absolute_files(&images.strip_annotations(images.kind))?, &input)?;
        let output = self.scratch_file(&format!("predict{n}_detections.manifest"))?;
        let mut detections = self.request_predict(model, &input, &output, score_floor, nms_iou)?;
        detections.root = images.root.clone();
        // Images the backend left out count as skipped.
        let present: BTreeSet<u64> = detections.images.iter().map(|i| i.id).collect();
        let skipped = images
            .images
            .iter()
            .filter(|i| !present.contains(&i.id))
            .map(|i| crate::pipeline::SkippedImage { image_id: i.id, reason: "missing from backend output".into() })
            .collect();
        Ok(PredictOutcome { detections, skipped })
    }
}
