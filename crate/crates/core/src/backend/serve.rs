//! The backend side of the protocol, for wrapping any [`DetectorBackend`] as a
//! child process.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use super::protocol::{Capability, Request, Response, PROTOCOL_VERSION};
use crate::annotations::{load_manifest, save_manifest, DatasetKind};
use crate::error::{Error, Result};
use crate::pipeline::{with_absolute_files, DetectorBackend, TrainRequest};

fn reply(out: &mut impl Write, r: &Response) -> Result<()> {
    let mut line = serde_json::to_string(r).expect("response serializes");
    line.push('\n');
    out.write_all(line.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
}

fn train(backend: &mut dyn DetectorBackend, req: &Request) -> Result<Response> {
    let Request::Train { id, labeled, pseudo, val, init_model, model_out, config } = req else {
        unreachable!("train handler called with {req:?}")
    };
    let labeled = load_manifest(labeled)?;
    let val = load_manifest(val)?;
    let pseudo = pseudo.as_deref().map(load_manifest).transpose()?;
    if let Some(p) = &pseudo {
        if p.kind != DatasetKind::Pseudo || !p.is_policy_applied() {
            return Err(Error::validation("pseudo manifest is not policy-applied"));
        }
    }
    let done = backend.train(&TrainRequest {
        labeled: &labeled,
        pseudo: pseudo.as_ref(),
        val: &val,
        init_model: init_model.as_deref(),
        output: model_out,
        config,
    })?;
    Ok(Response::TrainDone { id: *id, model: done.model, val_map: done.val_map })
}

fn predict(backend: &mut dyn DetectorBackend, model: &Path, images: &Path, output: &Path, floor: f64, iou: f64) -> Result<PathBuf> {
    let images = load_manifest(images)?;
    let out = backend.predict(model, &images, floor, iou)?;
    save_manifest(&with_absolute_files(&out.detections)?, output)?;
    Ok(output.to_path_buf())
}

fn handle(backend: &mut dyn DetectorBackend, req: &Request) -> Result<Response> {
    match req {
        Request::Hello { .. } | Request::Shutdown => unreachable!("handled by the loop"),
        Request::Train { .. } => train(backend, req),
        Request::Predict { id, model, images, output, score_floor, nms_iou } => {
            let output = predict(backend, model, images, output, *score_floor, *nms_iou)?;
            Ok(Response::PredictDone { id: *id, output, nms: true })
        }
        Request::Save { id, model, path } => {
            fs::copy(model, path).map_err(|e| Error::io(model, e))?;
            Ok(Response::Save { id: *id })
        }
        Request::Load { id, path } => {
            fs::metadata(path).map_err(|e| Error::io(path, e))?;
            Ok(Response::Load { id: *id, model: Some(path.clone()) })
        }
    }
}

fn request_id(req: &Request) -> Option<u64> {
    match req {
        Request::Train { id, .. } | Request::Predict { id, .. } | Request::Save { id, .. } | Request::Load { id, .. } => {
            Some(*id)
        }
        Request::Hello { .. } | Request::Shutdown => None,
    }
}

/// Answer requests from `input` until shutdown or end of input. Malformed lines and
/// failing commands get an error reply and the loop continues.
pub fn serve(backend: &mut dyn DetectorBackend, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                reply(&mut output, &Response::Error { id: None, message: format!("malformed message: {e}") })?;
                continue;
            }
        };
        let resp = match &req {
            Request::Shutdown => return Ok(()),
            Request::Hello { version } if *version != PROTOCOL_VERSION => Response::Error {
                id: None,
                message: format!("unsupported protocol version {version}"),
            },
            Request::Hello { .. } => Response::Hello {
                version: PROTOCOL_VERSION,
                capabilities: vec![Capability::Train, Capability::Predict, Capability::Save, Capability::Load],
            },
            _ => handle(backend, &req)
                .unwrap_or_else(|e| Response::Error { id: request_id(&req), message: e.to_string() }),
        };
        reply(&mut output, &resp)?;
    }
    Ok(())
}
