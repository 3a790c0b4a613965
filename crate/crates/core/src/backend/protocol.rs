//! Control messages: one JSON object per line, tagged by `"type"`.
//!
//! ```text
//! engine  → {"type":"hello","version":1}
//! backend → {"type":"hello","version":1,"capabilities":["train","predict"]}
//! engine  → {"type":"train","id":1,"labeled":"…","pseudo":"…","val":"…","init_model":null,"model_out":"…","config":{…}}
//! backend → {"type":"train_done","id":1,"model":"…","val_map":0.412}
//! engine  → {"type":"predict","id":2,"model":"…","images":"…","output":"…","score_floor":0.05,"nms_iou":0.5}
//! backend → {"type":"predict_done","id":2,"output":"…","nms":true}
//! engine  → {"type":"save","id":3,"model":"…","path":"…"}     backend → {"type":"save","id":3}
//! engine  → {"type":"load","id":4,"path":"…"}                 backend → {"type":"load","id":4,"model":"…"}
//! backend → {"type":"error","id":2,"message":"…"}
//! engine  → {"type":"shutdown"}
//! ```
//!
//! Unknown fields are ignored in both directions.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detector::TrainConfig;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Train,
    Predict,
    Save,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Hello {
        version: u32,
    },
    Train {
        id: u64,
        labeled: PathBuf,
        pseudo: Option<PathBuf>,
        val: PathBuf,
        init_model: Option<PathBuf>,
        model_out: PathBuf,
        config: TrainConfig,
    },
    Predict {
        id: u64,
        model: PathBuf,
        images: PathBuf,
        output: PathBuf,
        score_floor: f64,
        nms_iou: f64,
    },
    Save {
        id: u64,
        model: PathBuf,
        path: PathBuf,
    },
    Load {
        id: u64,
        path: PathBuf,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Hello {
        version: u32,
        #[serde(default)]
        capabilities: Vec<Capability>,
    },
    TrainDone {
        id: u64,
        model: PathBuf,
        val_map: f64,
    },
    PredictDone {
        id: u64,
        output: PathBuf,
        /// Whether the backend already applied NMS.
        #[serde(default)]
        nms: bool,
    },
    Save {
        id: u64,
    },
    Load {
        id: u64,
        #[serde(default)]
        model: Option<PathBuf>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

impl Response {
    pub fn id(&self) -> Option<u64> {
        match self {
            Response::Hello { .. } => None,
            Response::TrainDone { id, .. }
            | Response::PredictDone { id, .. }
            | Response::Save { id }
            | Response::Load { id, .. } => Some(*id),
            Response::Error { id, .. } => *id,
        }
    }
}
