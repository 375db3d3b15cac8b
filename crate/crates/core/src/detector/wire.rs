//! Newline-delimited JSON protocol for out-of-process detectors.
//!
//! ```text
//! {"op":"train","labeled":[{"image":{..},"boxes":[..]}],"hyperparams":{..}}  -> {"ok":true,"model_id":"m1"}
//! {"op":"detect","model_id":"m1","image":{..}}  -> {"ok":true,"proposals":[..],"detections":[..]}
//! any failure                                    -> {"ok":false,"error":"..."}
//! ```
//!
//! One document per line; responses arrive in request order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Detection, Detector, DetectorError, DetectorOutput, LabeledImage, ModelState, RegionProposal};
use crate::dataset::ImageRecord;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireLabeled {
    pub image: ImageRecord,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WireRequest {
    Train {
        labeled: Vec<WireLabeled>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hyperparams: Option<serde_json::Value>,
    },
    Detect {
        model_id: String,
        image: ImageRecord,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WireResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<Vec<RegionProposal>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

impl WireResponse {
    fn failure(msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(msg.into()),
            ..Default::default()
        }
    }
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

impl Channel {
    fn round_trip(&mut self, request: &WireRequest) -> Result<WireResponse, DetectorError> {
        let mut line = serde_json::to_string(request).map_err(|e| DetectorError::Protocol(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(DetectorError::Protocol("detector closed the connection".into()));
        }
        let response: WireResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| DetectorError::Protocol(format!("bad response: {e}")))?;
        if !response.ok {
            return Err(DetectorError::Remote(
                response.error.unwrap_or_else(|| "unspecified error".into()),
            ));
        }
        Ok(response)
    }
}

/// Client side of the protocol, over a spawned subprocess or a TCP socket.
pub struct ExternalDetector {
    channel: Mutex<Channel>,
    hyperparams: Option<serde_json::Value>,
    child: Option<Child>,
}

impl ExternalDetector {
    pub fn from_streams<R, W>(reader: R, writer: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            channel: Mutex::new(Channel {
                reader: Box::new(reader),
                writer: Box::new(writer),
            }),
            hyperparams: None,
            child: None,
        }
    }

    /// Spawns `program args..` and speaks the protocol over its stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, DetectorError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut det = Self::from_streams(BufReader::new(stdout), stdin);
        det.child = Some(child);
        Ok(det)
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, DetectorError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self::from_streams(reader, stream))
    }

    /// Opaque training settings forwarded with every train request.
    pub fn with_hyperparams(mut self, hyperparams: Option<serde_json::Value>) -> Self {
        self.hyperparams = hyperparams;
        self
    }

    fn call(&self, request: &WireRequest) -> Result<WireResponse, DetectorError> {
        let mut channel = self
            .channel
            .lock()
            .map_err(|_| DetectorError::Protocol("detector channel poisoned".into()))?;
        channel.round_trip(request)
    }
}

impl Drop for ExternalDetector {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Detector for ExternalDetector {
    fn train(&self, labeled: &[LabeledImage<'_>], round: u32) -> Result<ModelState, DetectorError> {
        if labeled.is_empty() {
            return Err(DetectorError::EmptyTrainingSet);
        }
        let request = WireRequest::Train {
            labeled: labeled
                .iter()
                .map(|l| WireLabeled {
                    image: l.image.clone(),
                    boxes: l.boxes.to_vec(),
                })
                .collect(),
            hyperparams: self.hyperparams.clone(),
        };
        let response = self.call(&request)?;
        let model_id = response
            .model_id
            .ok_or_else(|| DetectorError::Protocol("train response lacks model_id".into()))?;
        Ok(ModelState {
            model_id,
            round,
            trained_on: labeled.len(),
            skill: None,
        })
    }

    fn detect(&self, model: &ModelState, image: &ImageRecord) -> Result<DetectorOutput, DetectorError> {
        let response = self.call(&WireRequest::Detect {
            model_id: model.model_id.clone(),
            image: image.clone(),
        })?;
        let proposals = response
            .proposals
            .ok_or_else(|| DetectorError::Protocol("detect response lacks proposals".into()))?;
        Ok(DetectorOutput {
            image_id: image.id.clone(),
            proposals,
            detections: response.detections.unwrap_or_default(),
        })
    }
}

/// Serves `detector` over the protocol until `reader` reaches end of input.
///
/// Models are kept by id; train calls are numbered from round 0 so a fresh
/// server reproduces an in-process run of the same detector.
pub fn serve_detector<D, R, W>(detector: &D, reader: R, mut writer: W) -> std::io::Result<()>
where
    D: Detector + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut models: HashMap<String, ModelState> = HashMap::new();
    let mut round = 0u32;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Err(e) => WireResponse::failure(format!("malformed request: {e}")),
            Ok(WireRequest::Train { labeled, .. }) => {
                let views: Vec<LabeledImage<'_>> = labeled
                    .iter()
                    .map(|l| LabeledImage {
                        image: &l.image,
                        boxes: &l.boxes,
                    })
                    .collect();
                match detector.train(&views, round) {
                    Ok(model) => {
                        round += 1;
                        let id = model.model_id.clone();
                        models.insert(id.clone(), model);
                        WireResponse {
                            ok: true,
                            model_id: Some(id),
                            ..Default::default()
                        }
                    }
                    Err(e) => WireResponse::failure(e.to_string()),
                }
            }
            Ok(WireRequest::Detect { model_id, image }) => match models.get(&model_id) {
                None => WireResponse::failure(format!("unknown model_id {model_id}")),
                Some(model) => match detector.detect(model, &image) {
                    Ok(out) => WireResponse {
                        ok: true,
                        proposals: Some(out.proposals),
                        detections: Some(out.detections),
                        ..Default::default()
                    },
                    Err(e) => WireResponse::failure(e.to_string()),
                },
            },
        };
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
