use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::protocol::{
    DetectionsPayload, Hello, InferPayload, Request, Response, StatePayload, StepsPayload, TrainPayload, WireImage,
    PROTOCOL_VERSION,
};
use super::{Detector, DetectorError, ImageStore, TrainJob};
use crate::data::{Detection, ImageRecord};

struct Channel {
    child: Child,
    /// Dropped after `close` is sent so a peer that ignores it sees EOF.
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
    poisoned: Option<String>,
}

impl Channel {
    fn call(&mut self, cmd: &str, payload: Value) -> Result<Value, DetectorError> {
        if let Some(reason) = &self.poisoned {
            return Err(DetectorError::Protocol(format!(
                "handle poisoned by earlier failure: {reason}"
            )));
        }
        let result = self.exchange(cmd, payload);
        if let Err(DetectorError::Protocol(reason)) = &result {
            if !reason.starts_with("detector reported") {
                self.poisoned = Some(reason.clone());
            }
        }
        result
    }

    fn exchange(&mut self, cmd: &str, payload: Value) -> Result<Value, DetectorError> {
        let id = self.next_id;
        self.next_id += 1;
        let request = Request {
            id,
            cmd: cmd.to_string(),
            payload,
        };
        let mut line = serde_json::to_string(&request).map_err(|e| DetectorError::Serialization(e.to_string()))?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| DetectorError::Protocol(format!("cannot write `{cmd}` request: input closed")))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| DetectorError::Protocol(format!("cannot write `{cmd}` request: {e}")))?;
        if cmd == "close" {
            self.stdin = None;
        }

        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| DetectorError::Protocol(format!("cannot read `{cmd}` response: {e}")))?;
        if n == 0 {
            return Err(DetectorError::Protocol(format!("detector exited during `{cmd}`")));
        }
        let response: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| DetectorError::Protocol(format!("malformed `{cmd}` response: {e}")))?;
        if response.id != Some(id) {
            return Err(DetectorError::Protocol(format!(
                "response id {:?} does not match request id {id}",
                response.id
            )));
        }
        if !response.ok {
            let msg = response.error.unwrap_or_else(|| "unspecified error".into());
            return Err(DetectorError::Protocol(format!(
                "detector reported `{cmd}` failure: {msg}"
            )));
        }
        response
            .payload
            .ok_or_else(|| DetectorError::Protocol(format!("`{cmd}` response has no payload")))
    }
}

fn decode<T: DeserializeOwned>(cmd: &str, value: Value) -> Result<T, DetectorError> {
    serde_json::from_value(value).map_err(|e| DetectorError::Protocol(format!("bad `{cmd}` payload: {e}")))
}

/// A detector running in a child process.
///
/// Requests are serialized through a mutex, so concurrent `infer` calls
/// are safe but never overlap on the wire.
pub struct ExternalDetector {
    channel: Mutex<Channel>,
    name: String,
    trained_steps: u64,
    presentations: u64,
}

impl std::fmt::Debug for ExternalDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalDetector")
            .field("name", &self.name)
            .field("trained_steps", &self.trained_steps)
            .finish()
    }
}

/// Blob payload: trained_steps (u64 LE), presentations (u64 LE), adapter state.
const COUNTER_BYTES: usize = 16;

impl ExternalDetector {
    /// Starts the command (split with shell quoting rules) and performs the
    /// `hello` handshake.
    pub fn spawn(command: &str) -> Result<Self, DetectorError> {
        let argv = shlex::split(command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| DetectorError::Spawn(format!("cannot parse command line `{command}`")))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DetectorError::Spawn(format!("`{}`: {e}", argv[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut channel = Channel {
            child,
            stdin: Some(stdin),
            stdout,
            next_id: 0,
            poisoned: None,
        };
        let hello: Hello = match channel.call("hello", json!({})) {
            Ok(v) => decode("hello", v)?,
            Err(DetectorError::Protocol(msg))
                if msg.starts_with("detector exited") || msg.starts_with("cannot write") =>
            {
                let _ = channel.child.wait();
                return Err(DetectorError::Spawn(format!("`{command}` exited before the handshake")));
            }
            Err(e) => {
                let _ = channel.child.kill();
                let _ = channel.child.wait();
                return Err(e);
            }
        };
        if hello.protocol != PROTOCOL_VERSION {
            let _ = channel.child.kill();
            let _ = channel.child.wait();
            return Err(DetectorError::Version(format!(
                "detector speaks protocol {}, expected {PROTOCOL_VERSION}",
                hello.protocol
            )));
        }
        Ok(Self {
            channel: Mutex::new(channel),
            name: hello.name,
            trained_steps: 0,
            presentations: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, cmd: &str, payload: Value) -> Result<Value, DetectorError> {
        self.channel.lock().expect("channel mutex poisoned").call(cmd, payload)
    }

    pub fn load_state(&mut self, bytes: &[u8]) -> Result<(), DetectorError> {
        if bytes.len() < COUNTER_BYTES {
            return Err(DetectorError::Serialization(
                "external state shorter than its counters".into(),
            ));
        }
        let trained_steps = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let presentations = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let state = StatePayload::encode(&bytes[COUNTER_BYTES..]);
        let steps: StepsPayload = decode("load", self.call("load", json!(state))?)?;
        if steps.trained_steps != trained_steps {
            return Err(DetectorError::Protocol(format!(
                "detector restored {} steps, state records {trained_steps}",
                steps.trained_steps
            )));
        }
        self.trained_steps = trained_steps;
        self.presentations = presentations;
        Ok(())
    }
}

impl Detector for ExternalDetector {
    fn train(&mut self, job: &TrainJob, store: &ImageStore) -> Result<(), DetectorError> {
        let payload = TrainPayload::from_job(job, store);
        let steps: StepsPayload = decode("train", self.call("train", json!(payload))?)?;
        let expected = self.trained_steps + job.batches();
        if steps.trained_steps != expected {
            return Err(DetectorError::Protocol(format!(
                "detector reports {} trained steps, expected {expected}",
                steps.trained_steps
            )));
        }
        self.trained_steps = expected;
        self.presentations += job.presentations();
        Ok(())
    }

    fn infer(&self, images: &[ImageRecord], store: &ImageStore) -> Result<Vec<Detection>, DetectorError> {
        let payload = InferPayload {
            images: images.iter().map(|im| WireImage::from_record(im, store)).collect(),
        };
        let out: DetectionsPayload = decode("infer", self.call("infer", json!(payload))?)?;
        let mut detections = Vec::with_capacity(out.detections.len());
        for d in out.detections {
            let Some(image) = images.iter().find(|im| im.id == d.image_id) else {
                return Err(DetectorError::Protocol(format!(
                    "detection for unknown image {}",
                    d.image_id
                )));
            };
            if d.segmentation.height() != image.height || d.segmentation.width() != image.width {
                return Err(DetectorError::Protocol(format!(
                    "detection mask size differs from image {}",
                    image.id
                )));
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(DetectorError::Protocol(format!(
                    "confidence {} outside [0, 1]",
                    d.confidence
                )));
            }
            detections.push(d.into_detection());
        }
        Ok(detections)
    }

    fn save_state(&self) -> Result<Vec<u8>, DetectorError> {
        let state: StatePayload = decode("save", self.call("save", json!({}))?)?;
        let mut bytes = Vec::with_capacity(COUNTER_BYTES + state.state.len());
        bytes.extend(self.trained_steps.to_le_bytes());
        bytes.extend(self.presentations.to_le_bytes());
        bytes.extend(state.decode()?);
        Ok(bytes)
    }

    fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    fn presentations(&self) -> u64 {
        self.presentations
    }

    fn close(&mut self) -> Result<(), DetectorError> {
        let channel = self.channel.get_mut().expect("channel mutex poisoned");
        let result = if channel.poisoned.is_none() {
            channel.call("close", json!({})).map(|_| ())
        } else {
            Ok(())
        };
        if result.is_err() || channel.poisoned.is_some() {
            let _ = channel.child.kill();
        }
        let _ = channel.child.wait();
        result
    }
}
