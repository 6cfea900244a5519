//! Line-oriented JSON client for detector, captioner and feature services that run
//! as a subprocess.
//!
//! Each request is one line on the child's stdin:
//! `{"op": "detect" | "caption" | "feature", "frames": [{"shape": [h, w, c], "data": [...]}], "boxes": [[x0, y0, x1, y1], ...]}`
//! and the child answers with one line holding exactly one of
//! `{"bbox": [x0, y0, x1, y1]}`, `{"caption": {"global_caption": .., "subject_captions": [..]}}`,
//! `{"feature": [...]}` or `{"error": "message"}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::annotate::{Annotation, Captioner, FeatureExtractor};
use super::detect::Detector;
use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::StoryMeta;
use crate::numerics::Tensor;

#[derive(Serialize)]
struct Frame<'a> {
    shape: &'a [usize],
    data: &'a [f64],
}

#[derive(Serialize)]
struct Request<'a> {
    op: &'a str,
    frames: Vec<Frame<'a>>,
    boxes: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    bbox: Option<[f64; 4]>,
    caption: Option<Annotation>,
    feature: Option<Vec<f64>>,
    error: Option<String>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A long-lived child process answering one request per line.
pub struct SubprocessClient {
    pipe: Mutex<Pipe>,
}

impl SubprocessClient {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessClient {
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }

    fn call(&self, op: &str, frames: &[&Tensor], boxes: &[BoundingBox]) -> Result<Response> {
        let req = Request {
            op,
            frames: frames.iter().map(|t| Frame { shape: t.shape(), data: t.data() }).collect(),
            boxes: boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
        };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        let mut p = self.pipe.lock().map_err(|_| Error::External("client poisoned".into()))?;
        p.stdin.write_all(line.as_bytes())?;
        p.stdin.flush()?;
        let mut reply = String::new();
        if p.stdout.read_line(&mut reply)? == 0 {
            return Err(Error::External(format!("{op}: child closed its output")));
        }
        let r: Response =
            serde_json::from_str(&reply).map_err(|e| Error::External(format!("{op}: malformed reply: {e}")))?;
        if let Some(e) = r.error {
            return Err(Error::External(format!("{op}: {e}")));
        }
        Ok(r)
    }
}

impl Drop for SubprocessClient {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl Detector for SubprocessClient {
    fn detect(&self, latent: &Tensor) -> Result<BoundingBox> {
        let [x0, y0, x1, y1] = self
            .call("detect", &[latent], &[])?
            .bbox
            .ok_or_else(|| Error::External("detect: reply has no bbox".into()))?;
        BoundingBox::new(x0, y0, x1, y1)
    }
}

impl Captioner for SubprocessClient {
    fn annotate(&self, frames: &[Tensor], boxes: &[BoundingBox], _meta: &[Option<StoryMeta>]) -> Result<Annotation> {
        let refs: Vec<&Tensor> = frames.iter().collect();
        let a = self
            .call("caption", &refs, boxes)?
            .caption
            .ok_or_else(|| Error::External("caption: reply has no caption".into()))?;
        if a.subject_captions.len() != frames.len() {
            return Err(Error::External(format!(
                "caption: {} subject captions for {} frames",
                a.subject_captions.len(),
                frames.len()
            )));
        }
        Ok(a)
    }
}

impl FeatureExtractor for SubprocessClient {
    fn feature(&self, latent: &Tensor, bbox: &BoundingBox) -> Result<Vec<f64>> {
        self.call("feature", &[latent], &[*bbox])?
            .feature
            .ok_or_else(|| Error::External("feature: reply has no feature".into()))
    }
}
