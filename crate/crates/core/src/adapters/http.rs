//! HTTP JSON transport for remote model servers.
//!
//! Every operation is a `POST {endpoint}/{operation}` with a JSON body; images
//! and masks travel as base64-encoded PNG. Request and response shapes:
//!
//! | operation       | request fields                                    | response fields        |
//! |-----------------|---------------------------------------------------|------------------------|
//! | `generate`      | `prompt, seed, width, height`                     | `image_png_b64`        |
//! | `inpaint`       | `image_png_b64, mask_png_b64, prompt, seed`       | `image_png_b64`        |
//! | `vqa`           | `image_png_b64, question`                         | `answer, score`        |
//! | `detect`        | `image_png_b64, query`                            | `boxes`                |
//! | `segment`       | `image_png_b64, box`                              | `mask_png_b64`         |
//! | `classify_race` | `image_png_b64`                                   | `group` (null: no face)|
//! | `similarities`  | `image_png_b64, label_texts`                      | `similarities`         |
//! | `log_probs`     | `image_png_b64, prompt_template, answers`         | `log_probs`            |
//!
//! Every request also carries `image_key` (when an image is sent) and the
//! binding's pass-through `params` object.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{GrayImage, ImageFormat, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AdapterError, GenerativeScorer, ImageGenerator, ImageInput, ImageSize, Inpainter, LogProbVector,
    PersonDetector, RaceClassifier, Segmenter, SimilarityVector, VqaModel, VqaResult, ZeroShotClassifier,
};
use crate::dataset::{BoundingBox, DemographicGroup};

const MAX_RESPONSE_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub params: Value,
}

fn default_timeout() -> u64 {
    300
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn endpoint(&self) -> &str {
        &self.config.endpoint
    }

    fn call<T: DeserializeOwned>(&self, operation: &str, mut body: Value) -> Result<T, AdapterError> {
        body["params"] = self.config.params.clone();
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), operation);
        let mut resp = self.agent.post(&url).send_json(&body).map_err(|e| map_err(&url, e))?;
        resp.body_mut()
            .with_config()
            .limit(MAX_RESPONSE_BYTES)
            .read_json::<T>()
            .map_err(|e| AdapterError::InvalidOutput(format!("{url}: {e}")))
    }
}

fn map_err(url: &str, e: ureq::Error) -> AdapterError {
    match e {
        ureq::Error::Timeout(t) => AdapterError::Timeout(format!("{url}: {t}")),
        other => AdapterError::Unavailable(format!("{url}: {other}")),
    }
}

fn rgb_to_b64(img: &RgbImage) -> Result<String, AdapterError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| AdapterError::Precondition(format!("cannot encode image: {e}")))?;
    Ok(B64.encode(buf.into_inner()))
}

fn gray_to_b64(img: &GrayImage) -> Result<String, AdapterError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| AdapterError::Precondition(format!("cannot encode mask: {e}")))?;
    Ok(B64.encode(buf.into_inner()))
}

fn decode_b64(data: &str) -> Result<image::DynamicImage, AdapterError> {
    let bytes = B64.decode(data).map_err(|e| AdapterError::InvalidOutput(format!("bad base64: {e}")))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| AdapterError::InvalidOutput(format!("bad png: {e}")))
}

fn image_body(input: ImageInput<'_>) -> Result<Value, AdapterError> {
    Ok(json!({ "image_key": input.key, "image_png_b64": rgb_to_b64(input.image)? }))
}

#[derive(Deserialize)]
struct ImageResponse {
    image_png_b64: String,
}

#[derive(Deserialize)]
struct MaskResponse {
    mask_png_b64: String,
}

#[derive(Deserialize)]
struct BoxesResponse {
    boxes: Vec<BoundingBox>,
}

#[derive(Deserialize)]
struct GroupResponse {
    group: Option<DemographicGroup>,
}

#[derive(Deserialize)]
struct SimilaritiesResponse {
    similarities: Vec<f64>,
}

#[derive(Deserialize)]
struct LogProbsResponse {
    log_probs: Vec<f64>,
}

impl ImageGenerator for HttpBackend {
    fn generate(&self, prompt: &str, seed: u64, size: ImageSize) -> Result<RgbImage, AdapterError> {
        let body = json!({ "prompt": prompt, "seed": seed, "width": size.width, "height": size.height });
        let resp: ImageResponse = self.call("generate", body)?;
        let img = decode_b64(&resp.image_png_b64)?.to_rgb8();
        if img.dimensions() != (size.width, size.height) {
            return Err(AdapterError::InvalidOutput(format!(
                "requested {}x{}, got {:?}",
                size.width,
                size.height,
                img.dimensions()
            )));
        }
        Ok(img)
    }
}

impl Inpainter for HttpBackend {
    fn inpaint(&self, base: ImageInput<'_>, mask: &GrayImage, prompt: &str, seed: u64) -> Result<RgbImage, AdapterError> {
        if mask.dimensions() != base.image.dimensions() {
            return Err(AdapterError::Precondition("mask resolution differs from image".into()));
        }
        let mut body = image_body(base)?;
        body["mask_png_b64"] = Value::String(gray_to_b64(mask)?);
        body["prompt"] = json!(prompt);
        body["seed"] = json!(seed);
        let resp: ImageResponse = self.call("inpaint", body)?;
        let img = decode_b64(&resp.image_png_b64)?.to_rgb8();
        if img.dimensions() != base.image.dimensions() {
            return Err(AdapterError::InvalidOutput("inpainted image changed resolution".into()));
        }
        Ok(img)
    }
}

impl VqaModel for HttpBackend {
    fn answer(&self, image: ImageInput<'_>, question: &str) -> Result<VqaResult, AdapterError> {
        let mut body = image_body(image)?;
        body["question"] = json!(question);
        self.call("vqa", body)
    }
}

impl PersonDetector for HttpBackend {
    fn detect(&self, image: ImageInput<'_>, query: &str) -> Result<Vec<BoundingBox>, AdapterError> {
        let mut body = image_body(image)?;
        body["query"] = json!(query);
        let resp: BoxesResponse = self.call("detect", body)?;
        Ok(resp.boxes)
    }
}

impl Segmenter for HttpBackend {
    fn segment(&self, image: ImageInput<'_>, bbox: &BoundingBox) -> Result<GrayImage, AdapterError> {
        let mut body = image_body(image)?;
        body["box"] = serde_json::to_value(bbox).expect("boxes serialize");
        let resp: MaskResponse = self.call("segment", body)?;
        Ok(decode_b64(&resp.mask_png_b64)?.to_luma8())
    }
}

impl RaceClassifier for HttpBackend {
    fn classify(&self, image: ImageInput<'_>) -> Result<DemographicGroup, AdapterError> {
        let resp: GroupResponse = self.call("classify_race", image_body(image)?)?;
        resp.group.ok_or_else(|| AdapterError::NoFace(image.key.to_string()))
    }
}

impl ZeroShotClassifier for HttpBackend {
    fn similarities(&self, image: ImageInput<'_>, label_texts: &[String]) -> Result<SimilarityVector, AdapterError> {
        let mut body = image_body(image)?;
        body["label_texts"] = json!(label_texts);
        let resp: SimilaritiesResponse = self.call("similarities", body)?;
        SimilarityVector::checked(resp.similarities, label_texts.len())
    }
}

impl GenerativeScorer for HttpBackend {
    fn log_probs(
        &self,
        image: ImageInput<'_>,
        prompt_template: &str,
        answers: &[String],
    ) -> Result<LogProbVector, AdapterError> {
        let mut body = image_body(image)?;
        body["prompt_template"] = json!(prompt_template);
        body["answers"] = json!(answers);
        let resp: LogProbsResponse = self.call("log_probs", body)?;
        LogProbVector::checked(resp.log_probs, answers.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves one canned JSON response and hands back the request body.
    fn serve_once(response: &'static str) -> (String, thread::JoinHandle<(String, Value)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                response.len(),
                response
            )
            .unwrap();
            (request_line, serde_json::from_slice(&body).unwrap())
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn vqa_round_trip_over_http() {
        let (endpoint, handle) = serve_once(r#"{"answer":"yes","score":0.75}"#);
        let backend = HttpBackend::new(HttpConfig { endpoint, timeout_secs: 5, params: json!({"model":"vilt"}) });
        let img = RgbImage::new(2, 2);
        let r = backend.answer(ImageInput { key: "images/base/a.png", image: &img }, "Is there a chef in this image?").unwrap();
        assert_eq!(r, VqaResult { answer: "yes".into(), score: 0.75 });
        let (line, body) = handle.join().unwrap();
        assert!(line.starts_with("POST /vqa "));
        assert_eq!(body["question"], "Is there a chef in this image?");
        assert_eq!(body["image_key"], "images/base/a.png");
        assert_eq!(body["params"]["model"], "vilt");
        let png = decode_b64(body["image_png_b64"].as_str().unwrap()).unwrap();
        assert_eq!(png.to_rgb8().dimensions(), (2, 2));
    }

    #[test]
    fn null_group_means_no_face() {
        let (endpoint, handle) = serve_once(r#"{"group":null}"#);
        let backend = HttpBackend::new(HttpConfig { endpoint, timeout_secs: 5, params: Value::Null });
        let img = RgbImage::new(1, 1);
        let err = backend.classify(ImageInput { key: "k", image: &img }).unwrap_err();
        assert!(matches!(err, AdapterError::NoFace(_)));
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let backend = HttpBackend::new(HttpConfig { endpoint: format!("http://{addr}"), timeout_secs: 2, params: Value::Null });
        let err = backend.generate("p", 1, ImageSize::square(4)).unwrap_err();
        assert!(matches!(err, AdapterError::Unavailable(_) | AdapterError::Timeout(_)), "{err:?}");
    }
}
