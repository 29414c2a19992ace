use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Instruction sent with every description request; `{x}`, `{y}`, `{x+w}`
/// and `{y+h}` are replaced by pixel coordinates.
pub const PROMPT_TEMPLATE: &str = "Describe the object located in the image at <box>({x}, {y}, {x+w}, {y+h})</box>. \
Focus on distinctive visual features, motion patterns, and key identifiers to distinguish it from background \
elements and distractors. Keep the description in a continuous sentence under 20 words. Avoid mentioning \
bounding boxes or coordinates. Do not use parentheses for explanations.";

pub const MAX_DESCRIPTION_WORDS: usize = 20;

/// Fills [`PROMPT_TEMPLATE`] for a top-left `[x, y, w, h]` box.
pub fn fill_prompt(bbox: [i64; 4]) -> String {
    let [x, y, w, h] = bbox;
    PROMPT_TEMPLATE
        .replace("{x+w}", &(x + w).to_string())
        .replace("{y+h}", &(y + h).to_string())
        .replace("{x}", &x.to_string())
        .replace("{y}", &y.to_string())
}

/// Ground-truth appearance of the synthetic target in one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAttributes {
    pub color: String,
    /// `left`, `right`, `up`, `down` or `still`.
    pub direction: String,
    pub night: bool,
    pub occluded: bool,
}

pub struct FrameRef<'a> {
    pub image: &'a Image,
    pub frame_index: usize,
    pub attributes: Option<&'a FrameAttributes>,
}

pub trait DescriptionProvider {
    fn describe(&self, frame: &FrameRef<'_>, bbox: [i64; 4], prompt: &str) -> Result<String>;
}

/// Deterministic provider that templates a sentence from frame attributes.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockProvider;

impl DescriptionProvider for MockProvider {
    fn describe(&self, frame: &FrameRef<'_>, _bbox: [i64; 4], _prompt: &str) -> Result<String> {
        let a = frame
            .attributes
            .ok_or_else(|| Error::Provider(format!("no attributes for frame {}", frame.frame_index)))?;
        Ok(attribute_sentence(a))
    }
}

/// Sentence used by [`MockProvider`], e.g. `a red square moving right`.
pub fn attribute_sentence(a: &FrameAttributes) -> String {
    let mut words = vec!["a"];
    if a.night {
        words.push("dim");
    }
    words.extend([a.color.as_str(), "square", "moving", a.direction.as_str()]);
    if a.occluded {
        words.extend(["partly", "hidden"]);
    }
    truncate_words(&words.join(" "))
}

pub fn truncate_words(s: &str) -> String {
    s.split_whitespace()
        .take(MAX_DESCRIPTION_WORDS)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    /// Base64-encoded PNG.
    pub image: String,
    pub bbox: [i64; 4],
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub description: String,
}

impl ProviderRequest {
    pub fn new(image: &Image, bbox: [i64; 4], prompt: &str) -> Result<Self> {
        use base64::Engine;
        Ok(Self {
            image: base64::engine::general_purpose::STANDARD.encode(image.png_bytes()?),
            bbox,
            prompt: prompt.to_owned(),
        })
    }
}

/// Remote provider speaking the JSON wire contract over HTTP POST.
#[cfg(feature = "http-provider")]
pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
}

#[cfg(feature = "http-provider")]
impl HttpProvider {
    pub const TIMEOUT: std::time::Duration = std::time::Duration::from_secs(2);

    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Self::TIMEOUT))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

#[cfg(feature = "http-provider")]
impl DescriptionProvider for HttpProvider {
    fn describe(&self, frame: &FrameRef<'_>, bbox: [i64; 4], prompt: &str) -> Result<String> {
        let req = ProviderRequest::new(frame.image, bbox, prompt)?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&req)
            .map_err(|e| Error::Provider(e.to_string()))?;
        let body: ProviderResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(body.description)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionOutcome {
    pub description: String,
    /// False when the provider failed and `previous` was kept.
    pub fresh: bool,
    pub error: Option<String>,
}

/// Asks `provider` to describe the box; falls back to `previous` on failure.
pub fn generate_description(
    provider: &dyn DescriptionProvider,
    frame: &FrameRef<'_>,
    bbox: [i64; 4],
    previous: &str,
) -> Result<DescriptionOutcome> {
    let [x, y, w, h] = bbox;
    let e = frame.image.edge() as i64;
    if x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > e || y + h > e {
        return Err(Error::arg(format!("box {bbox:?} outside {e}x{e} frame")));
    }
    let prompt = fill_prompt(bbox);
    Ok(match provider.describe(frame, bbox, &prompt) {
        Ok(d) if !d.trim().is_empty() => DescriptionOutcome {
            description: truncate_words(&d),
            fresh: true,
            error: None,
        },
        Ok(_) => DescriptionOutcome {
            description: previous.to_owned(),
            fresh: false,
            error: Some("empty description".into()),
        },
        Err(err) => DescriptionOutcome {
            description: previous.to_owned(),
            fresh: false,
            error: Some(err.to_string()),
        },
    })
}
