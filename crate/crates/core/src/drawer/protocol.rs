//! `/draw` and `/capabilities` wire types.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DrawError;
use crate::layout::{BoundingBox, FrameSize};
use crate::registry::{EmbeddingVector, Provenance, SubjectId};

pub const DRAW_SCHEMA_VERSION: u32 = 1;
pub const MAX_FRAME_SIDE: u32 = 4096;
pub const MAX_STEPS: usize = 1000;
pub const MAX_SUBJECTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DrawMode {
    #[default]
    Generate,
    Edit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawParams {
    /// Guidance is injected at reverse steps with `t ≥ r·steps`.
    pub r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
    /// When false no guidance is injected at all, independent of `r`.
    #[serde(default = "default_true")]
    pub guidance: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DrawParams {
    fn default() -> Self {
        Self { r: 0.95, alpha: 0.2, beta: 0.7, steps: 30, guidance: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawComponent {
    pub caption: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub id: SubjectId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSubject {
    pub id: SubjectId,
    pub caption: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub components: Vec<DrawComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRequest {
    pub schema_version: u32,
    pub frame: FrameSize,
    pub global_caption: String,
    pub background_caption: String,
    pub subjects: Vec<DrawSubject>,
    pub seed: u64,
    #[serde(default)]
    pub mode: DrawMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_region: Option<BoundingBox>,
    #[serde(default)]
    pub params: DrawParams,
    /// Ask for the per-step injection log in the diagnostics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub trace: bool,
    /// The request that produced the image being edited. Required in edit mode,
    /// so a stateless drawer can rebuild the trajectory it clamps to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Box<DrawRequest>>,
}

impl DrawRequest {
    pub fn new(frame: FrameSize, seed: u64) -> Self {
        Self {
            schema_version: DRAW_SCHEMA_VERSION,
            frame,
            global_caption: String::new(),
            background_caption: String::new(),
            subjects: Vec::new(),
            seed,
            mode: DrawMode::Generate,
            edit_region: None,
            params: DrawParams::default(),
            trace: false,
            prior: None,
        }
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), DrawError> {
        let bad = |m: String| Err(DrawError::SchemaViolation(m));
        if self.schema_version != DRAW_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {DRAW_SCHEMA_VERSION})", self.schema_version));
        }
        let f = self.frame;
        if f.width == 0 || f.height == 0 || f.width > MAX_FRAME_SIDE || f.height > MAX_FRAME_SIDE {
            return bad(format!("frame {f} must have sides in 1..={MAX_FRAME_SIDE}"));
        }
        let p = &self.params;
        if !(0.0..=1.0).contains(&p.r) {
            return bad(format!("r = {} is outside [0, 1]", p.r));
        }
        if !(0.0..=1.0).contains(&p.alpha) {
            return bad(format!("alpha = {} is outside [0, 1]", p.alpha));
        }
        if !(p.beta >= 0.0 && p.beta.is_finite()) {
            return bad(format!("beta = {} must be non-negative", p.beta));
        }
        if !(2..=MAX_STEPS).contains(&p.steps) {
            return bad(format!("steps = {} is outside 2..={MAX_STEPS}", p.steps));
        }
        if self.subjects.len() > MAX_SUBJECTS {
            return bad(format!("{} subjects exceed the limit of {MAX_SUBJECTS}", self.subjects.len()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if s.id.is_component() {
                return bad(format!("subject id {} is a component id", s.id));
            }
            if !s.bbox.within_frame(f) {
                return bad(format!("box of {} lies outside the {f} frame", s.id));
            }
            if !seen.insert(s.id.clone()) {
                return bad(format!("duplicate subject id {}", s.id));
            }
            if let Some(e) = &s.embedding {
                if e.dim != e.values.len() || e.values.is_empty() || e.values.iter().any(|v| !v.is_finite()) {
                    return bad(format!("embedding of {} is malformed", s.id));
                }
            }
            for c in &s.components {
                if c.id.parent().as_ref() != Some(&s.id) {
                    return bad(format!("component {} does not belong to {}", c.id, s.id));
                }
                if !c.bbox.within_frame(f) {
                    return bad(format!("box of {} lies outside the {f} frame", c.id));
                }
                if !seen.insert(c.id.clone()) {
                    return bad(format!("duplicate component id {}", c.id));
                }
            }
        }
        match self.mode {
            DrawMode::Generate => {
                if self.edit_region.is_some() {
                    return bad("edit_region is only valid in edit mode".into());
                }
            }
            DrawMode::Edit => {
                let Some(region) = self.edit_region else {
                    return bad("edit mode needs an edit_region".into());
                };
                if !region.within_frame(f) {
                    return bad("edit_region lies outside the frame".into());
                }
                let Some(prior) = &self.prior else {
                    return Err(DrawError::MissingPriorTurn);
                };
                if prior.frame != f || prior.params.steps != p.steps {
                    return bad("prior request has a different frame or step count".into());
                }
                prior.validate()?;
            }
        }
        Ok(())
    }

    pub fn subject(&self, id: &SubjectId) -> Option<&DrawSubject> {
        self.subjects.iter().find(|s| &s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub id: SubjectId,
    pub crop_box: BoundingBox,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawResponse {
    pub schema_version: u32,
    pub frame: FrameSize,
    /// PNG bytes, base64 on the wire.
    #[serde(with = "base64_bytes")]
    pub image: Vec<u8>,
    pub per_subject: Vec<SubjectResult>,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl DrawResponse {
    /// Checks a response against the request it answers.
    pub fn check_against(&self, request: &DrawRequest) -> Result<(), DrawError> {
        if self.schema_version != DRAW_SCHEMA_VERSION {
            return Err(DrawError::SchemaViolation(format!("response schema_version {}", self.schema_version)));
        }
        let (w, h) = super::image::png_dimensions(&self.image)?;
        if (w, h) != (request.frame.width, request.frame.height) {
            return Err(DrawError::SchemaViolation(format!("image is {w}x{h}, frame is {}", request.frame)));
        }
        for s in &self.per_subject {
            if request.subject(&s.id).is_none() {
                return Err(DrawError::SchemaViolation(format!("response mentions unknown subject {}", s.id)));
            }
        }
        Ok(())
    }
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub schema_version: u32,
    pub drawer: String,
    pub modes: Vec<DrawMode>,
    pub embedding_dim: usize,
    pub embedding_provenance: Provenance,
    pub latent_factor: u32,
    pub latent_channels: usize,
    pub subject_canvas: u32,
    pub max_steps: usize,
    pub max_frame_side: u32,
    pub trace: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> DrawRequest {
        let mut r = DrawRequest::new(FrameSize::new(512, 512), 3);
        r.global_caption = "a dog in a park".into();
        r.subjects.push(DrawSubject {
            id: SubjectId::subject(1),
            caption: "a brown dog".into(),
            bbox: BoundingBox::new(100, 150, 200, 180),
            components: vec![DrawComponent {
                caption: "head".into(),
                bbox: BoundingBox::new(100, 150, 80, 80),
                id: SubjectId::component(1, 1),
            }],
            embedding: None,
        });
        r
    }

    #[test]
    fn json_shape() {
        let r = request();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["subjects"][0]["box"], serde_json::json!([100, 150, 200, 180]));
        assert_eq!(v["subjects"][0]["components"][0]["id"], "1-1");
        assert_eq!(v["mode"], "generate");
        assert_eq!(v["params"]["steps"], 30);
        assert!(v.get("prior").is_none());
        let back: DrawRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn validation_errors() {
        assert!(request().validate().is_ok());
        let mut r = request();
        r.schema_version = 2;
        assert!(matches!(r.validate(), Err(DrawError::SchemaViolation(_))));
        let mut r = request();
        r.subjects[0].bbox = BoundingBox::new(400, 0, 200, 10);
        assert!(r.validate().is_err());
        let mut r = request();
        r.subjects[0].components[0].id = SubjectId::component(2, 1);
        assert!(r.validate().is_err());
        let mut r = request();
        r.params.r = 1.5;
        assert!(r.validate().is_err());
        let mut r = request();
        r.mode = DrawMode::Edit;
        r.edit_region = Some(BoundingBox::new(0, 0, 10, 10));
        assert!(matches!(r.validate(), Err(DrawError::MissingPriorTurn)));
        r.prior = Some(Box::new(request()));
        assert!(r.validate().is_ok());
        let mut r = request();
        r.subjects.push(r.subjects[0].clone());
        assert!(r.validate().is_err());
    }

    #[test]
    fn response_bytes_are_base64() {
        let resp = DrawResponse {
            schema_version: 1,
            frame: FrameSize::new(1, 1),
            image: vec![0, 255, 7],
            per_subject: vec![],
            diagnostics: BTreeMap::new(),
        };
        let v = serde_json::to_value(&resp).unwrap();
        assert_eq!(v["image"], "AP8H");
        assert_eq!(serde_json::from_value::<DrawResponse>(v).unwrap(), resp);
    }
}
