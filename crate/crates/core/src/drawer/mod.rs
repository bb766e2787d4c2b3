//! Image generation. The toy drawer runs subject-initialized generation on a
//! seeded toy denoiser; [`HttpDrawer`] forwards the same requests to an external
//! backend over the `/draw` protocol.

mod codec;
mod denoise;
mod http;
mod image;
mod protocol;
mod schedule;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::{json, Value};

pub use codec::{
    decode, embedding_tokens, encode, encode_image, encode_text, latent_dims, IMAGE_EMBED_DIM, LATENT_CHANNELS,
    LATENT_FACTOR, MAX_TEXT_TOKENS, TEXT_DIM,
};
pub use denoise::{
    blended_denoise, compose_guidance, forward_diffuse, gaussian_latent, generate_subject_image, masked_mean,
    response_fraction, BranchFlags, Clamp, DenoiseInputs, DenoiseOutcome, DenoiseState, GuidanceSet, StepRecord,
    SubjectDraw, ToyDenoiser, CLEAN_SPREAD, KEY_DIM,
};
pub use http::{HttpDrawer, HttpDrawerConfig};
pub use image::{png_dimensions, RgbImage, BLANK_LEVEL};
pub use protocol::{
    Capabilities, DrawComponent, DrawMode, DrawParams, DrawRequest, DrawResponse, DrawSubject, SubjectResult,
    DRAW_SCHEMA_VERSION, MAX_FRAME_SIDE, MAX_STEPS, MAX_SUBJECTS,
};
pub use schedule::{DiffusionSchedule, Sampler, BETA_END, BETA_START};

use crate::attention::AttentionError;
use crate::layout::rasterize_mask_contained;
use crate::registry::{Provenance, SubjectId};
use crate::seed::derive_seed;
use crate::tensor::{BinaryMask, LatentTensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DrawError {
    #[error("request violates the draw schema: {0}")]
    SchemaViolation(String),
    #[error("edit requested without the prior turn's request")]
    MissingPriorTurn,
    #[error("drawer backend failed: {0}")]
    BridgeFailure(String),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("image: {0}")]
    Image(String),
}

impl From<AttentionError> for DrawError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Tensor(t) => DrawError::Shape(t),
            AttentionError::InvalidWeights(m) => DrawError::SchemaViolation(m),
        }
    }
}

pub trait Drawer: Send + Sync {
    fn draw(&self, request: &DrawRequest) -> Result<DrawResponse, DrawError>;
    fn capabilities(&self) -> Result<Capabilities, DrawError>;
}

/// Long side of the canvas subjects are drawn on before being pasted back.
pub const TOY_SUBJECT_CANVAS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDrawer {
    /// Seed of the denoiser weights, fixed for the drawer's lifetime.
    pub model_seed: u64,
    pub subject_canvas: u32,
}

impl Default for ToyDrawer {
    fn default() -> Self {
        Self { model_seed: 0, subject_canvas: TOY_SUBJECT_CANVAS }
    }
}

/// Everything a toy draw produced, beyond what goes on the wire.
#[derive(Debug, Clone)]
pub struct DrawOutcome {
    pub response: DrawResponse,
    pub image: RgbImage,
    pub denoise: DenoiseOutcome,
    pub guidance: GuidanceSet,
    pub subjects: Vec<SubjectDraw>,
    /// Latent masks of the top-level subjects, in request order.
    pub subject_masks: Vec<(SubjectId, BinaryMask)>,
    /// Cells regenerated by an edit; empty for a fresh draw.
    pub edit_cells: Option<BinaryMask>,
}

impl ToyDrawer {
    pub fn new(model_seed: u64) -> Self {
        Self { model_seed, ..Default::default() }
    }

    /// Draws and keeps the intermediate artifacts. `record` keeps the whole
    /// denoising trajectory.
    pub fn run(&self, request: &DrawRequest, record: bool) -> Result<DrawOutcome, DrawError> {
        request.validate()?;
        let params = request.params;
        let schedule = DiffusionSchedule::linear(params.steps)?;
        let denoiser = ToyDenoiser::new(self.model_seed, params.alpha, params.beta);
        let frame = request.frame;
        let (h, w) = latent_dims(frame);

        let prior = match request.mode {
            DrawMode::Edit => {
                let prior = request.prior.as_deref().ok_or(DrawError::MissingPriorTurn)?;
                Some(self.run(prior, true)?)
            }
            DrawMode::Generate => None,
        };

        let scene = join_captions(&request.global_caption, &request.background_caption);
        let subjects: Vec<SubjectDraw> = request
            .subjects
            .par_iter()
            .map(|s| {
                let seed = derive_seed(request.seed, &format!("subject:{}", s.id));
                generate_subject_image(&denoiser, &schedule, s, &scene, self.subject_canvas, seed)
            })
            .collect::<Result<_, _>>()?;

        let segments: Vec<(RgbImage, crate::layout::BoundingBox)> =
            subjects.iter().zip(&request.subjects).map(|(d, s)| (d.image.clone(), s.bbox)).collect();
        let (source, mask) = compose_guidance(&segments, frame);
        let guidance = forward_diffuse(&source, mask, &schedule, derive_seed(request.seed, "guidance"))?;

        let mut contexts = Vec::new();
        for s in &request.subjects {
            contexts.extend(denoise::subject_contexts(s, |b| *b, frame)?);
        }
        let global = encode_text(&scene);
        let inputs = DenoiseInputs { global: &global, contexts: &contexts };
        let init = gaussian_latent(h, w, request.seed, "latent");

        let edit_cells = match (request.mode, request.edit_region) {
            (DrawMode::Edit, Some(region)) => Some(rasterize_mask_contained(&region, frame, h, w)),
            _ => None,
        };
        let keep = edit_cells.as_ref().map(BinaryMask::complement);
        let clamp = match (&prior, &keep) {
            (Some(p), Some(k)) => Some(Clamp { keep: k, prior: &p.denoise }),
            _ => None,
        };
        let g = params.guidance.then_some((&guidance, params.r));
        let denoise = blended_denoise(&denoiser, &schedule, init, &inputs, g, clamp, record)?;

        let image = decode(&denoise.final_latent, frame);
        let png = image.to_png()?;
        let per_subject = subjects
            .iter()
            .zip(&request.subjects)
            .map(|(d, s)| SubjectResult { id: s.id.clone(), crop_box: s.bbox, embedding: d.embedding.clone() })
            .collect();
        let subject_masks = request
            .subjects
            .iter()
            .map(|s| (s.id.clone(), crate::layout::rasterize_mask(&s.bbox, frame, h, w)))
            .collect();
        let diagnostics = diagnostics(request, &schedule, &subjects, &denoise, edit_cells.as_ref());
        let response = DrawResponse { schema_version: DRAW_SCHEMA_VERSION, frame, image: png, per_subject, diagnostics };
        Ok(DrawOutcome { response, image, denoise, guidance, subjects, subject_masks, edit_cells })
    }
}

fn join_captions(global: &str, background: &str) -> String {
    match (global.trim().is_empty(), background.trim().is_empty()) {
        (false, false) => format!("{}, {}", global.trim(), background.trim()),
        (false, true) => global.trim().to_string(),
        (true, _) => background.trim().to_string(),
    }
}

fn diagnostics(
    request: &DrawRequest,
    schedule: &DiffusionSchedule,
    subjects: &[SubjectDraw],
    denoise: &DenoiseOutcome,
    edit_cells: Option<&BinaryMask>,
) -> BTreeMap<String, Value> {
    let p = request.params;
    let mut d = BTreeMap::new();
    d.insert("drawer".into(), json!("toy"));
    d.insert("mode".into(), json!(request.mode));
    d.insert("steps".into(), json!(schedule.steps()));
    d.insert("params".into(), json!(p));
    let subject_steps: BTreeMap<String, usize> = subjects.iter().map(|s| (s.id.to_string(), s.steps_run)).collect();
    d.insert("subject_steps".into(), json!(subject_steps));
    let image_branch: BTreeMap<String, bool> = subjects.iter().map(|s| (s.id.to_string(), s.image_branch)).collect();
    d.insert("image_branch".into(), json!(image_branch));
    let injected: Vec<usize> = denoise.steps.iter().filter(|s| s.injected).map(|s| s.t).collect();
    d.insert("injection_steps".into(), json!(injected));
    if let Some(cells) = edit_cells {
        d.insert("edit_cells".into(), json!(cells.count()));
    }
    if request.trace {
        d.insert("trace".into(), json!(denoise.steps));
    }
    d
}

impl Drawer for ToyDrawer {
    fn draw(&self, request: &DrawRequest) -> Result<DrawResponse, DrawError> {
        Ok(self.run(request, false)?.response)
    }

    fn capabilities(&self) -> Result<Capabilities, DrawError> {
        Ok(Capabilities {
            schema_version: DRAW_SCHEMA_VERSION,
            drawer: "toy".into(),
            modes: vec![DrawMode::Generate, DrawMode::Edit],
            embedding_dim: IMAGE_EMBED_DIM,
            embedding_provenance: Provenance::ToyEncoder,
            latent_factor: LATENT_FACTOR,
            latent_channels: LATENT_CHANNELS,
            subject_canvas: self.subject_canvas,
            max_steps: MAX_STEPS,
            max_frame_side: MAX_FRAME_SIDE,
            trace: true,
        })
    }
}

/// Per-subject in-mask response of a final latent, using each subject's mean
/// guidance latent as its direction.
pub fn subject_locality(final_latent: &LatentTensor, guidance: &GuidanceSet, masks: &[(SubjectId, BinaryMask)]) -> Vec<(SubjectId, f64)> {
    masks
        .iter()
        .map(|(id, m)| {
            let dir = masked_mean(&guidance.clean, m);
            (id.clone(), response_fraction(final_latent, m, &dir))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BoundingBox, FrameSize};

    fn two_subjects(seed: u64) -> DrawRequest {
        let mut r = DrawRequest::new(FrameSize::new(256, 256), seed);
        r.global_caption = "a cat and a dog in a garden".into();
        r.background_caption = "a sunny garden".into();
        r.subjects = vec![
            DrawSubject {
                id: SubjectId::subject(1),
                caption: "a grey cat".into(),
                bbox: BoundingBox::new(16, 64, 96, 112),
                components: vec![],
                embedding: None,
            },
            DrawSubject {
                id: SubjectId::subject(2),
                caption: "a brown dog".into(),
                bbox: BoundingBox::new(136, 72, 104, 104),
                components: vec![DrawComponent {
                    caption: "head".into(),
                    bbox: BoundingBox::new(136, 72, 48, 40),
                    id: SubjectId::component(2, 1),
                }],
                embedding: None,
            },
        ];
        r
    }

    #[test]
    fn two_subject_diagnostics() {
        let mut req = two_subjects(4);
        req.trace = true;
        let out = ToyDrawer::default().run(&req, false).unwrap();
        let d = &out.response.diagnostics;
        assert_eq!(d["subject_steps"], json!({"1": 3, "2": 3}));
        assert_eq!(d["injection_steps"], json!([29]));
        assert_eq!(d["trace"].as_array().unwrap().len(), 30);
        assert_eq!(d["image_branch"], json!({"1": false, "2": false}));
        out.response.check_against(&req).unwrap();
        assert_eq!(png_dimensions(&out.response.image).unwrap(), (256, 256));
        assert_eq!(out.response.per_subject.len(), 2);
        assert_eq!(out.response.per_subject[0].embedding.dim, IMAGE_EMBED_DIM);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let d = ToyDrawer::default();
        let a = d.draw(&two_subjects(4)).unwrap();
        assert_eq!(a, d.draw(&two_subjects(4)).unwrap());
        assert_ne!(a.image, d.draw(&two_subjects(5)).unwrap().image);
    }

    #[test]
    fn zero_subjects_is_vanilla() {
        let mut req = DrawRequest::new(FrameSize::new(64, 48), 1);
        req.global_caption = "an empty beach".into();
        let on = ToyDrawer::default().run(&req, true).unwrap();
        req.params.guidance = false;
        let off = ToyDrawer::default().run(&req, true).unwrap();
        assert_eq!(on.denoise.final_latent, off.denoise.final_latent);
        assert_eq!(on.response.image, off.response.image);
        assert!(on.response.per_subject.is_empty());
    }

    #[test]
    fn guidance_off_matches_vanilla_trajectory() {
        let mut req = two_subjects(8);
        req.params.guidance = false;
        let off = ToyDrawer::default().run(&req, true).unwrap();
        assert!(off.denoise.steps.iter().all(|s| !s.injected));
        // Vanilla: same seed, same contexts, no guidance set at all.
        let schedule = DiffusionSchedule::linear(30).unwrap();
        let den = ToyDenoiser::new(0, 0.2, 0.7);
        let mut ctx = Vec::new();
        for s in &req.subjects {
            ctx.extend(denoise::subject_contexts(s, |b| *b, req.frame).unwrap());
        }
        let global = encode_text("a cat and a dog in a garden, a sunny garden");
        let init = gaussian_latent(32, 32, 8, "latent");
        let vanilla =
            blended_denoise(&den, &schedule, init, &DenoiseInputs { global: &global, contexts: &ctx }, None, None, true).unwrap();
        assert_eq!(vanilla.trajectory, off.denoise.trajectory);
    }

    #[test]
    fn edit_keeps_outside_pixels() {
        let d = ToyDrawer::default();
        let base = two_subjects(3);
        let before = d.run(&base, false).unwrap();
        let mut edit = base.clone();
        edit.seed = 99;
        edit.subjects[1].caption = "a white dog".into();
        edit.mode = DrawMode::Edit;
        let region = edit.subjects[1].bbox;
        edit.edit_region = Some(region);
        edit.prior = Some(Box::new(base.clone()));
        let after = d.run(&edit, false).unwrap();
        assert!(after.edit_cells.as_ref().unwrap().count() > 0);
        let mut changed_inside = false;
        for y in 0..256 {
            for x in 0..256 {
                let inside = x >= region.x && (x as u64) < region.right() && y >= region.y && (y as u64) < region.bottom();
                let (a, b) = (before.image.pixel(x, y), after.image.pixel(x, y));
                if inside {
                    changed_inside |= a != b;
                } else {
                    assert_eq!(a, b, "pixel ({x}, {y}) outside the edit region changed");
                }
            }
        }
        assert!(changed_inside);

        let mut whole = edit.clone();
        whole.edit_region = Some(base.frame.full_box());
        whole.mode = DrawMode::Edit;
        let fresh = {
            let mut g = edit.clone();
            g.mode = DrawMode::Generate;
            g.edit_region = None;
            g.prior = None;
            d.run(&g, false).unwrap()
        };
        assert_eq!(d.run(&whole, false).unwrap().denoise.final_latent, fresh.denoise.final_latent);

        let mut none = edit.clone();
        none.edit_region = Some(BoundingBox::new(3, 3, 4, 4));
        assert_eq!(d.run(&none, false).unwrap().response.image, before.response.image);
    }

    #[test]
    fn locality_improves_with_guidance() {
        let d = ToyDrawer::default();
        let req = two_subjects(11);
        let on = d.run(&req, false).unwrap();
        let mut off_req = req.clone();
        off_req.params.guidance = false;
        let off = d.run(&off_req, false).unwrap();
        let a = subject_locality(&on.denoise.final_latent, &on.guidance, &on.subject_masks);
        let b = subject_locality(&off.denoise.final_latent, &on.guidance, &on.subject_masks);
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert!(x > y, "{x} <= {y}");
        }
    }

    #[test]
    fn capabilities_advertise_toy() {
        let c = ToyDrawer::default().capabilities().unwrap();
        assert_eq!(c.drawer, "toy");
        assert_eq!(c.embedding_dim, 64);
    }
}
