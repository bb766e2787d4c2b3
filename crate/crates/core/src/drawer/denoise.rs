//! The toy denoiser and subject-initialized generation: per-subject partial draws,
//! guidance composition, forward noising, blended reverse denoising and
//! region-clamped editing.

use rand::Rng;
use rand_distr::StandardNormal;

use super::codec::{decode, embedding_tokens, encode, encode_image, encode_text, latent_dims, LATENT_CHANNELS, TEXT_DIM};
use super::image::RgbImage;
use super::protocol::DrawSubject;
use super::schedule::DiffusionSchedule;
use super::DrawError;
use crate::attention::{EmbeddingSequence, PUNetLayer, ProjectionSource, ProjectionWeights, SubjectContext};
use crate::layout::{rasterize_mask, resize_centered, BoundingBox, FrameSize};
use crate::registry::{EmbeddingVector, SubjectId};
use crate::seed::{derive_seed, stream};
use crate::tensor::{BinaryMask, LatentTensor};

/// Standard deviation of the Gaussian the toy model places around the attention
/// output when estimating the clean latent.
pub const CLEAN_SPREAD: f64 = std::f64::consts::FRAC_1_SQRT_2;
pub const KEY_DIM: usize = 16;

/// A fixed, seeded stand-in for a diffusion backbone: one subject-aware attention
/// layer whose fused output is blended into a clean-latent estimate, followed by
/// a deterministic DDIM update.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub seed: u64,
    pub layer: PUNetLayer,
}

/// Which attention branches had nothing to attend to at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BranchFlags {
    pub text_degenerate: bool,
    pub image_degenerate: bool,
}

impl ToyDenoiser {
    pub fn new(seed: u64, alpha: f64, beta: f64) -> Self {
        let text = ProjectionWeights::seeded(
            LATENT_CHANNELS,
            TEXT_DIM,
            KEY_DIM,
            ProjectionSource::TextBranch,
            derive_seed(seed, "weights:text"),
        );
        let image = ProjectionWeights::seeded(
            LATENT_CHANNELS,
            TEXT_DIM,
            KEY_DIM,
            ProjectionSource::ImageBranch,
            derive_seed(seed, "weights:image"),
        );
        Self { seed, layer: PUNetLayer { text, image, alpha, beta } }
    }

    /// Posterior mean of the clean latent given `Ẑ_t`, treating the clean latent
    /// as `N(Z*, σ²I)` with `Z*` the fused attention output:
    /// `x̂₀ = Z* + k·(Ẑ_t − √ᾱ_t·Z*)`, `k = σ²√ᾱ_t / (σ²ᾱ_t + 1 − ᾱ_t)`.
    pub fn predict_clean(
        &self,
        z_hat: &LatentTensor,
        alpha_bar: f64,
        global: &EmbeddingSequence,
        contexts: &[SubjectContext],
    ) -> Result<(LatentTensor, BranchFlags), DrawError> {
        let out = self.layer.forward(z_hat, global, contexts)?;
        let mut x0 = out.fused;
        let s2 = CLEAN_SPREAD * CLEAN_SPREAD;
        let root = alpha_bar.sqrt();
        let gain = s2 * root / (s2 * alpha_bar + 1.0 - alpha_bar);
        for (x, z) in x0.data_mut().iter_mut().zip(z_hat.data()) {
            *x += gain * (z - root * *x);
        }
        Ok((x0, BranchFlags { text_degenerate: out.z_f.degenerate, image_degenerate: out.z_h.degenerate }))
    }
}

/// DDIM update from step `t` to `t − 1`; at `t = 0` the result is `x̂₀`.
fn ddim_step(z_hat: &LatentTensor, x0: &LatentTensor, t: usize, schedule: &DiffusionSchedule) -> LatentTensor {
    if t == 0 {
        return x0.clone();
    }
    let (a_t, a_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let (s_t, n_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (s_p, n_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let mut next = x0.clone();
    for (o, (&x, &z)) in next.data_mut().iter_mut().zip(x0.data().iter().zip(z_hat.data())) {
        let eps = (z - s_t * x) / n_t;
        *o = s_p * x + n_p * eps;
    }
    next
}

pub fn gaussian_latent(h: usize, w: usize, seed: u64, label: &str) -> LatentTensor {
    let mut rng = stream(seed, label);
    let data = (0..h * w * LATENT_CHANNELS).map(|_| rng.sample(StandardNormal)).collect();
    LatentTensor::from_vec(h, w, LATENT_CHANNELS, data).expect("sizes agree")
}

/// Noised guidance latents `G_t` for every step, the composite mask `M` and the
/// guidance image they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSet {
    pub frames: Vec<LatentTensor>,
    pub mask: BinaryMask,
    pub source: RgbImage,
    /// `encode(I_G)`, equal to `frames[0]`.
    pub clean: LatentTensor,
}

/// Pastes each segment, resized to its box, onto a blank canvas in order. `M` is
/// the union of the boxes' latent masks.
pub fn compose_guidance(segments: &[(RgbImage, BoundingBox)], frame: FrameSize) -> (RgbImage, BinaryMask) {
    let (h, w) = latent_dims(frame);
    let mut canvas = RgbImage::blank(frame.width, frame.height);
    let mut mask = BinaryMask::empty(h, w);
    for (img, bbox) in segments {
        canvas.paste(&img.resize(bbox.w, bbox.h), bbox.x, bbox.y);
        mask = mask.union(&rasterize_mask(bbox, frame, h, w)).expect("same latent grid");
    }
    (canvas, mask)
}

/// `G_t = √ᾱ_t·encode(I_G) + √(1−ᾱ_t)·ε_t`, with one noise draw per step from a seeded stream.
pub fn forward_diffuse(source: &RgbImage, mask: BinaryMask, schedule: &DiffusionSchedule, seed: u64) -> Result<GuidanceSet, DrawError> {
    let clean = encode(source);
    if mask.shape() != (clean.height(), clean.width()) {
        return Err(DrawError::Shape(crate::tensor::TensorError::ShapeMismatch(format!(
            "guidance mask {:?} against latent {:?}",
            mask.shape(),
            (clean.height(), clean.width())
        ))));
    }
    let mut rng = stream(seed, "guidance");
    let mut frames = Vec::with_capacity(schedule.steps());
    for t in 0..schedule.steps() {
        let a = schedule.alpha_bar(t);
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        let mut g = clean.clone();
        for v in g.data_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            // Keep t = 0 exact: 0·ε is skipped rather than added.
            *v = if t == 0 { *v } else { s * *v + n * eps };
        }
        frames.push(g);
    }
    Ok(GuidanceSet { frames, mask, source: source.clone(), clean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    pub t: usize,
    /// State before guidance injection.
    pub z: LatentTensor,
    /// Input to the denoiser at this step.
    pub z_hat: LatentTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub injected: bool,
    pub injected_cells: usize,
    pub clamped_cells: usize,
    pub text_degenerate: bool,
    pub image_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutcome {
    pub final_latent: LatentTensor,
    pub steps: Vec<StepRecord>,
    /// One state per step in visiting order, when recording was requested.
    pub trajectory: Vec<DenoiseState>,
}

impl DenoiseOutcome {
    fn state_at(&self, t: usize) -> Option<&DenoiseState> {
        self.trajectory.iter().find(|s| s.t == t)
    }
}

/// Holds cells outside an edit region to a previous trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Clamp<'a> {
    /// Cells that keep their previous values.
    pub keep: &'a BinaryMask,
    pub prior: &'a DenoiseOutcome,
}

fn copy_cells(dst: &mut LatentTensor, src: &LatentTensor, cells: &BinaryMask) -> usize {
    let c = dst.channels();
    let mut n = 0;
    let s = src.data();
    let d = dst.data_mut();
    for (i, &on) in cells.bits().iter().enumerate() {
        if on {
            d[i * c..(i + 1) * c].copy_from_slice(&s[i * c..(i + 1) * c]);
            n += 1;
        }
    }
    n
}

pub struct DenoiseInputs<'a> {
    pub global: &'a EmbeddingSequence,
    pub contexts: &'a [SubjectContext],
}

/// Full reverse process from `init` at `t = T−1` down to `t = 0`. With
/// `guidance = Some((G, r))`, every step with `t ≥ r·T` denoises
/// `Ẑ_t = Z_t⊙(1−M) + G_t⊙M` instead of `Z_t`. With a clamp, cells it keeps are
/// reset to the prior trajectory before every step and in the final latent.
pub fn blended_denoise(
    denoiser: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    init: LatentTensor,
    inputs: &DenoiseInputs<'_>,
    guidance: Option<(&GuidanceSet, f64)>,
    clamp: Option<Clamp<'_>>,
    record: bool,
) -> Result<DenoiseOutcome, DrawError> {
    let steps = schedule.steps();
    if let Some((g, r)) = guidance {
        if !(0.0..=1.0).contains(&r) {
            return Err(DrawError::SchemaViolation(format!("r = {r} is outside [0, 1]")));
        }
        if g.frames.len() != steps {
            return Err(DrawError::SchemaViolation(format!("guidance has {} frames for {steps} steps", g.frames.len())));
        }
        g.frames[0].ensure_same_shape(&init)?;
        if g.mask.shape() != (init.height(), init.width()) {
            return Err(DrawError::Shape(crate::tensor::TensorError::ShapeMismatch("guidance mask shape".into())));
        }
    }
    if let Some(cl) = clamp {
        if cl.prior.trajectory.len() != steps {
            return Err(DrawError::MissingPriorTurn);
        }
        cl.prior.final_latent.ensure_same_shape(&init)?;
    }

    let mut z = init;
    let mut records = Vec::with_capacity(steps);
    let mut trajectory = Vec::new();
    for t in (0..steps).rev() {
        let clamped_cells = match clamp {
            Some(cl) => copy_cells(&mut z, &cl.prior.state_at(t).ok_or(DrawError::MissingPriorTurn)?.z, cl.keep),
            None => 0,
        };
        let (z_hat, injected_cells, injected) = match guidance {
            Some((g, r)) if schedule.injects(t, r) => {
                let mut blended = z.clone();
                let n = copy_cells(&mut blended, &g.frames[t], &g.mask);
                (blended, n, true)
            }
            _ => (z.clone(), 0, false),
        };
        let (x0, flags) = denoiser.predict_clean(&z_hat, schedule.alpha_bar(t), inputs.global, inputs.contexts)?;
        let next = ddim_step(&z_hat, &x0, t, schedule);
        records.push(StepRecord {
            t,
            injected,
            injected_cells,
            clamped_cells,
            text_degenerate: flags.text_degenerate,
            image_degenerate: flags.image_degenerate,
        });
        if record {
            trajectory.push(DenoiseState { t, z: std::mem::replace(&mut z, next), z_hat });
        } else {
            z = next;
        }
    }
    if let Some(cl) = clamp {
        copy_cells(&mut z, &cl.prior.final_latent, cl.keep);
    }
    z.check_finite()?;
    Ok(DenoiseOutcome { final_latent: z, steps: records, trajectory })
}

/// One subject drawn alone on its canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDraw {
    pub id: SubjectId,
    /// The subject's box on the canvas.
    pub canvas_box: BoundingBox,
    /// Canvas image cropped to `canvas_box`; this is the extracted segment.
    pub image: RgbImage,
    /// Clean-latent estimate of the whole canvas after the last step.
    pub latent: LatentTensor,
    pub embedding: EmbeddingVector,
    pub steps_run: usize,
    pub image_branch: bool,
}

fn map_box(b: &BoundingBox, from: &BoundingBox, to: &BoundingBox, canvas: u32) -> BoundingBox {
    let sx = to.w as f64 / from.w as f64;
    let sy = to.h as f64 / from.h as f64;
    let x0 = (to.x as f64 + (b.x as f64 - from.x as f64) * sx).round().clamp(0.0, canvas as f64 - 1.0) as u32;
    let y0 = (to.y as f64 + (b.y as f64 - from.y as f64) * sy).round().clamp(0.0, canvas as f64 - 1.0) as u32;
    let x1 = (to.x as f64 + (b.right() as f64 - from.x as f64) * sx).round().clamp(x0 as f64 + 1.0, canvas as f64) as u32;
    let y1 = (to.y as f64 + (b.bottom() as f64 - from.y as f64) * sy).round().clamp(y0 as f64 + 1.0, canvas as f64) as u32;
    BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Text and image contexts for a subject and its components on a grid.
pub(crate) fn subject_contexts(
    subject: &DrawSubject,
    place: impl Fn(&BoundingBox) -> BoundingBox,
    frame: FrameSize,
) -> Result<Vec<SubjectContext>, DrawError> {
    let (h, w) = latent_dims(frame);
    let image = subject.embedding.as_ref().map(embedding_tokens).transpose()?;
    let mut out = vec![SubjectContext {
        id: subject.id.clone(),
        f: encode_text(&subject.caption),
        h: image,
        mask: rasterize_mask(&place(&subject.bbox), frame, h, w),
    }];
    for c in &subject.components {
        out.push(SubjectContext {
            id: c.id.clone(),
            f: encode_text(&c.caption),
            h: None,
            mask: rasterize_mask(&place(&c.bbox), frame, h, w),
        });
    }
    Ok(out)
}

/// Runs the first `⌈T/10⌉` reverse steps for one subject on a `canvas`×`canvas`
/// frame, with the subject box centred and scaled to the canvas.
pub fn generate_subject_image(
    denoiser: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    subject: &DrawSubject,
    scene_caption: &str,
    canvas: u32,
    seed: u64,
) -> Result<SubjectDraw, DrawError> {
    let frame = FrameSize::new(canvas, canvas);
    let canvas_box = resize_centered(&subject.bbox, canvas);
    let contexts = subject_contexts(subject, |b| map_box(b, &subject.bbox, &canvas_box, canvas), frame)?;
    let global = encode_text(&format!("{}, {scene_caption}", subject.caption));
    let (h, w) = latent_dims(frame);
    let mut z = gaussian_latent(h, w, seed, &format!("subject:{}", subject.id));
    let steps = schedule.steps();
    let budget = schedule.subject_steps();
    let mut x0 = z.clone();
    for t in (steps - budget..steps).rev() {
        let (est, _) = denoiser.predict_clean(&z, schedule.alpha_bar(t), &global, &contexts)?;
        z = ddim_step(&z, &est, t, schedule);
        x0 = est;
    }
    let image = decode(&x0, frame).crop(&canvas_box);
    let embedding = encode_image(&image);
    Ok(SubjectDraw {
        id: subject.id.clone(),
        canvas_box,
        image,
        latent: x0,
        embedding,
        steps_run: budget,
        image_branch: contexts[0].h.is_some(),
    })
}

/// Share of a subject's response that falls inside its mask. The response of a
/// cell is its squared cosine with `direction`, zero when it points away; with a
/// zero direction every nonzero cell responds fully.
pub fn response_fraction(latent: &LatentTensor, mask: &BinaryMask, direction: &[f64]) -> f64 {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c = latent.channels();
    let mut inside = 0.0;
    let mut total = 0.0;
    for (i, cell) in latent.data().chunks_exact(c).enumerate() {
        let len = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = if len == 0.0 {
            0.0
        } else if norm == 0.0 {
            1.0
        } else {
            let cos = cell.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>() / (norm * len);
            cos.max(0.0).powi(2)
        };
        total += r;
        if mask.bits()[i] {
            inside += r;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}

/// Mean latent value over the masked cells of `latent`.
pub fn masked_mean(latent: &LatentTensor, mask: &BinaryMask) -> Vec<f64> {
    let c = latent.channels();
    let mut acc = vec![0.0; c];
    let n = mask.count().max(1) as f64;
    for (i, cell) in latent.data().chunks_exact(c).enumerate() {
        if mask.bits()[i] {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += v / n;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::linear(30).unwrap()
    }

    fn subject(id: u32, bbox: BoundingBox) -> DrawSubject {
        DrawSubject { id: SubjectId::subject(id), caption: format!("a red fox number {id}"), bbox, components: vec![], embedding: None }
    }

    #[test]
    fn forward_diffuse_boundary_and_determinism() {
        let img = RgbImage::from_fn(32, 24, |x, y| [x as f64 * 6.0, y as f64 * 9.0, 50.0]);
        let s = schedule();
        let mask = BinaryMask::full(3, 4);
        let g = forward_diffuse(&img, mask.clone(), &s, 5).unwrap();
        assert_eq!(g.frames.len(), 30);
        assert_eq!(g.frames[0], encode(&img));
        assert_eq!(g, forward_diffuse(&img, mask.clone(), &s, 5).unwrap());
        assert_ne!(g.frames[10], forward_diffuse(&img, mask, &s, 6).unwrap().frames[10]);
    }

    #[test]
    fn compose_guidance_examples() {
        let frame = FrameSize::new(64, 64);
        let (img, m) = compose_guidance(&[], frame);
        assert_eq!(img, RgbImage::blank(64, 64));
        assert!(m.is_empty());

        let seg = RgbImage::from_fn(64, 64, |x, y| [x as f64, y as f64, 3.0]);
        let (img, m) = compose_guidance(&[(seg.clone(), frame.full_box())], frame);
        assert_eq!(img, seg);
        assert_eq!(m.count(), 64);

        let red = RgbImage::filled(5, 5, [255.0, 0.0, 0.0]);
        let a = BoundingBox::new(0, 0, 16, 16);
        let b = BoundingBox::new(40, 40, 20, 10);
        let (img, m) = compose_guidance(&[(red.clone(), a), (red, b)], frame);
        for y in 0..64 {
            for x in 0..64 {
                let inside = |bb: &BoundingBox| x >= bb.x && x < bb.right() as u32 && y >= bb.y && y < bb.bottom() as u32;
                let expect = if inside(&a) || inside(&b) { [255.0, 0.0, 0.0] } else { [127.5; 3] };
                assert_eq!(img.pixel(x, y), expect, "({x}, {y})");
            }
        }
        assert_eq!(m.count(), 4 + 2);
    }

    #[test]
    fn subject_generation_budget_and_determinism() {
        let s = schedule();
        let d = ToyDenoiser::new(0, 0.2, 0.7);
        let subj = subject(1, BoundingBox::new(10, 20, 300, 200));
        let a = generate_subject_image(&d, &s, &subj, "a meadow", 256, 9).unwrap();
        assert_eq!(a.steps_run, 3);
        assert_eq!(a.canvas_box, BoundingBox::new(0, 42, 256, 171));
        assert_eq!((a.image.width(), a.image.height()), (256, 171));
        assert!(!a.image_branch);
        assert_eq!(a, generate_subject_image(&d, &s, &subj, "a meadow", 256, 9).unwrap());
        let mut locked = subj.clone();
        locked.embedding = Some(a.embedding.clone());
        assert!(generate_subject_image(&d, &s, &locked, "a meadow", 256, 9).unwrap().image_branch);
    }

    #[test]
    fn empty_mask_guidance_matches_vanilla() {
        let s = DiffusionSchedule::linear(8).unwrap();
        let d = ToyDenoiser::new(1, 0.2, 0.7);
        let global = encode_text("a quiet street");
        let inputs = DenoiseInputs { global: &global, contexts: &[] };
        let init = gaussian_latent(4, 4, 2, "latent");
        let g = forward_diffuse(&RgbImage::from_fn(32, 32, |x, _| [x as f64 * 8.0, 0.0, 0.0]), BinaryMask::empty(4, 4), &s, 3).unwrap();
        let vanilla = blended_denoise(&d, &s, init.clone(), &inputs, None, None, true).unwrap();
        let empty = blended_denoise(&d, &s, init, &inputs, Some((&g, 0.0)), None, true).unwrap();
        assert_eq!(vanilla.final_latent, empty.final_latent);
        assert_eq!(vanilla.trajectory, empty.trajectory);
    }

    #[test]
    fn injection_is_exact_on_mask() {
        let s = DiffusionSchedule::linear(10).unwrap();
        let d = ToyDenoiser::new(1, 0.2, 0.7);
        let global = encode_text("a quiet street");
        let inputs = DenoiseInputs { global: &global, contexts: &[] };
        let mask = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c > 0);
        let g = forward_diffuse(&RgbImage::from_fn(32, 32, |x, y| [x as f64 * 8.0, y as f64, 0.0]), mask.clone(), &s, 3).unwrap();
        let out = blended_denoise(&d, &s, gaussian_latent(4, 4, 2, "latent"), &inputs, Some((&g, 0.5)), None, true).unwrap();
        for st in &out.trajectory {
            for r in 0..4 {
                for c in 0..4 {
                    let expect = if st.t >= 5 && mask.get(r, c) { g.frames[st.t].cell(r, c) } else { st.z.cell(r, c) };
                    assert_eq!(st.z_hat.cell(r, c), expect);
                }
            }
        }
        let injected: Vec<usize> = out.steps.iter().filter(|s| s.injected).map(|s| s.t).collect();
        assert_eq!(injected, vec![9, 8, 7, 6, 5]);
    }

    #[test]
    fn clamp_everything_reproduces_prior() {
        let s = DiffusionSchedule::linear(6).unwrap();
        let d = ToyDenoiser::new(1, 0.2, 0.7);
        let global = encode_text("a quiet street");
        let inputs = DenoiseInputs { global: &global, contexts: &[] };
        let prior = blended_denoise(&d, &s, gaussian_latent(3, 3, 2, "latent"), &inputs, None, None, true).unwrap();
        let keep = BinaryMask::full(3, 3);
        let other = encode_text("a loud street");
        let edited = blended_denoise(
            &d,
            &s,
            gaussian_latent(3, 3, 99, "latent"),
            &DenoiseInputs { global: &other, contexts: &[] },
            None,
            Some(Clamp { keep: &keep, prior: &prior }),
            false,
        )
        .unwrap();
        assert_eq!(edited.final_latent, prior.final_latent);
        let none = BinaryMask::empty(3, 3);
        let fresh = blended_denoise(&d, &s, gaussian_latent(3, 3, 2, "latent"), &inputs, None, Some(Clamp { keep: &none, prior: &prior }), false).unwrap();
        assert_eq!(fresh.final_latent, prior.final_latent);
        let unrecorded = blended_denoise(&d, &s, gaussian_latent(3, 3, 2, "latent"), &inputs, None, None, false).unwrap();
        assert!(matches!(
            blended_denoise(&d, &s, gaussian_latent(3, 3, 2, "latent"), &inputs, None, Some(Clamp { keep: &none, prior: &unrecorded }), false),
            Err(DrawError::MissingPriorTurn)
        ));
    }

    #[test]
    fn response_fraction_bounds() {
        let z = LatentTensor::filled(2, 2, 3, 1.0);
        let half = BinaryMask::from_fn(2, 2, |_, c| c == 0);
        assert!((response_fraction(&z, &half, &[1.0, 0.0, 0.0]) - 0.5).abs() < 1e-12);
        assert_eq!(response_fraction(&z, &BinaryMask::full(2, 2), &[0.0; 3]), 1.0);
        assert_eq!(response_fraction(&LatentTensor::zeros(2, 2, 3), &half, &[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(masked_mean(&z, &half), vec![1.0; 3]);
    }
}
