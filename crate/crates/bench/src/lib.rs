//! Fixtures shared by the benchmarks under `benches/`.

use autostudio_core::attention::{EmbeddingSequence, PUNetLayer, ProjectionSource, ProjectionWeights, SubjectContext};
use autostudio_core::drawer::{encode_text, gaussian_latent, DrawComponent, DrawRequest, DrawSubject, KEY_DIM, LATENT_CHANNELS, TEXT_DIM};
use autostudio_core::layout::{rasterize_mask, BoundingBox, FrameSize};
use autostudio_core::registry::SubjectId;
use autostudio_core::tensor::LatentTensor;

/// One attention layer over an `n`×`n` latent with `subjects` side-by-side subjects.
pub struct LayerFixture {
    pub layer: PUNetLayer,
    pub z: LatentTensor,
    pub global: EmbeddingSequence,
    pub contexts: Vec<SubjectContext>,
}

pub fn layer_fixture(n: usize, subjects: u32) -> LayerFixture {
    let channels = LATENT_CHANNELS;
    let layer = PUNetLayer {
        text: ProjectionWeights::seeded(channels, TEXT_DIM, KEY_DIM, ProjectionSource::TextBranch, 1),
        image: ProjectionWeights::seeded(channels, TEXT_DIM, KEY_DIM, ProjectionSource::ImageBranch, 2),
        alpha: 0.2,
        beta: 0.7,
    };
    let z = gaussian_latent(n, n, 3, "bench");
    let side = (n * 8) as u32;
    let frame = FrameSize::new(side, side);
    let width = side / (subjects + 1);
    let contexts = (0..subjects)
        .map(|i| {
            let bbox = BoundingBox::new(width / 2 + i * width, side / 4, width, side / 2);
            SubjectContext {
                id: SubjectId::subject(i + 1),
                f: encode_text(&format!("subject number {i}")),
                h: Some(encode_text(&format!("the look of subject {i}"))),
                mask: rasterize_mask(&bbox, frame, n, n),
            }
        })
        .collect();
    LayerFixture { layer, z, global: encode_text("a scene with several subjects"), contexts }
}

/// Two subjects, one with a component, on a `side`×`side` frame.
pub fn draw_request(side: u32, seed: u64) -> DrawRequest {
    let mut r = DrawRequest::new(FrameSize::new(side, side), seed);
    r.global_caption = "a cat and a dog in a garden".into();
    r.background_caption = "a sunny garden".into();
    let unit = side / 16;
    r.subjects = vec![
        DrawSubject {
            id: SubjectId::subject(1),
            caption: "a grey cat".into(),
            bbox: BoundingBox::new(unit, 4 * unit, 6 * unit, 7 * unit),
            components: vec![],
            embedding: None,
        },
        DrawSubject {
            id: SubjectId::subject(2),
            caption: "a brown dog".into(),
            bbox: BoundingBox::new(9 * unit, 4 * unit, 6 * unit, 6 * unit),
            components: vec![DrawComponent {
                caption: "head, brown fur, the dog's head".into(),
                bbox: BoundingBox::new(9 * unit, 4 * unit, 3 * unit, 3 * unit),
                id: SubjectId::component(2, 1),
            }],
            embedding: None,
        },
    ];
    r
}
