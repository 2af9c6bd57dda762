//! Short clips of one shape translating across a wrap-around canvas.
//!
//! A class is a (shape, direction) pair. The start position is uniform over
//! the canvas, so a single frame tells the shape but not the direction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

use super::render::{Canvas, Primitive, NUM_PRIMITIVES};
use super::text::gen_caption;

pub const NUM_CLASSES: usize = NUM_PRIMITIVES;
pub const CLIP_FRAMES: usize = 8;
/// Pixels travelled per frame.
pub const CLIP_SPEED: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub primitive: Primitive,
    pub start: (f64, f64),
    pub speed: f64,
    pub seed: u64,
}

/// Frames `(T, H, W, C)` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub caption: Vec<usize>,
    pub meta: ClipMeta,
}

/// Center of the moving shape in frame `t`.
pub fn position(start: (f64, f64), primitive: Primitive, speed: f64, t: usize) -> (f64, f64) {
    let (sx, sy) = primitive.direction.step();
    (start.0 + sx * speed * t as f64, start.1 + sy * speed * t as f64)
}

pub fn gen_shapes_clip(class_id: usize, seed: u64) -> Result<VideoClip> {
    gen_shapes_clip_on(&Canvas::default(), class_id, seed)
}

pub fn gen_shapes_clip_on(canvas: &Canvas, class_id: usize, seed: u64) -> Result<VideoClip> {
    let primitive = Primitive::from_id(class_id)
        .ok_or_else(|| TurboError::Data(format!("class {class_id} out of range [0,{NUM_CLASSES})")))?;
    let mut rng = rng_from(derive_seed(&[seed, 0x5a]));
    let start = (rng.random_range(0.0..canvas.width as f64), rng.random_range(0.0..canvas.height as f64));
    let flen = canvas.frame_len();
    let mut data = vec![0f32; CLIP_FRAMES * flen];
    for (t, frame) in data.chunks_mut(flen).enumerate() {
        let c = position(start, primitive, CLIP_SPEED, t);
        canvas.draw(frame, Some((primitive.shape, c)), &mut rng);
    }
    let frames = Tensor::new(vec![CLIP_FRAMES, canvas.height, canvas.width, canvas.channels], data)?;
    Ok(VideoClip {
        frames,
        label: class_id,
        caption: gen_caption(class_id, derive_seed(&[seed, 0xca]))?,
        meta: ClipMeta { primitive, start, speed: CLIP_SPEED, seed },
    })
}
