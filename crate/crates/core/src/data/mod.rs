//! Seeded synthetic datasets standing in for real video corpora.
//!
//! Every generator is a pure function of its parameters and a seed. A
//! dataset split owns a disjoint range of sample seeds, so train, validation
//! and test never share a sample.

mod cache;
mod long;
mod render;
mod sampling;
mod shapes;
mod text;

pub use cache::{read_sample, write_sample, CacheHeader};
pub use long::{
    gen_align_sample, gen_long_video, recipe, AlignSample, LongVideo, Segment, DURATION_S, FPS, LONG_SPEED,
    NUM_ACTIVITIES, RECIPE_LEN, SEGMENT_S,
};
pub use render::{Canvas, Direction, Primitive, Shape, NUM_PRIMITIVES};
pub use sampling::{sample_long_video_frames, sample_short_clip, spread, window_around};
pub use shapes::{gen_shapes_clip, gen_shapes_clip_on, position, ClipMeta, VideoClip, CLIP_FRAMES, CLIP_SPEED, NUM_CLASSES};
pub use text::{caption_text, gen_caption, vocabulary, TextEmbedder};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::patch::{patchify, PatchGeometry};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Width of the seed range owned by each split.
const SPLIT_RANGE: u64 = 1 << 32;

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => SPLIT_RANGE,
            Split::Test => 2 * SPLIT_RANGE,
        }
    }

    /// Seed of sample `index` of this split.
    pub fn sample_seed(self, global_seed: u64, index: usize) -> u64 {
        derive_seed(&[global_seed, self.offset() + index as u64])
    }

    /// 70/10/20 division of `total` samples.
    pub fn sizes(total: usize) -> (usize, usize, usize) {
        let train = total * 7 / 10;
        let val = total / 10;
        (train, val, total - train - val)
    }
}

/// A patchified short clip ready for batching.
#[derive(Clone, Debug)]
pub struct ClipItem {
    /// `[n, P]`.
    pub patches: Tensor<f32>,
    pub label: usize,
    pub caption: Vec<usize>,
    pub seed: u64,
}

/// Class-balanced shapes clips; sample `i` has class `i % 16`.
#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub geometry: PatchGeometry,
    pub split: Split,
    pub items: Vec<ClipItem>,
}

impl ShapesDataset {
    pub fn generate(geometry: &PatchGeometry, split: Split, count: usize, global_seed: u64) -> Result<Self> {
        let items = (0..count)
            .map(|i| {
                let seed = split.sample_seed(global_seed, i);
                let clip = gen_shapes_clip(i % NUM_CLASSES, seed)?;
                Ok(ClipItem { patches: patchify(&clip.frames, geometry)?, label: clip.label, caption: clip.caption, seed })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { geometry: *geometry, split, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacks the patch rows of `indices` into `[B, n, P]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let rows: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.items[i].patches).collect();
        stack(&rows)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = parts.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let mut data = Vec::with_capacity(parts.len() * shape.iter().product::<usize>());
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(crate::TurboError::Shape(format!("cannot stack {:?} with {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    let mut out = vec![parts.len()];
    out.extend(shape);
    Tensor::new(out, data)
}

/// Activity-balanced long videos; sample `i` has activity `i % 8`.
#[derive(Clone, Debug)]
pub struct LongDataset {
    pub split: Split,
    pub videos: Vec<LongVideo>,
}

impl LongDataset {
    pub fn generate(split: Split, count: usize, global_seed: u64) -> Result<Self> {
        let videos = (0..count)
            .map(|i| gen_long_video(i % NUM_ACTIVITIES, split.sample_seed(global_seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { split, videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}
