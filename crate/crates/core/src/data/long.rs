//! Procedural long videos: an activity is an ordered recipe of four
//! shape-motion sub-actions separated by noise-only background.
//!
//! Every activity walks the four shapes in a rotated order; a direction
//! pattern then splits each rotation into two activities. The shape order
//! alone leaves two candidates, so the label needs the motion direction too.
//! Shapes move fast on a wrap-around canvas. A 32-frame sample of a 240-frame
//! video is spaced 4.6 to 7.7 frames apart, so consecutive sampled frames show
//! a 6 to 10 pixel shift that reads the right way, mostly within one 16x16 patch. A 16-frame sample is spaced
//! 9.6 to 16 frames apart, a 12 to 20 pixel shift centered on half the canvas
//! width, so the apparent direction is as often reversed as not. Denser
//! sampling is therefore the better bet even at equal token budgets.
//!
//! Frames are rendered on demand; a video is a small description plus a seed.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

use super::render::{Canvas, Primitive, Shape};
use super::text::gen_caption;

pub const NUM_ACTIVITIES: usize = 8;
pub const RECIPE_LEN: usize = 4;
pub const FPS: usize = 4;
pub const DURATION_S: usize = 60;
pub const SEGMENT_S: usize = 12;
pub const MIN_GAP_S: usize = 2;
/// Pixels travelled per frame inside a sub-action.
pub const LONG_SPEED: f64 = 1.25;

const DIRECTION_PATTERNS: [[usize; RECIPE_LEN]; 2] = [[0, 1, 2, 3], [1, 0, 3, 2]];

/// Primitive ids of the sub-actions of `activity`, in order.
pub fn recipe(activity: usize) -> Result<[usize; RECIPE_LEN]> {
    if activity >= NUM_ACTIVITIES {
        return Err(TurboError::Data(format!("activity {activity} out of range [0,{NUM_ACTIVITIES})")));
    }
    let (rot, pattern) = (activity % 4, DIRECTION_PATTERNS[activity / 4]);
    let mut out = [0; RECIPE_LEN];
    for (j, o) in out.iter_mut().enumerate() {
        *o = ((rot + j) % 4) * 4 + pattern[j];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub primitive: usize,
    /// Whole seconds, `[start_s, end_s)`.
    pub start_s: usize,
    pub end_s: usize,
    pub origin: (f64, f64),
}

impl Segment {
    pub fn contains_second(&self, s: usize) -> bool {
        (self.start_s..self.end_s).contains(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongVideo {
    pub activity: usize,
    pub segments: Vec<Segment>,
    pub fps: usize,
    pub duration_s: usize,
    pub canvas: Canvas,
    pub speed: f64,
    pub seed: u64,
}

/// Lays `lens` out in order on `[0, duration)` with random gaps of at least
/// `min_gap` before, between and after them.
fn layout(lens: &[usize], duration: usize, min_gap: usize, rng: &mut crate::rng::Rng) -> Result<Vec<usize>> {
    let gaps = lens.len() + 1;
    let used: usize = lens.iter().sum::<usize>() + gaps * min_gap;
    if used > duration {
        return Err(TurboError::Data(format!("segments need {used}s, video has {duration}s")));
    }
    let mut extra = vec![0usize; gaps];
    for _ in 0..duration - used {
        extra[rng.random_range(0..gaps)] += 1;
    }
    let mut t = 0;
    let mut starts = Vec::with_capacity(lens.len());
    for (i, &len) in lens.iter().enumerate() {
        t += min_gap + extra[i];
        starts.push(t);
        t += len;
    }
    Ok(starts)
}

pub fn gen_long_video(activity: usize, seed: u64) -> Result<LongVideo> {
    let steps = recipe(activity)?;
    LongVideo::with_primitives(activity, &steps, seed)
}

impl LongVideo {
    /// A video showing `primitives` in order; `activity` is only carried along.
    pub fn with_primitives(activity: usize, primitives: &[usize], seed: u64) -> Result<Self> {
        let canvas = Canvas::default();
        let mut rng = rng_from(derive_seed(&[seed, 0x10]));
        let starts = layout(&vec![SEGMENT_S; primitives.len()], DURATION_S, MIN_GAP_S, &mut rng)?;
        let segments = primitives
            .iter()
            .zip(starts)
            .map(|(&primitive, start_s)| Segment {
                primitive,
                start_s,
                end_s: start_s + SEGMENT_S,
                origin: (rng.random_range(0.0..canvas.width as f64), rng.random_range(0.0..canvas.height as f64)),
            })
            .collect();
        Ok(Self { activity, segments, fps: FPS, duration_s: DURATION_S, canvas, speed: LONG_SPEED, seed })
    }

    pub fn n_frames(&self) -> usize {
        self.fps * self.duration_s
    }

    /// Shape and center shown in frame `f`, if any.
    pub fn content(&self, f: usize) -> Option<(Shape, (f64, f64))> {
        let seg = self.segments.iter().find(|s| (s.start_s * self.fps..s.end_s * self.fps).contains(&f))?;
        let p = Primitive::from_id(seg.primitive)?;
        let (dx, dy) = p.direction.step();
        let t = (f - seg.start_s * self.fps) as f64 * self.speed;
        Some((p.shape, (seg.origin.0 + dx * t, seg.origin.1 + dy * t)))
    }

    pub fn render_frame(&self, f: usize, out: &mut [f32]) {
        let mut rng = rng_from(derive_seed(&[self.seed, 0xf7, f as u64]));
        self.canvas.draw(out, self.content(f), &mut rng);
    }

    /// Frames at `indices` as `(n, H, W, C)`.
    pub fn frames(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let c = self.canvas;
        let flen = c.frame_len();
        let mut data = vec![0f32; indices.len() * flen];
        for (&f, out) in indices.iter().zip(data.chunks_mut(flen)) {
            if f >= self.n_frames() {
                return Err(TurboError::Index(format!("frame {f} out of range [0,{})", self.n_frames())));
            }
            self.render_frame(f, out);
        }
        Tensor::new(vec![indices.len(), c.height, c.width, c.channels], data)
    }

    pub fn coverage(&self) -> f64 {
        self.segments.iter().map(|s| s.end_s - s.start_s).sum::<usize>() as f64 / self.duration_s as f64
    }
}

/// A long video with one caption per sub-action and some captions that
/// match nothing in the video.
#[derive(Clone, Debug)]
pub struct AlignSample {
    pub video: LongVideo,
    pub sentences: Vec<Vec<usize>>,
    /// Ground-truth `[start_s, end_s)` per sentence, `None` if unalignable.
    pub truth: Vec<Option<(usize, usize)>>,
}

impl AlignSample {
    pub fn alignable_fraction(&self) -> f64 {
        self.truth.iter().filter(|t| t.is_some()).count() as f64 / self.truth.len().max(1) as f64
    }
}

/// Four sub-actions drawn from all 16 primitives plus one distractor caption.
pub fn gen_align_sample(seed: u64) -> Result<AlignSample> {
    let mut rng = rng_from(derive_seed(&[seed, 0xa1]));
    let mut ids: Vec<usize> = (0..super::render::NUM_PRIMITIVES).collect();
    ids.shuffle(&mut rng);
    let (steps, distractor) = (&ids[..RECIPE_LEN], ids[RECIPE_LEN]);
    let video = LongVideo::with_primitives(0, steps, seed)?;
    let mut sentences = Vec::new();
    let mut truth = Vec::new();
    for (i, seg) in video.segments.iter().enumerate() {
        sentences.push(gen_caption(seg.primitive, derive_seed(&[seed, 0xc0, i as u64]))?);
        truth.push(Some((seg.start_s, seg.end_s)));
    }
    sentences.push(gen_caption(distractor, derive_seed(&[seed, 0xd1]))?);
    truth.push(None);
    Ok(AlignSample { video, sentences, truth })
}

