//! Frame-index sampling for short clips and long videos.

use rand::Rng as _;

use crate::error::{Result, TurboError};
use crate::rng::Rng;

/// `n` consecutive frame indices out of `len`: a random window when
/// training, the centered one otherwise. Short videos repeat their last frame.
pub fn sample_short_clip(len: usize, n: usize, train: bool, rng: &mut Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(TurboError::Data("cannot sample from an empty video".into()));
    }
    if len <= n {
        return Ok((0..n).map(|i| i.min(len - 1)).collect());
    }
    let start = if train { rng.random_range(0..=len - n) } else { (len - n) / 2 };
    Ok((start..start + n).collect())
}

/// `n` frames spread evenly between a start in the first 20% and an end in
/// the last 20% of a `duration`-frame video.
pub fn sample_long_video_frames(duration: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(TurboError::Data(format!("need at least 2 frames, asked for {n}")));
    }
    if n > duration {
        return Err(TurboError::Data(format!("cannot take {n} frames from a {duration}-frame video")));
    }
    let head = (duration as f64 * 0.2).ceil() as usize;
    let tail = (duration as f64 * 0.8).ceil() as usize;
    let start = rng.random_range(0..head.max(1));
    let end = rng.random_range(tail.min(duration - 1)..duration);
    Ok(spread(start, end, n, duration))
}

/// Rounded linspace from `start` to `end`, nudged to stay strictly
/// increasing inside `[0, duration)` when there is room.
pub fn spread(start: usize, end: usize, n: usize, duration: usize) -> Vec<usize> {
    let step = (end as f64 - start as f64) / (n - 1) as f64;
    let mut idx: Vec<usize> = (0..n).map(|i| (start as f64 + step * i as f64).round() as usize).collect();
    for i in 1..n {
        if idx[i] <= idx[i - 1] {
            idx[i] = idx[i - 1] + 1;
        }
    }
    for i in (0..n).rev() {
        let cap = duration - (n - i);
        if idx[i] > cap {
            idx[i] = cap;
        }
        if i + 1 < n && idx[i] >= idx[i + 1] {
            idx[i] = idx[i + 1].saturating_sub(1);
        }
    }
    idx
}

/// `n` evenly spaced frames centered on `center`, clamped to the video.
pub fn window_around(center: usize, n: usize, stride: usize, duration: usize) -> Vec<usize> {
    let half = (n * stride) / 2;
    (0..n).map(|i| (center + i * stride).saturating_sub(half).min(duration - 1)).collect()
}
