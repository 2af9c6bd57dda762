//! Evaluation: variable-mask classification, multi-crop long-video
//! classification, in-batch retrieval and temporal alignment.

use serde::{Deserialize, Serialize};

use crate::data::{sample_long_video_frames, stack, window_around, LongDataset, LongVideo, ShapesDataset, TextEmbedder};
use crate::error::{Result, TurboError};
use crate::model::{check_inference_ratio, Session, TurboNet};
use crate::partition::make_partition;
use crate::patch::patchify;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric_name: String,
    pub value: f64,
    pub samples: usize,
    pub steps: u64,
    pub wall_seconds: f64,
    pub flops_per_step: f64,
}

/// Row-wise softmax of `[B, C]` logits, in `f64` for stable averaging.
fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Class distributions for `patches [B, n, P]` with `mask_ratio` of the
/// tokens hidden. Sample `i` draws its mask from `sample_seeds[i]`.
pub fn infer_classify(net: &TurboNet<f32>, patches: &Tensor<f32>, mask_ratio: f64, sample_seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
    check_inference_ratio(mask_ratio)?;
    let n = net.config.n_tokens();
    let plans = sample_seeds
        .iter()
        .map(|&s| make_partition(n, mask_ratio, 0.0, s))
        .collect::<Result<Vec<_>>>()?;
    let mut s = Session::inference(&net.params);
    let tokens = net.visible_tokens(&mut s, patches, &plans)?;
    let encoded = net.encoder_forward(&mut s, tokens)?;
    let z = net.cls_feature(&mut s, encoded)?;
    let logits = net.classify_head(&mut s, z)?;
    Ok(softmax_rows(s.g.value(logits)))
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Seed of the evaluation mask of dataset sample `index`.
pub fn eval_mask_seed(seed: u64, index: usize) -> u64 {
    derive_seed(&[seed, 0xe7a1, index as u64])
}

/// Top-1 accuracy over a shapes dataset.
pub fn evaluate_classify(net: &TurboNet<f32>, data: &ShapesDataset, mask_ratio: f64, seed: u64, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(TurboError::Data("empty evaluation set".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let patches = data.batch(chunk)?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| eval_mask_seed(seed, i)).collect();
        let probs = infer_classify(net, &patches, mask_ratio, &seeds)?;
        correct += chunk.iter().zip(&probs).filter(|(&i, p)| argmax(p) == data.items[i].label).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Average class distribution over `repeats` independent frame samplings.
pub fn infer_long_multicrop(net: &TurboNet<f32>, video: &LongVideo, repeats: usize, mask_ratio: f64, seed: u64) -> Result<Vec<f64>> {
    if repeats == 0 {
        return Err(TurboError::Config("multicrop needs at least one repeat".into()));
    }
    let geom = net.config.geometry;
    let mut rng = rng_from(derive_seed(&[seed, 0x3c40]));
    let mut rows = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let idx = sample_long_video_frames(video.n_frames(), geom.frames, &mut rng)?;
        rows.push(patchify(&video.frames(&idx)?, &geom)?);
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    let patches = stack(&refs)?;
    let seeds: Vec<u64> = (0..repeats).map(|i| derive_seed(&[seed, 0x3c41, i as u64])).collect();
    let probs = infer_classify(net, &patches, mask_ratio, &seeds)?;
    let c = probs[0].len();
    let mut avg = vec![0.0; c];
    for p in &probs {
        avg.iter_mut().zip(p).for_each(|(a, &v)| *a += v / repeats as f64);
    }
    Ok(avg)
}

/// Multi-crop accuracy over a long-video dataset.
pub fn evaluate_long(net: &TurboNet<f32>, data: &LongDataset, repeats: usize, mask_ratio: f64, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(TurboError::Data("empty evaluation set".into()));
    }
    let mut correct = 0;
    for (i, v) in data.videos.iter().enumerate() {
        let p = infer_long_multicrop(net, v, repeats, mask_ratio, derive_seed(&[seed, i as u64]))?;
        correct += usize::from(argmax(&p) == v.activity);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Visual and text embeddings `[B, proj_dim]` of a batch at inference.
pub fn embed_pairs(
    net: &TurboNet<f32>,
    embedder: &TextEmbedder,
    patches: &Tensor<f32>,
    captions: &[&[usize]],
    mask_ratio: f64,
    sample_seeds: &[u64],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    check_inference_ratio(mask_ratio)?;
    let n = net.config.n_tokens();
    let plans = sample_seeds.iter().map(|&s| make_partition(n, mask_ratio, 0.0, s)).collect::<Result<Vec<_>>>()?;
    let mut feats = Vec::with_capacity(captions.len() * embedder.dim);
    for c in captions {
        feats.extend(embedder.embed(c)?);
    }
    let mut s = Session::inference(&net.params);
    let tokens = net.visible_tokens(&mut s, patches, &plans)?;
    let encoded = net.encoder_forward(&mut s, tokens)?;
    let z = net.cls_feature(&mut s, encoded)?;
    let z_v = net.project_visual(&mut s, z)?;
    let t = s.g.constant(Tensor::new(vec![captions.len(), embedder.dim], feats)?);
    let z_t = net.project_text(&mut s, t)?;
    Ok((s.g.value(z_v).clone(), s.g.value(z_t).clone()))
}

/// Clip-to-caption top-1 accuracy within consecutive batches of `batch`
/// held-out pairs; trailing samples that do not fill a batch are skipped.
pub fn retrieval_top1(
    net: &TurboNet<f32>,
    embedder: &TextEmbedder,
    data: &ShapesDataset,
    batch: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    if batch < 2 || data.len() < batch {
        return Err(TurboError::Data(format!("need at least one batch of {batch} >= 2 pairs")));
    }
    let (mut hits, mut total) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks_exact(batch) {
        let patches = data.batch(chunk)?;
        let caps: Vec<&[usize]> = chunk.iter().map(|&i| data.items[i].caption.as_slice()).collect();
        let seeds: Vec<u64> = chunk.iter().map(|&i| eval_mask_seed(seed, i)).collect();
        let (zv, zt) = embed_pairs(net, embedder, &patches, &caps, mask_ratio, &seeds)?;
        let p = zv.shape()[1];
        for (i, v) in zv.data().chunks(p).enumerate() {
            let sims: Vec<f64> = zt.data().chunks(p).map(|t| dot(v, t)).collect();
            hits += usize::from(argmax(&sims) == i);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// One projected visual feature per whole second, each from the model's
/// frame count centered on the middle of that second, with no masking.
pub fn per_second_features(net: &TurboNet<f32>, video: &LongVideo) -> Result<Vec<Vec<f32>>> {
    if video.duration_s == 0 {
        return Err(TurboError::Data("video shorter than one second".into()));
    }
    let geom = net.config.geometry;
    let fps = video.fps;
    let mut out = Vec::with_capacity(video.duration_s);
    let seconds: Vec<usize> = (0..video.duration_s).collect();
    for chunk in seconds.chunks(16) {
        let mut rows = Vec::with_capacity(chunk.len());
        for &s in chunk {
            let idx = window_around(s * fps + fps / 2, geom.frames, 1, video.n_frames());
            rows.push(patchify(&video.frames(&idx)?, &geom)?);
        }
        let refs: Vec<&Tensor<f32>> = rows.iter().collect();
        let patches = stack(&refs)?;
        let plans = vec![crate::partition::PartitionPlan::full(net.config.n_tokens()); chunk.len()];
        let mut sess = Session::inference(&net.params);
        let tokens = net.visible_tokens(&mut sess, &patches, &plans)?;
        let encoded = net.encoder_forward(&mut sess, tokens)?;
        let z = net.cls_feature(&mut sess, encoded)?;
        let z_v = net.project_visual(&mut sess, z)?;
        let v = sess.g.value(z_v);
        out.extend(v.data().chunks(v.shape()[1]).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Fraction of alignable sentences whose best-matching second falls in
/// their ground-truth segment. Second `s` is stamped at `s + 0.5` and a hit
/// needs `start <= s + 0.5 <= end`.
pub fn align_recall_at_1(features: &[Vec<f32>], sentences: &[Vec<f32>], truth: &[Option<(usize, usize)>]) -> Result<f64> {
    if sentences.len() != truth.len() {
        return Err(TurboError::Data(format!("{} sentences but {} ground-truth entries", sentences.len(), truth.len())));
    }
    if features.is_empty() {
        return Err(TurboError::Data("no per-second features".into()));
    }
    let (mut hits, mut scored) = (0, 0);
    for (sent, t) in sentences.iter().zip(truth) {
        let Some((start, end)) = *t else { continue };
        let sims: Vec<f64> = features.iter().map(|f| dot(f, sent)).collect();
        let stamp = argmax(&sims) as f64 + 0.5;
        hits += usize::from(start as f64 <= stamp && stamp <= end as f64);
        scored += 1;
    }
    if scored == 0 {
        return Err(TurboError::Data("no alignable sentences".into()));
    }
    Ok(hits as f64 / scored as f64)
}

/// Projected text embeddings of `captions`.
pub fn embed_sentences(net: &TurboNet<f32>, embedder: &TextEmbedder, captions: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
    let mut feats = Vec::with_capacity(captions.len() * embedder.dim);
    for c in captions {
        feats.extend(embedder.embed(c)?);
    }
    let mut s = Session::inference(&net.params);
    let t = s.g.constant(Tensor::new(vec![captions.len(), embedder.dim], feats)?);
    let z_t = net.project_text(&mut s, t)?;
    let v = s.g.value(z_t);
    Ok(v.data().chunks(v.shape()[1]).map(<[f32]>::to_vec).collect())
}
