//! Spatio-temporal patchification and the embedded token sequence.
//!
//! A clip of `T x H x W x C` pixels is cut into non-overlapping
//! `t x h x w` patches. Patch rows are ordered time-major, then height, then
//! width; inside a patch the flatten order is frame, row, column, channel.
//! Trailing frames or pixels that do not fill a whole patch are dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Clip extents and patch extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// `(n_t, n_h, n_w, n)` for a clip of `T x H x W` and patch `t x h x w`.
pub fn count_tokens(
    frames: usize,
    height: usize,
    width: usize,
    pt: usize,
    ph: usize,
    pw: usize,
) -> Result<(usize, usize, usize, usize)> {
    if [frames, height, width, pt, ph, pw].contains(&0) {
        return Err(TurboError::Geometry("extents must be positive".into()));
    }
    if pt > frames || ph > height || pw > width {
        return Err(TurboError::Geometry(format!(
            "patch {pt}x{ph}x{pw} larger than volume {frames}x{height}x{width}"
        )));
    }
    let (nt, nh, nw) = (frames / pt, height / ph, width / pw);
    Ok((nt, nh, nw, nt * nh * nw))
}

impl PatchGeometry {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        patch: (usize, usize, usize),
    ) -> Result<Self> {
        count_tokens(frames, height, width, patch.0, patch.1, patch.2)?;
        if channels == 0 {
            return Err(TurboError::Geometry("channel count must be positive".into()));
        }
        Ok(Self { frames, height, width, channels, patch_t: patch.0, patch_h: patch.1, patch_w: patch.2 })
    }

    pub fn n_t(&self) -> usize {
        self.frames / self.patch_t
    }

    pub fn n_h(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn n_w(&self) -> usize {
        self.width / self.patch_w
    }

    /// Number of content tokens (CLS excluded).
    pub fn n(&self) -> usize {
        self.n_t() * self.n_h() * self.n_w()
    }

    /// Length of one flattened patch row, `t*h*w*C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * self.channels
    }

    /// Same geometry with a different frame count.
    pub fn with_frames(&self, frames: usize) -> Result<Self> {
        Self::new(frames, self.height, self.width, self.channels, (self.patch_t, self.patch_h, self.patch_w))
    }
}

fn check_video<F: Real>(video: &Tensor<F>, geom: &PatchGeometry) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(TurboError::Geometry(format!("video must be (T,H,W,C), got {s:?}")));
    }
    if s[3] != geom.channels {
        return Err(TurboError::Geometry(format!(
            "video has {} channels, geometry expects {}",
            s[3], geom.channels
        )));
    }
    if s[0] < geom.n_t() * geom.patch_t || s[1] < geom.n_h() * geom.patch_h || s[2] < geom.n_w() * geom.patch_w {
        return Err(TurboError::Geometry(format!("video {s:?} smaller than geometry {geom:?}")));
    }
    Ok(())
}

/// Visits every (row, offset-in-row, pixel index) triple of the covered region.
fn for_each_patch_element(geom: &PatchGeometry, vshape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let (h, w, c) = (vshape[1], vshape[2], vshape[3]);
    let (pt, ph, pw) = (geom.patch_t, geom.patch_h, geom.patch_w);
    let mut row = 0;
    for it in 0..geom.n_t() {
        for ih in 0..geom.n_h() {
            for iw in 0..geom.n_w() {
                let mut k = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        let base = (((it * pt + dt) * h + ih * ph + dy) * w + iw * pw) * c;
                        for j in 0..pw * c {
                            f(row, k, base + j);
                            k += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cuts a `(T,H,W,C)` clip into `[n, t*h*w*C]` patch rows.
pub fn patchify<F: Real>(video: &Tensor<F>, geom: &PatchGeometry) -> Result<Tensor<F>> {
    check_video(video, geom)?;
    let d = geom.patch_dim();
    let mut out = vec![F::zero(); geom.n() * d];
    let src = video.data();
    for_each_patch_element(geom, video.shape(), |row, k, px| out[row * d + k] = src[px]);
    Tensor::new(vec![geom.n(), d], out)
}

/// Inverse of [`patchify`]; returns the covered `(n_t*t, n_h*h, n_w*w, C)` clip.
pub fn unpatchify<F: Real>(rows: &Tensor<F>, geom: &PatchGeometry) -> Result<Tensor<F>> {
    let d = geom.patch_dim();
    if rows.shape() != [geom.n(), d] {
        return Err(TurboError::Geometry(format!(
            "expected [{}, {}] patch rows, got {:?}",
            geom.n(),
            d,
            rows.shape()
        )));
    }
    let shape = vec![
        geom.n_t() * geom.patch_t,
        geom.n_h() * geom.patch_h,
        geom.n_w() * geom.patch_w,
        geom.channels,
    ];
    let mut out = vec![F::zero(); shape.iter().product()];
    let src = rows.data();
    for_each_patch_element(geom, &shape, |row, k, px| out[px] = src[row * d + k]);
    Tensor::new(shape, out)
}

/// Interleaved sine/cosine table `[len, dim]` over the flat token index
/// (CLS is index 0): `PE(p, 2i) = sin(p / 10000^(2i/dim))`,
/// `PE(p, 2i+1) = cos(..)`.
pub fn sinusoidal_table<F: Real>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(F::c(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).unwrap()
}

/// Positional encodings kind carried by a [`TokenBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionalEncoding {
    Sinusoidal,
}

/// Embedded tokens `[B, n+1, D]` with CLS at index 0.
#[derive(Clone, Debug)]
pub struct TokenBatch<F = f32> {
    pub embeddings: Tensor<F>,
    pub geometry: PatchGeometry,
    pub pe_kind: PositionalEncoding,
}

/// Graph-level token embedding shared by [`embed`] and the network.
///
/// `patches` is `[B, k, P]`, `positions` holds the 1-based token index of
/// every row (CLS occupies index 0), `pe` is the full table `[n+1, D]`.
/// Returns `[B, k+1, D]` with CLS prepended.
pub fn embed_graph<F: Real>(
    g: &mut Graph<F>,
    patches: Var,
    weight: Var,
    bias: Var,
    cls: Var,
    pe: &Tensor<F>,
    positions: &[Vec<usize>],
) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    let (b, k, p) = (shape[0], shape[1], shape[2]);
    let d = g.shape(weight)[1];
    let flat = g.reshape(patches, &[b * k, p])?;
    let proj = g.matmul(flat, weight)?;
    let proj = g.add(proj, bias)?;
    let proj = g.reshape(proj, &[b, k, d])?;
    let mut pe_rows = Vec::with_capacity(b * (k + 1) * d);
    for bi in 0..b {
        let pos = &positions[if positions.len() == 1 { 0 } else { bi }];
        pe_rows.extend_from_slice(pe.row(0));
        for &i in pos {
            pe_rows.extend_from_slice(pe.row(i));
        }
    }
    let pe_var = g.constant(Tensor::new(vec![b, k + 1, d], pe_rows)?);
    let ones = g.constant(Tensor::full(&[b, 1], F::one()));
    let cls_row = g.reshape(cls, &[1, d])?;
    let cls_b = g.matmul(ones, cls_row)?;
    let cls_b = g.reshape(cls_b, &[b, 1, d])?;
    let seq = g.concat(&[cls_b, proj], 1)?;
    g.add(seq, pe_var)
}

/// Embeds every patch of a single clip: `[cls + PE(0), patches . W + b + PE(i)]`.
pub fn embed<F: Real>(
    patches: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    cls: &Tensor<F>,
    geometry: &PatchGeometry,
) -> Result<TokenBatch<F>> {
    let (n, p) = (patches.shape()[0], patches.shape()[1]);
    if weight.shape().len() != 2 || weight.shape()[0] != p {
        return Err(TurboError::Geometry(format!(
            "embedding weight {:?} does not map patch width {}",
            weight.shape(),
            p
        )));
    }
    let d = weight.shape()[1];
    let pe = sinusoidal_table::<F>(n + 1, d);
    let mut g = Graph::<F>::new();
    let x = g.constant(patches.clone().reshape(&[1, n, p])?);
    let (w, b, c) = (g.constant(weight.clone()), g.constant(bias.clone()), g.constant(cls.clone()));
    let positions = vec![(1..=n).collect::<Vec<_>>()];
    let out = embed_graph(&mut g, x, w, b, c, &pe, &positions)?;
    Ok(TokenBatch {
        embeddings: g.value(out).clone(),
        geometry: *geometry,
        pe_kind: PositionalEncoding::Sinusoidal,
    })
}
