use std::collections::HashSet;

use turbo_core::data::*;
use turbo_core::rng::rng_from;

fn frame0(clip: &VideoClip) -> &[f32] {
    let s = clip.frames.shape();
    &clip.frames.data()[..s[1] * s[2] * s[3]]
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let n = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    d / (n(a) * n(b))
}

#[test]
fn clips_are_pure_functions_of_class_and_seed() {
    let a = gen_shapes_clip(5, 77).unwrap();
    let b = gen_shapes_clip(5, 77).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.caption, b.caption);
    assert_ne!(gen_shapes_clip(5, 78).unwrap().frames, a.frames);
    assert_eq!(a.frames.shape(), &[CLIP_FRAMES, 32, 32, 3]);
    assert!(a.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(gen_shapes_clip(NUM_CLASSES, 0).is_err());
}

/// Circular mean column of the pixel mass, on a ring of `w` columns.
fn centroid_x(frame: &[f32], w: usize, c: usize) -> f64 {
    let (mut sx, mut cx) = (0.0, 0.0);
    for (i, px) in frame.chunks(c).enumerate() {
        let m: f64 = px.iter().map(|&v| (v as f64 - 0.1).max(0.0)).sum();
        let a = 2.0 * std::f64::consts::PI * ((i % w) as f64 + 0.5) / w as f64;
        sx += m * a.sin();
        cx += m * a.cos();
    }
    sx.atan2(cx).rem_euclid(2.0 * std::f64::consts::PI) * w as f64 / (2.0 * std::f64::consts::PI)
}

#[test]
fn rightward_square_centroid_moves_right_every_frame() {
    let class = Primitive { shape: Shape::Square, direction: Direction::Right }.id();
    for seed in 0..20 {
        let clip = gen_shapes_clip(class, seed).unwrap();
        let flen = 32 * 32 * 3;
        let xs: Vec<f64> = clip.frames.data().chunks(flen).map(|f| centroid_x(f, 32, 3)).collect();
        for w in xs.windows(2) {
            let step = (w[1] - w[0] + 16.0).rem_euclid(32.0) - 16.0;
            assert!(step > 0.5 && step < 2.5, "seed {seed}: step {step}");
        }
    }
}

#[test]
fn first_frame_nearest_neighbour_cannot_see_motion() {
    let per_class = 24;
    let train: Vec<VideoClip> = (0..NUM_CLASSES * per_class).map(|i| gen_shapes_clip(i % NUM_CLASSES, 1000 + i as u64).unwrap()).collect();
    let test: Vec<VideoClip> = (0..NUM_CLASSES * 12).map(|i| gen_shapes_clip(i % NUM_CLASSES, 90_000 + i as u64).unwrap()).collect();
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x - y) as f64 * (x - y) as f64).sum::<f64>();
    let (mut hits, mut shape_hits) = (0, 0);
    for t in &test {
        let best = train
            .iter()
            .min_by(|a, b| dist(frame0(a), frame0(t)).total_cmp(&dist(frame0(b), frame0(t))))
            .unwrap();
        hits += usize::from(best.label == t.label);
        shape_hits += usize::from(best.meta.primitive.shape == t.meta.primitive.shape);
    }
    let acc = hits as f64 / test.len() as f64;
    let shape_acc = shape_hits as f64 / test.len() as f64;
    println!("frame-0 1-NN: class {acc:.3}, shape {shape_acc:.3}");
    assert!(acc <= 0.25 + 0.07, "class accuracy {acc}");
    assert!(acc <= shape_acc / 4.0 + 0.07, "class {acc} vs shape {shape_acc}");
}

#[test]
fn same_class_captions_differ_in_tokens_but_embed_alike() {
    let e = TextEmbedder::new(0, 64);
    let mut differing = 0;
    for class in 0..NUM_CLASSES {
        let base = gen_caption(class, 0).unwrap();
        let eb = e.embed(&base).unwrap();
        for seed in 1..20 {
            let other = gen_caption(class, seed).unwrap();
            differing += usize::from(other != base);
            let c = cosine(&eb, &e.embed(&other).unwrap());
            assert!(c > 0.8, "class {class} seed {seed}: cosine {c}");
        }
    }
    assert!(differing > NUM_CLASSES * 10);
    assert_eq!(e.embed(&[1, 2, 3]).unwrap(), TextEmbedder::new(0, 64).embed(&[1, 2, 3]).unwrap());
    assert!(e.embed(&[e.vocab_size()]).is_err());
    println!("example caption: {}", caption_text(&gen_caption(3, 1).unwrap()));
}

#[test]
fn class_mean_embeddings_are_pairwise_distinct() {
    let e = TextEmbedder::new(0, 64);
    let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let mut m = vec![0.0; 64];
            for s in 0..32 {
                for (a, &v) in m.iter_mut().zip(&e.embed(&gen_caption(c, s).unwrap()).unwrap()) {
                    *a += v as f64 / 32.0;
                }
            }
            m
        })
        .collect();
    let mut min = f64::INFINITY;
    for i in 0..NUM_CLASSES {
        for j in i + 1..NUM_CLASSES {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            min = min.min(d);
        }
    }
    assert!(min > 0.05, "closest class means {min}");
}

#[test]
fn recipes_differ_pairwise_in_at_least_two_positions() {
    for a in 0..NUM_ACTIVITIES {
        for b in a + 1..NUM_ACTIVITIES {
            let (ra, rb) = (recipe(a).unwrap(), recipe(b).unwrap());
            let diff = ra.iter().zip(&rb).filter(|(x, y)| x != y).count();
            assert!(diff >= 2, "{a} vs {b}");
        }
    }
    assert!(recipe(NUM_ACTIVITIES).is_err());
}

#[test]
fn every_short_window_fits_at_least_two_activities() {
    // an 8-frame window at 4 fps spans 2 s, shorter than any gap, so it
    // shows at most one primitive, or only background
    assert!(8 / FPS < 3);
    for p in 0..NUM_PRIMITIVES {
        let fits = (0..NUM_ACTIVITIES).filter(|&a| recipe(a).unwrap().contains(&p)).count();
        assert!(fits >= 2, "primitive {p} in {fits} recipes");
    }
}

#[test]
fn long_videos_have_ordered_segments_and_background() {
    for seed in 0..200 {
        let v = gen_long_video((seed % 8) as usize, seed).unwrap();
        assert_eq!(v.n_frames(), 240);
        assert_eq!(v.segments.iter().map(|s| s.primitive).collect::<Vec<_>>(), recipe(v.activity).unwrap());
        for w in v.segments.windows(2) {
            assert!(w[0].end_s < w[1].start_s);
        }
        assert!(v.segments[0].start_s > 0 && v.segments[3].end_s < v.duration_s);
        assert!(v.coverage() < 1.0);
    }
    let a = gen_long_video(3, 9).unwrap();
    let b = gen_long_video(3, 9).unwrap();
    assert_eq!(a.frames(&[0, 50, 239]).unwrap(), b.frames(&[0, 50, 239]).unwrap());
    assert!(a.frames(&[240]).is_err());
}

#[test]
fn long_frame_sampling_respects_the_head_and_tail_windows() {
    let mut rng = rng_from(4);
    for n in [2, 8, 16, 32, 64] {
        for _ in 0..500 {
            let idx = sample_long_video_frames(240, n, &mut rng).unwrap();
            assert_eq!(idx.len(), n);
            assert!(idx[0] < 48 && idx[n - 1] >= 192 && idx[n - 1] < 240);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }
    for _ in 0..500 {
        let idx = sample_long_video_frames(240, 32, &mut rng).unwrap();
        let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1, "{gaps:?}");
    }
    assert!(sample_long_video_frames(10, 11, &mut rng).is_err());
    assert!(sample_long_video_frames(10, 1, &mut rng).is_err());
}

#[test]
fn short_clip_sampling_windows_and_padding() {
    let mut rng = rng_from(5);
    assert_eq!(sample_short_clip(20, 8, false, &mut rng).unwrap(), (6..14).collect::<Vec<_>>());
    assert_eq!(sample_short_clip(3, 5, true, &mut rng).unwrap(), vec![0, 1, 2, 2, 2]);
    let mut seen = [false; 20];
    for _ in 0..300 {
        let idx = sample_short_clip(20, 8, true, &mut rng).unwrap();
        assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
        idx.iter().for_each(|&i| seen[i] = true);
    }
    assert!(seen.iter().all(|&s| s));
    assert!(sample_short_clip(0, 4, true, &mut rng).is_err());
}

#[test]
fn align_samples_carry_their_segments_and_a_distractor() {
    for seed in 0..50 {
        let s = gen_align_sample(seed).unwrap();
        assert!((s.alignable_fraction() - 0.8).abs() < 1e-12);
        for (seg, t) in s.video.segments.iter().zip(&s.truth) {
            assert_eq!(*t, Some((seg.start_s, seg.end_s)));
            assert!(seg.end_s <= s.video.duration_s);
        }
        assert_eq!(s.truth.last(), Some(&None));
    }
    assert_eq!(gen_align_sample(3).unwrap().sentences, gen_align_sample(3).unwrap().sentences);
}

#[test]
fn splits_own_disjoint_seed_ranges() {
    let mut seen = HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for i in 0..1000 {
            assert!(seen.insert(split.sample_seed(7, i)));
        }
    }
    assert_eq!(Split::sizes(1000), (700, 100, 200));
}

#[test]
fn cache_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = gen_shapes_clip(2, 11).unwrap();
    let path = dir.path().join("clip.bin");
    write_sample(&path, &clip.frames, 11, clip.label).unwrap();
    let (h, frames) = read_sample(&path).unwrap();
    assert_eq!((h.seed, h.label, h.dtype.as_str()), (11, 2, "f32"));
    assert_eq!(frames, clip.frames);
}
