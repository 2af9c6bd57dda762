//! Anti-aliased white shapes on a wrap-around canvas.

use rand::Rng as _;

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Fraction of the pixel at offset `(dx, dy)` from the center covered by the shape.
    fn coverage(self, dx: f64, dy: f64, r: f64) -> f64 {
        let edge = |signed: f64| (signed + 0.5).clamp(0.0, 1.0);
        match self {
            Shape::Square => edge(0.8 * r - dx.abs().max(dy.abs())),
            Shape::Circle => edge(r - (dx * dx + dy * dy).sqrt()),
            Shape::Triangle => {
                // apex up, base at dy = 0.8 r
                let base = edge(0.8 * r - dy);
                let top = edge(dy + r);
                let sides = edge(0.55 * (dy + r) - dx.abs());
                base.min(top).min(sides)
            }
            Shape::Cross => {
                let bar = r / 3.0;
                let h = edge(r - dx.abs()).min(edge(bar - dy.abs()));
                let v = edge(r - dy.abs()).min(edge(bar - dx.abs()));
                h.max(v)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    /// Unit step in image coordinates (x right, y down).
    pub fn step(self) -> (f64, f64) {
        match self {
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Down => (0.0, 1.0),
            Direction::Up => (0.0, -1.0),
        }
    }
}

/// A shape-motion pair; the 16 of them are the class ids `shape * 4 + direction`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub direction: Direction,
}

pub const NUM_PRIMITIVES: usize = 16;

impl Primitive {
    pub fn from_id(id: usize) -> Option<Self> {
        (id < NUM_PRIMITIVES).then(|| Self { shape: Shape::ALL[id / 4], direction: Direction::ALL[id % 4] })
    }

    pub fn id(self) -> usize {
        Shape::ALL.iter().position(|&s| s == self.shape).unwrap() * 4
            + Direction::ALL.iter().position(|&d| d == self.direction).unwrap()
    }
}

/// Canvas description shared by all generators.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub radius: f64,
    pub noise: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { height: 32, width: 32, channels: 3, radius: 5.0, noise: 0.05 }
    }
}

impl Canvas {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Signed offset from `c` to `x` on a ring of `len`, in `[-len/2, len/2)`.
    fn wrap(x: f64, c: f64, len: usize) -> f64 {
        let l = len as f64;
        (x - c + 0.5 * l).rem_euclid(l) - 0.5 * l
    }

    /// Writes one frame into `out`: the shape (if any) centered at `center`,
    /// plus uniform noise in `[-noise, noise]`, clamped to `[0, 1]`.
    pub fn draw(&self, out: &mut [f32], shape: Option<(Shape, (f64, f64))>, rng: &mut Rng) {
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let cov = match shape {
                    Some((s, (cx, cy))) => s.coverage(
                        Self::wrap(x as f64 + 0.5, cx, self.width),
                        Self::wrap(y as f64 + 0.5, cy, self.height),
                        self.radius,
                    ),
                    None => 0.0,
                };
                let px = &mut out[(y * self.width + x) * c..(y * self.width + x + 1) * c];
                for v in px {
                    let n = if self.noise > 0.0 { rng.random_range(-self.noise..=self.noise) } else { 0.0 };
                    *v = (cov + n).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}
