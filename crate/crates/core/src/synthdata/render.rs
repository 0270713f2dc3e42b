//! Frame rendering: tinted mucosa-like background with folds and noise,
//! polyp-like blobs with dome shading for events, flat look-alike patches and
//! bubbles as distractors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, GeneratorConfig, ProcedureInfo};
use crate::types::{child_seed, EventId, Morphology, SizeClass};

/// Inclusive mask-area range (pixels) per size class; the bands are disjoint.
pub const SIZE_AREA_BANDS: [(usize, usize); 3] = [(6, 38), (39, 92), (93, usize::MAX)];

const RADIUS: [(f64, f64); 3] = [(2.0, 3.0), (4.0, 5.0), (6.0, 8.0)];
/// Fallback radius per class whose disc area stays inside the band at any
/// sub-pixel offset.
const FALLBACK_RADIUS: [f64; 3] = [2.5, 4.5, 7.0];
/// Every shape part lies within this multiple of the head radius from its center.
const EXTENT: f64 = 1.8;
const DRIFT: f64 = 1.5;
const SHAPE_RETRIES: usize = 40;

/// Smallest frame side that fits any shape of the class, including drift room.
pub fn required_frame_size(class: SizeClass) -> usize {
    let r = RADIUS[class as usize].1;
    (2.0 * EXTENT * r + 2.0).ceil() as usize
}

/// Binary mask over a square frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), size * size);
        Self { size, bits }
    }

    pub fn empty(size: usize) -> Self {
        Self::new(size, vec![false; size * size])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.size + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(x, y)` of every set pixel.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % self.size, i / self.size))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn from_bytes(size: usize, bytes: &[u8]) -> Self {
        Self::new(size, bytes.iter().map(|&b| b >= 128).collect())
    }

    fn is_rim(&self, x: usize, y: usize) -> bool {
        let s = self.size;
        x == 0
            || y == 0
            || x + 1 == s
            || y + 1 == s
            || !self.get(x - 1, y)
            || !self.get(x + 1, y)
            || !self.get(x, y - 1)
            || !self.get(x, y + 1)
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Squared normalized radius; ≤ 1 inside.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

#[derive(Debug, Clone)]
struct Shape {
    head: Ellipse,
    /// Stalk as a segment `(x0, y0, x1, y1)` with half-width.
    stalk: Option<(f64, f64, f64, f64, f64)>,
    lobes: Vec<Ellipse>,
}

impl Shape {
    fn sample<R: Rng>(rng: &mut R, size: SizeClass, morphology: Morphology, cx: f64, cy: f64) -> Self {
        let (lo, hi) = RADIUS[size as usize];
        let r = rng.gen_range(lo..=hi);
        let head = Ellipse {
            cx,
            cy,
            a: r,
            b: r * rng.gen_range(0.85..=1.0),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        };
        let mut shape = Shape {
            head,
            stalk: None,
            lobes: Vec::new(),
        };
        match morphology {
            Morphology::Sessile => {}
            Morphology::Pedunculated => {
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = phi.sin_cos();
                let len = 0.8 * r;
                let (x0, y0) = (cx + c * 0.7 * r, cy + s * 0.7 * r);
                let (x1, y1) = (cx + c * (r + len - 0.6), cy + s * (r + len - 0.6));
                shape.stalk = Some((x0, y0, x1, y1, 0.6 + 0.08 * r));
            }
            Morphology::Undefined => {
                for _ in 0..rng.gen_range(1..=2) {
                    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let lr = r * rng.gen_range(0.4..=0.7);
                    shape.lobes.push(Ellipse {
                        cx: cx + phi.cos() * 0.5 * r,
                        cy: cy + phi.sin() * 0.5 * r,
                        a: lr,
                        b: lr * rng.gen_range(0.7..=1.0),
                        theta: rng.gen_range(0.0..std::f64::consts::PI),
                    });
                }
            }
        }
        shape
    }

    fn disc(cx: f64, cy: f64, r: f64) -> Self {
        Shape {
            head: Ellipse { cx, cy, a: r, b: r, theta: 0.0 },
            stalk: None,
            lobes: Vec::new(),
        }
    }

    fn shifted(&self, dx: f64, dy: f64, dtheta: f64) -> Self {
        let mv = |e: &Ellipse| Ellipse {
            cx: e.cx + dx,
            cy: e.cy + dy,
            theta: e.theta + dtheta,
            ..e.clone()
        };
        Shape {
            head: mv(&self.head),
            stalk: self.stalk.map(|(x0, y0, x1, y1, w)| (x0 + dx, y0 + dy, x1 + dx, y1 + dy, w)),
            lobes: self.lobes.iter().map(mv).collect(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        if self.head.level(x, y) <= 1.0 || self.lobes.iter().any(|l| l.level(x, y) <= 1.0) {
            return true;
        }
        match self.stalk {
            Some((x0, y0, x1, y1, w)) => segment_distance(x, y, x0, y0, x1, y1) <= w,
            None => false,
        }
    }

    fn rasterize(&self, size: usize) -> Mask {
        let mut bits = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                bits[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        Mask::new(size, bits)
    }
}

fn segment_distance(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    ((x - x0 - t * dx).powi(2) + (y - y0 - t * dy).powi(2)).sqrt()
}

fn in_band(size: SizeClass, area: usize) -> bool {
    let (lo, hi) = SIZE_AREA_BANDS[size as usize];
    (lo..=hi).contains(&area)
}

/// Masks for a whole event: one base shape drifting a little per frame.
fn event_masks<R: Rng>(rng: &mut R, frame_size: usize, size: SizeClass, morphology: Morphology, frames: usize) -> Vec<(Shape, Mask)> {
    let margin = EXTENT * RADIUS[size as usize].1 + 1.0;
    let lo = margin;
    let hi = (frame_size as f64 - margin).max(lo);
    let mut cx = rng.gen_range(lo..=hi);
    let mut cy = rng.gen_range(lo..=hi);
    let mut base = Shape::sample(rng, size, morphology, cx, cy);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let mut accepted = None;
        for attempt in 0..SHAPE_RETRIES {
            if attempt > 0 && attempt % 8 == 0 {
                base = Shape::sample(rng, size, morphology, cx, cy);
            }
            let (dx, dy) = if k == 0 {
                (0.0, 0.0)
            } else {
                (rng.gen_range(-DRIFT..=DRIFT), rng.gen_range(-DRIFT..=DRIFT))
            };
            let nx = (cx + dx).clamp(lo, hi);
            let ny = (cy + dy).clamp(lo, hi);
            let shape = base.shifted(nx - cx, ny - cy, rng.gen_range(-0.1..=0.1));
            let mask = shape.rasterize(frame_size);
            if in_band(size, mask.area()) {
                cx = nx;
                cy = ny;
                base = shape.clone();
                accepted = Some((shape, mask));
                break;
            }
        }
        let (shape, mask) = accepted.unwrap_or_else(|| {
            let shape = Shape::disc(cx, cy, FALLBACK_RADIUS[size as usize]);
            let mask = shape.rasterize(frame_size);
            (shape, mask)
        });
        out.push((shape, mask));
    }
    out
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.size + y) * self.size + x
    }

    fn px(&mut self, c: usize, x: usize, y: usize) -> &mut f64 {
        let i = self.idx(c, x, y);
        &mut self.data[i]
    }

    fn quantize_into(&self, out: &mut Vec<u8>) {
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
}

/// Per-procedure appearance.
struct Look {
    tint: [f64; 3],
    /// Color shift that makes tissue look polyp-like.
    red_shift: [f64; 3],
}

fn sample_shift<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.14..=0.22), -rng.gen_range(0.08..=0.14), -rng.gen_range(0.04..=0.08)]
}

fn background<R: Rng>(rng: &mut R, look: &Look, size: usize) -> (Canvas, Vec<f64>) {
    const GRID: usize = 5;
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen_range(-0.08..=0.08)).collect();
    let light_x = rng.gen_range(0.3..=0.7) * size as f64;
    let light_y = rng.gen_range(0.3..=0.7) * size as f64;
    let reach = size as f64 * std::f64::consts::SQRT_2;
    let mut illum = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / (size - 1) as f64 * (GRID - 1) as f64;
            let gy = y as f64 / (size - 1) as f64 * (GRID - 1) as f64;
            let (x0, y0) = ((gx.floor() as usize).min(GRID - 2), (gy.floor() as usize).min(GRID - 2));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let g = |i: usize, j: usize| grid[j * GRID + i];
            let lf = g(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + g(x0 + 1, y0) * fx * (1.0 - fy)
                + g(x0, y0 + 1) * (1.0 - fx) * fy
                + g(x0 + 1, y0 + 1) * fx * fy;
            let d = ((x as f64 - light_x).powi(2) + (y as f64 - light_y).powi(2)).sqrt() / reach;
            illum[y * size + x] = (1.0 - 0.6 * d * d) * (1.0 + lf);
        }
    }
    let mut canvas = Canvas {
        size,
        data: vec![0.0; 3 * size * size],
    };
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                *canvas.px(c, x, y) = look.tint[c] * illum[y * size + x];
            }
        }
    }
    // mucosal folds: dark sinuous lines
    let folds = if rng.gen_bool(0.5) { rng.gen_range(1..=2) } else { 0 };
    for _ in 0..folds {
        let horizontal = rng.gen_bool(0.5);
        let offset = rng.gen_range(0.15..=0.85) * size as f64;
        let amp = rng.gen_range(1.0..=4.0);
        let freq = rng.gen_range(0.1..=0.3);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                let (along, across) = if horizontal { (x, y) } else { (y, x) };
                let curve = offset + amp * (freq * along as f64 + phase).sin();
                if (across as f64 + 0.5 - curve).abs() < 0.8 {
                    for c in 0..3 {
                        *canvas.px(c, x, y) *= 0.78;
                    }
                }
            }
        }
    }
    (canvas, illum)
}

fn paint_polyp<R: Rng>(rng: &mut R, canvas: &mut Canvas, illum: &[f64], look: &Look, shift: &[f64; 3], shape: &Shape, mask: &Mask) {
    let size = canvas.size;
    for (x, y) in mask.pixels() {
        let level = shape.head.level(x as f64 + 0.5, y as f64 + 0.5).min(1.0);
        let mut shade = 1.0 + 0.3 * (1.0 - level);
        if mask.is_rim(x, y) {
            shade *= 0.75;
        }
        for c in 0..3 {
            *canvas.px(c, x, y) = (look.tint[c] + shift[c]) * illum[y * size + x] * shade;
        }
    }
    // specular highlight near the dome top
    if shape.head.a >= 4.0 && rng.gen_bool(0.5) {
        let hx = (shape.head.cx - 0.3 * shape.head.a).floor();
        let hy = (shape.head.cy - 0.3 * shape.head.a).floor();
        if hx >= 0.0 && hy >= 0.0 && (hx as usize) < size && (hy as usize) < size && mask.get(hx as usize, hy as usize) {
            for (c, v) in [0.97, 0.92, 0.88].into_iter().enumerate() {
                *canvas.px(c, hx as usize, hy as usize) = v;
            }
        }
    }
}

fn paint_distractor<R: Rng>(rng: &mut R, canvas: &mut Canvas, look: &Look) {
    let size = canvas.size;
    let s = size as f64;
    if rng.gen_bool(0.5) {
        // flat reddish patch: polyp colors without dome or rim
        let shift = sample_shift(rng);
        let cx = rng.gen_range(0.2..=0.8) * s;
        let cy = rng.gen_range(0.2..=0.8) * s;
        let parts: Vec<Ellipse> = (0..rng.gen_range(1..=2))
            .map(|_| Ellipse {
                cx: cx + rng.gen_range(-2.0..=2.0),
                cy: cy + rng.gen_range(-2.0..=2.0),
                a: rng.gen_range(2.0..=5.0),
                b: rng.gen_range(1.5..=4.0),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                if parts.iter().any(|e| e.level(x as f64 + 0.5, y as f64 + 0.5) <= 1.0) {
                    for c in 0..3 {
                        let v = canvas.px(c, x, y);
                        *v += 0.7 * shift[c] * (*v / look.tint[c]).clamp(0.5, 1.5);
                    }
                }
            }
        }
    } else {
        // bubble: bright ring, faintly brighter inside
        let r = rng.gen_range(2.5..=6.0);
        let cx = rng.gen_range(r..=s - r);
        let cy = rng.gen_range(r..=s - r);
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                for c in 0..3 {
                    let v = canvas.px(c, x, y);
                    if (d - r).abs() < 0.8 {
                        *v = 0.5 * *v + 0.5;
                    } else if d < r {
                        *v += 0.08;
                    }
                }
            }
        }
    }
}

pub(crate) struct RenderedProcedure {
    pub pixels: Vec<u8>,
    pub masks: Vec<(EventId, Vec<Mask>)>,
}

pub(crate) fn render_procedure(config: &GeneratorConfig, manifest: &DatasetManifest, proc: &ProcedureInfo) -> RenderedProcedure {
    let size = config.frame_size;
    let pid = u64::from(proc.procedure_id);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[2, pid]));
    let look = Look {
        tint: [
            0.70 + rng.gen_range(-0.06..=0.06),
            0.45 + rng.gen_range(-0.05..=0.05),
            0.35 + rng.gen_range(-0.04..=0.04),
        ],
        red_shift: sample_shift(&mut rng),
    };

    // frame index → (event position, position within the event)
    let mut owner: Vec<Option<(usize, usize)>> = vec![None; proc.num_frames()];
    let mut shapes = Vec::with_capacity(proc.event_ids.len());
    for (k, &eid) in proc.event_ids.iter().enumerate() {
        let e = &manifest.events[eid as usize];
        let mut erng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[3, u64::from(eid)]));
        let shift = {
            let own = sample_shift(&mut erng);
            // events share the procedure's shift direction with some spread
            [0, 1, 2].map(|c| 0.5 * (own[c] + look.red_shift[c]))
        };
        shapes.push((
            shift,
            event_masks(&mut erng, size, e.size_class, e.morphology_class, e.frame_indices.len()),
        ));
        for (j, &f) in e.frame_indices.iter().enumerate() {
            owner[f as usize] = Some((k, j));
        }
    }

    let mut pixels = Vec::with_capacity(proc.num_frames() * 3 * size * size);
    let mut next_distractor = proc.distractor_frames.iter().peekable();
    for (f, own) in owner.iter().enumerate() {
        let (mut canvas, illum) = background(&mut rng, &look, size);
        match own {
            Some((k, j)) => {
                let (shift, frames) = &shapes[*k];
                let (shape, mask) = &frames[*j];
                paint_polyp(&mut rng, &mut canvas, &illum, &look, shift, shape, mask);
            }
            None => {
                if next_distractor.peek() == Some(&&(f as u32)) {
                    next_distractor.next();
                    paint_distractor(&mut rng, &mut canvas, &look);
                }
            }
        }
        for v in canvas.data.iter_mut() {
            *v += rng.gen_range(-0.03..=0.03);
        }
        canvas.quantize_into(&mut pixels);
    }
    let masks = proc
        .event_ids
        .iter()
        .zip(shapes)
        .map(|(&eid, (_, frames))| (eid, frames.into_iter().map(|(_, m)| m).collect()))
        .collect();
    RenderedProcedure { pixels, masks }
}
