use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::tensor::Tensor;

/// One random draw of the training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Multiplicative brightness in `[0.8, 1.2]`.
    pub brightness: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        quarter_turns: 0,
        flip_h: false,
        flip_v: false,
        brightness: 1.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4),
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            brightness: rng.gen_range(0.8..=1.2),
        }
    }

    /// Source pixel `(x, y)` for destination `(x, y)` in an `s × s` image.
    fn source(&self, x: usize, y: usize, s: usize) -> (usize, usize) {
        // undo the operations in reverse order: flips were applied last
        let x = if self.flip_h { s - 1 - x } else { x };
        let y = if self.flip_v { s - 1 - y } else { y };
        let (mut x, mut y) = (x, y);
        for _ in 0..self.quarter_turns % 4 {
            // one quarter turn maps out[y][x] = in[x][s-1-y]
            (x, y) = (s - 1 - y, x);
        }
        (x, y)
    }
}

/// Applies `params` to a `c × s × s` frame; pixels stay in `[0, 1]`.
pub fn augment(pixels: &Tensor, params: &AugmentParams) -> Tensor {
    let shape = pixels.shape();
    assert!(shape.len() == 3 && shape[1] == shape[2], "augment expects c × s × s frames");
    let (c, s) = (shape[0], shape[1]);
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..s {
        for x in 0..s {
            let (sx, sy) = params.source(x, y, s);
            for ch in 0..c {
                out[(ch * s + y) * s + x] = (src[(ch * s + sy) * s + sx] * params.brightness).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Applies the geometric part of `params` to a mask alongside its frame.
pub fn augment_with_mask(pixels: &Tensor, mask: &Mask, params: &AugmentParams) -> (Tensor, Mask) {
    let s = mask.size();
    let mut bits = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let (sx, sy) = params.source(x, y, s);
            bits[y * s + x] = mask.get(sx, sy);
        }
    }
    (augment(pixels, params), Mask::new(s, bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(s: usize) -> Tensor {
        Tensor::new(vec![1, s, s], (0..s * s).map(|i| i as f64 / (s * s) as f64).collect()).unwrap()
    }

    #[test]
    fn quarter_turn_convention() {
        let t = ramp(3);
        let p = AugmentParams {
            quarter_turns: 1,
            ..AugmentParams::IDENTITY
        };
        let out = augment(&t, &p);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.data()[y * 3 + x], t.data()[x * 3 + (2 - y)]);
            }
        }
    }

    #[test]
    fn four_turns_and_double_flips_are_identity() {
        let t = ramp(4);
        let mut p = AugmentParams {
            quarter_turns: 2,
            ..AugmentParams::IDENTITY
        };
        let twice = augment(&augment(&t, &p), &p);
        assert_eq!(twice, t);
        p.quarter_turns = 0;
        p.flip_h = true;
        p.flip_v = true;
        assert_eq!(augment(&augment(&t, &p), &p), t);
    }

    #[test]
    fn brightness_clips() {
        let t = Tensor::filled(&[1, 2, 2], 0.95);
        let p = AugmentParams {
            brightness: 1.2,
            ..AugmentParams::IDENTITY
        };
        assert!(augment(&t, &p).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_follows_frame() {
        let s = 5;
        let mut bits = vec![false; s * s];
        bits[1 * s + 3] = true;
        let mask = Mask::new(s, bits.clone());
        let mut data = vec![0.0; s * s];
        data[1 * s + 3] = 1.0;
        let t = Tensor::new(vec![1, s, s], data).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        use rand::SeedableRng;
        for _ in 0..20 {
            let p = AugmentParams::sample(&mut rng);
            let p = AugmentParams { brightness: 1.0, ..p };
            let (ft, fm) = augment_with_mask(&t, &mask, &p);
            for y in 0..s {
                for x in 0..s {
                    assert_eq!(fm.get(x, y), ft.data()[y * s + x] == 1.0);
                }
            }
        }
    }
}
