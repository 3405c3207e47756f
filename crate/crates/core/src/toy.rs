//! Synthetic geometric scenes used by the demo, tests and benchmarks.

use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

    /// Whether the point `(dy, dx)` relative to the centre lies inside a shape
    /// of the given radius.
    pub fn contains(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            Shape::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            Shape::Ring => {
                let d = dy * dy + dx * dx;
                d <= r * r && d >= (0.5 * r) * (0.5 * r)
            }
        }
    }
}

/// Fixed palette so each class has a recognisable color.
pub const PALETTE: [[f32; 3]; 6] =
    [[0.9, 0.15, 0.1], [0.1, 0.35, 0.9], [0.15, 0.8, 0.2], [0.95, 0.8, 0.1], [0.7, 0.2, 0.8], [0.1, 0.8, 0.8]];

/// Smooth two-color vertical gradient with mild uniform noise.
pub fn background<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let top: [f32; 3] = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let bot: [f32; 3] = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let mut t = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            let f = y as f32 / (h.max(2) - 1) as f32;
            let base = top[c] * (1.0 - f) + bot[c] * f;
            for x in 0..w {
                t.data_mut()[(c * h + y) * w + x] = (base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }
    t
}

/// Paints `shape` onto `rgb` (and sets `mask` to 1 when given).
pub fn paint(
    rgb: &mut Tensor<f32>,
    mut mask: Option<&mut Tensor<f32>>,
    shape: Shape,
    cy: f32,
    cx: f32,
    r: f32,
    color: [f32; 3],
) {
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    for y in 0..h {
        for x in 0..w {
            if shape.contains(y as f32 + 0.5 - cy, x as f32 + 0.5 - cx, r) {
                for (c, &v) in color.iter().enumerate() {
                    rgb.data_mut()[(c * h + y) * w + x] = v;
                }
                if let Some(m) = mask.as_deref_mut() {
                    m.data_mut()[y * w + x] = 1.0;
                }
            }
        }
    }
}

/// A group of `n` `size×size` scenes sharing one co-salient object (a disc
/// of a fixed color at varying position and size) plus one distractor of a
/// different shape and color per image. Returns `N×3×S×S` images and
/// `N×1×S×S` masks of the shared object only.
pub fn toy_group(n: usize, size: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut images = Vec::with_capacity(n * 3 * size * size);
    let mut masks = Vec::with_capacity(n * size * size);
    let s = size as f32;
    for i in 0..n {
        let mut rng = rng::stream(seed, &[i as u64]);
        let mut rgb = background(size, size, &mut rng);
        let mut mask = Tensor::zeros(&[1, size, size]);
        let r = rng.gen_range(0.14..0.22) * s;
        let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.25..0.45) * s);
        let dshape = Shape::ALL[1 + rng.gen_range(0..3)];
        let dcolor = PALETTE[1 + rng.gen_range(0..PALETTE.len() - 1)];
        let (dy, dx) = (rng.gen_range(0.2..0.8) * s, 0.8 * s);
        paint(&mut rgb, None, dshape, dy, dx, 0.1 * s, dcolor);
        paint(&mut rgb, Some(&mut mask), Shape::Disc, cy, cx, r, PALETTE[0]);
        images.extend_from_slice(rgb.data());
        masks.extend_from_slice(mask.data());
    }
    (
        Tensor::new(&[n, 3, size, size], images).expect("consistent sizes"),
        Tensor::new(&[n, 1, size, size], masks).expect("consistent sizes"),
    )
}

/// One image of class `class`: its shape and color are fixed by the class,
/// position and size vary with `seed`.
pub fn class_image(class: usize, h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = rng::stream(seed, &[class as u64]);
    let mut rgb = background(h, w, &mut rng);
    let mut mask = Tensor::zeros(&[1, h, w]);
    let m = h.min(w) as f32;
    let r = rng.gen_range(0.15..0.25) * m;
    let cy = rng.gen_range(0.3..0.7) * h as f32;
    let cx = rng.gen_range(0.3..0.7) * w as f32;
    paint(&mut rgb, Some(&mut mask), Shape::ALL[class % 4], cy, cx, r, PALETTE[class % PALETTE.len()]);
    (rgb, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_is_deterministic_with_binary_masks() {
        let (a, ma) = toy_group(3, 32, 5);
        let (b, mb) = toy_group(3, 32, 5);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for i in 0..3 {
            let fg: f32 = ma.data()[i * 1024..(i + 1) * 1024].iter().sum();
            assert!(fg > 20.0, "image {i} has an object");
        }
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn class_images_have_objects() {
        for c in 0..4 {
            let (rgb, m) = class_image(c, 24, 30, 1);
            assert_eq!(rgb.shape(), &[3, 24, 30]);
            assert!(m.sum_all() > 10.0);
        }
    }
}
