//! Procedural aligned "faces" built from simple shapes, used for tests, the
//! toy training profile and demos.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_ae::ImageTensor;

#[derive(Debug, Clone)]
pub struct ToyFace {
    pub image: ImageTensor,
    /// Foreground matte (face and hair).
    pub matte: Array2<f32>,
}

type Rgb = [f32; 3];

enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    /// Ellipse clipped to `y < cut`.
    Cap { cx: f32, cy: f32, rx: f32, ry: f32, cut: f32 },
    Segment { x0: f32, y0: f32, x1: f32, y1: f32, half_width: f32 },
    /// Elliptical band of thickness `width` outside the `rx, ry` ellipse.
    Ring { cx: f32, cy: f32, rx: f32, ry: f32, width: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Shape::Cap { cx, cy, rx, ry, cut } => {
                y < cut && ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
            Shape::Segment { x0, y0, x1, y1, half_width } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
                px * px + py * py <= half_width * half_width
            }
            Shape::Ring { cx, cy, rx, ry, width } => {
                let inside = |a: f32, b: f32| ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0;
                inside(rx + width, ry + width) && !inside(rx, ry)
            }
        }
    }
}

/// Shapes are described on a 256 reference canvas.
struct Scene {
    background: (Rgb, Rgb),
    layers: Vec<(Shape, Rgb, bool)>,
}

const SUPERSAMPLE: usize = 4;

impl Scene {
    fn render(&self, size: usize) -> ToyFace {
        let scale = 256.0 / size as f32;
        let mut img = Array3::<f32>::zeros((3, size, size));
        let mut matte = Array2::<f32>::zeros((size, size));
        let ss = SUPERSAMPLE as f32;
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0f32; 3];
                let mut fg = 0f32;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = (x as f32 + (sx as f32 + 0.5) / ss) * scale;
                        let py = (y as f32 + (sy as f32 + 0.5) / ss) * scale;
                        let t = py / 256.0;
                        let (top, bottom) = self.background;
                        let mut c: Rgb = std::array::from_fn(|i| top[i] * (1.0 - t) + bottom[i] * t);
                        let mut is_fg = false;
                        for (shape, color, foreground) in &self.layers {
                            if shape.contains(px, py) {
                                c = *color;
                                is_fg |= *foreground;
                            }
                        }
                        for i in 0..3 {
                            acc[i] += c[i];
                        }
                        fg += is_fg as u8 as f32;
                    }
                }
                let n = ss * ss;
                for (c, v) in acc.iter().enumerate() {
                    img[[c, y, x]] = (v / n) * 2.0 - 1.0;
                }
                matte[[y, x]] = fg / n;
            }
        }
        ToyFace {
            image: ImageTensor::new(img).expect("colors in range"),
            matte,
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, c: Rgb, amount: f32) -> Rgb {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn random_scene<R: Rng>(rng: &mut R) -> Scene {
    const SKIN: [Rgb; 4] = [
        [0.82, 0.62, 0.48],
        [0.87, 0.67, 0.52],
        [0.70, 0.50, 0.36],
        [0.50, 0.34, 0.24],
    ];
    const HAIR: [Rgb; 4] = [
        [0.10, 0.08, 0.07],
        [0.30, 0.18, 0.10],
        [0.45, 0.28, 0.12],
        [0.55, 0.22, 0.10],
    ];
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
    let bg_top = [u(0.55, 0.95), u(0.55, 0.95), u(0.55, 0.95)];
    let bg_bottom = [u(0.45, 0.95), u(0.45, 0.95), u(0.45, 0.95)];
    let skin_idx = rng.random_range(0..SKIN.len());
    let skin = jitter(rng, SKIN[skin_idx], 0.04);
    let hair_idx = rng.random_range(0..HAIR.len());
    let hair = jitter(rng, HAIR[hair_idx], 0.04);
    let iris = jitter(rng, [0.15, 0.2, 0.25], 0.1);
    let lips = jitter(rng, [0.65, 0.25, 0.28], 0.08);
    let shade = skin.map(|v| v * 0.55);
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);

    // Geometry varies over several pixels even at 32 px, since a sketch can
    // only pin down shape, never color.
    let (fcx, fcy) = (128.0 + u(-10.0, 10.0), 150.0 + u(-8.0, 8.0));
    let (frx, fry) = (u(70.0, 112.0), u(92.0, 124.0));
    let face = Shape::Ellipse {
        cx: fcx,
        cy: fcy,
        rx: frx,
        ry: fry,
    };
    let cap = |cut: f32, grow: f32, lift: f32| Shape::Cap {
        cx: fcx,
        cy: fcy - lift,
        rx: frx + grow,
        ry: fry + grow,
        cut,
    };
    let mut layers = Vec::new();
    let style = rng.random_range(0..4);
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
    match style {
        // Short crop.
        0 => layers.push((cap(fcy - fry * u(0.45, 0.7), u(6.0, 14.0), u(4.0, 12.0)), hair, true)),
        // Long: a crown plus side curtains reaching below the ears.
        1 => {
            layers.push((cap(fcy - fry * 0.3, u(10.0, 20.0), u(6.0, 16.0)), hair, true));
            let (crx, cry) = (u(20.0, 30.0), fry * u(0.6, 0.75));
            for side in [-1.0f32, 1.0] {
                layers.push((
                    Shape::Ellipse {
                        cx: fcx + side * frx * 0.92,
                        cy: fcy - 10.0,
                        rx: crx,
                        ry: cry,
                    },
                    hair,
                    true,
                ));
            }
        }
        // Fringe over the forehead, added after the face below.
        2 => layers.push((cap(fcy - fry * 0.3, u(6.0, 12.0), u(4.0, 10.0)), hair, true)),
        _ => {}
    }
    layers.push((face, skin, true));
    if style == 2 {
        let cut = fcy - fry * u(0.5, 0.65);
        layers.push((cap(cut, 0.0, 0.0), hair, true));
    }
    let n_freckles = rng.random_range(0..7usize);
    for _ in 0..n_freckles {
        let (x, y) = (fcx + rng.random_range(-60.0..60.0), fcy + rng.random_range(-10.0..40.0));
        let r = rng.random_range(1.5..3.0);
        layers.push((Shape::Ellipse { cx: x, cy: y, rx: r, ry: r }, shade, true));
    }
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
    let eye_y = 110.0 + u(-10.0, 10.0);
    let eye_dx = u(34.0, 50.0);
    let (erx, ery, ir) = (u(12.0, 22.0), u(5.0, 12.0), u(4.0, 7.0));
    let brow_gap = u(14.0, 24.0);
    let brow_w = u(2.0, 5.0);
    let brow_tilt = u(-6.0, 6.0);
    let glasses = (u(0.0, 1.0) < 0.35).then(|| (u(3.0, 7.0), u(5.0, 9.0), u(3.0, 4.5)));
    for side in [-1.0f32, 1.0] {
        let cx = 128.0 + side * eye_dx;
        layers.push((
            Shape::Segment {
                x0: cx - erx,
                y0: eye_y - brow_gap + side * brow_tilt * 0.5,
                x1: cx + erx,
                y1: eye_y - brow_gap - side * brow_tilt * 0.5,
                half_width: brow_w,
            },
            hair.map(|v| v * 0.8),
            true,
        ));
        layers.push((
            Shape::Ellipse {
                cx,
                cy: eye_y,
                rx: erx,
                ry: ery,
            },
            [0.95, 0.95, 0.93],
            true,
        ));
        layers.push((
            Shape::Ellipse {
                cx: cx + u(-4.0, 4.0),
                cy: eye_y,
                rx: ir,
                ry: ir.min(ery),
            },
            iris,
            true,
        ));
        if let Some((gx, gy, width)) = glasses {
            layers.push((
                Shape::Ring {
                    cx,
                    cy: eye_y,
                    rx: erx + gx,
                    ry: ery + gy,
                    width,
                },
                [0.08, 0.08, 0.1],
                true,
            ));
        }
    }
    if let Some((gx, _, width)) = glasses {
        let inner = 128.0 - eye_dx + erx + gx;
        layers.push((
            Shape::Segment {
                x0: inner,
                y0: eye_y - 2.0,
                x1: 256.0 - inner,
                y1: eye_y - 2.0,
                half_width: width * 0.5,
            },
            [0.08, 0.08, 0.1],
            true,
        ));
    }
    let nose_y = 176.0 + u(-5.0, 5.0);
    let nostril_dx = u(6.0, 13.0);
    let nostril_r = u(2.0, 4.0);
    let nose_x = 128.0 + u(-4.0, 4.0);
    layers.push((
        Shape::Segment {
            x0: 128.0,
            y0: u(140.0, 158.0),
            x1: nose_x,
            y1: nose_y - 4.0,
            half_width: u(1.0, 2.0),
        },
        shade,
        true,
    ));
    for side in [-1.0f32, 1.0] {
        layers.push((
            Shape::Ellipse {
                cx: nose_x + side * nostril_dx,
                cy: nose_y,
                rx: nostril_r,
                ry: nostril_r * 0.7,
            },
            shade.map(|v| v * 0.6),
            true,
        ));
    }
    let (mcx, mcy) = (128.0 + u(-6.0, 6.0), 214.0 + u(-10.0, 10.0));
    let (mrx, mry) = (u(14.0, 44.0), u(3.0, 14.0));
    layers.push((
        Shape::Ellipse {
            cx: mcx,
            cy: mcy,
            rx: mrx,
            ry: mry,
        },
        lips,
        true,
    ));
    if rng.random_bool(0.5) {
        layers.push((
            Shape::Segment {
                x0: mcx - mrx * 0.8,
                y0: mcy,
                x1: mcx + mrx * 0.8,
                y1: mcy,
                half_width: 1.0,
            },
            lips.map(|v| v * 0.4),
            true,
        ));
    }
    if rng.random_bool(0.25) {
        let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
        let (w, y) = (mrx * u(0.9, 1.2), mcy - mry - u(5.0, 9.0));
        layers.push((
            Shape::Segment {
                x0: mcx - w,
                y0: y + u(0.0, 4.0),
                x1: mcx + w,
                y1: y + u(0.0, 4.0),
                half_width: u(3.0, 5.0),
            },
            hair,
            true,
        ));
    }
    Scene {
        background: (bg_top, bg_bottom),
        layers,
    }
}

/// `count` toy faces rendered at `size`, fully determined by `seed`.
pub fn toy_faces(count: usize, size: usize, seed: u64) -> Vec<ToyFace> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            random_scene(&mut rng).render(size)
        })
        .collect()
}

/// Writes `images/toy_NNNN.png` and `mattes/toy_NNNN.png` under `dir`.
pub fn write_toy_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let images = dir.join("images");
    let mattes = dir.join("mattes");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&mattes)?;
    for (i, face) in toy_faces(count, size, seed).into_iter().enumerate() {
        let name = format!("toy_{i:04}.png");
        face.image.to_rgb8().save(images.join(&name))?;
        let n = size as u32;
        let matte = image::GrayImage::from_fn(n, n, |x, y| {
            image::Luma([(face.matte[[y as usize, x as usize]] * 255.0).round() as u8])
        });
        matte.save(mattes.join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_seeded_and_varied() {
        let a = toy_faces(4, 32, 9);
        let b = toy_faces(4, 32, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.matte, y.matte);
        }
        assert_ne!(a[0].image, a[1].image);
        assert_ne!(a[0].image, toy_faces(1, 32, 10)[0].image);
    }

    #[test]
    fn mattes_cover_the_face_centre() {
        for f in toy_faces(5, 64, 1) {
            assert_eq!(f.matte[[36, 32]], 1.0);
            assert!(f.matte.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(f.matte[[63, 0]] < 1.0);
        }
    }
}
