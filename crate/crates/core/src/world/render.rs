//! Top-down rasterizer: one glyph per object, containers first, contents on top.

use serde::{Deserialize, Serialize};

use super::attrs::{Shape, Texture};
use super::scene::{ObjectSpec, Scene};

pub const DEFAULT_CELL_PX: usize = 12;
pub const BACKGROUND: [u8; 3] = [40, 40, 40];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, `width * height * 3` bytes.
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// RGBA copy, convenient for canvases.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }
}

/// Glyph membership in unit coordinates (`u` right, `v` down, both in [-1, 1]).
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let theta = v.atan2(u);
    let (au, av) = (u.abs(), v.abs());
    match shape {
        Shape::Block => au < 0.7 && av < 0.45,
        Shape::Flower => r < 0.45 + 0.4 * (5.0 * theta).cos().abs(),
        Shape::Heart => {
            let (x, y) = (u * 1.25, -v * 1.25 + 0.25);
            let a = x * x + y * y - 1.0;
            a * a * a - x * x * y * y * y <= 0.0
        }
        Shape::Star => r < 0.3 + 0.6 * ((2.5 * (theta + std::f64::consts::FRAC_PI_2)).cos().abs().powi(3)),
        Shape::Cross => (au < 0.22 && av < 0.85) || (av < 0.22 && au < 0.6),
        Shape::Triangle => v > -0.8 && v < 0.7 && au <= (v + 0.8) * 0.55,
        Shape::Hexagon => av < 0.7 && au * 0.866 + av * 0.5 < 0.75,
        Shape::LetterT => (v > -0.85 && v < -0.45 && au < 0.75) || (au < 0.2 && v > -0.85 && v < 0.85),
        Shape::LetterL => (u > -0.6 && u < -0.2 && av < 0.85) || (v > 0.45 && v < 0.85 && u > -0.6 && u < 0.6),
        Shape::LetterV => av < 0.85 && (au - 0.65 * (0.85 - v) / 1.7).abs() < 0.2,
        Shape::Bowl => r > 0.6 && r < 0.95,
        Shape::Pan => (r > 0.5 && r < 0.75) || (u > 0.7 && u < 1.0 && av < 0.12),
        Shape::Pallet => {
            let m = au.max(av);
            m > 0.72 && m < 0.95
        }
        Shape::Box => au < 0.95 && av < 0.7 && !(au < 0.72 && av < 0.45),
        Shape::Line => av < 0.14 && au < 0.95,
    }
}

fn patterned(texture: Texture, x: usize, y: usize) -> bool {
    match texture {
        Texture::Plain => false,
        Texture::PolkaDot => x % 4 == 1 && y % 4 == 1,
        Texture::Striped => y.is_multiple_of(3),
        Texture::Checkered => (x / 2 + y / 2).is_multiple_of(2),
        Texture::Diagonal => (x + y).is_multiple_of(4),
        Texture::Grid => x.is_multiple_of(4) || y.is_multiple_of(4),
    }
}

/// Pixel bounding box (x0, y0, x1, y1), exclusive upper bounds, of a cell.
pub fn cell_bbox(cell: (usize, usize), cell_px: usize) -> (usize, usize, usize, usize) {
    let (r, c) = cell;
    (c * cell_px, r * cell_px, (c + 1) * cell_px, (r + 1) * cell_px)
}

/// Draws `obj` into its cell, scaled and offset inside the cell (`scale`, `cx`,
/// `cy` in unit coordinates). Rotation samples the unrotated glyph at the
/// inverse-rotated pixel centre (nearest neighbour).
fn draw(frame: &mut Frame, obj: &ObjectSpec, cell_px: usize, scale: f64, cx: f64, cy: f64) {
    let (x0, y0, _, _) = cell_bbox(obj.position, cell_px);
    let rgb = obj.color.rgb();
    let dark = [rgb[0] / 2, rgb[1] / 2, rgb[2] / 2];
    let angle = (obj.orientation as f64).to_radians();
    let (s, c) = angle.sin_cos();
    for py in 0..cell_px {
        for px in 0..cell_px {
            let u = ((px as f64 + 0.5) / cell_px as f64) * 2.0 - 1.0;
            let v = ((py as f64 + 0.5) / cell_px as f64) * 2.0 - 1.0;
            let (lu, lv) = ((u - cx) / scale, (v - cy) / scale);
            // inverse rotation
            let ru = c * lu + s * lv;
            let rv = -s * lu + c * lv;
            if ru.abs() > 1.0 || rv.abs() > 1.0 || !inside(obj.shape, ru, rv) {
                continue;
            }
            let color = if patterned(obj.texture, px, py) { dark } else { rgb };
            frame.put(x0 + px, y0 + py, color);
        }
    }
}

pub fn render(scene: &Scene) -> Frame {
    render_with(scene, DEFAULT_CELL_PX)
}

pub fn render_with(scene: &Scene, cell_px: usize) -> Frame {
    let (rows, cols) = scene.grid_size;
    let mut frame = Frame::blank(cols * cell_px, rows * cell_px);
    for o in scene.objects.iter().filter(|o| o.is_container) {
        draw(&mut frame, o, cell_px, 1.0, 0.0, 0.0);
    }
    for (i, o) in scene.objects.iter().enumerate() {
        if o.is_container {
            continue;
        }
        if scene.container_at(o.position).is_none() {
            draw(&mut frame, o, cell_px, 1.0, 0.0, 0.0);
            continue;
        }
        // contents of a container share its cell; spread them out
        let mates: Vec<usize> = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_container && m.position == o.position)
            .map(|(j, _)| j)
            .collect();
        let rank = mates.iter().position(|&j| j == i).unwrap();
        let (scale, cx, cy) = match (mates.len(), rank) {
            (1, _) => (0.5, 0.0, 0.0),
            (_, 0) => (0.4, -0.4, -0.4),
            (_, 1) => (0.4, 0.4, 0.4),
            (_, 2) => (0.4, 0.4, -0.4),
            _ => (0.4, -0.4, 0.4),
        };
        draw(&mut frame, o, cell_px, scale, cx, cy);
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::attrs::{Chars, Color};

    fn one(shape: Shape, cell: (usize, usize)) -> Scene {
        Scene {
            grid_size: (4, 4),
            objects: vec![ObjectSpec::new(shape, Chars::new(Color::Red, Texture::Plain), 0, cell)],
            rng_seed: 0,
        }
    }

    #[test]
    fn single_object_yields_one_glyph_region() {
        let f = render(&one(Shape::Block, (1, 2)));
        assert_eq!(f.pixels.len(), f.width * f.height * 3);
        let (x0, y0, x1, y1) = cell_bbox((1, 2), DEFAULT_CELL_PX);
        let mut lit = 0;
        for y in 0..f.height {
            for x in 0..f.width {
                if f.pixel(x, y) != BACKGROUND {
                    assert!(x >= x0 && x < x1 && y >= y0 && y < y1);
                    lit += 1;
                }
            }
        }
        assert!(lit > 0);
    }

    #[test]
    fn every_shape_is_visible() {
        for &s in Shape::ALL {
            let f = render(&one(s, (0, 0)));
            assert!(f.pixels.chunks(3).any(|p| p != BACKGROUND), "{s} draws nothing");
        }
    }

    #[test]
    fn rotation_changes_asymmetric_glyphs() {
        let mut scene = one(Shape::LetterL, (0, 0));
        let a = render(&scene);
        scene.objects[0].orientation = 90;
        assert_ne!(a, render(&scene));
    }
}
