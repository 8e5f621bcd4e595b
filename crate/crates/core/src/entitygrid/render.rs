//! Placement lattice and rasterization onto the `2R x 2R` canvas.

use serde::{Deserialize, Serialize};

use super::entities::{EntitySpec, Primitive};
use super::font;
use crate::error::{Error, Result};
use crate::slicer::ImageBuffer;

pub const BACKGROUND: f64 = 1.0;

/// Positions lying on a boundary of the 2x2 slicing.
pub const EDGE_POSITIONS: [u8; 5] = [2, 4, 5, 6, 8];
/// Positions strictly inside one slice.
pub const CENTER_POSITIONS: [u8; 4] = [1, 3, 7, 9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// 1..=9, row-major.
    pub position: u8,
    pub x: f64,
    pub y: f64,
}

/// The nine lattice points `{R/2, R, 3R/2}^2`, numbered row-major from 1.
pub fn position_centers(r: usize) -> [Placement; 9] {
    let half = r as f64 / 2.0;
    std::array::from_fn(|i| Placement {
        position: i as u8 + 1,
        x: (i % 3 + 1) as f64 * half,
        y: (i / 3 + 1) as f64 * half,
    })
}

pub fn placement(position: u8, r: usize) -> Result<Placement> {
    if !(1..=9).contains(&position) {
        return Err(Error::Config(format!("position {position} outside 1..=9")));
    }
    Ok(position_centers(r)[position as usize - 1])
}

/// Whether a placement touches a slice boundary when the canvas is cut 2x2.
pub fn on_slice_boundary(p: &Placement, r: usize) -> bool {
    let b = r as f64;
    p.x == b || p.y == b
}

/// Edge positions derived from the lattice geometry.
pub fn boundary_positions(r: usize) -> Vec<u8> {
    position_centers(r)
        .iter()
        .filter(|p| on_slice_boundary(p, r))
        .map(|p| p.position)
        .collect()
}

pub fn is_edge(position: u8) -> bool {
    EDGE_POSITIONS.contains(&position)
}

/// Pixel bounding box `(top, left, height, width)` of an entity placed at `p`.
pub fn bounding_box(
    e: &EntitySpec,
    p: &Placement,
    r: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (w, h) = e.pixel_size(r).filter(|_| e.fits(r)).ok_or_else(|| {
        Error::Precondition(format!("entity {:?} does not fit a cell at R={r}", e.label))
    })?;
    let top = (p.y - h as f64 / 2.0).floor().max(0.0) as usize;
    let left = (p.x - w as f64 / 2.0).floor().max(0.0) as usize;
    Ok((top, left, h, w))
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.0 + b.2 && b.0 < a.0 + a.2 && a.1 < b.1 + b.3 && b.1 < a.1 + a.3
}

/// Bounding boxes of all entities, failing with [`Error::Generation`] if any two overlap.
pub fn check_layout(
    entities: &[(&EntitySpec, Placement)],
    r: usize,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    let boxes: Vec<_> = entities
        .iter()
        .map(|(e, p)| bounding_box(e, p, r))
        .collect::<Result<_>>()?;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if overlaps(boxes[i], boxes[j]) {
                return Err(Error::Generation(format!(
                    "entities at positions {} and {} overlap",
                    entities[i].1.position, entities[j].1.position
                )));
            }
        }
    }
    Ok(boxes)
}

/// Draws every entity centered on its placement over a white canvas.
///
/// Fails with [`Error::Generation`] when two bounding boxes overlap.
pub fn render_image(entities: &[(&EntitySpec, Placement)], r: usize) -> Result<ImageBuffer> {
    if r == 0 {
        return Err(Error::Config("base resolution must be positive".into()));
    }
    let side = 2 * r;
    let boxes = check_layout(entities, r)?;
    let mut data = vec![BACKGROUND; side * side * 3];
    let mut paint = |y: usize, x: usize, c: &[f64; 3]| {
        if y < side && x < side {
            let o = (y * side + x) * 3;
            data[o..o + 3].copy_from_slice(c);
        }
    };
    for ((e, p), &(top, left, h, w)) in entities.iter().zip(&boxes) {
        match &e.render {
            Primitive::Glyphs { text, color } => {
                let scale = EntitySpec::glyph_scale(text, r).unwrap_or(1);
                for (ci, ch) in text.chars().enumerate() {
                    let Some(rows) = font::glyph(ch) else {
                        continue;
                    };
                    for gy in 0..font::GLYPH_H {
                        for gx in 0..font::GLYPH_W {
                            if !font::is_set(rows, gx, gy) {
                                continue;
                            }
                            for dy in 0..scale {
                                for dx in 0..scale {
                                    let x = left + (ci * font::ADVANCE + gx) * scale + dx;
                                    paint(top + gy * scale + dy, x, color);
                                }
                            }
                        }
                    }
                }
            }
            Primitive::Parts(parts) => {
                let unit = e.extent * r as f64;
                for y in top..top + h + 1 {
                    for x in left..left + w + 1 {
                        let u = (x as f64 + 0.5 - p.x) / unit;
                        let v = (y as f64 + 0.5 - p.y) / unit;
                        if let Some(part) = parts.iter().rev().find(|q| q.contains(u, v)) {
                            paint(y, x, &part.color);
                        }
                    }
                }
            }
        }
    }
    ImageBuffer::new(side, side, 3, data)
}
