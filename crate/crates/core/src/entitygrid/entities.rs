//! The entity catalog and how each entity is drawn.

use serde::{Deserialize, Serialize};

use super::font;

pub type Rgb = [f64; 3];

const BLACK: Rgb = [0.0, 0.0, 0.0];
const RED: Rgb = [0.86, 0.1, 0.1];
const GREEN: Rgb = [0.1, 0.65, 0.2];
const BLUE: Rgb = [0.15, 0.3, 0.85];
const YELLOW: Rgb = [0.95, 0.8, 0.1];
const BROWN: Rgb = [0.55, 0.33, 0.15];
const PURPLE: Rgb = [0.55, 0.2, 0.7];
const ORANGE: Rgb = [0.95, 0.5, 0.1];
const GRAY: Rgb = [0.25, 0.25, 0.25];
const WHITE: Rgb = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Text,
    Digit,
    Object,
    Shape,
    RelPos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rect,
    /// Apex up.
    Triangle,
    Diamond,
}

/// One filled primitive in entity-local units: the entity occupies
/// `[-1, 1]^2`, `(cx, cy)` is the part center, `(hx, hy)` its half extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub shape: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub color: Rgb,
}

impl Part {
    pub const fn new(shape: ShapeKind, cx: f64, cy: f64, hx: f64, hy: f64, color: Rgb) -> Self {
        Self {
            shape,
            cx,
            cy,
            hx,
            hy,
            color,
        }
    }

    /// Whether local point `(u, v)` is covered.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = ((u - self.cx) / self.hx, (v - self.cy) / self.hy);
        match self.shape {
            ShapeKind::Ellipse => du * du + dv * dv <= 1.0,
            ShapeKind::Rect => du.abs() <= 1.0 && dv.abs() <= 1.0,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 1.0,
            // apex (0, -1), base from (-1, 1) to (1, 1)
            ShapeKind::Triangle => dv <= 1.0 && du.abs() <= (dv + 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Text in the built-in bitmap font at the largest scale that fits.
    Glyphs { text: String, color: Rgb },
    /// Union of parts, later parts painted over earlier ones.
    Parts(Vec<Part>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntitySpec {
    pub id: u32,
    pub kind: EntityKind,
    pub label: String,
    pub render: Primitive,
    /// Half-size of a part-based entity as a fraction of the base resolution `R`.
    pub extent: f64,
}

/// Default half-size: the entity spans `3R/8`, inside the `R/2` spacing of the positions.
pub const DEFAULT_EXTENT: f64 = 3.0 / 16.0;

impl EntitySpec {
    fn parts(id: u32, kind: EntityKind, label: &str, parts: Vec<Part>) -> Self {
        Self {
            id,
            kind,
            label: label.into(),
            render: Primitive::Parts(parts),
            extent: DEFAULT_EXTENT,
        }
    }

    fn glyphs(id: u32, kind: EntityKind, text: &str, color: Rgb) -> Self {
        Self {
            id,
            kind,
            label: text.into(),
            render: Primitive::Glyphs {
                text: text.into(),
                color,
            },
            extent: DEFAULT_EXTENT,
        }
    }

    /// A single filled disk of radius `extent * R`.
    pub fn disk(id: u32, label: &str, extent: f64, color: Rgb) -> Self {
        Self {
            id,
            kind: EntityKind::Shape,
            label: label.into(),
            render: Primitive::Parts(vec![Part::new(
                ShapeKind::Ellipse,
                0.0,
                0.0,
                1.0,
                1.0,
                color,
            )]),
            extent,
        }
    }

    /// Largest usable cell side in pixels at base resolution `r`: the
    /// spacing between neighbouring positions minus a two-pixel margin.
    pub fn cell_limit(r: usize) -> usize {
        (r / 2).saturating_sub(2)
    }

    /// Integer glyph scale for text entities, if the text fits at all.
    pub fn glyph_scale(text: &str, r: usize) -> Option<usize> {
        let limit = Self::cell_limit(r);
        let (w, h) = font::text_size(text, 1);
        (w > 0 && w <= limit && h <= limit).then(|| (limit / w).min(limit / h).max(1))
    }

    /// Pixel width and height of the rendered entity at base resolution `r`.
    pub fn pixel_size(&self, r: usize) -> Option<(usize, usize)> {
        match &self.render {
            Primitive::Glyphs { text, .. } => {
                Self::glyph_scale(text, r).map(|s| font::text_size(text, s))
            }
            Primitive::Parts(_) => {
                let side = (2.0 * self.extent * r as f64).round() as usize;
                (side >= 1).then_some((side, side))
            }
        }
    }

    pub fn fits(&self, r: usize) -> bool {
        let limit = Self::cell_limit(r);
        self.pixel_size(r)
            .is_some_and(|(w, h)| w <= limit && h <= limit)
    }
}

/// The full built-in entity set.
pub fn catalog() -> Vec<EntitySpec> {
    use EntityKind::*;
    use ShapeKind::*;
    let mut out = Vec::new();
    let mut id = 0;
    let mut next = || {
        id += 1;
        id
    };
    for word in [
        "apple", "cat", "book", "tree", "moon", "fish", "lamp", "river",
    ] {
        out.push(EntitySpec::glyphs(next(), Text, word, BLACK));
    }
    for digits in ["0.596", "42", "7", "3.14", "9", "2024", "0.5", "18"] {
        out.push(EntitySpec::glyphs(next(), Digit, digits, BLUE));
    }
    let shapes = [
        ("circle", vec![Part::new(Ellipse, 0.0, 0.0, 1.0, 1.0, RED)]),
        (
            "triangle",
            vec![Part::new(Triangle, 0.0, 0.0, 1.0, 1.0, GREEN)],
        ),
        ("rectangle", vec![Part::new(Rect, 0.0, 0.0, 1.0, 0.6, BLUE)]),
        (
            "diamond",
            vec![Part::new(Diamond, 0.0, 0.0, 1.0, 1.0, PURPLE)],
        ),
        (
            "cross",
            vec![
                Part::new(Rect, 0.0, 0.0, 1.0, 0.3, ORANGE),
                Part::new(Rect, 0.0, 0.0, 0.3, 1.0, ORANGE),
            ],
        ),
    ];
    for (label, parts) in shapes {
        out.push(EntitySpec::parts(next(), Shape, label, parts));
    }
    let objects = [
        (
            "teddy bear",
            vec![
                Part::new(Ellipse, -0.6, -0.65, 0.3, 0.3, BROWN),
                Part::new(Ellipse, 0.6, -0.65, 0.3, 0.3, BROWN),
                Part::new(Ellipse, 0.0, -0.3, 0.55, 0.5, BROWN),
                Part::new(Ellipse, 0.0, 0.5, 0.7, 0.5, BROWN),
                Part::new(Ellipse, 0.0, -0.15, 0.2, 0.15, BLACK),
            ],
        ),
        (
            "house",
            vec![
                Part::new(Triangle, 0.0, -0.55, 1.0, 0.45, RED),
                Part::new(Rect, 0.0, 0.45, 0.75, 0.55, YELLOW),
                Part::new(Rect, 0.0, 0.7, 0.2, 0.3, BROWN),
            ],
        ),
        (
            "balloon",
            vec![
                Part::new(Ellipse, 0.0, -0.3, 0.6, 0.7, RED),
                Part::new(Rect, 0.0, 0.7, 0.06, 0.3, GRAY),
            ],
        ),
        (
            "flower",
            vec![
                Part::new(Rect, 0.0, 0.55, 0.08, 0.45, GREEN),
                Part::new(Ellipse, 0.0, -0.75, 0.25, 0.25, PURPLE),
                Part::new(Ellipse, 0.0, -0.05, 0.25, 0.25, PURPLE),
                Part::new(Ellipse, -0.35, -0.4, 0.25, 0.25, PURPLE),
                Part::new(Ellipse, 0.35, -0.4, 0.25, 0.25, PURPLE),
                Part::new(Ellipse, 0.0, -0.4, 0.2, 0.2, YELLOW),
            ],
        ),
        (
            "mushroom",
            vec![
                Part::new(Ellipse, 0.0, -0.2, 1.0, 0.6, RED),
                Part::new(Rect, 0.0, 0.55, 0.3, 0.45, WHITE),
            ],
        ),
    ];
    for (label, parts) in objects {
        out.push(EntitySpec::parts(next(), Object, label, parts));
    }
    let relpos = [
        (
            "traffic light",
            vec![
                Part::new(Rect, 0.0, 0.0, 0.45, 1.0, GRAY),
                Part::new(Ellipse, 0.0, -0.6, 0.28, 0.28, RED),
                Part::new(Ellipse, 0.0, 0.0, 0.28, 0.28, YELLOW),
                Part::new(Ellipse, 0.0, 0.6, 0.28, 0.28, GREEN),
            ],
        ),
        (
            "stop sign",
            vec![
                Part::new(Rect, 0.0, 0.0, 0.9, 0.4, RED),
                Part::new(Rect, 0.0, 0.0, 0.4, 0.9, RED),
                Part::new(Diamond, 0.0, 0.0, 1.25, 1.25, RED),
                Part::new(Rect, 0.0, 0.0, 0.6, 0.12, WHITE),
            ],
        ),
        (
            "fire hydrant",
            vec![
                Part::new(Ellipse, 0.0, -0.6, 0.4, 0.35, RED),
                Part::new(Rect, 0.0, 0.15, 0.45, 0.75, RED),
                Part::new(Rect, 0.0, -0.1, 0.75, 0.15, RED),
                Part::new(Rect, 0.0, 0.9, 0.6, 0.1, GRAY),
            ],
        ),
    ];
    for (label, parts) in relpos {
        out.push(EntitySpec::parts(next(), RelPos, label, parts));
    }
    out
}

/// Catalog entries of the given kinds that fit a cell at base resolution `r`.
pub fn pool(kinds: Option<&[EntityKind]>, r: usize) -> Vec<EntitySpec> {
    catalog()
        .into_iter()
        .filter(|e| kinds.is_none_or(|k| k.contains(&e.kind)))
        .filter(|e| e.fits(r))
        .collect()
}
