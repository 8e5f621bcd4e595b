//! Dynamic slicing of arbitrary-size images into encoder-sized tiles.
//!
//! The grid is `m = ceil(H / r)` rows by `n = ceil(W / r)` columns, doubled in
//! both directions when `4 m n` still fits under the slice cap. Images too
//! large for the cap are first shrunk by the largest factor that fits.

mod image;
pub mod pnm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::resize_bilinear;

pub use image::ImageBuffer;

/// Canvas fill value.
pub const PAD_VALUE: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r: usize,
    pub m: usize,
    pub n: usize,
    pub quadrupled: bool,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub scale_applied: f64,
}

impl GridSpec {
    /// A fixed `m x n` grid with no rescale, bypassing the slicing rule.
    pub fn fixed(r: usize, m: usize, n: usize) -> Self {
        Self {
            r,
            m,
            n,
            quadrupled: false,
            canvas_h: m * r,
            canvas_w: n * r,
            scale_applied: 1.0,
        }
    }

    pub fn slice_count(&self) -> usize {
        self.m * self.n
    }

    /// Size of an `height x width` image after the pre-rescale, before padding.
    pub fn content_dims(&self, height: usize, width: usize) -> (usize, usize) {
        if self.scale_applied >= 1.0 {
            return (height, width);
        }
        let fit = |v: usize, cap: usize| {
            ((v as f64 * self.scale_applied + 1e-9).floor() as usize).clamp(1, cap)
        };
        (fit(height, self.canvas_h), fit(width, self.canvas_w))
    }
}

fn slicing_rule(h: usize, w: usize, r: usize, max_slices: usize) -> (usize, usize, bool) {
    let (m, n) = (h.div_ceil(r), w.div_ceil(r));
    if 4 * m * n <= max_slices {
        (2 * m, 2 * n, true)
    } else {
        (m, n, false)
    }
}

/// Chooses the slice grid for an `h x w` image at base resolution `r` with at
/// most `max_slices` slices.
pub fn compute_grid(h: usize, w: usize, r: usize, max_slices: usize) -> Result<GridSpec> {
    if h == 0 || w == 0 || r == 0 || max_slices == 0 {
        return Err(Error::Precondition(format!(
            "compute_grid needs positive sizes, got H={h} W={w} r={r} M={max_slices}"
        )));
    }
    let (m, n, quadrupled) = slicing_rule(h, w, r, max_slices);
    if m * n <= max_slices {
        return Ok(GridSpec {
            r,
            m,
            n,
            quadrupled,
            canvas_h: m * r,
            canvas_w: n * r,
            scale_applied: 1.0,
        });
    }

    // Largest s such that some a x b grid with a*b <= M holds (sH, sW):
    // s(a, b) = min(a r / H, b r / W), compared as exact fractions.
    let (mut best_num, mut best_den) = (0u128, 1u128);
    for a in 1..=max_slices {
        let b = max_slices / a;
        let (p1, q1) = ((a * r) as u128, h as u128);
        let (p2, q2) = ((b * r) as u128, w as u128);
        let (p, q) = if p1 * q2 <= p2 * q1 {
            (p1, q1)
        } else {
            (p2, q2)
        };
        if p * best_den > best_num * q {
            (best_num, best_den) = (p, q);
        }
    }
    let scale = best_num as f64 / best_den as f64;
    let probe = GridSpec {
        r,
        m: 0,
        n: 0,
        quadrupled: false,
        canvas_h: usize::MAX,
        canvas_w: usize::MAX,
        scale_applied: scale,
    };
    let (h2, w2) = probe.content_dims(h, w);
    let (m, n, quadrupled) = slicing_rule(h2, w2, r, max_slices);
    debug_assert!(m * n <= max_slices);
    Ok(GridSpec {
        r,
        m,
        n,
        quadrupled,
        canvas_h: m * r,
        canvas_w: n * r,
        scale_applied: scale,
    })
}

/// Applies the grid's pre-rescale (bilinear) if any.
pub fn fit_to_grid(img: &ImageBuffer, grid: &GridSpec) -> Result<ImageBuffer> {
    let (h, w) = grid.content_dims(img.height(), img.width());
    if (h, w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    ImageBuffer::from_tensor(&resize_bilinear(&img.to_tensor(), h, w)?)
}

/// Centers `img` on a `canvas_h x canvas_w` canvas filled with [`PAD_VALUE`].
pub fn pad_to_canvas(img: &ImageBuffer, grid: &GridSpec) -> Result<ImageBuffer> {
    if img.height() > grid.canvas_h || img.width() > grid.canvas_w {
        return Err(Error::Precondition(format!(
            "{}x{} image does not fit a {}x{} canvas",
            img.height(),
            img.width(),
            grid.canvas_h,
            grid.canvas_w
        )));
    }
    let mut canvas = ImageBuffer::filled(grid.canvas_h, grid.canvas_w, img.channels(), PAD_VALUE);
    let (top, left) = canvas_offset(img, grid);
    canvas.blit(img, top, left)?;
    Ok(canvas)
}

/// Top-left corner of the centered image on the canvas.
pub fn canvas_offset(img: &ImageBuffer, grid: &GridSpec) -> (usize, usize) {
    (
        (grid.canvas_h - img.height()) / 2,
        (grid.canvas_w - img.width()) / 2,
    )
}

/// Cuts the canvas into `m * n` slices of `r x r`, row-major.
pub fn extract_slices(canvas: &ImageBuffer, grid: &GridSpec) -> Result<Vec<ImageBuffer>> {
    if canvas.height() != grid.canvas_h || canvas.width() != grid.canvas_w {
        return Err(Error::shape(
            "extract_slices",
            format!(
                "canvas {}x{} for grid {}x{}",
                canvas.height(),
                canvas.width(),
                grid.canvas_h,
                grid.canvas_w
            ),
        ));
    }
    let r = grid.r;
    (0..grid.m)
        .flat_map(|row| (0..grid.n).map(move |col| (row, col)))
        .map(|(row, col)| canvas.crop(row * r, col * r, r, r))
        .collect()
}

/// Reassembles row-major slices into the canvas.
pub fn stitch_slices(slices: &[ImageBuffer], grid: &GridSpec) -> Result<ImageBuffer> {
    if slices.len() != grid.slice_count() {
        return Err(Error::shape(
            "stitch_slices",
            format!("{} slices for a {}x{} grid", slices.len(), grid.m, grid.n),
        ));
    }
    let mut canvas = ImageBuffer::filled(
        grid.canvas_h,
        grid.canvas_w,
        slices[0].channels(),
        PAD_VALUE,
    );
    for (k, s) in slices.iter().enumerate() {
        if s.height() != grid.r || s.width() != grid.r {
            return Err(Error::shape(
                "stitch_slices",
                format!("slice {k} is {}x{}", s.height(), s.width()),
            ));
        }
        canvas.blit(s, (k / grid.n) * grid.r, (k % grid.n) * grid.r)?;
    }
    Ok(canvas)
}

/// Aspect-preserving resize so the longer side is `r`, centered on an `r x r` canvas.
pub fn lowres_view(img: &ImageBuffer, r: usize) -> Result<ImageBuffer> {
    if r == 0 {
        return Err(Error::Precondition("lowres_view needs r >= 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let long = h.max(w) as f64;
    let target = |v: usize| ((v as f64 * r as f64 / long).round() as usize).clamp(1, r);
    let (h2, w2) = (target(h), target(w));
    let resized = if (h2, w2) == (h, w) {
        img.clone()
    } else {
        ImageBuffer::from_tensor(&resize_bilinear(&img.to_tensor(), h2, w2)?)?
    };
    pad_to_canvas(&resized, &GridSpec::fixed(r, 1, 1))
}

/// Everything the encoder needs from one input image.
#[derive(Clone, Debug)]
pub struct SlicedImage {
    pub grid: GridSpec,
    pub canvas: ImageBuffer,
    pub slices: Vec<ImageBuffer>,
    pub lowres: ImageBuffer,
}

pub fn slice_image(img: &ImageBuffer, r: usize, max_slices: usize) -> Result<SlicedImage> {
    let grid = compute_grid(img.height(), img.width(), r, max_slices)?;
    let canvas = pad_to_canvas(&fit_to_grid(img, &grid)?, &grid)?;
    let slices = extract_slices(&canvas, &grid)?;
    let lowres = lowres_view(img, r)?;
    Ok(SlicedImage {
        grid,
        canvas,
        slices,
        lowres,
    })
}
