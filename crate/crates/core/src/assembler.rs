//! Final visual token sequence: the low-resolution view, then the slices in
//! row-major order, delimited by three learned separators.
//!
//! With separators the order is
//! `lowres, sep_global, (slice, sep_slice, slice, ..., slice, sep_row) per row`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{join, ParamTree};
use crate::numerics::{Graph, Tensor, Var};
use crate::slicer::GridSpec;

#[derive(Clone, Debug)]
pub struct SeparatorSet<T = Tensor> {
    /// Between the low-resolution view and the slices.
    pub sep_global: T,
    /// Between adjacent slices of one row.
    pub sep_slice: T,
    /// After the last slice of each row.
    pub sep_row: T,
}

impl<T> ParamTree<T> for SeparatorSet<T> {
    type With<U> = SeparatorSet<U>;

    fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<SeparatorSet<U>, E> {
        Ok(SeparatorSet {
            sep_global: f(&join(prefix, "sep_global"), &self.sep_global)?,
            sep_slice: f(&join(prefix, "sep_slice"), &self.sep_slice)?,
            sep_row: f(&join(prefix, "sep_row"), &self.sep_row)?,
        })
    }
}

impl SeparatorSet {
    pub fn init<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            sep_global: Tensor::randn(&[dim], std, rng),
            sep_slice: Tensor::randn(&[dim], std, rng),
            sep_row: Tensor::randn(&[dim], std, rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum SpanTag {
    Lowres,
    SepGlobal,
    Slice { index: usize },
    SepSlice,
    SepRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    #[serde(flatten)]
    pub tag: SpanTag,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub total: usize,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug)]
pub struct AssembledSequence {
    pub tokens: Tensor,
    pub layout: Layout,
}

/// Span layout for the given grid and per-view token counts.
pub fn layout(grid: &GridSpec, lowres_len: usize, slice_len: usize, use_seps: bool) -> Layout {
    let mut spans = Vec::new();
    let mut offset = 0;
    let mut push = |tag, len| {
        spans.push(Span { tag, offset, len });
        offset += len;
    };
    push(SpanTag::Lowres, lowres_len);
    if use_seps {
        push(SpanTag::SepGlobal, 1);
    }
    for row in 0..grid.m {
        for col in 0..grid.n {
            if use_seps && col > 0 {
                push(SpanTag::SepSlice, 1);
            }
            push(
                SpanTag::Slice {
                    index: row * grid.n + col,
                },
                slice_len,
            );
        }
        if use_seps {
            push(SpanTag::SepRow, 1);
        }
    }
    Layout {
        total: offset,
        spans,
    }
}

/// Closed-form sequence length.
pub fn count_tokens(grid: &GridSpec, lowres_len: usize, slice_len: usize, use_seps: bool) -> usize {
    let (m, n) = (grid.m, grid.n);
    let seps = if use_seps { 1 + m * (n - 1) + m } else { 0 };
    lowres_len + m * n * slice_len + seps
}

fn check_inputs(
    lowres: (usize, usize),
    slices: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<usize> {
    if slices.len() != grid.slice_count() {
        return Err(Error::shape(
            "assemble",
            format!("{} slices for a {}x{} grid", slices.len(), grid.m, grid.n),
        ));
    }
    let ls = slices[0].0;
    if let Some(bad) = slices.iter().find(|s| s.0 != ls || s.1 != lowres.1) {
        return Err(Error::shape(
            "assemble",
            format!("slice tokens {bad:?}, expected ({ls}, {})", lowres.1),
        ));
    }
    Ok(ls)
}

pub fn assemble(
    lowres: &Tensor,
    slices: &[Tensor],
    grid: &GridSpec,
    seps: &SeparatorSet,
    use_seps: bool,
) -> Result<AssembledSequence> {
    let dims: Vec<_> = slices
        .iter()
        .map(|s| s.dims2("assemble"))
        .collect::<Result<_>>()?;
    let l0 = lowres.dims2("assemble")?;
    let ls = check_inputs(l0, &dims, grid)?;
    let layout = layout(grid, l0.0, ls, use_seps);
    let mut data = Vec::with_capacity(layout.total * l0.1);
    for span in &layout.spans {
        let src = match span.tag {
            SpanTag::Lowres => lowres.data(),
            SpanTag::SepGlobal => seps.sep_global.data(),
            SpanTag::SepSlice => seps.sep_slice.data(),
            SpanTag::SepRow => seps.sep_row.data(),
            SpanTag::Slice { index } => slices[index].data(),
        };
        if src.len() != span.len * l0.1 {
            return Err(Error::shape(
                "assemble",
                format!("separator width {} for dim {}", src.len(), l0.1),
            ));
        }
        data.extend_from_slice(src);
    }
    Ok(AssembledSequence {
        tokens: Tensor::new(&[layout.total, l0.1], data)?,
        layout,
    })
}

impl SeparatorSet<Var> {
    /// Graph version of [`assemble`], returning the `[T, D]` token matrix.
    pub fn assemble(
        &self,
        g: &mut Graph,
        lowres: Var,
        slices: &[Var],
        grid: &GridSpec,
        use_seps: bool,
    ) -> Result<(Var, Layout)> {
        let dims: Vec<_> = slices
            .iter()
            .map(|&s| g.value(s).dims2("assemble"))
            .collect::<Result<_>>()?;
        let l0 = g.value(lowres).dims2("assemble")?;
        let ls = check_inputs(l0, &dims, grid)?;
        let layout = layout(grid, l0.0, ls, use_seps);
        let parts: Vec<Var> = layout
            .spans
            .iter()
            .map(|s| match s.tag {
                SpanTag::Lowres => lowres,
                SpanTag::SepGlobal => self.sep_global,
                SpanTag::SepSlice => self.sep_slice,
                SpanTag::SepRow => self.sep_row,
                SpanTag::Slice { index } => slices[index],
            })
            .collect();
        Ok((g.concat_rows(&parts)?, layout))
    }
}
