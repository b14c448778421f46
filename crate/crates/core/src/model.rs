//! The disentangled attention-only transformer.
//!
//! Each layer computes `attn(h; A) = softmax(mask(h·A·hᵀ))·h` and appends the
//! result to the right of its input, so `h^(i)` has `2^i · width(h^(0))`
//! columns. Weight matrices act as `h·A·hᵀ`: the row block of `A` selects
//! query features, the column block selects key features.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::task::{Layout, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// Position `i` attends only to positions `<= i`.
    Causal,
    /// Causal mask-free: unrestricted attention.
    Cmf,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Causal => "causal",
            MaskMode::Cmf => "cmf",
        }
    }
}

impl core::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "cmf" => Ok(MaskMode::Cmf),
            other => Err(Error::domain(alloc::format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Attention matrices, readout and the input geometry they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub d: usize,
    pub mask: MaskMode,
    pub padding: Padding,
    /// `A^(1) .. A^(k)`; `attn[i]` is square with side `width(i)`.
    pub attn: Vec<Matrix>,
    /// Readout, `d x width(k)`.
    pub w: Matrix,
    /// Rows of `h^(k)·Wᵀ` compared against `Y`.
    pub readout: Range<usize>,
}

impl ModelWeights {
    pub fn new(
        d: usize,
        mask: MaskMode,
        padding: Padding,
        attn: Vec<Matrix>,
        w: Matrix,
        readout: Range<usize>,
    ) -> Result<Self> {
        let wts = ModelWeights {
            d,
            mask,
            padding,
            attn,
            w,
            readout,
        };
        wts.validate()?;
        Ok(wts)
    }

    /// All-zero weights of the given depth, reading rows `0..d`.
    pub fn zeros(d: usize, depth: usize, mask: MaskMode, padding: Padding) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("d must be at least 1"));
        }
        let layout = Layout::new(d, padding);
        let attn = (0..depth)
            .map(|i| {
                let n = layout.width0() << i;
                Matrix::zeros(n, n)
            })
            .collect();
        let w = Matrix::zeros(d, layout.width0() << depth);
        ModelWeights::new(d, mask, padding, attn, w, 0..d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::domain("d must be at least 1"));
        }
        for (i, a) in self.attn.iter().enumerate() {
            let n = self.width(i);
            if a.shape() != (n, n) {
                return Err(Error::Layer {
                    layer: i + 1,
                    source: Box::new(Error::shape("attention weights", a.shape(), (n, n))),
                });
            }
        }
        let wk = self.width(self.depth());
        if self.w.shape() != (self.d, wk) {
            return Err(Error::shape("readout weights", self.w.shape(), (self.d, wk)));
        }
        let t = self.layout().seq_len();
        if self.readout.len() != self.d || self.readout.end > t {
            return Err(Error::domain(alloc::format!(
                "readout rows {}..{} must span {} rows inside 0..{t}",
                self.readout.start,
                self.readout.end,
                self.d
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.attn.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.d, self.padding)
    }

    /// Width of `h^(level)`.
    pub fn width(&self, level: usize) -> usize {
        self.layout().width0() << level
    }

    pub fn seq_len(&self) -> usize {
        self.layout().seq_len()
    }

    pub fn num_params(&self) -> usize {
        self.attn.iter().map(|a| a.as_slice().len()).sum::<usize>() + self.w.as_slice().len()
    }
}

/// `h^(0) .. h^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStream {
    pub levels: Vec<Matrix>,
}

impl ResidualStream {
    pub fn last(&self) -> &Matrix {
        self.levels.last().expect("stream always holds h^(0)")
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Row-stochastic attention pattern `softmax(mask(h·A·hᵀ))`.
pub fn attention_scores(h: &Matrix, a: &Matrix, mask: MaskMode) -> Result<Matrix> {
    if a.shape() != (h.cols(), h.cols()) {
        return Err(Error::shape("attention", h.shape(), a.shape()));
    }
    let logits = h.matmul(a)?.matmul_t(h)?;
    let logits = match mask {
        MaskMode::Causal => logits.causal_mask()?,
        MaskMode::Cmf => logits,
    };
    logits.row_softmax()
}

/// `softmax(mask(h·A·hᵀ))·h`.
pub fn attention(h: &Matrix, a: &Matrix, mask: MaskMode) -> Result<Matrix> {
    attention_scores(h, a, mask)?.matmul(h)
}

pub fn forward(wts: &ModelWeights, h0: &Matrix) -> Result<ResidualStream> {
    let expected = (wts.seq_len(), wts.width(0));
    if h0.shape() != expected {
        return Err(Error::shape("forward input", h0.shape(), expected));
    }
    let mut levels = Vec::with_capacity(wts.depth() + 1);
    levels.push(h0.clone());
    for (i, a) in wts.attn.iter().enumerate() {
        let h = &levels[i];
        let next = attention(h, a, wts.mask)
            .and_then(|out| h.hconcat(&out))
            .map_err(|e| Error::Layer {
                layer: i + 1,
                source: Box::new(e),
            })?;
        levels.push(next);
    }
    Ok(ResidualStream { levels })
}

/// `(h^(k)·Wᵀ)` restricted to `rows`.
pub fn readout(stream: &ResidualStream, w: &Matrix, rows: Range<usize>) -> Result<Matrix> {
    let h = stream.last();
    if rows.end > h.rows() || rows.start > rows.end {
        return Err(Error::domain(alloc::format!(
            "readout rows {}..{} out of range 0..{}",
            rows.start,
            rows.end,
            h.rows()
        )));
    }
    if w.cols() != h.cols() {
        return Err(Error::shape("readout", h.shape(), w.shape()));
    }
    h.submatrix(rows, 0..h.cols())?.matmul_t(w)
}

/// Readout at the model's own rows.
pub fn predict(wts: &ModelWeights, h0: &Matrix) -> Result<Matrix> {
    let stream = forward(wts, h0)?;
    readout(&stream, &wts.w, wts.readout.clone())
}
