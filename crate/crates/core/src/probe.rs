//! Looking inside trained and constructed models: where (if anywhere) the
//! target shows up in the stream, prefix invariance under causal masking,
//! and how closely weights match scaled single-block patterns.

use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{forward, MaskMode, ModelWeights, ResidualStream};
use crate::numerics::Matrix;
use crate::task::{below_diagonal_witness, sample_target, Padding, PermutationMatrix, TaskInstance};

/// A `d x d` window of the stream that reproduces the probed matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatch {
    pub level: usize,
    pub row_offset: usize,
    pub col_block: usize,
    pub max_abs_err: f64,
}

impl BlockMatch {
    fn location(&self) -> (usize, usize, usize) {
        (self.level, self.row_offset, self.col_block)
    }
}

/// Every contiguous `d`-row window crossed with every `d`-aligned column
/// block of every level whose max-abs distance to `y` is below `tol`,
/// best first.
pub fn scan_blocks(stream: &ResidualStream, y: &Matrix, tol: f64) -> Result<Vec<BlockMatch>> {
    let d = y.rows();
    if d == 0 || !y.is_square() {
        return Err(Error::shape("scan target", y.shape(), (d, d)));
    }
    let mut found = Vec::new();
    for (level, h) in stream.levels.iter().enumerate() {
        if h.rows() < d {
            continue;
        }
        for row_offset in 0..=h.rows() - d {
            for col_block in 0..h.cols() / d {
                let c0 = col_block * d;
                let mut err = 0.0f64;
                for r in 0..d {
                    let got = &h.row(row_offset + r)[c0..c0 + d];
                    for (g, want) in got.iter().zip(y.row(r)) {
                        err = err.max((g - want).abs());
                    }
                }
                if err < tol {
                    found.push(BlockMatch {
                        level,
                        row_offset,
                        col_block,
                        max_abs_err: err,
                    });
                }
            }
        }
    }
    found.sort_by(|a, b| a.max_abs_err.partial_cmp(&b.max_abs_err).unwrap_or(Ordering::Equal));
    Ok(found)
}

/// Outcome of a prefix-invariance check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lemma1Verdict {
    Pass,
    /// First coordinate (in level, row, column order) whose bits differ.
    Fail { level: usize, row: usize, col: usize },
}

impl Lemma1Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Lemma1Verdict::Pass)
    }
}

/// Replaces row `r` of `h0` with `perturb` and checks that rows `0..r` of
/// every level are bitwise unchanged. Only meaningful for causal models.
pub fn lemma1_check(wts: &ModelWeights, h0: &Matrix, r: usize, perturb: &[f64]) -> Result<Lemma1Verdict> {
    if wts.mask != MaskMode::Causal {
        return Err(Error::mode("prefix invariance requires a causal model"));
    }
    lemma1_compare(wts, h0, r, perturb)
}

/// [`lemma1_check`] without the mask precondition, for demonstrating that
/// unmasked models violate the invariance.
pub fn lemma1_compare(wts: &ModelWeights, h0: &Matrix, r: usize, perturb: &[f64]) -> Result<Lemma1Verdict> {
    if r >= h0.rows() {
        return Err(Error::domain(alloc::format!(
            "row {r} out of range 0..{}",
            h0.rows()
        )));
    }
    if perturb.len() != h0.cols() {
        return Err(Error::shape("perturbation", (1, perturb.len()), (1, h0.cols())));
    }
    let mut h0b = h0.clone();
    h0b.row_mut(r).copy_from_slice(perturb);
    let a = forward(wts, h0)?;
    let b = forward(wts, &h0b)?;
    Ok(first_prefix_difference(&a, &b, r))
}

fn first_prefix_difference(a: &ResidualStream, b: &ResidualStream, rows: usize) -> Lemma1Verdict {
    for (level, (ha, hb)) in a.levels.iter().zip(&b.levels).enumerate() {
        for row in 0..rows {
            for (col, (x, y)) in ha.row(row).iter().zip(hb.row(row)).enumerate() {
                if x.to_bits() != y.to_bits() {
                    return Lemma1Verdict::Fail { level, row, col };
                }
            }
        }
    }
    Lemma1Verdict::Pass
}

/// Separation threshold between binary targets that differ in a row.
pub const WITNESS_TOL: f64 = 0.25;

/// Two-target experiment showing a causal model cannot place `Y` anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessReport {
    /// Row of `Y_P` that carries `Y_j`.
    pub i: usize,
    /// Row of `Y` that is flipped between the two targets.
    pub j: usize,
    /// First stream row whose inputs differ between the two runs.
    pub first_diff_row: usize,
    pub y: Matrix,
    pub y_prime: Matrix,
    pub prefix_identical: bool,
    /// Locations matching `Y` in run one and `Y′` in run two.
    pub common: Vec<(usize, usize, usize)>,
    pub pass: bool,
}

pub fn theorem1_witness<R: Rng + ?Sized>(
    wts: &ModelWeights,
    p: &PermutationMatrix,
    rng: &mut R,
) -> Result<WitnessReport> {
    if wts.mask != MaskMode::Causal {
        return Err(Error::mode("the two-target witness requires a causal model"));
    }
    if wts.padding != Padding::None {
        return Err(Error::mode("the two-target witness requires unpadded input"));
    }
    if p.d() != wts.d {
        return Err(Error::shape("witness permutation", p.matrix().shape(), (wts.d, wts.d)));
    }
    let (i, j) = below_diagonal_witness(p).ok_or_else(|| Error::domain("no below-diagonal witness"))?;
    let y = sample_target(wts.d, rng)?;
    let mut y_prime = y.clone();
    for v in y_prime.row_mut(j) {
        *v = 1.0 - *v;
    }
    let one = TaskInstance::new(p.clone(), y.clone(), wts.padding)?;
    let two = TaskInstance::new(p.clone(), y_prime.clone(), wts.padding)?;
    let first_diff_row = one.layout().y_p_rows().start + i;

    let s1 = forward(wts, &one.assemble().h0)?;
    let s2 = forward(wts, &two.assemble().h0)?;
    let prefix_identical = first_prefix_difference(&s1, &s2, first_diff_row).passed();

    let m1 = scan_blocks(&s1, &y, WITNESS_TOL)?;
    let m2 = scan_blocks(&s2, &y_prime, WITNESS_TOL)?;
    let common: Vec<_> = m1
        .iter()
        .map(BlockMatch::location)
        .filter(|loc| m2.iter().any(|m| m.location() == *loc))
        .collect();
    let pass = prefix_identical && common.is_empty();
    Ok(WitnessReport {
        i,
        j,
        first_diff_row,
        y,
        y_prime,
        prefix_identical,
        common,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockNorm {
    MaxAbs,
    Frobenius,
}

impl BlockNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockNorm::MaxAbs => "maxabs",
            BlockNorm::Frobenius => "frobenius",
        }
    }
}

impl core::str::FromStr for BlockNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxabs" | "max-abs" => Ok(BlockNorm::MaxAbs),
            "frobenius" | "fro" => Ok(BlockNorm::Frobenius),
            other => Err(Error::domain(alloc::format!("unknown block norm `{other}`"))),
        }
    }
}

/// One norm per `d x d` block.
pub fn block_summary(a: &Matrix, d: usize, norm: BlockNorm) -> Result<Matrix> {
    if d == 0 || !a.rows().is_multiple_of(d) || !a.cols().is_multiple_of(d) {
        return Err(Error::shape("block summary", a.shape(), (d, d)));
    }
    let mut out = Matrix::zeros(a.rows() / d, a.cols() / d);
    for r in 0..a.rows() {
        for (c, &v) in a.row(r).iter().enumerate() {
            let cell = &mut out[(r / d, c / d)];
            match norm {
                BlockNorm::MaxAbs => *cell = cell.max(v.abs()),
                BlockNorm::Frobenius => *cell += v * v,
            }
        }
    }
    if norm == BlockNorm::Frobenius {
        for v in out.as_mut_slice() {
            *v = libm::sqrt(*v);
        }
    }
    Ok(out)
}

/// Largest entry of a block summary and how far it stands above the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominantBlock {
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub runner_up: f64,
}

impl DominantBlock {
    /// `value / runner_up`; infinite when every other block is zero.
    pub fn ratio(&self) -> f64 {
        if self.runner_up == 0.0 {
            f64::INFINITY
        } else {
            self.value / self.runner_up
        }
    }
}

pub fn dominant_block(summary: &Matrix) -> Option<DominantBlock> {
    let cols = summary.cols();
    let mut best: Option<DominantBlock> = None;
    let mut runner_up = 0.0f64;
    for (k, &v) in summary.as_slice().iter().enumerate() {
        match best {
            Some(ref b) if v <= b.value => runner_up = runner_up.max(v),
            _ => {
                if let Some(b) = best {
                    runner_up = runner_up.max(b.value);
                }
                best = Some(DominantBlock {
                    row: k / cols,
                    col: k % cols,
                    value: v,
                    runner_up: 0.0,
                });
            }
        }
    }
    best.map(|b| DominantBlock { runner_up, ..b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Identity,
    Antidiagonal,
}

impl BlockKind {
    fn entry(self, d: usize, r: usize, c: usize) -> f64 {
        let hit = match self {
            BlockKind::Identity => r == c,
            BlockKind::Antidiagonal => r + c + 1 == d,
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn symbol(self) -> char {
        match self {
            BlockKind::Identity => 'I',
            BlockKind::Antidiagonal => 'J',
        }
    }
}

/// Which `d x d` blocks of a matrix hold `I` or `J`; all others are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPattern {
    pub d: usize,
    pub blocks: Vec<(usize, usize, BlockKind)>,
}

impl BlockPattern {
    pub fn single(d: usize, row: usize, col: usize, kind: BlockKind) -> Self {
        BlockPattern {
            d,
            blocks: alloc::vec![(row, col, kind)],
        }
    }

    /// The unit-gain template at the given shape.
    pub fn template(&self, rows: usize, cols: usize) -> Result<Matrix> {
        let d = self.d;
        if d == 0 || !rows.is_multiple_of(d) || !cols.is_multiple_of(d) {
            return Err(Error::shape("block pattern", (rows, cols), (d, d)));
        }
        let mut t = Matrix::zeros(rows, cols);
        for &(br, bc, kind) in &self.blocks {
            if (br + 1) * d > rows || (bc + 1) * d > cols {
                return Err(Error::domain(alloc::format!(
                    "block ({br},{bc}) outside a {}x{} block grid",
                    rows / d,
                    cols / d
                )));
            }
            for r in 0..d {
                for c in 0..d {
                    t[(br * d + r, bc * d + c)] += kind.entry(d, r, c);
                }
            }
        }
        Ok(t)
    }
}

impl core::fmt::Display for BlockPattern {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (k, (r, c, kind)) in self.blocks.iter().enumerate() {
            if k > 0 {
                f.write_str("+")?;
            }
            write!(f, "{}@({r},{c})", kind.symbol())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternFit {
    pub pattern: BlockPattern,
    pub beta_hat: f64,
    /// Squared mass off the pattern's support over total squared mass.
    pub residual: f64,
}

/// Least-squares gain on the pattern's support, and the share of `a`'s
/// squared mass that falls outside it.
pub fn pattern_fit(a: &Matrix, pattern: &BlockPattern) -> Result<PatternFit> {
    let t = pattern.template(a.rows(), a.cols())?;
    let (mut at, mut tt, mut off, mut total) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &w) in a.as_slice().iter().zip(t.as_slice()) {
        total += x * x;
        if w == 0.0 {
            off += x * x;
        } else {
            at += x * w;
            tt += w * w;
        }
    }
    let beta_hat = if tt > 0.0 { at / tt } else { 0.0 };
    let residual = if total > 0.0 { (off / total).clamp(0.0, 1.0) } else { 0.0 };
    Ok(PatternFit {
        pattern: pattern.clone(),
        beta_hat,
        residual,
    })
}

/// The single `I` or `J` block pattern with the smallest residual.
pub fn best_single_block_fit(a: &Matrix, d: usize) -> Result<PatternFit> {
    if d == 0 || !a.rows().is_multiple_of(d) || !a.cols().is_multiple_of(d) {
        return Err(Error::shape("block pattern", a.shape(), (d, d)));
    }
    let mut best: Option<PatternFit> = None;
    for br in 0..a.rows() / d {
        for bc in 0..a.cols() / d {
            for kind in [BlockKind::Identity, BlockKind::Antidiagonal] {
                let fit = pattern_fit(a, &BlockPattern::single(d, br, bc, kind))?;
                if best.as_ref().is_none_or(|b| fit.residual < b.residual) {
                    best = Some(fit);
                }
            }
        }
    }
    best.ok_or_else(|| Error::domain("empty matrix"))
}
