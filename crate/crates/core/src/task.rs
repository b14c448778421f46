//! Inverse-permutation task instances and model inputs.
//!
//! A permutation matrix `P` has row `i` equal to `e_{π(i)}`. The permuted
//! target is `Y_P = P·Y`, so row `i` of `Y_P` is row `π(i)` of `Y`, and the
//! exact inverse is `Y = Pᵀ·Y_P`.
//!
//! All indices are 0-based. Row `d + i + 1` of the 1-based input layout is
//! row `d + i` here.

use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A bijection on `{0..d-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let d = map.len();
        if d == 0 {
            return Err(Error::domain("permutation dimension must be at least 1"));
        }
        let mut seen = alloc::vec![false; d];
        for &v in &map {
            if v >= d || seen[v] {
                return Err(Error::domain("map is not a bijection"));
            }
            seen[v] = true;
        }
        Ok(Permutation { map })
    }

    pub fn identity(d: usize) -> Self {
        Permutation {
            map: (0..d).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.map.len()
    }

    /// `π(i)`.
    pub fn apply(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = alloc::vec![0; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        Permutation { map: inv }
    }

    pub fn to_matrix(&self) -> PermutationMatrix {
        PermutationMatrix::from(self.clone())
    }

    /// Every permutation of `{0..d-1}` in lexicographic order.
    pub fn all(d: usize) -> Vec<Permutation> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..d).collect();
        loop {
            out.push(Permutation { map: cur.clone() });
            // next lexicographic permutation
            let Some(i) = (1..d).rev().find(|&i| cur[i - 1] < cur[i]) else {
                break;
            };
            let j = (i..d).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
        out
    }
}

/// Uniform permutation of `{0..d-1}` via Fisher-Yates.
pub fn sample_permutation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Permutation> {
    if d == 0 {
        return Err(Error::domain("permutation dimension must be at least 1"));
    }
    let mut map: Vec<usize> = (0..d).collect();
    map.shuffle(rng);
    Ok(Permutation { map })
}

/// `d x d` target with i.i.d. uniform `{0, 1}` entries.
pub fn sample_target<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::domain("target dimension must be at least 1"));
    }
    Ok(Matrix::from_fn(d, d, |_, _| {
        if rng.random::<bool>() {
            1.0
        } else {
            0.0
        }
    }))
}

/// `d x d` target with i.i.d. uniform `[0, 1)` entries, for gradient checks.
pub fn sample_uniform_target<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::domain("target dimension must be at least 1"));
    }
    Ok(Matrix::from_fn(d, d, |_, _| rng.random::<f64>()))
}

/// The 0/1 matrix of a permutation; row `i` is `e_{π(i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationMatrix {
    perm: Permutation,
    p: Matrix,
}

impl From<Permutation> for PermutationMatrix {
    fn from(perm: Permutation) -> Self {
        let d = perm.d();
        let mut p = Matrix::zeros(d, d);
        for i in 0..d {
            p[(i, perm.apply(i))] = 1.0;
        }
        PermutationMatrix { perm, p }
    }
}

impl PermutationMatrix {
    /// Validates a square 0/1 matrix with exactly one 1 per row and column.
    pub fn from_matrix(p: Matrix) -> Result<Self> {
        if !p.is_square() || p.rows() == 0 {
            return Err(Error::shape("permutation matrix", p.shape(), p.shape()));
        }
        let mut map = Vec::with_capacity(p.rows());
        for r in 0..p.rows() {
            let row = p.row(r);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::domain("permutation matrix entries must be 0 or 1"));
            }
            let ones: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
            if ones.len() != 1 {
                return Err(Error::domain("each row must contain exactly one 1"));
            }
            map.push(ones[0]);
        }
        let perm = Permutation::new(map)?;
        Ok(PermutationMatrix { perm, p })
    }

    pub fn d(&self) -> usize {
        self.perm.d()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.is_identity()
    }
}

/// `P·Y`.
pub fn permute(p: &PermutationMatrix, y: &Matrix) -> Result<Matrix> {
    p.matrix().matmul(y)
}

/// `Pᵀ·Y_P`, the exact inverse of [`permute`].
pub fn oracle_invert(p: &PermutationMatrix, y_p: &Matrix) -> Result<Matrix> {
    p.matrix().t_matmul(y_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    /// Input `[P; Y_P]`.
    #[default]
    None,
    /// Input `[BOS; P; Y_P; S]` with an all-zero BOS row and `d` zero
    /// scratch rows.
    Scratch,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::None => "none",
            Padding::Scratch => "scratch",
        }
    }
}

impl core::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Padding::None),
            "scratch" => Ok(Padding::Scratch),
            other => Err(Error::domain(alloc::format!("unknown padding `{other}`"))),
        }
    }
}

/// Row and column geometry of the assembled input for a given `d` and
/// padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub padding: Padding,
}

impl Layout {
    pub fn new(d: usize, padding: Padding) -> Self {
        Layout { d, padding }
    }

    /// Sequence length (rows of the residual stream).
    pub fn seq_len(&self) -> usize {
        match self.padding {
            Padding::None => 2 * self.d,
            Padding::Scratch => 3 * self.d + 1,
        }
    }

    /// Number of positional one-hot columns. The BOS row has no positional
    /// slot, so the scratch layout stays `d`-aligned.
    pub fn positions(&self) -> usize {
        match self.padding {
            Padding::None => 2 * self.d,
            Padding::Scratch => 3 * self.d,
        }
    }

    /// Width of `h^(0)`.
    pub fn width0(&self) -> usize {
        self.d + self.positions()
    }

    fn offset(&self) -> usize {
        match self.padding {
            Padding::None => 0,
            Padding::Scratch => 1,
        }
    }

    pub fn p_rows(&self) -> Range<usize> {
        let o = self.offset();
        o..o + self.d
    }

    pub fn y_p_rows(&self) -> Range<usize> {
        let o = self.offset() + self.d;
        o..o + self.d
    }

    /// Scratch rows (empty without padding).
    pub fn scratch_rows(&self) -> Range<usize> {
        match self.padding {
            Padding::None => self.seq_len()..self.seq_len(),
            Padding::Scratch => 2 * self.d + 1..3 * self.d + 1,
        }
    }
}

/// One problem: `P`, `Y` and `Y_P = P·Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub perm: PermutationMatrix,
    pub y: Matrix,
    pub y_p: Matrix,
    pub padding: Padding,
}

impl TaskInstance {
    pub fn new(perm: PermutationMatrix, y: Matrix, padding: Padding) -> Result<Self> {
        if y.rows() != perm.d() {
            return Err(Error::shape("task instance", perm.matrix().shape(), y.shape()));
        }
        let y_p = permute(&perm, &y)?;
        Ok(TaskInstance {
            perm,
            y,
            y_p,
            padding,
        })
    }

    /// Uniform permutation and binary target.
    pub fn sample<R: Rng + ?Sized>(d: usize, padding: Padding, rng: &mut R) -> Result<Self> {
        let perm = sample_permutation(d, rng)?.to_matrix();
        let y = sample_target(d, rng)?;
        TaskInstance::new(perm, y, padding)
    }

    pub fn d(&self) -> usize {
        self.perm.d()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.d(), self.padding)
    }

    pub fn assemble(&self) -> AssembledInput {
        assemble_input(self)
    }
}

/// Token matrix `x` and embedding `h0 = [x, positions]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput {
    pub x: Matrix,
    pub h0: Matrix,
}

pub fn assemble_input(inst: &TaskInstance) -> AssembledInput {
    let layout = inst.layout();
    let d = layout.d;
    let mut x = Matrix::zeros(layout.seq_len(), d);
    // shapes are fixed by the layout, so block writes cannot fail
    x.set_block(layout.p_rows().start, 0, inst.perm.matrix()).unwrap();
    x.set_block(layout.y_p_rows().start, 0, &inst.y_p).unwrap();

    let mut pos = Matrix::zeros(layout.seq_len(), layout.positions());
    let first = layout.seq_len() - layout.positions();
    for k in 0..layout.positions() {
        pos[(first + k, k)] = 1.0;
    }
    let h0 = x.hconcat(&pos).unwrap();
    AssembledInput { x, h0 }
}

/// A below-diagonal 1 of a non-identity `P`: `i` is the last row that is
/// not `e_i`, and `j = π(i) < i`.
pub fn below_diagonal_witness(p: &PermutationMatrix) -> Option<(usize, usize)> {
    let perm = p.permutation();
    let i = (0..perm.d()).rev().find(|&i| perm.apply(i) != i)?;
    let j = perm.apply(i);
    debug_assert!(j < i);
    Some((i, j))
}
