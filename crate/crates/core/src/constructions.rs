//! Explicit two-layer weights that write `Y = Pᵀ·Y_P` into a block of the
//! residual stream, with gains `beta1`, `beta2` standing in for the `β → ∞`
//! limit.
//!
//! Block coordinates below are 0-based `(query block, key block)` pairs in
//! units of `d` columns.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{forward, MaskMode, ModelWeights, ResidualStream};
use crate::numerics::Matrix;
use crate::task::{oracle_invert, Layout, Padding, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstructionName {
    /// Mask-free; layer 1 copies `P` down to the `Y_P` rows, layer 2 reads
    /// `Y` back up into the `P` rows.
    Thm2Cmf,
    /// Causal with `[BOS; P; Y_P; S]` input; `Y` lands on the scratch rows.
    Thm3Scratch,
    /// Mask-free antidiagonal variant.
    AntidiagCmf,
}

impl ConstructionName {
    pub const ALL: [ConstructionName; 3] = [
        ConstructionName::Thm2Cmf,
        ConstructionName::Thm3Scratch,
        ConstructionName::AntidiagCmf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConstructionName::Thm2Cmf => "thm2_cmf",
            ConstructionName::Thm3Scratch => "thm3_scratch",
            ConstructionName::AntidiagCmf => "antidiag_cmf",
        }
    }
}

impl core::str::FromStr for ConstructionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConstructionName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::domain(alloc::format!("unknown construction `{s}`")))
    }
}

/// Weights plus where in the stream `Y` is expected to appear.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionBundle {
    pub name: ConstructionName,
    pub wts: ModelWeights,
    pub expected_level: usize,
    pub expected_rows: Range<usize>,
    pub expected_col_block: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl ConstructionBundle {
    /// The `d x d` block of `stream` at the bundled location.
    pub fn extract(&self, stream: &ResidualStream) -> Result<Matrix> {
        let d = self.wts.d;
        let level = stream
            .levels
            .get(self.expected_level)
            .ok_or_else(|| Error::domain("stream is shallower than the expected level"))?;
        let c0 = self.expected_col_block * d;
        level.submatrix(self.expected_rows.clone(), c0..c0 + d)
    }
}

fn check_args(d: usize, beta1: f64, beta2: f64) -> Result<()> {
    if d < 2 {
        return Err(Error::domain("constructions need d >= 2"));
    }
    for b in [beta1, beta2] {
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::domain("gains must be finite and non-negative"));
        }
    }
    Ok(())
}

/// `n_blocks x n_blocks` grid of `d x d` blocks with `beta * block` at
/// `(row, col)`.
fn single_block(n_blocks: usize, d: usize, row: usize, col: usize, block: &Matrix, beta: f64) -> Matrix {
    let mut a = Matrix::zeros(n_blocks * d, n_blocks * d);
    a.set_block(row * d, col * d, &block.scale(beta)).unwrap();
    a
}

fn selector(d: usize, width: usize, col_block: usize) -> Matrix {
    let mut w = Matrix::zeros(d, width);
    w.set_block(0, col_block * d, &Matrix::identity(d)).unwrap();
    w
}

#[allow(clippy::too_many_arguments)]
fn bundle(
    name: ConstructionName,
    d: usize,
    mask: MaskMode,
    padding: Padding,
    attn: Vec<Matrix>,
    rows: Range<usize>,
    col_block: usize,
    beta1: f64,
    beta2: f64,
) -> Result<ConstructionBundle> {
    let width = Layout::new(d, padding).width0() << attn.len();
    let w = selector(d, width, col_block);
    let wts = ModelWeights::new(d, mask, padding, attn, w, rows.clone())?;
    Ok(ConstructionBundle {
        name,
        wts,
        expected_level: 2,
        expected_rows: rows,
        expected_col_block: col_block,
        beta1,
        beta2,
    })
}

/// Mask-free construction on `[P; Y_P]`.
///
/// Blocks of `h^(0)`: 0 tokens, 1 positions of the `P` rows, 2 positions of
/// the `Y_P` rows. `A^(1)` pairs `Y_P`-row positions with `P`-row positions
/// so row `d + i` copies row `i` and the layer-1 token block holds `P` on the
/// bottom rows. `A^(2)` pairs `P`-row positions (block 1) with that layer-1
/// token block (block 3): query `r` scores key `d + m` by `P[m, r]`, which
/// selects `m = π⁻¹(r)` and reads `Y_P[π⁻¹(r)] = Y[r]`. The top rows see the
/// uniform layer-1 average with entries at most `(1 + d) / (2d) < 1`, so the
/// selection sharpens as `beta2` grows.
///
/// `Y` appears on rows `0..d` of the layer-2 token block (block 6 of
/// `h^(2)`).
pub fn build_thm2(d: usize, beta1: f64, beta2: f64) -> Result<ConstructionBundle> {
    check_args(d, beta1, beta2)?;
    let i = Matrix::identity(d);
    let a1 = single_block(3, d, 2, 1, &i, beta1);
    let a2 = single_block(6, d, 1, 3, &i, beta2);
    bundle(
        ConstructionName::Thm2Cmf,
        d,
        MaskMode::Cmf,
        Padding::None,
        vec![a1, a2],
        0..d,
        6,
        beta1,
        beta2,
    )
}

/// Causal construction on `[BOS; P; Y_P; S]`.
///
/// Blocks of `h^(0)`: 0 tokens, 1/2/3 positions of the `P`, `Y_P` and
/// scratch rows (the BOS row has none). `A^(1)` at `(2, 1)` lets each `Y_P`
/// row attend back to its `P` row, copying `P` into the layer-1 token block
/// (block 4) on the `Y_P` rows. `A^(2)` at `(3, 4)` lets scratch row `i`
/// select the `Y_P` row whose copied `P` row is `e_i`; every competing
/// layer-1 token entry is a prefix average bounded by `1/2`. All selected
/// keys precede the scratch rows, so the causal mask never intervenes.
///
/// `Y` appears on the scratch rows of the layer-2 token block (block 8).
pub fn build_thm3(d: usize, beta1: f64, beta2: f64) -> Result<ConstructionBundle> {
    check_args(d, beta1, beta2)?;
    let i = Matrix::identity(d);
    let a1 = single_block(4, d, 2, 1, &i, beta1);
    let a2 = single_block(8, d, 3, 4, &i, beta2);
    let layout = Layout::new(d, Padding::Scratch);
    bundle(
        ConstructionName::Thm3Scratch,
        d,
        MaskMode::Causal,
        Padding::Scratch,
        vec![a1, a2],
        layout.scratch_rows(),
        8,
        beta1,
        beta2,
    )
}

/// Mask-free antidiagonal construction on `[P; Y_P]`.
///
/// `A^(1)` holds `J_d` on the centre block `(1, 1)`, so `P` row `r` attends
/// to `P` row `d-1-r` and the layer-1 token block holds the row-reversed
/// `J·P` on the top rows. `A^(2)` holds `J_d` at `(3, 2)`, pairing that
/// block with the `Y_P`-row positions. The top-right logit block is then
/// `J·P·J`, which equals `Pᵀ` only for permutations satisfying
/// `J·P·J = Pᵀ` (for example the identity, or any permutation of `d = 2`);
/// for general `P` the block at rows `0..d` of layer-2 token block 6 is a
/// different row shuffle of `Y`.
pub fn build_antidiag(d: usize, beta1: f64, beta2: f64) -> Result<ConstructionBundle> {
    check_args(d, beta1, beta2)?;
    let j = Matrix::antidiagonal(d);
    let a1 = single_block(3, d, 1, 1, &j, beta1);
    let a2 = single_block(6, d, 3, 2, &j, beta2);
    bundle(
        ConstructionName::AntidiagCmf,
        d,
        MaskMode::Cmf,
        Padding::None,
        vec![a1, a2],
        0..d,
        6,
        beta1,
        beta2,
    )
}

pub fn build(name: ConstructionName, d: usize, beta1: f64, beta2: f64) -> Result<ConstructionBundle> {
    match name {
        ConstructionName::Thm2Cmf => build_thm2(d, beta1, beta2),
        ConstructionName::Thm3Scratch => build_thm3(d, beta1, beta2),
        ConstructionName::AntidiagCmf => build_antidiag(d, beta1, beta2),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub name: ConstructionName,
    /// Max-abs error against the oracle, one entry per trial.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Recovery error of `bundle` on a single instance.
pub fn recovery_error(bundle: &ConstructionBundle, inst: &TaskInstance) -> Result<f64> {
    let stream = forward(&bundle.wts, &inst.assemble().h0)?;
    let got = bundle.extract(&stream)?;
    let want = oracle_invert(&inst.perm, &inst.y_p)?;
    Ok(got.max_abs_diff(&want).unwrap_or(f64::INFINITY))
}

/// Checks `bundle` on the given instances; passes iff every error is
/// strictly below `tol`.
pub fn verify_on<I>(bundle: &ConstructionBundle, instances: I, tol: f64) -> Result<VerificationReport>
where
    I: IntoIterator<Item = TaskInstance>,
{
    let errors = instances
        .into_iter()
        .map(|inst| recovery_error(bundle, &inst))
        .collect::<Result<Vec<_>>>()?;
    if errors.is_empty() {
        return Err(Error::domain("verification needs at least one trial"));
    }
    let max_error = errors.iter().fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
    Ok(VerificationReport {
        name: bundle.name,
        pass: max_error < tol,
        errors,
        max_error,
        tol,
    })
}

/// Checks `bundle` on `trials` freshly sampled instances.
pub fn verify<R: Rng + ?Sized>(
    bundle: &ConstructionBundle,
    trials: usize,
    rng: &mut R,
    tol: f64,
) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(Error::domain("verification needs at least one trial"));
    }
    let d = bundle.wts.d;
    let padding = bundle.wts.padding;
    let instances = (0..trials)
        .map(|_| TaskInstance::sample(d, padding, rng))
        .collect::<Result<Vec<_>>>()?;
    verify_on(bundle, instances, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_scores, predict};
    use crate::task::{Permutation, sample_target};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn names_round_trip() {
        for n in ConstructionName::ALL {
            assert_eq!(n.as_str().parse::<ConstructionName>().unwrap(), n);
        }
        assert!("thm4".parse::<ConstructionName>().is_err());
    }

    #[test]
    fn bundle_modes() {
        let b2 = build_thm2(3, 50.0, 50.0).unwrap();
        let b3 = build_thm3(3, 50.0, 50.0).unwrap();
        let ba = build_antidiag(3, 50.0, 50.0).unwrap();
        assert_eq!((b2.wts.mask, b2.wts.padding), (MaskMode::Cmf, Padding::None));
        assert_eq!((b3.wts.mask, b3.wts.padding), (MaskMode::Causal, Padding::Scratch));
        assert_eq!((ba.wts.mask, ba.wts.padding), (MaskMode::Cmf, Padding::None));
        assert_eq!(b2.wts.attn[0].shape(), (9, 9));
        assert_eq!(b2.wts.attn[1].shape(), (18, 18));
        assert_eq!(b3.wts.attn[1].shape(), (24, 24));
    }

    #[test]
    fn builders_reject_small_d() {
        for name in ConstructionName::ALL {
            assert!(matches!(build(name, 1, 50.0, 50.0), Err(Error::Domain(_))));
        }
        assert!(build_thm2(3, -1.0, 1.0).is_err());
    }

    #[test]
    fn thm2_recovers_y() {
        let b = build_thm2(3, 50.0, 50.0).unwrap();
        let report = verify(&b, 50, &mut rng(1), 1e-6).unwrap();
        assert!(report.pass, "max error {}", report.max_error);

        // readout at the bundled rows gives Y too
        let inst = TaskInstance::sample(3, Padding::None, &mut rng(2)).unwrap();
        let y_hat = predict(&b.wts, &inst.assemble().h0).unwrap();
        assert!(y_hat.max_abs_diff(&inst.y).unwrap() < 1e-6);
    }

    #[test]
    fn thm2_identity_gives_y_p() {
        let b = build_thm2(4, 50.0, 50.0).unwrap();
        let y = sample_target(4, &mut rng(3)).unwrap();
        let inst = TaskInstance::new(Permutation::identity(4).to_matrix(), y, Padding::None).unwrap();
        let stream = forward(&b.wts, &inst.assemble().h0).unwrap();
        assert!(b.extract(&stream).unwrap().max_abs_diff(&inst.y_p).unwrap() < 1e-6);
    }

    #[test]
    fn thm2_layer_one_selects_p_rows() {
        let d = 10;
        let b = build_thm2(d, 50.0, 50.0).unwrap();
        let inst = TaskInstance::sample(d, Padding::None, &mut rng(4)).unwrap();
        let h0 = inst.assemble().h0;
        let s = attention_scores(&h0, &b.wts.attn[0], MaskMode::Cmf).unwrap();
        let mut selector = Matrix::zeros(d, 2 * d);
        selector.set_block(0, 0, &Matrix::identity(d)).unwrap();
        let bottom = s.submatrix(d..2 * d, 0..2 * d).unwrap();
        assert!(bottom.max_abs_diff(&selector).unwrap() < 1e-9);

        let out = s.matmul(&h0).unwrap();
        let copied = out.submatrix(d..2 * d, 0..d).unwrap();
        assert!(copied.max_abs_diff(inst.perm.matrix()).unwrap() < 1e-9);
    }

    #[test]
    fn error_shrinks_with_gain() {
        let mut r = rng(5);
        let instances: Vec<_> = (0..5)
            .map(|_| TaskInstance::sample(6, Padding::None, &mut r).unwrap())
            .collect();
        for name in [ConstructionName::Thm2Cmf, ConstructionName::Thm3Scratch] {
            let mut prev = f64::INFINITY;
            for beta in [1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
                let b = build(name, 6, beta, beta).unwrap();
                let insts = instances.iter().map(|i| {
                    TaskInstance::new(i.perm.clone(), i.y.clone(), b.wts.padding).unwrap()
                });
                let err = verify_on(&b, insts, 1.0).unwrap().max_error;
                assert!(err <= prev, "{name:?}: beta {beta} error {err} > {prev}");
                prev = err;
            }
            assert!(prev < 1e-6);
        }
        let inst = &instances[0];
        let e5 = recovery_error(&build_thm2(6, 5.0, 5.0).unwrap(), inst).unwrap();
        let e50 = recovery_error(&build_thm2(6, 50.0, 50.0).unwrap(), inst).unwrap();
        assert!(e5 > e50);
    }

    #[test]
    fn zero_gain_and_zero_tolerance_fail() {
        let b = build_thm2(5, 0.0, 0.0).unwrap();
        assert!(!verify(&b, 10, &mut rng(6), 1e-6).unwrap().pass);
        let b = build_thm2(5, 50.0, 50.0).unwrap();
        assert!(!verify(&b, 10, &mut rng(6), 0.0).unwrap().pass);
        assert!(verify(&b, 0, &mut rng(6), 1.0).is_err());
    }

    #[test]
    fn thm3_recovers_y_on_scratch_rows() {
        let b = build_thm3(3, 50.0, 50.0).unwrap();
        assert_eq!(b.expected_rows, 7..10);
        let report = verify(&b, 50, &mut rng(7), 1e-6).unwrap();
        assert!(report.pass, "max error {}", report.max_error);
    }

    #[test]
    fn thm3_bos_row_attends_to_itself() {
        let b = build_thm3(3, 50.0, 50.0).unwrap();
        let inst = TaskInstance::sample(3, Padding::Scratch, &mut rng(8)).unwrap();
        let stream = forward(&b.wts, &inst.assemble().h0).unwrap();
        for (level, a) in b.wts.attn.iter().enumerate() {
            let s = attention_scores(&stream.levels[level], a, MaskMode::Causal).unwrap();
            assert_eq!(s[(0, 0)], 1.0);
            assert!(stream.levels[level + 1].row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn thm3_scratch_rows_see_bounded_prefix_averages() {
        // the layer-1 token entries competing with the copied P rows are
        // prefix averages, never above 1/2
        let d = 6;
        let b = build_thm3(d, 50.0, 50.0).unwrap();
        for seed in 0..20 {
            let inst = TaskInstance::sample(d, Padding::Scratch, &mut rng(100 + seed)).unwrap();
            let stream = forward(&b.wts, &inst.assemble().h0).unwrap();
            let h1 = &stream.levels[1];
            for r in b.expected_rows.clone() {
                assert!(h1.row(r)[4 * d..5 * d].iter().all(|&v| v <= 0.5 + 1e-12));
            }
        }
    }

    #[test]
    fn thm3_pattern_without_padding_fails() {
        // same gains and block roles on [P; Y_P]: the P rows would have to
        // read Y_P rows that lie after them
        let d = 4;
        let i = Matrix::identity(d);
        let a1 = single_block(3, d, 2, 1, &i, 50.0);
        let a2 = single_block(6, d, 1, 3, &i, 50.0);
        let wts = ModelWeights::new(
            d,
            MaskMode::Causal,
            Padding::None,
            vec![a1, a2],
            selector(d, 12 * d, 6),
            0..d,
        )
        .unwrap();
        let b = ConstructionBundle {
            name: ConstructionName::Thm3Scratch,
            wts,
            expected_level: 2,
            expected_rows: 0..d,
            expected_col_block: 6,
            beta1: 50.0,
            beta2: 50.0,
        };
        let report = verify(&b, 20, &mut rng(9), 1e-6).unwrap();
        assert!(!report.pass);
        assert!(report.max_error > 0.25);
    }

    #[test]
    fn antidiagonal_is_an_involution() {
        for d in 1..8 {
            let j = Matrix::antidiagonal(d);
            assert_eq!(j.matmul(&j).unwrap(), Matrix::identity(d));
        }
    }

    #[test]
    fn antidiag_identity_recovers_y_p() {
        let b = build_antidiag(3, 50.0, 50.0).unwrap();
        let y = sample_target(3, &mut rng(10)).unwrap();
        let inst = TaskInstance::new(Permutation::identity(3).to_matrix(), y, Padding::None).unwrap();
        let stream = forward(&b.wts, &inst.assemble().h0).unwrap();
        assert!(b.extract(&stream).unwrap().max_abs_diff(&inst.y_p).unwrap() < 1e-6);
    }

    #[test]
    fn antidiag_recovers_y_exactly_when_jpj_is_p_transpose() {
        let d = 4;
        let b = build_antidiag(d, 50.0, 50.0).unwrap();
        let j = Matrix::antidiagonal(d);
        let mut both = [0usize; 2];
        for perm in Permutation::all(d) {
            let p = perm.to_matrix();
            let jpj = j.matmul(p.matrix()).unwrap().matmul(&j).unwrap();
            let compatible = jpj == p.matrix().transpose();
            // a Y with distinct rows makes any row mix-up visible
            let y = Matrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 });
            let inst = TaskInstance::new(p, y, Padding::None).unwrap();
            let err = recovery_error(&b, &inst).unwrap();
            assert_eq!(err < 1e-6, compatible, "perm {:?} err {err}", perm.as_slice());
            both[compatible as usize] += 1;
        }
        assert!(both[0] > 0 && both[1] > 0);
    }

    #[test]
    fn all_d4_permutations() {
        let mut r = rng(12);
        for name in [ConstructionName::Thm2Cmf, ConstructionName::Thm3Scratch] {
            let b = build(name, 4, 50.0, 50.0).unwrap();
            let insts: Vec<_> = Permutation::all(4)
                .into_iter()
                .map(|p| {
                    let y = sample_target(4, &mut r).unwrap();
                    TaskInstance::new(p.to_matrix(), y, b.wts.padding).unwrap()
                })
                .collect();
            let report = verify_on(&b, insts, 1e-6).unwrap();
            assert_eq!(report.errors.len(), 24);
            assert!(report.pass, "{name:?} {}", report.max_error);
        }
    }
}
