//! Text checkpoints.
//!
//! ```text
//! DTX1
//! d=3 depth=1 mask=cmf pad=none readout=0:3 seed=7 step=0
//! MAT A1 9 9
//! <9 rows of 9 numbers>
//! MAT W 3 18
//! <3 rows of 18 numbers>
//! ```
//!
//! Numbers use 17 significant digits, so parsing reproduces every weight
//! bit for bit and save→load→save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use permlab_core::{MaskMode, Matrix, ModelWeights, Padding};

use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "DTX1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub seed: u64,
    pub step: u64,
}

/// Parse failure with the 1-based line it occurred on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for FormatError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

fn fail<T>(line: usize, msg: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        line,
        msg: msg.into(),
    })
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "MAT {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

pub fn to_text(ckpt: &Checkpoint) -> String {
    let w = &ckpt.weights;
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let _ = writeln!(
        out,
        "d={} depth={} mask={} pad={} readout={}:{} seed={} step={}",
        w.d,
        w.depth(),
        w.mask.as_str(),
        w.padding.as_str(),
        w.readout.start,
        w.readout.end,
        ckpt.seed,
        ckpt.step
    );
    for (i, a) in w.attn.iter().enumerate() {
        write_matrix(&mut out, &format!("A{}", i + 1), a);
    }
    write_matrix(&mut out, "W", &w.w);
    out
}

struct Header {
    d: usize,
    depth: usize,
    mask: MaskMode,
    padding: Padding,
    readout: std::ops::Range<usize>,
    seed: u64,
    step: u64,
}

fn parse_header(line: &str) -> Result<Header, FormatError> {
    const KEYS: [&str; 7] = ["d", "depth", "mask", "pad", "readout", "seed", "step"];
    let mut vals: [Option<&str>; 7] = [None; 7];
    for tok in line.split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            return fail(2, format!("expected key=value, found `{tok}`"));
        };
        let Some(slot) = KEYS.iter().position(|&key| key == k) else {
            return fail(2, format!("unknown header key `{k}`"));
        };
        if vals[slot].replace(v).is_some() {
            return fail(2, format!("duplicate header key `{k}`"));
        }
    }
    let get = |i: usize| vals[i].ok_or_else(|| FormatError {
        line: 2,
        msg: format!("missing header key `{}`", KEYS[i]),
    });
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, FormatError> {
        v.parse().map_err(|_| FormatError {
            line: 2,
            msg: format!("bad value `{v}` for `{key}`"),
        })
    }
    let readout = get(4)?;
    let (lo, hi) = readout.split_once(':').ok_or_else(|| FormatError {
        line: 2,
        msg: format!("readout must be lo:hi, found `{readout}`"),
    })?;
    Ok(Header {
        d: num("d", get(0)?)?,
        depth: num("depth", get(1)?)?,
        mask: num("mask", get(2)?)?,
        padding: num("pad", get(3)?)?,
        readout: num("readout", lo)?..num("readout", hi)?,
        seed: num("seed", get(5)?)?,
        step: num("step", get(6)?)?,
    })
}

pub fn parse(text: &str) -> Result<Checkpoint, FormatError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        Some((n, other)) => return fail(n, format!("expected `{MAGIC}`, found `{other}`")),
        None => return fail(1, "empty file"),
    }
    let Some((_, header)) = lines.next() else {
        return fail(2, "missing header line");
    };
    let h = parse_header(header)?;

    let mut read_matrix = |name: &str| -> Result<Matrix, FormatError> {
        let Some((n, line)) = lines.next() else {
            return fail(text.lines().count() + 1, format!("missing matrix {name}"));
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (rows, cols) = match parts.as_slice() {
            ["MAT", got, r, c] if *got == name => match (r.parse::<usize>(), c.parse::<usize>()) {
                (Ok(r), Ok(c)) => (r, c),
                _ => return fail(n, format!("bad dimensions in `{line}`")),
            },
            _ => return fail(n, format!("expected `MAT {name} <rows> <cols>`, found `{line}`")),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let Some((n, row)) = lines.next() else {
                return fail(n + r + 1, format!("matrix {name} ends after {r} of {rows} rows"));
            };
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| FormatError {
                    line: n,
                    msg: format!("bad number `{tok}`"),
                })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return fail(n, format!("expected {cols} values, found {}", data.len() - before));
            }
        }
        Ok(Matrix::from_vec(rows, cols, data).expect("length checked per row"))
    };

    let mut attn = Vec::with_capacity(h.depth);
    for i in 0..h.depth {
        attn.push(read_matrix(&format!("A{}", i + 1))?);
    }
    let w = read_matrix("W")?;
    let weights = ModelWeights::new(h.d, h.mask, h.padding, attn, w, h.readout).map_err(|e| FormatError {
        line: 2,
        msg: format!("inconsistent checkpoint: {e}"),
    })?;
    if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return fail(n, format!("unexpected trailing content `{extra}`"));
    }
    Ok(Checkpoint {
        weights,
        seed: h.seed,
        step: h.step,
    })
}

/// Writes through a temporary file and renames, so readers never see a
/// partially written checkpoint.
pub fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    write_atomic(path, &to_text(ckpt))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|e| CliError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub(crate) fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
