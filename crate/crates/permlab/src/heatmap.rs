//! Weight heatmaps: an ASCII PGM (`P2`) with one pixel per weight, scaled
//! by `|w| / max|w|` to 0..=255, and a CSV of the raw values.

use permlab_core::Matrix;

pub fn to_pgm(m: &Matrix) -> String {
    let peak = m.max_abs();
    let mut out = format!("P2\n{} {}\n255\n", m.cols(), m.rows());
    for r in 0..m.rows() {
        let row: Vec<String> = m
            .row(r)
            .iter()
            .map(|v| {
                let level = if peak > 0.0 { (v.abs() / peak * 255.0).round() } else { 0.0 };
                (level as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Pixel values of a `P2` image, row-major.
pub fn parse_pgm(text: &str) -> Option<(usize, usize, Vec<u8>)> {
    let mut toks = text.split_whitespace();
    if toks.next()? != "P2" {
        return None;
    }
    let cols: usize = toks.next()?.parse().ok()?;
    let rows: usize = toks.next()?.parse().ok()?;
    if toks.next()? != "255" {
        return None;
    }
    let px: Vec<u8> = toks.map(|t| t.parse().ok()).collect::<Option<_>>()?;
    (px.len() == rows * cols).then_some((rows, cols, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_by_max_abs() {
        let m = Matrix::from_rows(&[[0.0, -4.0], [2.0, 1.0]]);
        let pgm = to_pgm(&m);
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n128 64\n");
        assert_eq!(parse_pgm(&pgm), Some((2, 2, vec![0, 255, 128, 64])));
    }

    #[test]
    fn zero_matrix_is_black() {
        assert_eq!(to_pgm(&Matrix::zeros(1, 3)), "P2\n3 1\n255\n0 0 0\n");
    }

    #[test]
    fn csv_is_lossless() {
        let m = Matrix::from_rows(&[[0.1, -1.0 / 3.0]]);
        let back: Vec<f64> = to_csv(&m).trim().split(',').map(|t| t.parse().unwrap()).collect();
        assert_eq!(back, m.as_slice());
    }
}
