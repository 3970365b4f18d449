use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2-D sine/cosine encoding: the first half of the channels encodes the row
/// coordinate, the second half the column. Within each half, `d/4` sine
/// channels are followed by `d/4` cosine channels at frequencies
/// `10000^{-i/(d/4)}`.
pub fn sinusoidal_positions(h: usize, w: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::shape(format!(
            "positional width {d_model} must be a positive multiple of 4"
        )));
    }
    let quarter = d_model / 4;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| 10000f64.powf(-(i as f64) / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d_model);
    for y in 0..h {
        for x in 0..w {
            for coord in [y as f64, x as f64] {
                data.extend(freqs.iter().map(|f| (coord * f).sin()));
                data.extend(freqs.iter().map(|f| (coord * f).cos()));
            }
        }
    }
    Tensor::new(vec![h * w, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_have_constant_norm() {
        let p = sinusoidal_positions(5, 7, 16).unwrap();
        for row in p.data().chunks(16) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 8f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let p = sinusoidal_positions(2, 2, 8).unwrap();
        assert_eq!(&p.data()[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_width_not_multiple_of_four() {
        assert!(sinusoidal_positions(2, 2, 6).is_err());
    }

    #[test]
    fn distinct_cells_have_distinct_codes() {
        // Exhaustive pairwise comparison over the largest grid.
        let (h, w, d) = (64, 64, 16);
        let p = sinusoidal_positions(h, w, d).unwrap();
        let rows: Vec<&[f64]> = p.data().chunks(d).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let dist: f64 = rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min_dist = min_dist.min(dist);
            }
        }
        assert!(min_dist > 1e-6, "closest pair distance² {min_dist}");
    }
}
