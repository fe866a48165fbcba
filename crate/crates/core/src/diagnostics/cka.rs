use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Linear CKA between `x` (`n × d1`) and `y` (`n × d2`):
/// `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` on column-centred copies. A
/// zero-variance input yields 0.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Shape(format!("CKA inputs have {} and {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::Shape("CKA needs at least 2 rows".into()));
    }
    let mut xc = x.clone();
    let mut yc = y.clone();
    xc.center_columns();
    yc.center_columns();
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let xx = xc.t_matmul(&xc)?.frobenius_sq().sqrt();
    let yy = yc.t_matmul(&yc)?.frobenius_sq().sqrt();
    if xx == 0.0 || yy == 0.0 {
        log::warn!("zero-variance input to CKA; reporting 0");
        return Ok(0.0);
    }
    Ok(cross / (xx * yy))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CkaHeatmap {
    /// `grid[i][j] = CKA(A_i, B_j)`
    pub grid: Vec<Vec<f64>>,
    /// Best-matching B layer for each A layer; ties go to the lower index.
    pub argmax: Vec<usize>,
}

impl CkaHeatmap {
    /// One CSV row per A layer.
    pub fn to_csv(&self) -> String {
        let cols = self.grid.first().map_or(0, Vec::len);
        let mut s = String::from("layer_a");
        for j in 0..cols {
            s.push_str(&format!(",b{j}"));
        }
        s.push_str(",argmax\n");
        for (i, row) in self.grid.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}\n", self.argmax[i]));
        }
        s
    }
}

pub fn cka_heatmap(a: &[Matrix], b: &[Matrix]) -> Result<CkaHeatmap> {
    let n = a.first().or(b.first()).map(Matrix::rows);
    if let Some(n) = n {
        if let Some(m) = a.iter().chain(b).find(|m| m.rows() != n) {
            return Err(Error::Shape(format!("layer has {} rows, expected {n}", m.rows())));
        }
    }
    let cells: Vec<f64> = (0..a.len() * b.len())
        .into_par_iter()
        .map(|idx| linear_cka(&a[idx / b.len()], &b[idx % b.len()]))
        .collect::<Result<_>>()?;
    let grid: Vec<Vec<f64>> = cells.chunks(b.len().max(1)).map(<[f64]>::to_vec).take(a.len()).collect();
    let argmax = grid
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect();
    Ok(CkaHeatmap { grid, argmax })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    /// HSIC form: tr(K̃ L̃) / sqrt(tr(K̃ K̃) tr(L̃ L̃)) with doubly centred Gram
    /// matrices.
    fn hsic_cka(x: &Matrix, y: &Matrix) -> f64 {
        let gram = |m: &Matrix| {
            let n = m.rows();
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                }
            }
            let row_mean: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
            let all = row_mean.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] += all - row_mean[i] - row_mean[j];
                }
            }
            k
        };
        let (k, l) = (gram(x), gram(y));
        let tr = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
    }

    fn orthogonal(d: usize, seed: u64) -> Matrix {
        // Gram-Schmidt on a Gaussian matrix.
        let g = gaussian(d, d, seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
        Matrix::from_vec(d, d, q.concat()).unwrap()
    }

    #[test]
    fn self_similarity_and_invariances() {
        let x = gaussian(512, 32, 1);
        let y = gaussian(512, 32, 2);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let xr = x.matmul(&orthogonal(32, 3)).unwrap();
        assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() < 1e-10);
        let xy = linear_cka(&x, &y).unwrap();
        assert!((xy - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
        let scaled = Matrix::from_fn(512, 32, |i, j| 7.5 * x.get(i, j));
        assert!((linear_cka(&scaled, &y).unwrap() - xy).abs() < 1e-12);
    }

    #[test]
    fn matches_hsic_formula() {
        let x = gaussian(512, 32, 10);
        let g = gaussian(512, 24, 11);
        let ours = linear_cka(&x, &g).unwrap();
        assert!((ours - hsic_cka(&x, &g)).abs() < 1e-10);
        assert!(ours < 0.2);
    }

    #[test]
    fn degenerate_inputs() {
        let x = gaussian(10, 3, 1);
        let c = Matrix::from_fn(10, 3, |_, j| j as f64);
        assert_eq!(linear_cka(&x, &c).unwrap(), 0.0);
        assert!(linear_cka(&x, &gaussian(9, 3, 1)).is_err());
        assert!(linear_cka(&gaussian(1, 3, 1), &gaussian(1, 3, 2)).is_err());
    }

    #[test]
    fn heatmap() {
        let layers: Vec<Matrix> = (0..3).map(|s| gaussian(64, 8, s)).collect();
        let h = cka_heatmap(&layers, &layers).unwrap();
        assert_eq!(h.argmax, vec![0, 1, 2]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h.grid[i][j], linear_cka(&layers[i], &layers[j]).unwrap());
            }
        }
        let one = cka_heatmap(&layers[..1], &layers[1..2]).unwrap();
        assert_eq!(one.grid.len(), 1);
        assert_eq!(one.grid[0].len(), 1);
        assert!(cka_heatmap(&layers, &[gaussian(10, 8, 0)]).is_err());
        assert!(h.to_csv().starts_with("layer_a,b0,b1,b2,argmax\n"));
    }
}
