//! Butcher tableaus for DIRK methods.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ButcherTableau {
    pub name: String,
    pub s: usize,
    pub p: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl ButcherTableau {
    /// Builds a tableau with `c` taken as the row sums of `a`.
    pub fn new(name: &str, p: usize, a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let c = a.iter().map(|row| row.iter().sum()).collect();
        Self {
            name: name.to_string(),
            s: b.len(),
            p,
            a,
            b,
            c,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sdirk2" => Ok(make_sdirk2()),
            "sdirk3" => Ok(make_sdirk3()),
            "sdirk4" => Ok(make_sdirk4()),
            _ => Err(Error::UnknownName {
                kind: "tableau",
                name: name.to_string(),
            }),
        }
    }

    pub fn builtins() -> Vec<Self> {
        vec![make_sdirk2(), make_sdirk3(), make_sdirk4()]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        t.check_shape()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tableau serializes")
    }

    fn check_shape(&self) -> Result<()> {
        let s = self.s;
        if s == 0 {
            return Err(Error::InvalidArgument("tableau has no stages".into()));
        }
        let bad = |what: &str, got: usize| {
            Err(Error::InvalidArgument(format!(
                "tableau {}: {what} has length {got}, expected {s}",
                self.name
            )))
        };
        if self.a.len() != s {
            return bad("A", self.a.len());
        }
        if let Some(row) = self.a.iter().find(|r| r.len() != s) {
            return bad("a row of A", row.len());
        }
        if self.b.len() != s {
            return bad("b", self.b.len());
        }
        if self.c.len() != s {
            return bad("c", self.c.len());
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> Matrix<f64> {
        Matrix::from_rows(&self.a)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.s).map(|i| self.a[i][i]).collect()
    }

    /// True when all diagonal entries coincide.
    pub fn is_singly_diagonal(&self) -> bool {
        let d = self.diag();
        d.iter().all(|&x| x == d[0])
    }
}

pub fn make_sdirk2() -> ButcherTableau {
    ButcherTableau::new("sdirk2", 2, vec![vec![0.5]], vec![1.0])
}

pub fn make_sdirk3() -> ButcherTableau {
    let g = (3f64.sqrt() + 3.0) / 6.0;
    ButcherTableau::new(
        "sdirk3",
        3,
        vec![vec![g, 0.0], vec![1.0 - 2.0 * g, g]],
        vec![0.5, 0.5],
    )
}

pub fn make_sdirk4() -> ButcherTableau {
    let al = 2.0 / 3f64.sqrt() * (std::f64::consts::PI / 18.0).cos();
    let d = (1.0 + al) / 2.0;
    let w = 1.0 / (6.0 * al * al);
    ButcherTableau::new(
        "sdirk4",
        4,
        vec![
            vec![d, 0.0, 0.0],
            vec![-al / 2.0, d, 0.0],
            vec![1.0 + al, -(1.0 + 2.0 * al), d],
        ],
        vec![w, 1.0 - 2.0 * w, w],
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub name: String,
    pub lower_triangular: bool,
    pub row_sums: bool,
    pub nonnegative: bool,
    pub distinct_c: bool,
    pub min_c_gap: f64,
    pub psd: bool,
    pub min_eig: f64,
    pub explicit_first_stage: bool,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.lower_triangular && self.row_sums && self.nonnegative && self.distinct_c && self.psd
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        write!(
            f,
            "{:<10} lower-triangular {:<4} row-sums {:<4} signs {:<4} distinct-c {:<4} (gap {:.3e}) psd {:<4} min-eig(M) {:+.3e}",
            self.name,
            mark(self.lower_triangular),
            mark(self.row_sums),
            mark(self.nonnegative),
            mark(self.distinct_c),
            self.min_c_gap,
            mark(self.psd),
            self.min_eig,
        )
    }
}

/// `M = B A + A^T B - b b^T` with `B = diag(b)`.
pub fn stability_matrix(t: &ButcherTableau) -> Matrix<f64> {
    let s = t.s;
    Matrix::from_fn(s, s, |i, j| {
        t.b[i] * t.a[i][j] + t.a[j][i] * t.b[j] - t.b[i] * t.b[j]
    })
}

/// Checks the coefficient conditions. Failures are reported, not raised;
/// a malformed shape yields an all-fail report.
pub fn validate(t: &ButcherTableau) -> ValidationReport {
    let s = t.s;
    if t.check_shape().is_err() {
        return ValidationReport {
            name: t.name.clone(),
            lower_triangular: false,
            row_sums: false,
            nonnegative: false,
            distinct_c: false,
            min_c_gap: 0.0,
            psd: false,
            min_eig: f64::NAN,
            explicit_first_stage: false,
        };
    }
    let lower_triangular = (0..s).all(|i| (i + 1..s).all(|j| t.a[i][j] == 0.0));
    let row_sums = (0..s).all(|i| (t.a[i].iter().sum::<f64>() - t.c[i]).abs() <= 1e-14);
    let nonnegative = (0..s).all(|i| t.a[i][i] >= 0.0 && t.b[i] >= 0.0);
    let mut min_c_gap = f64::INFINITY;
    for i in 0..s {
        for j in i + 1..s {
            min_c_gap = min_c_gap.min((t.c[i] - t.c[j]).abs());
        }
    }
    let m = stability_matrix(t);
    let sym = Matrix::from_fn(s, s, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let min_eig = symmetric_eigenvalues(&sym)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    ValidationReport {
        name: t.name.clone(),
        lower_triangular,
        row_sums,
        nonnegative,
        distinct_c: min_c_gap >= 1e-12,
        min_c_gap,
        psd: min_eig >= -1e-12,
        min_eig,
        explicit_first_stage: t.a[0][0] == 0.0,
    }
}

/// Eigenvalues of a symmetric matrix: closed forms up to 3×3, cyclic Jacobi
/// rotations beyond.
pub fn symmetric_eigenvalues(m: &Matrix<f64>) -> Vec<f64> {
    match m.rows() {
        0 => vec![],
        1 => vec![m[(0, 0)]],
        2 => {
            let (a, b, d) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let mid = 0.5 * (a + d);
            let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mid - r, mid + r]
        }
        3 => eig3(m),
        _ => jacobi_eigenvalues(m),
    }
}

// Trigonometric solution of the characteristic cubic.
fn eig3(m: &Matrix<f64>) -> Vec<f64> {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let q = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)]) / 3.0;
    if p1 == 0.0 {
        let mut e = vec![m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let bm = Matrix::from_fn(3, 3, |i, j| (m[(i, j)] - if i == j { q } else { 0.0 }) / p);
    let det = bm[(0, 0)] * (bm[(1, 1)] * bm[(2, 2)] - bm[(1, 2)] * bm[(2, 1)])
        - bm[(0, 1)] * (bm[(1, 0)] * bm[(2, 2)] - bm[(1, 2)] * bm[(2, 0)])
        + bm[(0, 2)] * (bm[(1, 0)] * bm[(2, 1)] - bm[(1, 1)] * bm[(2, 0)]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    vec![e3, e2, e1]
}

fn jacobi_eigenvalues(m: &Matrix<f64>) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off < 1e-30 * (1.0 + a.max_abs().powi(2)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    e.sort_by(f64::total_cmp);
    e
}

/// A DIRK method with `k` corrections per stage written as one larger
/// tableau. Sub-stage `r` of stage `i` sits at index `i * (k + 1) + r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTableau {
    pub base: ButcherTableau,
    pub k: usize,
    pub a_aug: Matrix<f64>,
    pub b_aug: Vec<f64>,
}

impl AugmentedTableau {
    pub fn index(&self, stage: usize, sub: usize) -> usize {
        stage * (self.k + 1) + sub
    }
}

pub fn augment(t: &ButcherTableau, k: usize) -> AugmentedTableau {
    let s = t.s;
    let m = s * (k + 1);
    let idx = |i: usize, r: usize| i * (k + 1) + r;
    let mut a = Matrix::zeros(m, m);
    let mut b = vec![0.0; m];
    for i in 0..s {
        for r in 0..=k {
            let row = idx(i, r);
            for j in 0..i {
                a[(row, idx(j, k))] = t.a[i][j];
            }
            a[(row, row)] = t.a[i][i];
        }
        b[idx(i, k)] = t.b[i];
    }
    AugmentedTableau {
        base: t.clone(),
        k,
        a_aug: a,
        b_aug: b,
    }
}
