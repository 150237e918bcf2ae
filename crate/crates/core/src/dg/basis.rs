//! One-dimensional nodal building blocks: Gauss–Legendre quadrature,
//! Gauss–Lobatto nodes, Lagrange interpolation and the per-order tables
//! used by the tensor-product quadrilateral elements.

use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = if (1.0 - x * x).abs() < 1e-14 {
        // endpoint value n(n+1)/2 · (±1)^(n+1)
        let s = if x > 0.0 { 1.0 } else if n % 2 == 0 { -1.0 } else { 1.0 };
        s * (n * (n + 1)) as f64 / 2.0
    } else {
        n as f64 * (p0 - x * p1) / (1.0 - x * x)
    };
    (p1, dp)
}

/// `n`-point Gauss–Legendre rule on `[-1, 1]`, exact to degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = -(std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, z);
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// `n` Gauss–Lobatto nodes, including both endpoints when `n >= 2`, ascending.
pub fn gauss_lobatto(n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        // degree-0 space: a single node at the centre
        return vec![0.0];
    }
    let p = n - 1;
    let mut x = vec![0.0; n];
    x[0] = -1.0;
    x[p] = 1.0;
    for i in 1..p {
        // interior nodes are the roots of P'_p
        let mut z = -(std::f64::consts::PI * i as f64 / p as f64).cos();
        for _ in 0..100 {
            let (pp, dp) = legendre(p, z);
            let d2 = (2.0 * z * dp - (p * (p + 1)) as f64 * pp) / (1.0 - z * z);
            let dz = dp / d2;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
    }
    x
}

/// Values of every Lagrange basis polynomial on `nodes` at `x`.
pub fn lagrange_values(nodes: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let mut v = 1.0;
            for j in 0..n {
                if j != i {
                    v *= (x - nodes[j]) / (nodes[i] - nodes[j]);
                }
            }
            v
        })
        .collect()
}

/// Derivatives of every Lagrange basis polynomial on `nodes` at `x`.
pub fn lagrange_derivatives(nodes: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let mut sum = 0.0;
            for k in 0..n {
                if k == i {
                    continue;
                }
                let mut term = 1.0 / (nodes[i] - nodes[k]);
                for j in 0..n {
                    if j != i && j != k {
                        term *= (x - nodes[j]) / (nodes[i] - nodes[j]);
                    }
                }
                sum += term;
            }
            sum
        })
        .collect()
}

/// `rows(points) × n` table of Lagrange values, row-major.
pub fn lagrange_table(nodes: &[f64], points: &[f64]) -> Vec<f64> {
    points.iter().flat_map(|&x| lagrange_values(nodes, x)).collect()
}

/// Per-order tables for a tensor-product nodal element.
#[derive(Debug)]
pub struct ElementBasis {
    pub order: usize,
    /// Gauss–Lobatto solution nodes.
    pub nodes: Vec<f64>,
    /// Gauss–Legendre volume rule with `order + 2` points.
    pub quad_points: Vec<f64>,
    pub quad_weights: Vec<f64>,
    /// `q × n` basis values at the quadrature points.
    pub interp: Vec<f64>,
    /// `q × n` basis derivatives at the quadrature points.
    pub deriv: Vec<f64>,
    /// `n × n` 1D mass matrix and its inverse.
    pub mass: Vec<f64>,
    pub mass_inv: Vec<f64>,
    /// `n × n` operator embedding the L2 projection onto degree `order - 1`.
    pub lower_projection: Vec<f64>,
}

impl ElementBasis {
    fn build(order: usize) -> Self {
        let n = order + 1;
        let nodes = gauss_lobatto(n);
        let (quad_points, quad_weights) = gauss_legendre(order + 2);
        let interp = lagrange_table(&nodes, &quad_points);
        let deriv: Vec<f64> = quad_points
            .iter()
            .flat_map(|&x| lagrange_derivatives(&nodes, x))
            .collect();
        let q = quad_points.len();
        let mut mass = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                mass[i * n + j] = (0..q)
                    .map(|k| quad_weights[k] * interp[k * n + i] * interp[k * n + j])
                    .sum();
            }
        }
        let mass_inv = invert(&mass, n);
        let lower_projection = if order >= 1 {
            let down = transfer_matrix(order, order - 1);
            let up = transfer_matrix(order - 1, order);
            matmul(&up, &down, n, order, n)
        } else {
            vec![0.0; 1]
        };
        Self {
            order,
            nodes,
            quad_points,
            quad_weights,
            interp,
            deriv,
            mass,
            mass_inv,
            lower_projection,
        }
    }

    /// Shared tables for `order`, built on first use.
    pub fn get(order: usize) -> Arc<ElementBasis> {
        static CACHE: OnceLock<Mutex<Vec<Option<Arc<ElementBasis>>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        if guard.len() <= order {
            guard.resize(order + 1, None);
        }
        guard[order]
            .get_or_insert_with(|| Arc::new(ElementBasis::build(order)))
            .clone()
    }

    pub fn n(&self) -> usize {
        self.order + 1
    }

    pub fn q(&self) -> usize {
        self.quad_points.len()
    }
}

pub(crate) fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, a);
    let inv = m.try_inverse().expect("singular mass matrix");
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    out
}

/// Row-major product of `a (r × k)` and `b (k × c)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += av * b[l * c + j];
            }
        }
    }
    out
}

/// 1D L2 projection from the degree-`from` nodal basis to degree `to`
/// (`(to+1) × (from+1)`); an exact embedding when `to >= from`.
pub fn transfer_matrix(from: usize, to: usize) -> Vec<f64> {
    let src = gauss_lobatto(from + 1);
    let dst = gauss_lobatto(to + 1);
    let (xq, wq) = gauss_legendre(from.max(to) + 2);
    let a = lagrange_table(&src, &xq);
    let b = lagrange_table(&dst, &xq);
    let (ns, nd) = (from + 1, to + 1);
    let mut mass = vec![0.0; nd * nd];
    let mut mixed = vec![0.0; nd * ns];
    for (k, &w) in wq.iter().enumerate() {
        for i in 0..nd {
            for j in 0..nd {
                mass[i * nd + j] += w * b[k * nd + i] * b[k * nd + j];
            }
            for j in 0..ns {
                mixed[i * ns + j] += w * b[k * nd + i] * a[k * ns + j];
            }
        }
    }
    matmul(&invert(&mass, nd), &mixed, nd, nd, ns)
}

/// Applies `ax ⊗ ay` to nodal data of `cols × cols` nodes with `m`
/// interleaved components, returning `rows × rows` nodes.
pub fn apply_tensor(ax: &[f64], ay: &[f64], rows: usize, cols: usize, u: &[f64], m: usize) -> Vec<f64> {
    debug_assert_eq!(u.len(), cols * cols * m);
    // contract x first: tmp[(I + rows*j)*m + c]
    let mut tmp = vec![0.0; rows * cols * m];
    for j in 0..cols {
        for big_i in 0..rows {
            for i in 0..cols {
                let a = ax[big_i * cols + i];
                if a == 0.0 {
                    continue;
                }
                for c in 0..m {
                    tmp[(big_i + rows * j) * m + c] += a * u[(i + cols * j) * m + c];
                }
            }
        }
    }
    let mut out = vec![0.0; rows * rows * m];
    for big_j in 0..rows {
        for j in 0..cols {
            let a = ay[big_j * cols + j];
            if a == 0.0 {
                continue;
            }
            for big_i in 0..rows {
                for c in 0..m {
                    out[(big_i + rows * big_j) * m + c] += a * tmp[(big_i + rows * j) * m + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exactness() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!((q - exact).abs() < 1e-14, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn lobatto_nodes() {
        assert_eq!(gauss_lobatto(2), vec![-1.0, 1.0]);
        let x = gauss_lobatto(3);
        assert!(x[1].abs() < 1e-15);
        let x = gauss_lobatto(4);
        assert!((x[2] - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        let x = gauss_lobatto(5);
        assert!((x[3] - (3.0f64 / 7.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lagrange_partition_of_unity_and_derivative() {
        let nodes = gauss_lobatto(4);
        for &x in &[-0.7, 0.1, 0.93] {
            let v = lagrange_values(&nodes, x);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let d = lagrange_derivatives(&nodes, x);
            assert!(d.iter().sum::<f64>().abs() < 1e-13);
            // reproduces x^2 and its derivative
            let f: f64 = nodes.iter().zip(&v).map(|(n, v)| n * n * v).sum();
            let df: f64 = nodes.iter().zip(&d).map(|(n, d)| n * n * d).sum();
            assert!((f - x * x).abs() < 1e-14 && (df - 2.0 * x).abs() < 1e-13);
        }
    }

    #[test]
    fn transfer_round_trip() {
        let up = transfer_matrix(1, 2);
        let down = transfer_matrix(2, 1);
        let id = matmul(&down, &up, 2, 3, 2);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i * 2 + j] - e).abs() < 1e-14);
            }
        }
    }
}
