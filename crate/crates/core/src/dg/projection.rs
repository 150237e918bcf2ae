//! L2 projections between polynomial orders and between parent and child
//! elements, all in tensor-product form.

use super::basis::{self, apply_tensor, ElementBasis};

/// Projects nodal data of order `p_from` onto order `p_to`.
pub fn project_order(u: &[f64], m: usize, p_from: usize, p_to: usize) -> Vec<f64> {
    if p_from == p_to {
        return u.to_vec();
    }
    let t = basis::transfer_matrix(p_from, p_to);
    apply_tensor(&t, &t, p_to + 1, p_from + 1, u, m)
}

/// Interpolation matrices from the parent nodes to the nodes of the lower
/// and upper half-interval children.
fn split_matrices(p: usize) -> [Vec<f64>; 2] {
    let b = ElementBasis::get(p);
    let lower: Vec<f64> = b.nodes.iter().map(|&s| 0.5 * (s - 1.0)).collect();
    let upper: Vec<f64> = b.nodes.iter().map(|&s| 0.5 * (s + 1.0)).collect();
    [basis::lagrange_table(&b.nodes, &lower), basis::lagrange_table(&b.nodes, &upper)]
}

/// Exact prolongation of a parent polynomial onto its four children
/// (SW, SE, NW, NE).
pub fn split_to_children(u: &[f64], m: usize, p: usize) -> [Vec<f64>; 4] {
    let s = split_matrices(p);
    let n = p + 1;
    std::array::from_fn(|k| apply_tensor(&s[k % 2], &s[k / 2], n, n, u, m))
}

/// 1D projection of a half-interval child onto the parent basis.
fn merge_matrices(p: usize) -> [Vec<f64>; 2] {
    let b = ElementBasis::get(p);
    let n = b.n();
    let (xq, wq) = basis::gauss_legendre(p + 2);
    let child = basis::lagrange_table(&b.nodes, &xq);
    let out = |shift: f64| {
        let pts: Vec<f64> = xq.iter().map(|&s| 0.5 * (s + shift)).collect();
        let parent = basis::lagrange_table(&b.nodes, &pts);
        let mut mixed = vec![0.0; n * n];
        for (k, &w) in wq.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    mixed[i * n + j] += 0.5 * w * parent[k * n + i] * child[k * n + j];
                }
            }
        }
        basis::matmul(&b.mass_inv, &mixed, n, n, n)
    };
    [out(-1.0), out(1.0)]
}

/// L2 projection of four children (SW, SE, NW, NE) onto their parent.
pub fn project_children_to_parent(children: [&[f64]; 4], m: usize, p: usize) -> Vec<f64> {
    let g = merge_matrices(p);
    let n = p + 1;
    let mut out = vec![0.0; n * n * m];
    for (k, child) in children.iter().enumerate() {
        let part = apply_tensor(&g[k % 2], &g[k / 2], n, n, child, m);
        out.iter_mut().zip(part).for_each(|(o, v)| *o += v);
    }
    out
}
