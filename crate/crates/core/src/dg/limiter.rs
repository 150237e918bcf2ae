//! Barth–Jespersen slope limiting driven by the density (first component).

use super::SolutionState;

/// Per-element factors `α ∈ [0, 1]` that keep every nodal density value
/// within the range of the element's and its face neighbours' means.
pub fn barth_jespersen_factors(state: &SolutionState) -> Vec<f64> {
    let m = state.components();
    let disc = state.discretization();
    let n_el = state.coeffs.len();
    let means: Vec<f64> = (0..n_el).map(|e| state.element_mean(e)[0]).collect();
    (0..n_el)
        .map(|e| {
            let mean = means[e];
            let (mut lo, mut hi) = (mean, mean);
            for &k in disc.face_neighbors(e) {
                lo = lo.min(means[k]);
                hi = hi.max(means[k]);
            }
            let mut alpha: f64 = 1.0;
            for node in state.coeffs[e].chunks(m) {
                let d = node[0] - mean;
                let r = if d > 0.0 {
                    (hi - mean) / d
                } else if d < 0.0 {
                    (lo - mean) / d
                } else {
                    1.0
                };
                alpha = alpha.min(r);
            }
            alpha.clamp(0.0, 1.0)
        })
        .collect()
}

/// Scales every component's deviation from its element mean by the
/// density-based factor.
pub fn limit_barth_jespersen(state: &mut SolutionState) {
    let alpha = barth_jespersen_factors(state);
    let m = state.components();
    for (e, &a) in alpha.iter().enumerate() {
        if a >= 1.0 {
            continue;
        }
        let mean = state.element_mean(e);
        for node in state.coeffs[e].chunks_mut(m) {
            for c in 0..m {
                node[c] = mean[c] + a * (node[c] - mean[c]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dg::Discretization;
    use crate::equations::{ConservationLaw, Primitive};
    use crate::mesh::{Bounds, Mesh, RefinementMode};

    fn euler_state(f: impl Fn([f64; 2]) -> f64) -> SolutionState {
        let law = ConservationLaw::euler();
        let mesh = Mesh::cartesian(5, 5, Bounds::unit(), RefinementMode::P, 1).unwrap();
        SolutionState::interpolate(Discretization::new(mesh, law), |x| {
            law.from_primitive(Primitive::new(f(x), 0.1, 0.0, 1.0))
        })
    }

    #[test]
    fn linear_density_is_untouched_in_the_interior() {
        let s = euler_state(|x| 1.0 + 0.2 * x[0] + 0.1 * x[1]);
        let alpha = barth_jespersen_factors(&s);
        let mesh = s.mesh();
        for (e, el) in mesh.elements().iter().enumerate() {
            let c = el.centroid();
            if c[0] > 0.2 && c[0] < 0.8 && c[1] > 0.2 && c[1] < 0.8 {
                assert!((alpha[e] - 1.0).abs() < 1e-12, "{e}: {}", alpha[e]);
            }
        }
    }

    #[test]
    fn spike_is_limited_and_means_preserved() {
        let s = euler_state(|x| {
            let d = ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)).sqrt();
            if d < 0.1 { 1.0 + 5.0 * (0.1 - d) } else { 1.0 }
        });
        let alpha = barth_jespersen_factors(&s);
        assert!(alpha[12] < 1.0);
        let mut limited = s.clone();
        limit_barth_jespersen(&mut limited);
        for e in 0..25 {
            let a = s.element_mean(e);
            let b = limited.element_mean(e);
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-14);
            }
        }
        let disc = s.discretization();
        let means: Vec<f64> = (0..25).map(|e| s.element_mean(e)[0]).collect();
        let lo = disc.face_neighbors(12).iter().map(|&k| means[k]).fold(means[12], f64::min);
        let hi = disc.face_neighbors(12).iter().map(|&k| means[k]).fold(means[12], f64::max);
        for node in limited.coeffs[12].chunks(4) {
            assert!(node[0] >= lo - 1e-13 && node[0] <= hi + 1e-13);
        }
    }
}
