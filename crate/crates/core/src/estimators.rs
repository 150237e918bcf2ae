//! Element-wise error estimators, agent aggregation and the running maximum
//! over a remesh interval.
//!
//! p-refinement uses the distance to the next-lower polynomial space;
//! h-refinement uses a jump indicator built from least-squares polynomial
//! reconstructions over neighbouring element pairs.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dg::basis::{self, apply_tensor};
use crate::dg::{Discretization, SolutionState};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, RefinementMode};

/// Non-negative per-element error values of one solution component.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorField {
    pub values: Vec<f64>,
    pub component: usize,
}

/// Polynomial space used by the jump reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitBasis {
    /// monomials `x^a y^b` with `a, b ≤ r`
    #[default]
    Tensor,
    /// monomials with `a + b ≤ r`
    TotalDegree,
}

impl FitBasis {
    fn exponents(self, r: usize) -> Vec<(i32, i32)> {
        let mut out = Vec::new();
        for b in 0..=r {
            for a in 0..=r {
                if self == FitBasis::Tensor || a + b <= r {
                    out.push((a as i32, b as i32));
                }
            }
        }
        out
    }
}

/// `‖u − Π_{p−1} u‖_{L²(Ω_i)}` of one component per element.
pub fn p_projection_estimate(state: &SolutionState, component: usize) -> ErrorField {
    let m = state.components();
    let values = state
        .mesh()
        .elements()
        .iter()
        .enumerate()
        .map(|(e, el)| {
            let b = state.discretization().basis(e);
            let (n, q) = (b.n(), b.q());
            let u: Vec<f64> = state.coeffs[e].chunks(m).map(|c| c[component]).collect();
            let low = apply_tensor(&b.lower_projection, &b.lower_projection, n, n, &u, 1);
            let diff: Vec<f64> = u.iter().zip(&low).map(|(a, b)| a - b).collect();
            let dq = apply_tensor(&b.interp, &b.interp, q, n, &diff, 1);
            let mut s = 0.0;
            for j in 0..q {
                for i in 0..q {
                    s += b.quad_weights[i] * b.quad_weights[j] * dq[i + q * j].powi(2);
                }
            }
            (s * el.jacobian()).sqrt()
        })
        .collect();
    ErrorField { values, component }
}

/// Precomputed least-squares data for one interface.
#[derive(Debug)]
struct PairFit {
    elements: [usize; 2],
    /// for each side: `q × n` basis table at the fit points
    samples: [Vec<f64>; 2],
    /// quadrature weights (physical) per side
    weights: [Vec<f64>; 2],
    /// monomial values at the fit points, `points × terms`
    design: [Vec<f64>; 2],
    /// pseudo-inverse of the weighted design matrix, `terms × points`
    pinv: Vec<f64>,
    terms: usize,
}

/// Jump/reconstruction estimator bound to one discretization.
#[derive(Debug)]
pub struct JumpEstimator {
    disc: Arc<Discretization>,
    fits: Vec<PairFit>,
    edge_counts: Vec<usize>,
}

impl JumpEstimator {
    pub fn new(disc: Arc<Discretization>, fit: FitBasis) -> Self {
        let mesh = disc.mesh();
        let mut edge_counts = vec![0usize; mesh.elements().len()];
        let fits = mesh
            .faces()
            .iter()
            .map(|f| {
                edge_counts[f.minus] += 1;
                edge_counts[f.plus] += 1;
                let em = mesh.elements()[f.minus];
                let mut ep = mesh.elements()[f.plus];
                // place the plus element next to the minus one across the face
                let a = f.axis.index();
                ep.lower[a] = em.lower[a] + em.size[a];
                let lo = [em.lower[0].min(ep.lower[0]), em.lower[1].min(ep.lower[1])];
                let hi = [
                    (em.lower[0] + em.size[0]).max(ep.lower[0] + ep.size[0]),
                    (em.lower[1] + em.size[1]).max(ep.lower[1] + ep.size[1]),
                ];
                let centre = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
                let half = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
                let r = em.order.max(ep.order);
                let exps = fit.exponents(r);
                let terms = exps.len();
                let (xq, wq) = basis::gauss_legendre(r + 2);
                let side = |el: &crate::mesh::Element, e: usize| {
                    let b = disc.basis(e);
                    let n = b.n();
                    let lx = basis::lagrange_table(&b.nodes, &xq);
                    let mut samples = Vec::new();
                    let mut weights = Vec::new();
                    let mut design = Vec::new();
                    for (j, &y) in xq.iter().enumerate() {
                        for (i, &x) in xq.iter().enumerate() {
                            for jj in 0..n {
                                for ii in 0..n {
                                    samples.push(lx[i * n + ii] * lx[j * n + jj]);
                                }
                            }
                            weights.push(wq[i] * wq[j] * el.jacobian());
                            let p = el.map([x, y]);
                            let s = [(p[0] - centre[0]) / half[0], (p[1] - centre[1]) / half[1]];
                            for &(ea, eb) in &exps {
                                design.push(s[0].powi(ea) * s[1].powi(eb));
                            }
                        }
                    }
                    (samples, weights, design)
                };
                let (sm, wm, dm) = side(&em, f.minus);
                let (sp, wp, dp) = side(&ep, f.plus);
                let rows = wm.len() + wp.len();
                let mut a = DMatrix::<f64>::zeros(rows, terms);
                for (k, w) in wm.iter().chain(&wp).enumerate() {
                    let d = if k < wm.len() { &dm[k * terms..(k + 1) * terms] } else {
                        let k = k - wm.len();
                        &dp[k * terms..(k + 1) * terms]
                    };
                    for t in 0..terms {
                        a[(k, t)] = w.sqrt() * d[t];
                    }
                }
                let pinv = a.pseudo_inverse(1e-12).expect("pseudo-inverse of a finite matrix");
                let pinv = (0..terms)
                    .flat_map(|t| (0..rows).map(move |k| (t, k)))
                    .map(|(t, k)| pinv[(t, k)])
                    .collect();
                PairFit {
                    elements: [f.minus, f.plus],
                    samples: [sm, sp],
                    weights: [wm, wp],
                    design: [dm, dp],
                    pinv,
                    terms,
                }
            })
            .collect();
        Self {
            disc,
            fits,
            edge_counts,
        }
    }

    pub fn discretization(&self) -> &Arc<Discretization> {
        &self.disc
    }

    /// `sqrt(Σ_e ‖u − R_e u‖²_{L²(Ω_i)} / N_i)` for every element.
    pub fn estimate(&self, state: &SolutionState, component: usize) -> Result<ErrorField> {
        if !Arc::ptr_eq(&self.disc, state.discretization()) {
            return Err(Error::Mesh("estimator was built for a different mesh".into()));
        }
        let m = state.components();
        let mut acc = vec![0.0; state.coeffs.len()];
        let mut vals: Vec<f64> = Vec::new();
        for fit in &self.fits {
            vals.clear();
            let mut sqrt_w = Vec::new();
            for s in 0..2 {
                let e = fit.elements[s];
                let u = &state.coeffs[e];
                let n = u.len() / m;
                for (k, row) in fit.samples[s].chunks(n).enumerate() {
                    let v: f64 = row.iter().enumerate().map(|(i, phi)| phi * u[i * m + component]).sum();
                    vals.push(v);
                    sqrt_w.push(fit.weights[s][k].sqrt());
                }
            }
            let rows = vals.len();
            let coef: Vec<f64> = (0..fit.terms)
                .map(|t| {
                    (0..rows)
                        .map(|k| fit.pinv[t * rows + k] * sqrt_w[k] * vals[k])
                        .sum()
                })
                .collect();
            let mut offset = 0;
            for s in 0..2 {
                let mut misfit = 0.0;
                for (k, w) in fit.weights[s].iter().enumerate() {
                    let d = &fit.design[s][k * fit.terms..(k + 1) * fit.terms];
                    let r: f64 = d.iter().zip(&coef).map(|(a, b)| a * b).sum();
                    misfit += w * (vals[offset + k] - r).powi(2);
                }
                offset += fit.weights[s].len();
                acc[fit.elements[s]] += misfit;
            }
        }
        let values = acc
            .iter()
            .zip(&self.edge_counts)
            .map(|(a, &n)| if n == 0 { 0.0 } else { (a / n as f64).sqrt() })
            .collect();
        Ok(ErrorField { values, component })
    }
}

/// Estimator selected by the refinement mode: projection for p, jump
/// reconstruction for h.
#[derive(Debug)]
pub enum Estimator {
    Projection(Arc<Discretization>),
    Jump(JumpEstimator),
}

impl Estimator {
    pub fn for_discretization(disc: Arc<Discretization>, fit: FitBasis) -> Self {
        match disc.mesh().mode() {
            RefinementMode::P => Estimator::Projection(disc),
            RefinementMode::H => Estimator::Jump(JumpEstimator::new(disc, fit)),
        }
    }

    pub fn discretization(&self) -> &Arc<Discretization> {
        match self {
            Estimator::Projection(d) => d,
            Estimator::Jump(j) => j.discretization(),
        }
    }

    /// Per-element errors of the law's observed component.
    pub fn estimate(&self, state: &SolutionState) -> Result<ErrorField> {
        let c = state.law().observed_component();
        match self {
            Estimator::Projection(_) => Ok(p_projection_estimate(state, c)),
            Estimator::Jump(j) => j.estimate(state, c),
        }
    }
}

/// How child values combine into one agent value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// `sqrt(Σ v²)`, used for errors
    L2,
    /// area-weighted mean, used for averaged fields
    AreaMean,
}

pub fn aggregate_to_agents(values: &[f64], mesh: &Mesh, how: Aggregation) -> Result<Vec<f64>> {
    if values.len() != mesh.elements().len() {
        return Err(Error::LengthMismatch {
            expected: mesh.elements().len(),
            actual: values.len(),
        });
    }
    Ok((0..mesh.agent_count())
        .map(|a| {
            let r = mesh.agent_elements(a);
            if r.len() == 1 {
                return values[r.start];
            }
            match how {
                Aggregation::L2 => r.map(|e| values[e] * values[e]).sum::<f64>().sqrt(),
                Aggregation::AreaMean => {
                    let els = mesh.elements();
                    let area: f64 = r.clone().map(|e| els[e].area()).sum();
                    r.map(|e| values[e] * els[e].area()).sum::<f64>() / area
                }
            }
        })
        .collect())
}

/// Elementwise `max(acc, sample)`.
pub fn running_max_update(acc: &mut [f64], sample: &[f64]) -> Result<()> {
    if acc.len() != sample.len() {
        return Err(Error::LengthMismatch {
            expected: acc.len(),
            actual: sample.len(),
        });
    }
    for (a, s) in acc.iter_mut().zip(sample) {
        *a = a.max(*s);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equations::ConservationLaw;
    use crate::mesh::{Bounds, Level};

    fn adv() -> ConservationLaw {
        ConservationLaw::Advection { velocity: [1.0, 0.0] }
    }

    fn state(mesh: Mesh, f: impl Fn([f64; 2]) -> f64) -> SolutionState {
        SolutionState::interpolate(Discretization::new(mesh, adv()), |x| [f(x), 0.0, 0.0, 0.0])
    }

    #[test]
    fn projection_estimate_vanishes_on_lower_degree() {
        let mesh = Mesh::cartesian(4, 4, Bounds::unit(), RefinementMode::P, 2).unwrap();
        let s = state(mesh, |x| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1]);
        let e = p_projection_estimate(&s, 0);
        assert!(e.values.iter().all(|&v| v < 1e-13));
    }

    #[test]
    fn projection_estimate_matches_dense_quadrature() {
        // single P2 element of width h centred at 0
        let h = 0.4;
        let mesh = Mesh::cartesian(1, 1, Bounds::new([-0.5 * h, -0.5 * h], [0.5 * h, 0.5 * h]), RefinementMode::P, 2)
            .unwrap();
        let s = state(mesh, |x| x[0] * x[0]);
        let e = p_projection_estimate(&s, 0).values[0];
        // oracle: Π₁ x² on [-h/2, h/2] is the constant h²/12 (x² is even, so
        // the linear part vanishes); integrate the remainder with a midpoint rule
        let k = 20000;
        let mut s2 = 0.0;
        for i in 0..k {
            let x = -0.5 * h + (i as f64 + 0.5) * h / k as f64;
            s2 += (x * x - h * h / 12.0).powi(2) * h / k as f64;
        }
        let oracle = (s2 * h).sqrt();
        assert!((e - oracle).abs() < 1e-8 * oracle, "{e} vs {oracle}");
        let scaled = state(
            Mesh::cartesian(1, 1, Bounds::new([-0.2, -0.2], [0.2, 0.2]), RefinementMode::P, 2).unwrap(),
            |x| 10.0 * x[0] * x[0],
        );
        assert!((p_projection_estimate(&scaled, 0).values[0] - 10.0 * e).abs() < 1e-13);
    }

    #[test]
    fn jump_estimate_zero_for_affine_and_global_polynomials() {
        // affine data is periodic-incompatible across the wrap, so use a
        // global polynomial on the interior and check interior elements only
        let mesh = Mesh::cartesian(5, 5, Bounds::unit(), RefinementMode::H, 2).unwrap();
        let s = state(mesh.clone(), |x| 0.5 + x[0] - 0.3 * x[1] + x[0] * x[1]);
        let est = JumpEstimator::new(s.discretization().clone(), FitBasis::Tensor);
        let e = est.estimate(&s, 0).unwrap();
        for (i, el) in mesh.elements().iter().enumerate() {
            let c = el.centroid();
            if c[0] > 0.2 && c[0] < 0.8 && c[1] > 0.2 && c[1] < 0.8 {
                assert!(e.values[i] < 1e-11, "{i}: {}", e.values[i]);
            }
        }
        let s = state(mesh, |_| 3.0);
        let e = est_for(&s).estimate(&s, 0).unwrap();
        assert!(e.values.iter().all(|&v| v < 1e-12));
    }

    fn est_for(s: &SolutionState) -> JumpEstimator {
        JumpEstimator::new(s.discretization().clone(), FitBasis::Tensor)
    }

    #[test]
    fn jump_estimate_positive_on_step() {
        let mesh = Mesh::cartesian(4, 4, Bounds::unit(), RefinementMode::H, 1).unwrap();
        let s = state(mesh, |x| if x[0] < 0.5 { 0.0 } else { 1.0 });
        let e = est_for(&s).estimate(&s, 0).unwrap();
        // elements on either side of x = 0.5 (and of the wrap at 0/1)
        for iy in 0..4 {
            assert!(e.values[1 + 4 * iy] > 0.0 && e.values[2 + 4 * iy] > 0.0);
        }
    }

    #[test]
    fn jump_estimate_matches_dense_least_squares_on_pair() {
        // two P1 elements side by side; the periodic wrap faces pair each
        // element with the other as well, giving identical fits
        let mesh = Mesh::cartesian(2, 1, Bounds::new([0.0, 0.0], [2.0, 1.0]), RefinementMode::H, 1).unwrap();
        let mut s = state(mesh, |_| 0.0);
        // nodes on x = 1 belong to both elements, so set the step directly
        s.coeffs[1].fill(1.0);
        let e = est_for(&s).estimate(&s, 0).unwrap();
        // oracle: fit a + b s + c t + d s t (s, t scaled to [-1,1]) to the
        // step on [0,2]×[0,1] by dense midpoint least squares
        let k = 200;
        let mut ata = nalgebra::Matrix4::<f64>::zeros();
        let mut atb = nalgebra::Vector4::<f64>::zeros();
        let mut pts = Vec::new();
        for j in 0..k {
            for i in 0..2 * k {
                let x = (i as f64 + 0.5) / k as f64;
                let y = (j as f64 + 0.5) / k as f64;
                let (sx, ty) = (x - 1.0, 2.0 * y - 1.0);
                let phi = nalgebra::Vector4::new(1.0, sx, ty, sx * ty);
                let u = if x < 1.0 { 0.0 } else { 1.0 };
                ata += phi * phi.transpose();
                atb += phi * u;
                pts.push((x, phi, u));
            }
        }
        let c = ata.lu().solve(&atb).unwrap();
        let da = 1.0 / (k * k) as f64;
        let left: f64 = pts.iter().filter(|p| p.0 < 1.0).map(|p| (p.2 - p.1.dot(&c)).powi(2) * da).sum();
        // each element has 2 x-faces (both to the other element) and 2 self
        // y-faces whose fits reproduce u exactly
        let oracle = (2.0 * left / 4.0).sqrt();
        assert!((e.values[0] - oracle).abs() < 1e-4 * oracle, "{} vs {oracle}", e.values[0]);
        assert!((e.values[1] - oracle).abs() < 1e-4 * oracle);
    }

    #[test]
    fn jump_estimate_on_hanging_mesh_is_finite_and_translation_equivariant() {
        let mesh = Mesh::cartesian(4, 4, Bounds::unit(), RefinementMode::H, 1).unwrap();
        let mut a = vec![Level::Coarse; 16];
        a[5] = Level::Fine;
        let m1 = mesh.with_actions(&a).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        let bump = |x: [f64; 2], x0: f64| (2.0 * (tau * (x[0] - x0)).cos() + (tau * (x[1] - 0.4)).cos()).exp();
        let s1 = state(m1.clone(), |x| bump(x, 0.4));
        let e1 = est_for(&s1).estimate(&s1, 0).unwrap();
        assert!(e1.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        let mut b = vec![Level::Coarse; 16];
        b[6] = Level::Fine;
        let m2 = mesh.with_actions(&b).unwrap();
        let s2 = state(m2.clone(), |x| bump(x, 0.65));
        let e2 = est_for(&s2).estimate(&s2, 0).unwrap();
        let g1 = aggregate_to_agents(&e1.values, &m1, Aggregation::L2).unwrap();
        let g2 = aggregate_to_agents(&e2.values, &m2, Aggregation::L2).unwrap();
        for iy in 0..4 {
            for ix in 0..4 {
                let a = g1[ix + 4 * iy];
                let b = g2[(ix + 1) % 4 + 4 * iy];
                assert!((a - b).abs() < 1e-10 * a.max(1e-12), "{ix},{iy}: {a} {b}");
            }
        }
    }

    #[test]
    fn aggregation_examples() {
        let mesh = Mesh::cartesian(2, 1, Bounds::unit(), RefinementMode::H, 1).unwrap();
        let m = mesh.with_actions(&[Level::Fine, Level::Coarse]).unwrap();
        let v = [3.0, 4.0, 0.0, 0.0, 7.0];
        assert_eq!(aggregate_to_agents(&v, &m, Aggregation::L2).unwrap(), vec![5.0, 7.0]);
        let w = [2.0, 2.0, 2.0, 2.0, -1.0];
        assert_eq!(aggregate_to_agents(&w, &m, Aggregation::AreaMean).unwrap(), vec![2.0, -1.0]);
        assert!(aggregate_to_agents(&w[..4], &m, Aggregation::L2).is_err());
    }

    #[test]
    fn running_max_examples() {
        let mut acc = vec![0.0];
        running_max_update(&mut acc, &[1e-3]).unwrap();
        assert_eq!(acc, vec![1e-3]);
        for s in [1e-5, 2e-3] {
            running_max_update(&mut acc, &[s]).unwrap();
        }
        assert_eq!(acc, vec![2e-3]);
        running_max_update(&mut acc, &[2e-3]).unwrap();
        assert_eq!(acc, vec![2e-3]);
        assert!(running_max_update(&mut acc, &[1.0, 2.0]).is_err());
    }
}
