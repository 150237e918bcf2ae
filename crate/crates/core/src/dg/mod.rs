//! Nodal discontinuous Galerkin discretization on the periodic agent mesh.
//!
//! Elements use Gauss–Lobatto nodes with tensor-product Gauss–Legendre
//! quadrature of `p + 2` points per direction. Interfaces use the Rusanov
//! flux; hanging-node interfaces are integrated on the fine sub-faces with
//! the coarse trace evaluated at the sub-face points, and p-nonconforming
//! interfaces use the point count of the higher-order side.

pub mod basis;
pub mod limiter;
pub mod projection;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::equations::{ConservationLaw, MAX_COMPONENTS};
use crate::error::{Error, Result};
use crate::mesh::{Axis, Mesh};

pub use basis::ElementBasis;

/// Quadrature data for one interface.
#[derive(Debug)]
struct FaceQuadrature {
    axis: Axis,
    minus: usize,
    plus: usize,
    /// physical quadrature weights along the face
    weights: Vec<f64>,
    /// `q × n_minus` tangential basis values on the minus element
    minus_basis: Vec<f64>,
    plus_basis: Vec<f64>,
}

/// Mesh plus everything precomputed from it for the spatial operator.
#[derive(Debug)]
pub struct Discretization {
    mesh: Mesh,
    law: ConservationLaw,
    bases: Vec<Arc<ElementBasis>>,
    faces: Vec<FaceQuadrature>,
    neighbors: Vec<Vec<usize>>,
}

impl Discretization {
    pub fn new(mesh: Mesh, law: ConservationLaw) -> Arc<Self> {
        let bases: Vec<_> = mesh
            .elements()
            .iter()
            .map(|e| ElementBasis::get(e.order))
            .collect();
        let mut neighbors = vec![Vec::new(); mesh.elements().len()];
        let faces = mesh
            .faces()
            .iter()
            .map(|f| {
                let bm = &bases[f.minus];
                let bp = &bases[f.plus];
                let nq = bm.order.max(bp.order) + 2;
                let (s, w) = basis::gauss_legendre(nq);
                let map = |span: [f64; 2]| -> Vec<f64> {
                    s.iter()
                        .map(|&s| span[0] + 0.5 * (s + 1.0) * (span[1] - span[0]))
                        .collect()
                };
                if !neighbors[f.minus].contains(&f.plus) && f.minus != f.plus {
                    neighbors[f.minus].push(f.plus);
                    neighbors[f.plus].push(f.minus);
                }
                FaceQuadrature {
                    axis: f.axis,
                    minus: f.minus,
                    plus: f.plus,
                    weights: w.iter().map(|w| 0.5 * w * f.length).collect(),
                    minus_basis: basis::lagrange_table(&bm.nodes, &map(f.minus_span)),
                    plus_basis: basis::lagrange_table(&bp.nodes, &map(f.plus_span)),
                }
            })
            .collect();
        Arc::new(Self {
            mesh,
            law,
            bases,
            faces,
            neighbors,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn law(&self) -> ConservationLaw {
        self.law
    }

    pub fn basis(&self, element: usize) -> &ElementBasis {
        &self.bases[element]
    }

    /// Elements sharing at least one face with `element`.
    pub fn face_neighbors(&self, element: usize) -> &[usize] {
        &self.neighbors[element]
    }
}

/// Nodal DG coefficients of every element at a simulation time.
///
/// Element data is node-major with interleaved components:
/// `coeffs[e][(i + n*j)*m + c]`.
#[derive(Clone, Debug)]
pub struct SolutionState {
    disc: Arc<Discretization>,
    pub coeffs: Vec<Vec<f64>>,
    pub time: f64,
}

impl SolutionState {
    pub fn zeros(disc: Arc<Discretization>) -> Self {
        let m = disc.law.components();
        let coeffs = disc
            .mesh
            .elements()
            .iter()
            .map(|e| vec![0.0; e.node_count() * m])
            .collect();
        Self {
            disc,
            coeffs,
            time: 0.0,
        }
    }

    /// Nodal interpolation of a pointwise function.
    pub fn interpolate<F>(disc: Arc<Discretization>, f: F) -> Self
    where
        F: Fn([f64; 2]) -> [f64; MAX_COMPONENTS],
    {
        let mut state = Self::zeros(disc);
        let m = state.components();
        for (e, el) in state.disc.mesh.elements().iter().enumerate() {
            let nodes = &state.disc.bases[e].nodes;
            let n = nodes.len();
            for j in 0..n {
                for i in 0..n {
                    let v = f(el.map([nodes[i], nodes[j]]));
                    state.coeffs[e][(i + n * j) * m..(i + n * j + 1) * m].copy_from_slice(&v[..m]);
                }
            }
        }
        state
    }

    pub fn discretization(&self) -> &Arc<Discretization> {
        &self.disc
    }

    pub fn mesh(&self) -> &Mesh {
        &self.disc.mesh
    }

    pub fn law(&self) -> ConservationLaw {
        self.disc.law
    }

    pub fn components(&self) -> usize {
        self.disc.law.components()
    }

    pub fn dof_count(&self) -> usize {
        self.mesh().dof_count(self.components())
    }

    /// Solution at reference coordinates of an element.
    pub fn evaluate_in(&self, element: usize, xi: [f64; 2]) -> [f64; MAX_COMPONENTS] {
        let b = &self.disc.bases[element];
        let vx = basis::lagrange_values(&b.nodes, xi[0]);
        let vy = basis::lagrange_values(&b.nodes, xi[1]);
        let n = b.n();
        let m = self.components();
        let u = &self.coeffs[element];
        let mut out = [0.0; MAX_COMPONENTS];
        for j in 0..n {
            for i in 0..n {
                let w = vx[i] * vy[j];
                for c in 0..m {
                    out[c] += w * u[(i + n * j) * m + c];
                }
            }
        }
        out
    }

    /// Solution at a physical point (wrapped periodically).
    pub fn evaluate(&self, x: [f64; 2]) -> [f64; MAX_COMPONENTS] {
        let (e, xi) = self.mesh().locate(x);
        self.evaluate_in(e, xi)
    }

    /// Element mean of every component.
    pub fn element_mean(&self, element: usize) -> [f64; MAX_COMPONENTS] {
        let b = &self.disc.bases[element];
        let (n, q, m) = (b.n(), b.q(), self.components());
        let u = &self.coeffs[element];
        let mut out = [0.0; MAX_COMPONENTS];
        for qy in 0..q {
            for qx in 0..q {
                let w = 0.25 * b.quad_weights[qx] * b.quad_weights[qy];
                for j in 0..n {
                    let by = b.interp[qy * n + j];
                    for i in 0..n {
                        let phi = w * b.interp[qx * n + i] * by;
                        for c in 0..m {
                            out[c] += phi * u[(i + n * j) * m + c];
                        }
                    }
                }
            }
        }
        out
    }

    /// Domain integral of every component.
    pub fn integrals(&self) -> [f64; MAX_COMPONENTS] {
        let mut out = [0.0; MAX_COMPONENTS];
        for (e, el) in self.mesh().elements().iter().enumerate() {
            let mean = self.element_mean(e);
            for c in 0..self.components() {
                out[c] += mean[c] * el.area();
            }
        }
        out
    }

    /// Largest `|a - b|` over all coefficients; the layouts must agree.
    pub fn max_abs_difference(&self, other: &SolutionState) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Rusanov numerical flux `½(F⁻·n + F⁺·n) − ½ λ (u⁺ − u⁻)`.
pub fn rusanov_flux(
    law: &ConservationLaw,
    um: &[f64],
    up: &[f64],
    n: [f64; 2],
) -> Result<[f64; MAX_COMPONENTS]> {
    let fm = law.normal_flux(um, n)?;
    let fp = law.normal_flux(up, n)?;
    let lambda = law.interface_wavespeed(um, up, n)?;
    let mut out = [0.0; MAX_COMPONENTS];
    for k in 0..law.components() {
        out[k] = 0.5 * (fm[k] + fp[k]) - 0.5 * lambda * (up[k] - um[k]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub cfl: f64,
    /// Barth–Jespersen limiting after every Runge–Kutta stage.
    pub limiter: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cfl: 0.5,
            limiter: false,
        }
    }
}

/// Work done by [`Solver::advance`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdvanceStats {
    pub steps: usize,
    /// Sum over accepted steps of the mesh DOF count.
    pub dof_steps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Solver {
    pub config: SolverConfig,
}

impl Solver {
    pub fn new(config: SolverConfig) -> Self {
        Self { config }
    }

    /// Weak-form right-hand side `du/dt` of every element.
    pub fn residual(&self, state: &SolutionState) -> Result<Vec<Vec<f64>>> {
        let disc = &*state.disc;
        let law = disc.law;
        let m = law.components();
        let mesh = &disc.mesh;
        let fail = |e: usize, err: Error| Error::SolverFailure {
            time: state.time,
            element: e,
            reason: err.to_string(),
        };

        let mut rhs: Vec<Vec<f64>> = state.coeffs.iter().map(|c| vec![0.0; c.len()]).collect();

        // volume terms ∫ F(u)·∇φ
        for (e, el) in mesh.elements().iter().enumerate() {
            let b = &*disc.bases[e];
            let (n, q) = (b.n(), b.q());
            let u = &state.coeffs[e];
            // interpolate to quadrature points: uq[(qx + q*qy)*m + c]
            let uq = basis::apply_tensor(&b.interp, &b.interp, q, n, u, m);
            let mut gx = vec![0.0; q * q * m];
            let mut gy = vec![0.0; q * q * m];
            // J·(2/hx) = hy/2 and J·(2/hy) = hx/2
            let sx = 0.5 * el.size[1];
            let sy = 0.5 * el.size[0];
            for qy in 0..q {
                for qx in 0..q {
                    let k = qx + q * qy;
                    let f = law.flux(&uq[k * m..(k + 1) * m]).map_err(|err| fail(e, err))?;
                    let w = b.quad_weights[qx] * b.quad_weights[qy];
                    for c in 0..m {
                        gx[k * m + c] = w * sx * f[c][0];
                        gy[k * m + c] = w * sy * f[c][1];
                    }
                }
            }
            let r = &mut rhs[e];
            // vol[i,j] = Σ D[qx,i] B[qy,j] gx + B[qx,i] D[qy,j] gy
            let mut ax = vec![0.0; q * n * m];
            let mut ay = vec![0.0; q * n * m];
            for qy in 0..q {
                for j in 0..n {
                    let bj = b.interp[qy * n + j];
                    let dj = b.deriv[qy * n + j];
                    for qx in 0..q {
                        let k = qx + q * qy;
                        for c in 0..m {
                            ax[(qx + q * j) * m + c] += bj * gx[k * m + c];
                            ay[(qx + q * j) * m + c] += dj * gy[k * m + c];
                        }
                    }
                }
            }
            for j in 0..n {
                for qx in 0..q {
                    for i in 0..n {
                        let di = b.deriv[qx * n + i];
                        let bi = b.interp[qx * n + i];
                        for c in 0..m {
                            r[(i + n * j) * m + c] +=
                                di * ax[(qx + q * j) * m + c] + bi * ay[(qx + q * j) * m + c];
                        }
                    }
                }
            }
        }

        // surface terms −∮ F̂·n φ
        let mut um = [0.0; MAX_COMPONENTS];
        let mut up = [0.0; MAX_COMPONENTS];
        for f in &disc.faces {
            let nm = disc.bases[f.minus].n();
            let np = disc.bases[f.plus].n();
            let normal = f.axis.normal();
            let edge_m = |t: usize| match f.axis {
                Axis::X => (nm - 1) + nm * t,
                Axis::Y => t + nm * (nm - 1),
            };
            let edge_p = |t: usize| match f.axis {
                Axis::X => np * t,
                Axis::Y => t,
            };
            for (k, &w) in f.weights.iter().enumerate() {
                um[..m].fill(0.0);
                up[..m].fill(0.0);
                let cm = &state.coeffs[f.minus];
                let cp = &state.coeffs[f.plus];
                for t in 0..nm {
                    let phi = f.minus_basis[k * nm + t];
                    let node = edge_m(t);
                    for c in 0..m {
                        um[c] += phi * cm[node * m + c];
                    }
                }
                for t in 0..np {
                    let phi = f.plus_basis[k * np + t];
                    let node = edge_p(t);
                    for c in 0..m {
                        up[c] += phi * cp[node * m + c];
                    }
                }
                let flux = rusanov_flux(&law, &um[..m], &up[..m], normal).map_err(|err| fail(f.minus, err))?;
                for t in 0..nm {
                    let phi = w * f.minus_basis[k * nm + t];
                    let node = edge_m(t);
                    for c in 0..m {
                        rhs[f.minus][node * m + c] -= phi * flux[c];
                    }
                }
                for t in 0..np {
                    let phi = w * f.plus_basis[k * np + t];
                    let node = edge_p(t);
                    for c in 0..m {
                        rhs[f.plus][node * m + c] += phi * flux[c];
                    }
                }
            }
        }

        // apply the inverse mass matrix (1/J)(M⁻¹ ⊗ M⁻¹)
        for (e, el) in mesh.elements().iter().enumerate() {
            let b = &*disc.bases[e];
            let n = b.n();
            let mut out = basis::apply_tensor(&b.mass_inv, &b.mass_inv, n, n, &rhs[e], m);
            let inv_j = 1.0 / el.jacobian();
            out.iter_mut().for_each(|v| *v *= inv_j);
            rhs[e] = out;
        }
        Ok(rhs)
    }

    /// `cfl · min_e h_e / (λ_e (2 p_e + 1))`; infinite when every wavespeed
    /// vanishes, in which case [`Solver::advance`] takes the remaining time.
    pub fn stable_dt(&self, state: &SolutionState) -> Result<f64> {
        let law = state.law();
        let m = state.components();
        let mut dt = f64::INFINITY;
        for (e, el) in state.mesh().elements().iter().enumerate() {
            let mut lambda: f64 = 0.0;
            for node in state.coeffs[e].chunks(m) {
                let s = law.max_wavespeed(node).map_err(|err| Error::SolverFailure {
                    time: state.time,
                    element: e,
                    reason: err.to_string(),
                })?;
                lambda = lambda.max(s);
            }
            if lambda > 0.0 {
                dt = dt.min(el.min_edge() / (lambda * (2 * el.order + 1) as f64));
            }
        }
        Ok(self.config.cfl * dt)
    }

    fn combine(&self, base: &SolutionState, parts: &[(f64, &[Vec<f64>])]) -> Result<SolutionState> {
        let mut out = base.clone();
        for (scale, k) in parts {
            for (dst, src) in out.coeffs.iter_mut().zip(k.iter()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
        if self.config.limiter {
            limiter::limit_barth_jespersen(&mut out);
        }
        Ok(out)
    }

    /// Classical four-stage Runge–Kutta step.
    pub fn rk4_step(&self, state: &SolutionState, dt: f64) -> Result<SolutionState> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let k1 = self.residual(state)?;
        let s1 = self.combine(state, &[(0.5 * dt, &k1)])?;
        let k2 = self.residual(&s1)?;
        let s2 = self.combine(state, &[(0.5 * dt, &k2)])?;
        let k3 = self.residual(&s2)?;
        let s3 = self.combine(state, &[(dt, &k3)])?;
        let k4 = self.residual(&s3)?;
        let mut out = self.combine(
            state,
            &[(dt / 6.0, &k1), (dt / 3.0, &k2), (dt / 3.0, &k3), (dt / 6.0, &k4)],
        )?;
        out.time = state.time + dt;
        Ok(out)
    }

    /// Advances by exactly `duration`, clipping the last step, and calls
    /// `tap` after every accepted step.
    pub fn advance<F>(&self, state: &SolutionState, duration: f64, mut tap: F) -> Result<(SolutionState, AdvanceStats)>
    where
        F: FnMut(&SolutionState) -> Result<()>,
    {
        if !(duration > 0.0) {
            return Err(Error::Config(format!("advance duration must be positive, got {duration}")));
        }
        let t_end = state.time + duration;
        let eps = 1e-12 * t_end.abs().max(1.0);
        let dofs = state.dof_count() as f64;
        let mut stats = AdvanceStats::default();
        let mut current = state.clone();
        loop {
            let remaining = t_end - current.time;
            let mut dt = self.stable_dt(&current)?;
            let last = dt >= remaining - eps;
            if last {
                dt = remaining;
            }
            let mut next = self.rk4_step(&current, dt)?;
            if last {
                next.time = t_end;
            }
            stats.steps += 1;
            stats.dof_steps += dofs;
            tap(&next)?;
            current = next;
            if last {
                break;
            }
        }
        Ok((current, stats))
    }
}

/// Moves a state onto a new mesh of the same geometry: unchanged agents are
/// copied, refined agents are prolonged exactly, coarsened agents are
/// L2-projected.
pub fn transfer_state(state: &SolutionState, mesh: Mesh) -> Result<SolutionState> {
    let old = state.mesh();
    if old.agent_count() != mesh.agent_count() || old.mode() != mesh.mode() {
        return Err(Error::Mesh("transfer between incompatible meshes".into()));
    }
    let m = state.components();
    let disc = Discretization::new(mesh, state.law());
    let mut out = SolutionState::zeros(disc.clone());
    out.time = state.time;
    let new_mesh = disc.mesh();
    for agent in 0..new_mesh.agent_count() {
        let src = old.agent_elements(agent);
        let dst = new_mesh.agent_elements(agent);
        let from_level = old.level(agent);
        let to_level = new_mesh.level(agent);
        if from_level == to_level {
            for (s, d) in src.zip(dst) {
                out.coeffs[d] = state.coeffs[s].clone();
            }
            continue;
        }
        match (src.len(), dst.len()) {
            (1, 1) => {
                let p_from = old.elements()[src.start].order;
                let p_to = new_mesh.elements()[dst.start].order;
                out.coeffs[dst.start] = projection::project_order(&state.coeffs[src.start], m, p_from, p_to);
            }
            (1, 4) => {
                let p = old.elements()[src.start].order;
                let kids = projection::split_to_children(&state.coeffs[src.start], m, p);
                for (k, d) in kids.into_iter().zip(dst) {
                    out.coeffs[d] = k;
                }
            }
            (4, 1) => {
                let p = old.elements()[src.start].order;
                let kids: Vec<&[f64]> = src.map(|s| state.coeffs[s].as_slice()).collect();
                out.coeffs[dst.start] =
                    projection::project_children_to_parent([kids[0], kids[1], kids[2], kids[3]], m, p);
            }
            _ => unreachable!("one-level refinement only"),
        }
    }
    Ok(out)
}
