//! Conservation laws: linear advection and the 2D compressible Euler equations.
//!
//! States are passed as slices of length `m` (1 or 4); fixed-size arrays of
//! [`MAX_COMPONENTS`] are returned so the hot paths stay allocation free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_COMPONENTS: usize = 4;

/// Flux columns per component: `f[k][d]` is component `k` in direction `d`.
pub type FluxMatrix = [[f64; 2]; MAX_COMPONENTS];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConservationLaw {
    Advection { velocity: [f64; 2] },
    Euler { gamma: f64 },
}

/// `a[k][l][d] = ∂F_{k,d} / ∂u_l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxJacobian {
    pub components: usize,
    pub a: [[[f64; 2]; MAX_COMPONENTS]; MAX_COMPONENTS],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub density: f64,
    pub velocity: [f64; 2],
    pub pressure: f64,
}

impl Primitive {
    pub fn new(density: f64, u: f64, v: f64, pressure: f64) -> Self {
        Self {
            density,
            velocity: [u, v],
            pressure,
        }
    }

    /// Pressure flag used by positivity diagnostics.
    pub fn has_positive_pressure(&self) -> bool {
        self.pressure > 0.0
    }
}

pub const GAMMA_AIR: f64 = 1.4;

impl ConservationLaw {
    pub fn euler() -> Self {
        ConservationLaw::Euler { gamma: GAMMA_AIR }
    }

    pub fn components(&self) -> usize {
        match self {
            ConservationLaw::Advection { .. } => 1,
            ConservationLaw::Euler { .. } => 4,
        }
    }

    /// Component used for error estimation and observation: the scalar for
    /// advection, total energy for Euler.
    pub fn observed_component(&self) -> usize {
        match self {
            ConservationLaw::Advection { .. } => 0,
            ConservationLaw::Euler { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConservationLaw::Advection { velocity } => {
                if velocity.iter().all(|c| c.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::Config("advection velocity must be finite".into()))
                }
            }
            ConservationLaw::Euler { gamma } => {
                if gamma > 1.0 && gamma.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("gamma must exceed 1, got {gamma}")))
                }
            }
        }
    }

    /// Errors unless the state is finite and, for Euler, has positive density
    /// and pressure.
    pub fn check_admissible(&self, u: &[f64]) -> Result<()> {
        match *self {
            ConservationLaw::Advection { .. } => {
                if u[0].is_finite() {
                    Ok(())
                } else {
                    Err(Error::Inadmissible(format!("non-finite value {}", u[0])))
                }
            }
            ConservationLaw::Euler { .. } => {
                let prim = self.to_primitive(u)?;
                if prim.pressure > 0.0 && prim.pressure.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Inadmissible(format!("non-positive pressure {}", prim.pressure)))
                }
            }
        }
    }

    /// Pressure of a conserved Euler state (no density check).
    pub fn pressure(&self, u: &[f64]) -> f64 {
        match *self {
            ConservationLaw::Advection { .. } => 0.0,
            ConservationLaw::Euler { gamma } => {
                (gamma - 1.0) * (u[3] - 0.5 * (u[1] * u[1] + u[2] * u[2]) / u[0])
            }
        }
    }

    pub fn to_primitive(&self, u: &[f64]) -> Result<Primitive> {
        match *self {
            ConservationLaw::Advection { .. } => Err(Error::Inadmissible(
                "primitive variables are defined for Euler only".into(),
            )),
            ConservationLaw::Euler { .. } => {
                let rho = u[0];
                if !(rho > 0.0) || !rho.is_finite() {
                    return Err(Error::Inadmissible(format!("non-positive density {rho}")));
                }
                Ok(Primitive {
                    density: rho,
                    velocity: [u[1] / rho, u[2] / rho],
                    pressure: self.pressure(u),
                })
            }
        }
    }

    pub fn from_primitive(&self, p: Primitive) -> [f64; MAX_COMPONENTS] {
        match *self {
            ConservationLaw::Advection { .. } => [p.density, 0.0, 0.0, 0.0],
            ConservationLaw::Euler { gamma } => {
                let [vx, vy] = p.velocity;
                let e = p.pressure / (gamma - 1.0) + 0.5 * p.density * (vx * vx + vy * vy);
                [p.density, p.density * vx, p.density * vy, e]
            }
        }
    }

    /// Analytic flux `F(u)`.
    pub fn flux(&self, u: &[f64]) -> Result<FluxMatrix> {
        let mut f = [[0.0; 2]; MAX_COMPONENTS];
        match *self {
            ConservationLaw::Advection { velocity } => {
                f[0] = [velocity[0] * u[0], velocity[1] * u[0]];
            }
            ConservationLaw::Euler { .. } => {
                let rho = u[0];
                if !(rho > 0.0) {
                    return Err(Error::Inadmissible(format!("non-positive density {rho}")));
                }
                let p = self.pressure(u);
                let v = [u[1] / rho, u[2] / rho];
                for d in 0..2 {
                    f[0][d] = u[1 + d];
                    f[1][d] = u[1] * v[d];
                    f[2][d] = u[2] * v[d];
                    f[3][d] = (u[3] + p) * v[d];
                }
                f[1][0] += p;
                f[2][1] += p;
            }
        }
        Ok(f)
    }

    /// `F(u)·n` for a unit normal.
    pub fn normal_flux(&self, u: &[f64], n: [f64; 2]) -> Result<[f64; MAX_COMPONENTS]> {
        let f = self.flux(u)?;
        let mut out = [0.0; MAX_COMPONENTS];
        for k in 0..self.components() {
            out[k] = f[k][0] * n[0] + f[k][1] * n[1];
        }
        Ok(out)
    }

    /// Closed-form flux Jacobian.
    pub fn flux_jacobian(&self, u: &[f64]) -> Result<FluxJacobian> {
        let mut a = [[[0.0; 2]; MAX_COMPONENTS]; MAX_COMPONENTS];
        match *self {
            ConservationLaw::Advection { velocity } => {
                a[0][0] = velocity;
            }
            ConservationLaw::Euler { gamma } => {
                let rho = u[0];
                if !(rho > 0.0) {
                    return Err(Error::Inadmissible(format!("non-positive density {rho}")));
                }
                let m = [u[1], u[2]];
                let e = u[3];
                let m2 = m[0] * m[0] + m[1] * m[1];
                let p = self.pressure(u);
                let g1 = gamma - 1.0;
                for i in 0..2 {
                    let mi = m[i];
                    // mass row: d_i^T on momentum
                    a[0][1 + i][i] = 1.0;
                    // momentum rows
                    for r in 0..2 {
                        let di_r = if r == i { 1.0 } else { 0.0 };
                        a[1 + r][0][i] = -mi * m[r] / (rho * rho) + g1 * 0.5 * m2 / (rho * rho) * di_r;
                        for c in 0..2 {
                            let di_c = if c == i { 1.0 } else { 0.0 };
                            let delta_rc = if r == c { 1.0 } else { 0.0 };
                            a[1 + r][1 + c][i] =
                                (mi * delta_rc + m[r] * di_c) / rho - g1 * di_r * m[c] / rho;
                        }
                        a[1 + r][3][i] = g1 * di_r;
                    }
                    // energy row
                    a[3][0][i] = -mi * (e + p) / (rho * rho) + g1 * mi * m2 / (2.0 * rho * rho * rho);
                    for c in 0..2 {
                        let di_c = if c == i { 1.0 } else { 0.0 };
                        a[3][1 + c][i] = (e + p) / rho * di_c - g1 * mi * m[c] / (rho * rho);
                    }
                    a[3][3][i] = gamma * mi / rho;
                }
            }
        }
        Ok(FluxJacobian {
            components: self.components(),
            a,
        })
    }

    /// Largest characteristic speed magnitude at a state (`‖c‖` or `‖v‖ + a`).
    pub fn max_wavespeed(&self, u: &[f64]) -> Result<f64> {
        match *self {
            ConservationLaw::Advection { velocity } => Ok(velocity[0].hypot(velocity[1])),
            ConservationLaw::Euler { gamma } => {
                let prim = self.to_primitive(u)?;
                let a = sound_speed(gamma, &prim)?;
                Ok(prim.velocity[0].hypot(prim.velocity[1]) + a)
            }
        }
    }

    /// Interface wavespeed bound: `|c·n|` for advection, the Davis estimate
    /// `max(|v⁻·n| + a⁻, |v⁺·n| + a⁺)` for Euler.
    pub fn interface_wavespeed(&self, um: &[f64], up: &[f64], n: [f64; 2]) -> Result<f64> {
        match *self {
            ConservationLaw::Advection { velocity } => Ok((velocity[0] * n[0] + velocity[1] * n[1]).abs()),
            ConservationLaw::Euler { gamma } => {
                let side = |u: &[f64]| -> Result<f64> {
                    let prim = self.to_primitive(u)?;
                    let a = sound_speed(gamma, &prim)?;
                    Ok((prim.velocity[0] * n[0] + prim.velocity[1] * n[1]).abs() + a)
                };
                Ok(side(um)?.max(side(up)?))
            }
        }
    }
}

fn sound_speed(gamma: f64, prim: &Primitive) -> Result<f64> {
    if !(prim.pressure > 0.0) {
        return Err(Error::Inadmissible(format!("non-positive pressure {}", prim.pressure)));
    }
    Ok((gamma * prim.pressure / prim.density).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EULER: ConservationLaw = ConservationLaw::Euler { gamma: 1.4 };

    /// Central finite difference of the flux, independent of the closed form.
    fn fd_jacobian(law: &ConservationLaw, u: &[f64; 4], h: f64) -> [[[f64; 2]; 4]; 4] {
        let mut out = [[[0.0; 2]; 4]; 4];
        for l in 0..4 {
            let mut up = *u;
            let mut um = *u;
            up[l] += h;
            um[l] -= h;
            let fp = law.flux(&up).unwrap();
            let fm = law.flux(&um).unwrap();
            for k in 0..4 {
                for d in 0..2 {
                    out[k][l][d] = (fp[k][d] - fm[k][d]) / (2.0 * h);
                }
            }
        }
        out
    }

    #[test]
    fn advection_flux() {
        let law = ConservationLaw::Advection { velocity: [1.0, 2.0] };
        let f = law.flux(&[3.0]).unwrap();
        assert_eq!(f[0], [3.0, 6.0]);
        let j = law.flux_jacobian(&[7.0]).unwrap();
        assert_eq!(j.a[0][0], [1.0, 2.0]);
    }

    #[test]
    fn euler_flux_rest_and_moving() {
        let f = EULER.flux(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f[0], [0.0, 0.0]);
        assert!((f[1][0] - 0.4).abs() < 1e-15 && f[1][1] == 0.0);
        assert!(f[2][0] == 0.0 && (f[2][1] - 0.4).abs() < 1e-15);
        assert_eq!(f[3], [0.0, 0.0]);

        let u = [1.0, 1.0, 0.0, 1.0];
        assert!((EULER.pressure(&u) - 0.2).abs() < 1e-15);
        let f = EULER.flux(&u).unwrap();
        assert!((f[0][0] - 1.0).abs() < 1e-15);
        assert!((f[1][0] - 1.2).abs() < 1e-15);
        assert!((f[3][0] - 1.2).abs() < 1e-15);
        assert!(EULER.flux(&[0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn rest_state_energy_entries_vanish() {
        let j = EULER.flux_jacobian(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(j.a[3][3], [0.0, 0.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences_at_fixed_state() {
        let u = [1.3, 0.4, -0.2, 2.1];
        let a = EULER.flux_jacobian(&u).unwrap().a;
        let fd = fd_jacobian(&EULER, &u, 1e-6);
        for k in 0..4 {
            for l in 0..4 {
                for d in 0..2 {
                    let (x, y) = (a[k][l][d], fd[k][l][d]);
                    assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0), "{k}{l}{d}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn primitive_round_trip() {
        let p = EULER.to_primitive(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p.density, 1.0);
        assert_eq!(p.velocity, [0.0, 0.0]);
        assert!((p.pressure - 0.4).abs() < 1e-15);
        let sod = EULER.from_primitive(Primitive::new(1.0, 0.0, 0.0, 1.0));
        assert!((sod[3] - 2.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let prim = Primitive::new(
                rng.random_range(0.1..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.1..3.0),
            );
            let back = EULER.to_primitive(&EULER.from_primitive(prim)).unwrap();
            assert!((back.density - prim.density).abs() < 1e-13);
            assert!((back.pressure - prim.pressure).abs() < 1e-12);
            assert!((back.velocity[0] - prim.velocity[0]).abs() < 1e-13);
        }
        assert!(EULER.to_primitive(&[-1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(!EULER.to_primitive(&[1.0, 2.0, 0.0, 1.0]).unwrap().has_positive_pressure());
    }

    #[test]
    fn wavespeeds() {
        let adv = ConservationLaw::Advection {
            velocity: [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
        };
        assert!((adv.interface_wavespeed(&[0.0], &[1.0], [1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let rest = EULER.from_primitive(Primitive::new(1.0, 0.0, 0.0, 1.0));
        let s = EULER.interface_wavespeed(&rest, &rest, [1.0, 0.0]).unwrap();
        assert!((s - 1.4f64.sqrt()).abs() < 1e-14);
        // right state: v·n = 2, a = 1 -> rho = 1.4, P = 1
        let right = EULER.from_primitive(Primitive::new(1.4, 2.0, 0.0, 1.0));
        let s = EULER.interface_wavespeed(&rest, &right, [1.0, 0.0]).unwrap();
        assert!((s - 3.0).abs() < 1e-14);
        let s2 = EULER.interface_wavespeed(&right, &rest, [-1.0, 0.0]).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn advection_quasilinear_form_matches_divergence() {
        // for a linear flux A·∇u equals ∇·F(u) for any gradient
        let law = ConservationLaw::Advection { velocity: [0.3, -1.7] };
        let a = law.flux_jacobian(&[0.0]).unwrap().a[0][0];
        let grad = [2.5, -0.25];
        let div = law.flux(&[1.0]).unwrap()[0][0] * grad[0] + law.flux(&[1.0]).unwrap()[0][1] * grad[1];
        assert!((a[0] * grad[0] + a[1] * grad[1] - div).abs() < 1e-15);
    }
}
