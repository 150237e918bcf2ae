//! Legacy ASCII VTK output of element-averaged fields.

use std::fmt::Write as _;
use std::path::Path;

use crate::dg::SolutionState;
use crate::equations::ConservationLaw;
use crate::error::Result;

const COMPONENT_NAMES_EULER: [&str; 4] = ["density", "momentum_x", "momentum_y", "energy"];

/// Writes one quad cell per element with cell means of every component,
/// the polynomial order and the agent level (plus pressure for Euler).
pub fn write_vtk(path: &Path, state: &SolutionState) -> Result<()> {
    std::fs::write(path, render(state))?;
    Ok(())
}

pub fn render(state: &SolutionState) -> String {
    let mesh = state.mesh();
    let law = state.law();
    let els = mesh.elements();
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    let _ = writeln!(s, "solution t={}", state.time);
    s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", 4 * els.len());
    for el in els {
        let [x0, y0] = el.lower;
        let [hx, hy] = el.size;
        for (x, y) in [(x0, y0), (x0 + hx, y0), (x0 + hx, y0 + hy), (x0, y0 + hy)] {
            let _ = writeln!(s, "{x} {y} 0");
        }
    }
    let _ = writeln!(s, "CELLS {} {}", els.len(), 5 * els.len());
    for i in 0..els.len() {
        let b = 4 * i;
        let _ = writeln!(s, "4 {} {} {} {}", b, b + 1, b + 2, b + 3);
    }
    let _ = writeln!(s, "CELL_TYPES {}", els.len());
    for _ in els {
        s.push_str("9\n");
    }
    let _ = writeln!(s, "CELL_DATA {}", els.len());
    let means: Vec<_> = (0..els.len()).map(|e| state.element_mean(e)).collect();
    let mut scalar = |name: &str, vals: &mut dyn Iterator<Item = f64>| {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for v in vals {
            let _ = writeln!(s, "{v}");
        }
    };
    match law {
        ConservationLaw::Advection { .. } => scalar("u", &mut means.iter().map(|m| m[0])),
        ConservationLaw::Euler { .. } => {
            for (c, name) in COMPONENT_NAMES_EULER.iter().enumerate() {
                scalar(name, &mut means.iter().map(|m| m[c]));
            }
            scalar("pressure", &mut means.iter().map(|m| law.pressure(&m[..4])));
        }
    }
    scalar("order", &mut els.iter().map(|e| e.order as f64));
    scalar("level", &mut els.iter().map(|e| mesh.level(e.agent).index() as f64));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dg::Discretization;
    use crate::mesh::{Bounds, Mesh, RefinementMode};

    #[test]
    fn euler_file_layout() {
        let spec = crate::problems::sod_radial();
        let mesh = Mesh::cartesian(2, 2, spec.bounds, RefinementMode::H, 1).unwrap();
        let mesh = mesh
            .with_actions(&[crate::mesh::Level::Fine, crate::mesh::Level::Coarse, crate::mesh::Level::Coarse, crate::mesh::Level::Coarse])
            .unwrap();
        let s = spec.initial_state(Discretization::new(mesh, spec.law()));
        let text = render(&s);
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("POINTS 28 double"));
        assert!(text.contains("CELLS 7 35"));
        assert!(text.contains("SCALARS pressure double 1"));
        assert_eq!(text.matches("SCALARS").count(), 7);
    }

    #[test]
    fn advection_means() {
        let mesh = Mesh::cartesian(2, 1, Bounds::unit(), RefinementMode::P, 2).unwrap();
        let law = ConservationLaw::Advection { velocity: [1.0, 0.0] };
        let s = SolutionState::interpolate(Discretization::new(mesh, law), |_| [3.0, 0.0, 0.0, 0.0]);
        let text = render(&s);
        let after = text.split("SCALARS u double 1\nLOOKUP_TABLE default\n").nth(1).unwrap();
        let vals: Vec<f64> = after.lines().take(2).map(|l| l.parse().unwrap()).collect();
        for v in vals {
            assert!((v - 3.0).abs() < 1e-13);
        }
    }
}
