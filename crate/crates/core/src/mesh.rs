//! Periodic Cartesian agent mesh with one-level h/p refinement.
//!
//! Agents are the cells of the initial coarse grid, numbered row-major
//! (`x` fastest). Each agent carries a refinement [`Level`]. In h mode a fine
//! agent owns four congruent children in z-order (SW, SE, NW, NE); in p mode
//! every agent owns a single element whose polynomial order is raised by one
//! when fine. Elements are numbered agent by agent, children consecutively.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    H,
    P,
}

/// Refinement state of an agent. Doubles as the action space: the action
/// is the absolute target level, independent of the current one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    Coarse,
    Fine,
}

pub type Action = Level;

impl Level {
    pub fn from_index(a: usize) -> Level {
        if a == 0 {
            Level::Coarse
        } else {
            Level::Fine
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::Coarse => 0,
            Level::Fine => 1,
        }
    }
}

/// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0])
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0..2).all(|d| x[d] >= self.min[d] && x[d] <= self.max[d])
    }

    /// Wraps a point into the periodic box.
    pub fn wrap(&self, x: [f64; 2]) -> [f64; 2] {
        let ext = self.extent();
        let mut out = x;
        for d in 0..2 {
            let mut v = (x[d] - self.min[d]).rem_euclid(ext[d]);
            if v >= ext[d] {
                v = 0.0;
            }
            out[d] = self.min[d] + v;
        }
        out
    }

    /// Minimal-image difference `a - b` under periodic wrap.
    pub fn periodic_delta(&self, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let ext = self.extent();
        let mut d = [a[0] - b[0], a[1] - b[1]];
        for k in 0..2 {
            d[k] -= ext[k] * (d[k] / ext[k]).round();
        }
        d
    }
}

/// A displacement `r_ij = x_i - x_j` between agent centroids (minimal image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Displacement(pub [f64; 2]);

impl Displacement {
    pub fn norm_sq(&self) -> f64 {
        self.0[0] * self.0[0] + self.0[1] * self.0[1]
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// One quadrilateral element of the current mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Element {
    pub agent: usize,
    /// z-order child index (0 = SW, 1 = SE, 2 = NW, 3 = NE) for h-refined agents.
    pub child: Option<usize>,
    pub order: usize,
    pub lower: [f64; 2],
    pub size: [f64; 2],
}

impl Element {
    pub fn centroid(&self) -> [f64; 2] {
        [
            self.lower[0] + 0.5 * self.size[0],
            self.lower[1] + 0.5 * self.size[1],
        ]
    }

    pub fn area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn min_edge(&self) -> f64 {
        self.size[0].min(self.size[1])
    }

    pub fn node_count(&self) -> usize {
        (self.order + 1) * (self.order + 1)
    }

    /// Physical point of reference coordinates `xi ∈ [-1, 1]²`.
    pub fn map(&self, xi: [f64; 2]) -> [f64; 2] {
        [
            self.lower[0] + 0.5 * (xi[0] + 1.0) * self.size[0],
            self.lower[1] + 0.5 * (xi[1] + 1.0) * self.size[1],
        ]
    }

    pub fn jacobian(&self) -> f64 {
        0.25 * self.area()
    }
}

/// Normal direction of an interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }

    pub fn normal(self) -> [f64; 2] {
        match self {
            Axis::X => [1.0, 0.0],
            Axis::Y => [0.0, 1.0],
        }
    }
}

/// An interior interface (periodic faces included) between two elements.
///
/// The unit normal is `+axis` and points from `minus` to `plus`. The face
/// lies on the `+1` side of `minus` and the `-1` side of `plus`; the spans
/// give the covered interval of each element's tangential reference
/// coordinate. Hanging-node interfaces appear as sub-faces with a half span
/// on the coarse side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    pub axis: Axis,
    pub minus: usize,
    pub plus: usize,
    pub minus_span: [f64; 2],
    pub plus_span: [f64; 2],
    pub length: f64,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    nx: usize,
    ny: usize,
    bounds: Bounds,
    mode: RefinementMode,
    base_order: usize,
    levels: Vec<Level>,
    elements: Vec<Element>,
    agent_offsets: Vec<usize>,
    faces: Vec<Face>,
}

#[derive(Clone, Copy)]
enum Side {
    East,
    West,
    North,
    South,
}

impl Mesh {
    /// Builds an all-coarse periodic `nx × ny` agent grid.
    pub fn cartesian(
        nx: usize,
        ny: usize,
        bounds: Bounds,
        mode: RefinementMode,
        base_order: usize,
    ) -> Result<Mesh> {
        if nx == 0 || ny == 0 {
            return Err(Error::Mesh(format!("agent counts must be positive, got {nx}×{ny}")));
        }
        let ext = bounds.extent();
        if !(ext[0] > 0.0 && ext[1] > 0.0) || !ext[0].is_finite() || !ext[1].is_finite() {
            return Err(Error::Mesh(format!("degenerate bounds {:?}", bounds)));
        }
        if base_order == 0 {
            return Err(Error::Mesh("base polynomial order must be at least 1".into()));
        }
        Ok(Self::assemble(nx, ny, bounds, mode, base_order, vec![Level::Coarse; nx * ny]))
    }

    fn assemble(
        nx: usize,
        ny: usize,
        bounds: Bounds,
        mode: RefinementMode,
        base_order: usize,
        levels: Vec<Level>,
    ) -> Mesh {
        let mut mesh = Mesh {
            nx,
            ny,
            bounds,
            mode,
            base_order,
            levels,
            elements: Vec::new(),
            agent_offsets: Vec::new(),
            faces: Vec::new(),
        };
        mesh.build_elements();
        mesh.build_faces();
        mesh
    }

    /// Returns the mesh whose agent levels equal `actions` exactly.
    pub fn with_actions(&self, actions: &[Action]) -> Result<Mesh> {
        if actions.len() != self.agent_count() {
            return Err(Error::LengthMismatch {
                expected: self.agent_count(),
                actual: actions.len(),
            });
        }
        Ok(Self::assemble(
            self.nx,
            self.ny,
            self.bounds,
            self.mode,
            self.base_order,
            actions.to_vec(),
        ))
    }

    /// Same geometry with every agent at `level`.
    pub fn uniform(&self, level: Level) -> Mesh {
        Self::assemble(
            self.nx,
            self.ny,
            self.bounds,
            self.mode,
            self.base_order,
            vec![level; self.agent_count()],
        )
    }

    pub fn agents_x(&self) -> usize {
        self.nx
    }

    pub fn agents_y(&self) -> usize {
        self.ny
    }

    pub fn agent_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn mode(&self) -> RefinementMode {
        self.mode
    }

    pub fn base_order(&self) -> usize {
        self.base_order
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn level(&self, agent: usize) -> Level {
        self.levels[agent]
    }

    pub fn fine_count(&self) -> usize {
        self.levels.iter().filter(|&&l| l == Level::Fine).count()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    /// Element indices owned by `agent`.
    pub fn agent_elements(&self, agent: usize) -> std::ops::Range<usize> {
        self.agent_offsets[agent]..self.agent_offsets[agent + 1]
    }

    pub fn agent_index(&self, ix: usize, iy: usize) -> usize {
        ix + self.nx * iy
    }

    pub fn agent_coords(&self, agent: usize) -> (usize, usize) {
        (agent % self.nx, agent / self.nx)
    }

    /// Agent cell size `(Δx, Δy)`.
    pub fn agent_size(&self) -> [f64; 2] {
        let ext = self.bounds.extent();
        [ext[0] / self.nx as f64, ext[1] / self.ny as f64]
    }

    pub fn agent_lower(&self, agent: usize) -> [f64; 2] {
        let (ix, iy) = self.agent_coords(agent);
        let h = self.agent_size();
        [
            self.bounds.min[0] + ix as f64 * h[0],
            self.bounds.min[1] + iy as f64 * h[1],
        ]
    }

    pub fn agent_centroid(&self, agent: usize) -> [f64; 2] {
        let lo = self.agent_lower(agent);
        let h = self.agent_size();
        [lo[0] + 0.5 * h[0], lo[1] + 0.5 * h[1]]
    }

    /// Polynomial order of the elements of an agent at `level`.
    pub fn order_for(&self, level: Level) -> usize {
        match (self.mode, level) {
            (RefinementMode::P, Level::Fine) => self.base_order + 1,
            _ => self.base_order,
        }
    }

    /// Minimal-image displacement between agent centroids, `x_i - x_j`.
    pub fn displacement(&self, i: usize, j: usize) -> Displacement {
        Displacement(
            self.bounds
                .periodic_delta(self.agent_centroid(i), self.agent_centroid(j)),
        )
    }

    /// Agents in the `(2 n_x + 1) × (2 n_y + 1)` window centred on `agent`,
    /// row-major (rows of increasing `y`, `x` fastest), wrapped periodically.
    pub fn observation_window(&self, agent: usize, n_x: usize, n_y: usize) -> Vec<usize> {
        let (ix, iy) = self.agent_coords(agent);
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut out = Vec::with_capacity((2 * n_x + 1) * (2 * n_y + 1));
        for dy in -(n_y as isize)..=(n_y as isize) {
            let y = (iy as isize + dy).rem_euclid(ny) as usize;
            for dx in -(n_x as isize)..=(n_x as isize) {
                let x = (ix as isize + dx).rem_euclid(nx) as usize;
                out.push(self.agent_index(x, y));
            }
        }
        out
    }

    /// Total nodal degrees of freedom for `components` solution variables.
    pub fn dof_count(&self, components: usize) -> usize {
        self.elements.iter().map(|e| e.node_count()).sum::<usize>() * components
    }

    /// Element containing a (periodically wrapped) point and the point's
    /// reference coordinates in it.
    pub fn locate(&self, x: [f64; 2]) -> (usize, [f64; 2]) {
        let x = self.bounds.wrap(x);
        let h = self.agent_size();
        let fx = (x[0] - self.bounds.min[0]) / h[0];
        let fy = (x[1] - self.bounds.min[1]) / h[1];
        let ix = (fx.floor() as isize).clamp(0, self.nx as isize - 1) as usize;
        let iy = (fy.floor() as isize).clamp(0, self.ny as isize - 1) as usize;
        let agent = self.agent_index(ix, iy);
        let range = self.agent_elements(agent);
        let elem = if range.len() == 1 {
            range.start
        } else {
            let cx = usize::from(fx - ix as f64 >= 0.5);
            let cy = usize::from(fy - iy as f64 >= 0.5);
            range.start + cx + 2 * cy
        };
        let e = &self.elements[elem];
        let xi = [
            (2.0 * (x[0] - e.lower[0]) / e.size[0] - 1.0).clamp(-1.0, 1.0),
            (2.0 * (x[1] - e.lower[1]) / e.size[1] - 1.0).clamp(-1.0, 1.0),
        ];
        (elem, xi)
    }

    fn build_elements(&mut self) {
        let h = self.agent_size();
        let mut elements = Vec::with_capacity(self.agent_count() * 4);
        let mut offsets = Vec::with_capacity(self.agent_count() + 1);
        for agent in 0..self.agent_count() {
            offsets.push(elements.len());
            let lo = self.agent_lower(agent);
            let level = self.levels[agent];
            let order = self.order_for(level);
            if self.mode == RefinementMode::H && level == Level::Fine {
                let half = [0.5 * h[0], 0.5 * h[1]];
                for child in 0..4 {
                    let (cx, cy) = (child % 2, child / 2);
                    elements.push(Element {
                        agent,
                        child: Some(child),
                        order,
                        lower: [lo[0] + cx as f64 * half[0], lo[1] + cy as f64 * half[1]],
                        size: half,
                    });
                }
            } else {
                elements.push(Element {
                    agent,
                    child: None,
                    order,
                    lower: lo,
                    size: h,
                });
            }
        }
        offsets.push(elements.len());
        self.elements = elements;
        self.agent_offsets = offsets;
    }

    /// Elements touching one side of an agent, with the interval of the
    /// agent face (parameter in `[-1, 1]`) each one covers.
    fn side_pieces(&self, agent: usize, side: Side) -> Vec<(usize, [f64; 2])> {
        let range = self.agent_elements(agent);
        if range.len() == 1 {
            return vec![(range.start, [-1.0, 1.0])];
        }
        let (lo, hi) = match side {
            Side::East => (1, 3),
            Side::West => (0, 2),
            Side::North => (2, 3),
            Side::South => (0, 1),
        };
        vec![
            (range.start + lo, [-1.0, 0.0]),
            (range.start + hi, [0.0, 1.0]),
        ]
    }

    fn build_faces(&mut self) {
        let h = self.agent_size();
        let mut faces = Vec::new();
        for agent in 0..self.agent_count() {
            let range = self.agent_elements(agent);
            if range.len() == 4 {
                // interior faces between siblings
                let s = range.start;
                let half = [0.5 * h[0], 0.5 * h[1]];
                for (axis, minus, plus, length) in [
                    (Axis::X, s, s + 1, half[1]),
                    (Axis::X, s + 2, s + 3, half[1]),
                    (Axis::Y, s, s + 2, half[0]),
                    (Axis::Y, s + 1, s + 3, half[0]),
                ] {
                    faces.push(Face {
                        axis,
                        minus,
                        plus,
                        minus_span: [-1.0, 1.0],
                        plus_span: [-1.0, 1.0],
                        length,
                    });
                }
            }
            let (ix, iy) = self.agent_coords(agent);
            let east = self.agent_index((ix + 1) % self.nx, iy);
            let north = self.agent_index(ix, (iy + 1) % self.ny);
            for (axis, neighbor, minus_side, plus_side, tangent) in [
                (Axis::X, east, Side::East, Side::West, h[1]),
                (Axis::Y, north, Side::North, Side::South, h[0]),
            ] {
                let minus = self.side_pieces(agent, minus_side);
                let plus = self.side_pieces(neighbor, plus_side);
                for &(em, sm) in &minus {
                    for &(ep, sp) in &plus {
                        let a = sm[0].max(sp[0]);
                        let b = sm[1].min(sp[1]);
                        if b - a <= 1e-12 {
                            continue;
                        }
                        let to_local = |s: f64, span: [f64; 2]| {
                            2.0 * (s - span[0]) / (span[1] - span[0]) - 1.0
                        };
                        faces.push(Face {
                            axis,
                            minus: em,
                            plus: ep,
                            minus_span: [to_local(a, sm), to_local(b, sm)],
                            plus_span: [to_local(a, sp), to_local(b, sp)],
                            length: 0.5 * (b - a) * tangent,
                        });
                    }
                }
            }
        }
        self.faces = faces;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize, mode: RefinementMode, p: usize) -> Mesh {
        Mesh::cartesian(n, n, Bounds::unit(), mode, p).unwrap()
    }

    #[test]
    fn single_cell_centroid() {
        let m = unit(1, RefinementMode::P, 2);
        assert_eq!(m.agent_count(), 1);
        assert_eq!(m.agent_centroid(0), [0.5, 0.5]);
    }

    #[test]
    fn reference_resolution_spacing() {
        let m = unit(24, RefinementMode::P, 2);
        assert_eq!(m.agent_count(), 576);
        let h = m.agent_size();
        assert!((h[0] - 1.0 / 24.0).abs() < 1e-15 && (h[1] - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn rectangular_element_sizes() {
        let m = Mesh::cartesian(
            2,
            4,
            Bounds::new([0.0, 0.0], [2.0, 1.0]),
            RefinementMode::H,
            1,
        )
        .unwrap();
        assert_eq!(m.agent_size(), [1.0, 0.25]);
        assert!(m.elements().iter().all(|e| e.size == [1.0, 0.25]));
    }

    #[test]
    fn construction_errors() {
        assert!(Mesh::cartesian(0, 3, Bounds::unit(), RefinementMode::P, 2).is_err());
        assert!(Mesh::cartesian(3, 3, Bounds::new([0.0, 0.0], [0.0, 1.0]), RefinementMode::P, 2).is_err());
        assert!(Mesh::cartesian(3, 3, Bounds::new([1.0, 0.0], [0.0, 1.0]), RefinementMode::P, 2).is_err());
    }

    #[test]
    fn absolute_actions_and_idempotence() {
        let m = unit(3, RefinementMode::H, 2).uniform(Level::Fine);
        let coarse = m.with_actions(&vec![Level::Coarse; 9]).unwrap();
        assert_eq!(coarse.fine_count(), 0);
        assert_eq!(coarse.elements().len(), 9);
        let same = m.with_actions(m.levels()).unwrap();
        assert_eq!(same.levels(), m.levels());
        assert_eq!(same.elements(), m.elements());
        assert!(m.with_actions(&[Level::Fine]).is_err());
    }

    #[test]
    fn h_refinement_dof_growth() {
        let p = 2;
        let mcomp = 4;
        let m = unit(3, RefinementMode::H, p);
        let mut a = vec![Level::Coarse; 9];
        a[4] = Level::Fine;
        let r = m.with_actions(&a).unwrap();
        assert_eq!(r.agent_elements(4).len(), 4);
        assert_eq!(r.dof_count(mcomp) - m.dof_count(mcomp), 3 * (p + 1) * (p + 1) * mcomp);
        let kids: Vec<_> = r.agent_elements(4).map(|e| r.elements()[e].child).collect();
        assert_eq!(kids, vec![Some(0), Some(1), Some(2), Some(3)]);
        let c = r.agent_elements(4).map(|e| r.elements()[e].centroid()).collect::<Vec<_>>();
        assert!(c[0][0] < c[1][0] && c[0][1] < c[2][1] && c[3][0] > c[2][0]);
    }

    #[test]
    fn dof_examples() {
        assert_eq!(unit(2, RefinementMode::P, 2).dof_count(1), 36);
        let h = Mesh::cartesian(1, 1, Bounds::unit(), RefinementMode::H, 1)
            .unwrap()
            .uniform(Level::Fine);
        assert_eq!(h.dof_count(4), 64);
        let p = Mesh::cartesian(1, 1, Bounds::unit(), RefinementMode::P, 2)
            .unwrap()
            .uniform(Level::Fine);
        assert_eq!(p.dof_count(1), 16);
    }

    #[test]
    fn displacement_examples() {
        let m = Mesh::cartesian(10, 10, Bounds::unit(), RefinementMode::P, 1).unwrap();
        assert_eq!(m.displacement(7, 7).0, [0.0, 0.0]);
        // centroids at x = 0.05 (agent 0) and x = 0.95 (agent 9): wrapped distance 0.1
        let r = m.displacement(0, 9).0;
        assert!((r[0] - 0.1).abs() < 1e-12 && r[1].abs() < 1e-15);
        let m24 = unit(24, RefinementMode::P, 2);
        let r = m24.displacement(m24.agent_index(3, 5), m24.agent_index(4, 5));
        assert!((r.norm() - 1.0 / 24.0).abs() < 1e-14);
    }

    #[test]
    fn window_examples() {
        let m = unit(4, RefinementMode::P, 1);
        assert_eq!(m.observation_window(5, 0, 0), vec![5]);
        let w = m.observation_window(0, 1, 1);
        assert_eq!(w.len(), 9);
        assert_eq!(w[4], 0);
        for (x, y) in [(3, 3), (3, 0), (0, 3)] {
            assert!(w.contains(&m.agent_index(x, y)));
        }
        assert_eq!(w[0], m.agent_index(3, 3));
        assert_eq!(unit(24, RefinementMode::P, 2).observation_window(0, 8, 8).len(), 289);
        // window larger than the mesh wraps and repeats
        assert_eq!(unit(8, RefinementMode::P, 2).observation_window(3, 8, 8).len(), 289);
    }

    #[test]
    fn face_topology_conforming() {
        let m = unit(3, RefinementMode::P, 2);
        assert_eq!(m.faces().len(), 18);
        let total: f64 = m.faces().iter().map(|f| f.length).sum();
        assert!((total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn face_topology_hanging_nodes() {
        let m = unit(3, RefinementMode::H, 1);
        let mut a = vec![Level::Coarse; 9];
        a[4] = Level::Fine;
        a[0] = Level::Fine;
        let r = m.with_actions(&a).unwrap();
        // every element's boundary is fully covered by faces
        let mut cover = vec![0.0; r.elements().len()];
        for f in r.faces() {
            cover[f.minus] += f.length;
            cover[f.plus] += f.length;
        }
        for (e, c) in r.elements().iter().zip(&cover) {
            assert!((c - 2.0 * (e.size[0] + e.size[1])).abs() < 1e-12);
        }
        // coarse side spans are halves
        let hanging: Vec<_> = r
            .faces()
            .iter()
            .filter(|f| r.elements()[f.minus].child.is_none() != r.elements()[f.plus].child.is_none())
            .collect();
        assert_eq!(hanging.len(), 16);
        for f in hanging {
            let coarse_span = if r.elements()[f.minus].child.is_none() { f.minus_span } else { f.plus_span };
            assert!((coarse_span[1] - coarse_span[0] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn locate_points() {
        let m = unit(2, RefinementMode::H, 1);
        let r = m.with_actions(&[Level::Fine, Level::Coarse, Level::Coarse, Level::Coarse]).unwrap();
        let (e, xi) = r.locate([0.3, 0.1]);
        assert_eq!(r.elements()[e].child, Some(1));
        assert!((xi[0] - (-0.6)).abs() < 1e-12 && (xi[1] - (-0.2)).abs() < 1e-12);
        let (e2, _) = r.locate([1.3, 1.1]);
        assert_eq!(e2, e);
    }
}
