//! Adaptive nonconforming quadrilateral mesh: a quadtree forest over a
//! structured macro grid.
//!
//! Leaves are addressed by `(level, i, j)` where `i < macro_nx * 2^level` and
//! `j < macro_ny * 2^level`. Hanging nodes obey the one-level rule: adjacent
//! leaves differ by at most one refinement level, enforced by refinement
//! closure. Hanging faces are stored from the fine side with the coarse
//! neighbor as `E+`.

use std::collections::{BTreeSet, HashMap};

use crate::error::CoreError;
use crate::Point;

pub type ElementId = usize;
pub type FaceId = usize;

/// Stable address of a cell in the quadtree forest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub level: u8,
    pub i: u32,
    pub j: u32,
}

impl CellKey {
    pub fn parent(self) -> Option<CellKey> {
        if self.level == 0 {
            None
        } else {
            Some(CellKey {
                level: self.level - 1,
                i: self.i / 2,
                j: self.j / 2,
            })
        }
    }

    pub fn children(self) -> [CellKey; 4] {
        let l = self.level + 1;
        let (i, j) = (2 * self.i, 2 * self.j);
        [
            CellKey { level: l, i, j },
            CellKey { level: l, i: i + 1, j },
            CellKey { level: l, i, j: j + 1 },
            CellKey { level: l, i: i + 1, j: j + 1 },
        ]
    }
}

/// Leaf element of the mesh.
#[derive(Clone, Debug)]
pub struct Element {
    pub key: CellKey,
    pub center: Point,
    /// Physical edge lengths (dx, dy).
    pub extent: [f64; 2],
    pub area: f64,
}

impl Element {
    pub fn level(&self) -> u8 {
        self.key.level
    }

    /// Map reference coordinates in [-1,1]^2 to physical coordinates.
    pub fn to_physical(&self, xi: [f64; 2]) -> Point {
        [
            self.center[0] + 0.5 * self.extent[0] * xi[0],
            self.center[1] + 0.5 * self.extent[1] * xi[1],
        ]
    }

    /// Map physical coordinates into reference coordinates.
    pub fn to_reference(&self, x: Point) -> [f64; 2] {
        [
            (x[0] - self.center[0]) * 2.0 / self.extent[0],
            (x[1] - self.center[1]) * 2.0 / self.extent[1],
        ]
    }

    /// Corners in VTK order: SW, SE, NE, NW.
    pub fn corners(&self) -> [Point; 4] {
        let hx = 0.5 * self.extent[0];
        let hy = 0.5 * self.extent[1];
        let [cx, cy] = self.center;
        [
            [cx - hx, cy - hy],
            [cx + hx, cy - hy],
            [cx + hx, cy + hy],
            [cx - hx, cy + hy],
        ]
    }

    /// Longest edge, used as h_E in the volume residual weight.
    pub fn h_max(&self) -> f64 {
        self.extent[0].max(self.extent[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundarySide {
    West,
    East,
    South,
    North,
}

impl BoundarySide {
    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            BoundarySide::West => [-1.0, 0.0],
            BoundarySide::East => [1.0, 0.0],
            BoundarySide::South => [0.0, -1.0],
            BoundarySide::North => [0.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceNeighbor {
    Interior(ElementId),
    Boundary(BoundarySide),
}

/// Mesh face with unit normal directed from `inside` (E-) to the neighbor (E+).
///
/// On hanging-node faces `inside` is the finer element and the face measure is
/// the fine edge length.
#[derive(Clone, Debug)]
pub struct Face {
    pub inside: ElementId,
    pub neighbor: FaceNeighbor,
    pub normal: [f64; 2],
    pub measure: f64,
    pub midpoint: Point,
    /// h_e = avg(|E-|,|E+|)/|e| on interior faces, |E-|/|e| on the boundary.
    pub h_e: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        matches!(self.neighbor, FaceNeighbor::Boundary(_))
    }

    /// Cached geometric quantities (normal, measure, h_e).
    pub fn geometry(&self) -> ([f64; 2], f64, f64) {
        (self.normal, self.measure, self.h_e)
    }
}

/// Per-element adaptation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Refine,
    Coarsen,
    Keep,
}

/// Outcome of `execute_marks`: which old leaves were split, which parent cells
/// were restored, and which marks could not be honored.
#[derive(Clone, Debug, Default)]
pub struct AdaptReport {
    /// Old leaf keys replaced by their four children.
    pub refined: Vec<CellKey>,
    /// Parent keys restored from a complete sibling quartet.
    pub coarsened: Vec<CellKey>,
    /// Leaves whose mark was clamped (level caps, partial quartets, closure).
    pub clamped: Vec<CellKey>,
}

impl AdaptReport {
    pub fn changed(&self) -> bool {
        !self.refined.is_empty() || !self.coarsened.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub macro_nx: usize,
    pub macro_ny: usize,
    pub domain_extent: [f64; 2],
    pub max_level: u8,
    pub elements: Vec<Element>,
    pub faces: Vec<Face>,
    /// Face ids incident to each element, in face-array order.
    pub element_faces: Vec<Vec<FaceId>>,
    index: HashMap<CellKey, ElementId>,
}

impl Mesh {
    /// Build the level-0 macro mesh: `nx * ny` congruent cells on the domain.
    pub fn build_macro(
        nx: usize,
        ny: usize,
        extent: (f64, f64),
        max_level: u8,
    ) -> Result<Mesh, CoreError> {
        if nx == 0 || ny == 0 {
            return Err(CoreError::Config(
                "macro grid needs nx > 0 and ny > 0".into(),
            ));
        }
        if !(extent.0 > 0.0) || !(extent.1 > 0.0) {
            return Err(CoreError::Config(
                "domain extent components must be positive".into(),
            ));
        }
        let mut leaves = BTreeSet::new();
        for j in 0..ny as u32 {
            for i in 0..nx as u32 {
                leaves.insert(CellKey { level: 0, i, j });
            }
        }
        Ok(Mesh::from_leaves(
            nx,
            ny,
            [extent.0, extent.1],
            max_level,
            leaves,
        ))
    }

    fn from_leaves(
        nx: usize,
        ny: usize,
        extent: [f64; 2],
        max_level: u8,
        leaves: BTreeSet<CellKey>,
    ) -> Mesh {
        let mut mesh = Mesh {
            macro_nx: nx,
            macro_ny: ny,
            domain_extent: extent,
            max_level,
            elements: Vec::with_capacity(leaves.len()),
            faces: Vec::new(),
            element_faces: Vec::new(),
            index: HashMap::with_capacity(leaves.len()),
        };
        for key in leaves {
            let id = mesh.elements.len();
            mesh.index.insert(key, id);
            mesh.elements.push(mesh.make_element(key));
        }
        mesh.build_faces();
        mesh
    }

    fn make_element(&self, key: CellKey) -> Element {
        let cells_x = (self.macro_nx as u64) << key.level;
        let cells_y = (self.macro_ny as u64) << key.level;
        let dx = self.domain_extent[0] / cells_x as f64;
        let dy = self.domain_extent[1] / cells_y as f64;
        Element {
            key,
            center: [(key.i as f64 + 0.5) * dx, (key.j as f64 + 0.5) * dy],
            extent: [dx, dy],
            area: dx * dy,
        }
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element(&self, id: ElementId) -> &Element {
        &self.elements[id]
    }

    pub fn element_id(&self, key: CellKey) -> Option<ElementId> {
        self.index.get(&key).copied()
    }

    pub fn domain_area(&self) -> f64 {
        self.domain_extent[0] * self.domain_extent[1]
    }

    pub fn total_leaf_area(&self) -> f64 {
        self.elements.iter().map(|e| e.area).sum()
    }

    /// Locate the leaf containing a physical point. Points on internal edges
    /// resolve to the east/north cell; the domain edge clamps inward.
    pub fn locate(&self, x: Point) -> Option<ElementId> {
        let [w, h] = self.domain_extent;
        if x[0] < 0.0 || x[0] > w || x[1] < 0.0 || x[1] > h {
            return None;
        }
        let mut key = CellKey {
            level: 0,
            i: ((x[0] / w * self.macro_nx as f64) as u32).min(self.macro_nx as u32 - 1),
            j: ((x[1] / h * self.macro_ny as f64) as u32).min(self.macro_ny as u32 - 1),
        };
        loop {
            if let Some(&id) = self.index.get(&key) {
                return Some(id);
            }
            if key.level > self.max_level {
                return None;
            }
            let elem = self.make_element(key);
            let i2 = 2 * key.i + u32::from(x[0] >= elem.center[0]);
            let j2 = 2 * key.j + u32::from(x[1] >= elem.center[1]);
            key = CellKey {
                level: key.level + 1,
                i: i2,
                j: j2,
            };
        }
    }

    fn side_neighbor_key(&self, key: CellKey, side: BoundarySide) -> Option<CellKey> {
        let cells_x = ((self.macro_nx as u64) << key.level) as u32;
        let cells_y = ((self.macro_ny as u64) << key.level) as u32;
        let (i, j) = (key.i, key.j);
        let (ni, nj) = match side {
            BoundarySide::West => {
                if i == 0 {
                    return None;
                }
                (i - 1, j)
            }
            BoundarySide::East => {
                if i + 1 == cells_x {
                    return None;
                }
                (i + 1, j)
            }
            BoundarySide::South => {
                if j == 0 {
                    return None;
                }
                (i, j - 1)
            }
            BoundarySide::North => {
                if j + 1 == cells_y {
                    return None;
                }
                (i, j + 1)
            }
        };
        Some(CellKey {
            level: key.level,
            i: ni,
            j: nj,
        })
    }

    fn build_faces(&mut self) {
        self.faces.clear();
        self.element_faces = vec![Vec::new(); self.elements.len()];
        let sides = [
            BoundarySide::West,
            BoundarySide::East,
            BoundarySide::South,
            BoundarySide::North,
        ];
        for id in 0..self.elements.len() {
            let elem = self.elements[id].clone();
            for side in sides {
                let edge_len = match side {
                    BoundarySide::West | BoundarySide::East => elem.extent[1],
                    BoundarySide::South | BoundarySide::North => elem.extent[0],
                };
                let midpoint = {
                    let n = side.outward_normal();
                    [
                        elem.center[0] + 0.5 * elem.extent[0] * n[0],
                        elem.center[1] + 0.5 * elem.extent[1] * n[1],
                    ]
                };
                match self.side_neighbor_key(elem.key, side) {
                    None => {
                        self.push_face(Face {
                            inside: id,
                            neighbor: FaceNeighbor::Boundary(side),
                            normal: side.outward_normal(),
                            measure: edge_len,
                            midpoint,
                            h_e: elem.area / edge_len,
                        });
                    }
                    Some(nk) => {
                        if let Some(&nid) = self.index.get(&nk) {
                            // Same-level neighbor: owner is the west/south cell.
                            if matches!(side, BoundarySide::East | BoundarySide::North) {
                                let h_e =
                                    0.5 * (elem.area + self.elements[nid].area) / edge_len;
                                self.push_face(Face {
                                    inside: id,
                                    neighbor: FaceNeighbor::Interior(nid),
                                    normal: side.outward_normal(),
                                    measure: edge_len,
                                    midpoint,
                                    h_e,
                                });
                            }
                        } else if let Some(parent) = nk.parent() {
                            if let Some(&nid) = self.index.get(&parent) {
                                // Coarse neighbor: emit from the fine side.
                                let h_e =
                                    0.5 * (elem.area + self.elements[nid].area) / edge_len;
                                self.push_face(Face {
                                    inside: id,
                                    neighbor: FaceNeighbor::Interior(nid),
                                    normal: side.outward_normal(),
                                    measure: edge_len,
                                    midpoint,
                                    h_e,
                                });
                            }
                            // Otherwise the neighbor is finer; its children emit.
                        }
                    }
                }
            }
        }
    }

    fn push_face(&mut self, face: Face) {
        let fid = self.faces.len();
        self.element_faces[face.inside].push(fid);
        if let FaceNeighbor::Interior(nid) = face.neighbor {
            self.element_faces[nid].push(fid);
        }
        self.faces.push(face);
    }

    /// Apply per-leaf marks, restoring the one-level rule by refinement
    /// closure. Marks that cannot be honored (level caps, partial sibling
    /// quartets, closure conflicts) are clamped and recorded.
    pub fn execute_marks(&self, marks: &[Mark]) -> (Mesh, AdaptReport) {
        assert_eq!(marks.len(), self.elements.len(), "one mark per leaf");
        let n = self.elements.len();
        let mut report = AdaptReport::default();
        let old_level: Vec<i32> = self.elements.iter().map(|e| e.level() as i32).collect();
        let mut new_level = old_level.clone();
        // Quartet id for coarsening bookkeeping: parent key -> members.
        let mut quartets: HashMap<CellKey, Vec<ElementId>> = HashMap::new();

        for (id, &mark) in marks.iter().enumerate() {
            match mark {
                Mark::Refine => {
                    if self.elements[id].level() < self.max_level {
                        new_level[id] += 1;
                    } else {
                        report.clamped.push(self.elements[id].key);
                    }
                }
                Mark::Coarsen => {
                    if let Some(parent) = self.elements[id].key.parent() {
                        quartets.entry(parent).or_default().push(id);
                    } else {
                        report.clamped.push(self.elements[id].key);
                    }
                }
                Mark::Keep => {}
            }
        }

        let mut member_of: HashMap<ElementId, CellKey> = HashMap::new();
        quartets.retain(|parent, members| {
            if members.len() == 4 {
                for &m in members.iter() {
                    member_of.insert(m, *parent);
                }
                true
            } else {
                for &m in members.iter() {
                    report.clamped.push(self.elements[m].key);
                }
                false
            }
        });
        for members in quartets.values() {
            for &m in members {
                new_level[m] -= 1;
            }
        }

        // One-level closure over current adjacency. Raising a cell means
        // cancelling its coarsening first, then promoting keep to refine.
        let mut cancelled: BTreeSet<CellKey> = BTreeSet::new();
        loop {
            let mut changed = false;
            for face in &self.faces {
                let FaceNeighbor::Interior(outside) = face.neighbor else {
                    continue;
                };
                let (a, b) = (face.inside, outside);
                if (new_level[a] - new_level[b]).abs() <= 1 {
                    continue;
                }
                let lo = if new_level[a] < new_level[b] { a } else { b };
                if let Some(parent) = member_of.get(&lo).copied() {
                    // Cancel the whole quartet.
                    if let Some(members) = quartets.remove(&parent) {
                        for m in members {
                            new_level[m] = old_level[m];
                            member_of.remove(&m);
                            report.clamped.push(self.elements[m].key);
                        }
                        cancelled.insert(parent);
                    }
                } else {
                    debug_assert!(old_level[lo] < self.max_level as i32);
                    new_level[lo] = old_level[lo] + 1;
                }
                changed = true;
            }
            if !changed {
                break;
            }
        }

        let mut leaves = BTreeSet::new();
        let mut coarsened = BTreeSet::new();
        for id in 0..n {
            let key = self.elements[id].key;
            match new_level[id] - old_level[id] {
                1 => {
                    report.refined.push(key);
                    for c in key.children() {
                        leaves.insert(c);
                    }
                }
                -1 => {
                    let parent = key.parent().expect("coarsened leaf has a parent");
                    coarsened.insert(parent);
                    leaves.insert(parent);
                }
                _ => {
                    leaves.insert(key);
                }
            }
        }
        report.coarsened = coarsened.into_iter().collect();

        let mesh = Mesh::from_leaves(
            self.macro_nx,
            self.macro_ny,
            self.domain_extent,
            self.max_level,
            leaves,
        );
        (mesh, report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_mesh(nx: usize, ny: usize) -> Mesh {
        Mesh::build_macro(nx, ny, (nx as f64, ny as f64), 3).unwrap()
    }

    #[test]
    fn macro_60_elements() {
        let mesh = Mesh::build_macro(10, 6, (0.9, 0.65), 3).unwrap();
        assert_eq!(mesh.n_elements(), 60);
        for e in &mesh.elements {
            assert!((e.extent[0] - 0.09).abs() < 1e-15);
            assert!((e.extent[1] - 0.65 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn macro_single_cell() {
        let mesh = Mesh::build_macro(1, 1, (1.0, 1.0), 3).unwrap();
        assert_eq!(mesh.n_elements(), 1);
        assert_eq!(mesh.faces.len(), 4);
        assert!(mesh.faces.iter().all(|f| f.is_boundary()));
    }

    #[test]
    fn macro_two_cells_interior_face() {
        let mesh = Mesh::build_macro(2, 1, (2.0, 1.0), 3).unwrap();
        assert_eq!(mesh.n_elements(), 2);
        let interior: Vec<_> = mesh.faces.iter().filter(|f| !f.is_boundary()).collect();
        assert_eq!(interior.len(), 1);
        let f = interior[0];
        assert!((f.measure - 1.0).abs() < 1e-14);
        assert_eq!(f.normal, [1.0, 0.0]);
        assert!((f.h_e - 1.0).abs() < 1e-14);
    }

    #[test]
    fn macro_rejects_bad_input() {
        assert!(Mesh::build_macro(0, 1, (1.0, 1.0), 3).is_err());
        assert!(Mesh::build_macro(1, 1, (0.0, 1.0), 3).is_err());
    }

    #[test]
    fn refine_single_element() {
        let mesh = unit_mesh(1, 1);
        let (fine, report) = mesh.execute_marks(&[Mark::Refine]);
        assert_eq!(fine.n_elements(), 4);
        assert_eq!(report.refined.len(), 1);
        for e in &fine.elements {
            assert_eq!(e.level(), 1);
            assert!((e.area - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn coarsen_complete_quartet() {
        let mesh = unit_mesh(1, 1);
        let (fine, _) = mesh.execute_marks(&[Mark::Refine]);
        let (coarse, report) = fine.execute_marks(&[Mark::Coarsen; 4]);
        assert_eq!(coarse.n_elements(), 1);
        assert_eq!(report.coarsened.len(), 1);
        assert_eq!(coarse.elements[0].level(), 0);
        assert!((coarse.elements[0].area - 1.0).abs() < 1e-14);
    }

    #[test]
    fn refine_at_max_level_is_clamped() {
        let mesh = Mesh::build_macro(1, 1, (1.0, 1.0), 0).unwrap();
        let (same, report) = mesh.execute_marks(&[Mark::Refine]);
        assert_eq!(same.n_elements(), 1);
        assert_eq!(report.clamped.len(), 1);
        assert!(!report.changed());
    }

    #[test]
    fn partial_quartet_keeps() {
        let mesh = unit_mesh(1, 1);
        let (fine, _) = mesh.execute_marks(&[Mark::Refine]);
        let marks = [Mark::Coarsen, Mark::Coarsen, Mark::Coarsen, Mark::Keep];
        let (out, report) = fine.execute_marks(&marks);
        assert_eq!(out.n_elements(), 4);
        assert_eq!(report.clamped.len(), 3);
    }

    #[test]
    fn boundary_face_h_e_lens_cell() {
        let mesh = Mesh::build_macro(10, 6, (0.9, 0.65), 3).unwrap();
        let f = mesh
            .faces
            .iter()
            .find(|f| matches!(f.neighbor, FaceNeighbor::Boundary(BoundarySide::South)))
            .unwrap();
        assert!((f.measure - 0.09).abs() < 1e-14);
        let expected = 0.09 * (0.65 / 6.0) / 0.09;
        assert!((f.h_e - expected).abs() < 1e-12);
        assert!((f.h_e - 0.108333).abs() < 1e-6);
    }

    #[test]
    fn hanging_face_h_e() {
        // 2x1 cells, refine the west one: hanging faces between level-1 and level-0.
        let mesh = unit_mesh(2, 1);
        let (out, _) = mesh.execute_marks(&[Mark::Refine, Mark::Keep]);
        assert_eq!(out.n_elements(), 5);
        let hanging: Vec<_> = out
            .faces
            .iter()
            .filter(|f| {
                if let FaceNeighbor::Interior(nid) = f.neighbor {
                    out.elements[f.inside].level() != out.elements[nid].level()
                } else {
                    false
                }
            })
            .collect();
        assert_eq!(hanging.len(), 2);
        for f in hanging {
            // Fine side owns: E- is the finer element.
            let FaceNeighbor::Interior(nid) = f.neighbor else {
                unreachable!()
            };
            assert!(out.elements[f.inside].level() > out.elements[nid].level());
            let a_fine = out.elements[f.inside].area;
            assert!((f.measure - 0.5).abs() < 1e-14);
            assert!((f.h_e - 2.5 * a_fine / f.measure).abs() < 1e-14);
            assert_eq!(f.normal, [1.0, 0.0]);
        }
    }

    #[test]
    fn one_level_closure_promotes_neighbors() {
        let mesh = Mesh::build_macro(3, 1, (3.0, 1.0), 3).unwrap();
        let (l1, _) = mesh.execute_marks(&[Mark::Refine, Mark::Keep, Mark::Keep]);
        // Refine the finest cells touching the middle macro cell again; the
        // middle cell must be promoted to keep the one-level rule.
        let marks: Vec<Mark> = l1
            .elements
            .iter()
            .map(|e| {
                if e.level() == 1 {
                    Mark::Refine
                } else {
                    Mark::Keep
                }
            })
            .collect();
        let (l2, _) = l1.execute_marks(&marks);
        check_one_level(&l2);
        assert!(l2.elements.iter().any(|e| e.level() == 1 && e.key.i >= 2));
    }

    fn check_one_level(mesh: &Mesh) {
        for f in &mesh.faces {
            if let FaceNeighbor::Interior(nid) = f.neighbor {
                let la = mesh.elements[f.inside].level() as i32;
                let lb = mesh.elements[nid].level() as i32;
                assert!((la - lb).abs() <= 1, "one-level rule violated");
            }
        }
    }

    fn check_tiling(mesh: &Mesh) {
        let rel = (mesh.total_leaf_area() - mesh.domain_area()).abs() / mesh.domain_area();
        assert!(rel < 1e-12, "leaf areas do not tile the domain: {rel}");
    }

    fn check_face_counts(mesh: &Mesh) {
        let interior = mesh.faces.iter().filter(|f| !f.is_boundary()).count();
        let boundary = mesh.faces.len() - interior;
        let incidences: usize = mesh.element_faces.iter().map(|v| v.len()).sum();
        assert_eq!(incidences, 2 * interior + boundary);
    }

    #[test]
    fn refine_then_coarsen_restores_geometry() {
        let mesh = Mesh::build_macro(2, 2, (1.0, 1.0), 3).unwrap();
        let (fine, _) = mesh.execute_marks(&[Mark::Refine, Mark::Keep, Mark::Keep, Mark::Keep]);
        let marks: Vec<Mark> = fine
            .elements
            .iter()
            .map(|e| {
                if e.level() == 1 {
                    Mark::Coarsen
                } else {
                    Mark::Keep
                }
            })
            .collect();
        let (back, _) = fine.execute_marks(&marks);
        assert_eq!(back.n_elements(), mesh.n_elements());
        for (a, b) in back.elements.iter().zip(mesh.elements.iter()) {
            assert_eq!(a.key, b.key);
            assert!((a.area - b.area).abs() < 1e-15);
        }
    }

    #[test]
    fn random_marks_keep_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut mesh = Mesh::build_macro(4, 3, (0.9, 0.65), 3).unwrap();
        for _ in 0..12 {
            let marks: Vec<Mark> = (0..mesh.n_elements())
                .map(|_| match rng.gen_range(0..10) {
                    0..=3 => Mark::Refine,
                    4..=6 => Mark::Coarsen,
                    _ => Mark::Keep,
                })
                .collect();
            let (next, _) = mesh.execute_marks(&marks);
            check_one_level(&next);
            check_tiling(&next);
            check_face_counts(&next);
            for e in &next.elements {
                assert!(e.level() <= next.max_level);
            }
            mesh = next;
        }
    }

    #[test]
    fn locate_points() {
        let mesh = Mesh::build_macro(2, 1, (2.0, 1.0), 3).unwrap();
        let (fine, _) = mesh.execute_marks(&[Mark::Refine, Mark::Keep]);
        let id = fine.locate([0.25, 0.25]).unwrap();
        assert_eq!(fine.elements[id].level(), 1);
        let id = fine.locate([1.5, 0.5]).unwrap();
        assert_eq!(fine.elements[id].level(), 0);
        assert!(fine.locate([2.5, 0.5]).is_none());
        // Domain corner clamps inward.
        assert!(fine.locate([2.0, 1.0]).is_some());
    }
}
