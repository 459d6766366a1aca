//! Simplicial families in 2D/3D: volumes, centers, face normals, regular-grid
//! construction and data-driven pruning.

use crate::error::MeshError;
use crate::geom::{self, Point};
use crate::scalar::{fl, Scalar};

/// Barycentric slack used for point-in-simplex tests on boundaries.
const BARY_TOL: f64 = 1e-12;

/// Connectivity of a simplicial family: which vertices form each simplex.
///
/// Vertex ids are `0..n_vertices`; each simplex is a `(dim + 1)`-tuple stored
/// in a flat index array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimplicialStructure {
    dim: usize,
    n_vertices: usize,
    indices: Vec<usize>,
}

impl SimplicialStructure {
    pub fn new(
        dim: usize,
        n_vertices: usize,
        simplices: Vec<Vec<usize>>,
    ) -> Result<Self, MeshError> {
        if dim != 2 && dim != 3 {
            return Err(MeshError::InvalidDimension(dim));
        }
        let mut indices = Vec::with_capacity(simplices.len() * (dim + 1));
        for (s, tuple) in simplices.iter().enumerate() {
            if tuple.len() != dim + 1 {
                return Err(MeshError::InvalidDimension(tuple.len().saturating_sub(1)));
            }
            for (k, &v) in tuple.iter().enumerate() {
                if v >= n_vertices {
                    return Err(MeshError::VertexOutOfRange {
                        simplex: s,
                        vertex: v,
                        n_vertices,
                    });
                }
                if tuple[..k].contains(&v) {
                    return Err(MeshError::DuplicateVertex { simplex: s });
                }
            }
            indices.extend_from_slice(tuple);
        }
        Ok(Self {
            dim,
            n_vertices,
            indices,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_simplices(&self) -> usize {
        self.indices.len() / (self.dim + 1)
    }

    /// Vertex tuple of simplex `c` as a slice of length `dim + 1`.
    pub fn simplex(&self, c: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.indices[c * k..(c + 1) * k]
    }

    pub fn simplices(&self) -> impl ExactSizeIterator<Item = &[usize]> {
        self.indices.chunks_exact(self.dim + 1)
    }
}

/// A simplicial structure with vertex positions: the geometric substrate for
/// mesh varifolds. Planar families keep a zero third coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplicialFamily<T: Scalar> {
    structure: SimplicialStructure,
    positions: Vec<Point<T>>,
}

impl<T: Scalar> SimplicialFamily<T> {
    pub fn new(
        structure: SimplicialStructure,
        positions: Vec<Point<T>>,
    ) -> Result<Self, MeshError> {
        if positions.len() != structure.n_vertices() {
            return Err(MeshError::PositionCount {
                expected: structure.n_vertices(),
                got: positions.len(),
            });
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(MeshError::NonFinitePosition(i));
            }
        }
        Ok(Self {
            structure,
            positions,
        })
    }

    pub fn structure(&self) -> &SimplicialStructure {
        &self.structure
    }

    pub fn positions(&self) -> &[Point<T>] {
        &self.positions
    }

    pub fn dim(&self) -> usize {
        self.structure.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.structure.n_vertices
    }

    pub fn n_simplices(&self) -> usize {
        self.structure.n_simplices()
    }

    /// Same connectivity, new vertex positions.
    pub fn with_positions(&self, positions: Vec<Point<T>>) -> Result<Self, MeshError> {
        Self::new(self.structure.clone(), positions)
    }

    /// Signed volume of simplex `c`: det of edge vectors over d!.
    ///
    /// The sign is kept so that folded simplices arising mid-optimization can
    /// be detected and used as-is in the pairing formulas.
    pub fn simplex_volume(&self, c: usize) -> T {
        let t = self.structure.simplex(c);
        let x0 = self.positions[t[0]];
        match self.structure.dim {
            2 => {
                let e1 = geom::sub(self.positions[t[1]], x0);
                let e2 = geom::sub(self.positions[t[2]], x0);
                geom::det2(e1, e2) / fl(2.0)
            }
            _ => {
                let e1 = geom::sub(self.positions[t[1]], x0);
                let e2 = geom::sub(self.positions[t[2]], x0);
                let e3 = geom::sub(self.positions[t[3]], x0);
                geom::det3(e1, e2, e3) / fl(6.0)
            }
        }
    }

    pub fn volumes(&self) -> Vec<T> {
        (0..self.n_simplices())
            .map(|c| self.simplex_volume(c))
            .collect()
    }

    /// Errors on the first simplex whose signed volume is not strictly positive.
    pub fn validate_orientation(&self) -> Result<(), MeshError> {
        for c in 0..self.n_simplices() {
            let v = self.simplex_volume(c);
            if v <= T::zero() {
                return Err(MeshError::NonPositiveOrientation {
                    simplex: c,
                    volume: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    /// Arithmetic mean of the simplex vertices.
    pub fn simplex_center(&self, c: usize) -> Point<T> {
        let t = self.structure.simplex(c);
        let mut m = geom::zero();
        for &v in t {
            m = geom::add(m, self.positions[v]);
        }
        geom::scale(m, T::one() / fl((self.structure.dim + 1) as f64))
    }

    pub fn centers(&self) -> Vec<Point<T>> {
        (0..self.n_simplices())
            .map(|c| self.simplex_center(c))
            .collect()
    }

    /// Inward weighted normals to the faces of simplex `c`, one per vertex
    /// slot (entry `j` belongs to the face opposite vertex `c_j`).
    ///
    /// Entries past `dim` are zero. The normals satisfy the closure identity
    /// (they sum to zero) and `n_j . u` equals the alternating edge
    /// determinant with `u` substituted into column `j`.
    pub fn face_normals(&self, c: usize) -> [Point<T>; 4] {
        let t = self.structure.simplex(c);
        let x = |k: usize| self.positions[t[k]];
        match self.structure.dim {
            2 => [
                geom::rot90(geom::sub(x(2), x(1))),
                geom::rot90(geom::sub(x(0), x(2))),
                geom::rot90(geom::sub(x(1), x(0))),
                geom::zero(),
            ],
            _ => [
                geom::scale(
                    geom::cross(geom::sub(x(2), x(1)), geom::sub(x(3), x(1))),
                    -T::one(),
                ),
                geom::cross(geom::sub(x(2), x(0)), geom::sub(x(3), x(0))),
                geom::scale(
                    geom::cross(geom::sub(x(1), x(0)), geom::sub(x(3), x(0))),
                    -T::one(),
                ),
                geom::cross(geom::sub(x(1), x(0)), geom::sub(x(2), x(0))),
            ],
        }
    }

    /// Barycentric coordinates of `y` in simplex `c` (entries past `dim` zero).
    pub fn barycentric(&self, c: usize, y: Point<T>) -> [T; 4] {
        let t = self.structure.simplex(c);
        let x0 = self.positions[t[0]];
        let r = geom::sub(y, x0);
        match self.structure.dim {
            2 => {
                let e1 = geom::sub(self.positions[t[1]], x0);
                let e2 = geom::sub(self.positions[t[2]], x0);
                let den = geom::det2(e1, e2);
                let a1 = geom::det2(r, e2) / den;
                let a2 = geom::det2(e1, r) / den;
                [T::one() - a1 - a2, a1, a2, T::zero()]
            }
            _ => {
                let e1 = geom::sub(self.positions[t[1]], x0);
                let e2 = geom::sub(self.positions[t[2]], x0);
                let e3 = geom::sub(self.positions[t[3]], x0);
                let den = geom::det3(e1, e2, e3);
                let a1 = geom::det3(r, e2, e3) / den;
                let a2 = geom::det3(e1, r, e3) / den;
                let a3 = geom::det3(e1, e2, r) / den;
                [T::one() - a1 - a2 - a3, a1, a2, a3]
            }
        }
    }

    /// True when all barycentric coordinates of `y` in `c` are above the
    /// boundary slack.
    pub fn simplex_contains(&self, c: usize, y: Point<T>) -> bool {
        let tol = -fl::<T>(BARY_TOL);
        let b = self.barycentric(c, y);
        b[..self.structure.dim + 1]
            .iter()
            .all(|&a| a.is_finite() && a >= tol)
    }

    /// Bucket-grid locator over this family, for repeated point queries.
    pub fn locator(&self) -> PointLocator<'_, T> {
        PointLocator::new(self)
    }

    /// One-off point location; builds a throwaway locator. Ties (points on
    /// shared faces) resolve to the lowest simplex index.
    pub fn locate_point(&self, y: Point<T>) -> Option<usize> {
        self.locator().locate(y)
    }

    /// Axis-aligned bounding box over all vertices.
    pub fn bounding_box(&self) -> Aabb<T> {
        let mut min = [T::infinity(); 3];
        let mut max = [T::neg_infinity(); 3];
        for p in &self.positions {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb { min, max }
    }

    /// Drops every simplex no point is assigned to.
    ///
    /// Each point is assigned to the lowest-index simplex containing it; the
    /// returned assignment indexes the pruned family. Vertices left unused by
    /// the retained simplices are removed.
    pub fn prune(&self, points: &[Point<T>]) -> (SimplicialFamily<T>, Vec<Option<usize>>) {
        let locator = self.locator();
        let old_assignment: Vec<Option<usize>> =
            points.iter().map(|&p| locator.locate(p)).collect();

        let mut keep = vec![false; self.n_simplices()];
        for a in old_assignment.iter().flatten() {
            keep[*a] = true;
        }

        let mut simplex_map = vec![None; self.n_simplices()];
        let mut vertex_map = vec![None; self.n_vertices()];
        let mut new_positions = Vec::new();
        let mut new_simplices = Vec::new();
        for (c, retained) in keep.iter().enumerate() {
            if !retained {
                continue;
            }
            simplex_map[c] = Some(new_simplices.len());
            let tuple: Vec<usize> = self
                .structure
                .simplex(c)
                .iter()
                .map(|&v| {
                    *vertex_map[v].get_or_insert_with(|| {
                        new_positions.push(self.positions[v]);
                        new_positions.len() - 1
                    })
                })
                .collect();
            new_simplices.push(tuple);
        }

        let structure =
            SimplicialStructure::new(self.structure.dim, new_positions.len(), new_simplices)
                .expect("pruning preserves validity");
        let family = SimplicialFamily::new(structure, new_positions)
            .expect("pruning preserves validity");
        let assignment = old_assignment
            .into_iter()
            .map(|a| a.and_then(|c| simplex_map[c]))
            .collect();
        (family, assignment)
    }
}

/// Axis-aligned box; the z extent is ignored for 2D constructions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T: Scalar> {
    pub min: Point<T>,
    pub max: Point<T>,
}

impl<T: Scalar> Aabb<T> {
    pub fn new(min: Point<T>, max: Point<T>) -> Self {
        Self { min, max }
    }

    /// Smallest box containing all points (degenerate for a single point).
    pub fn of_points(points: &[Point<T>]) -> Self {
        let mut min = [T::infinity(); 3];
        let mut max = [T::neg_infinity(); 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Self { min, max }
    }

    /// Grows the box by `pad` on every used axis.
    pub fn padded(&self, pad: T, dim: usize) -> Self {
        let mut out = *self;
        for k in 0..dim {
            out.min[k] = out.min[k] - pad;
            out.max[k] = out.max[k] + pad;
        }
        out
    }
}

/// Regular simplicial grid covering `bbox` with cells of side `lambda`.
///
/// Squares split into 2 positively oriented triangles, cubes into the 6
/// positively oriented tetrahedra of the Kuhn triangulation; vertices are
/// shared between adjacent cells.
pub fn build_regular_mesh<T: Scalar>(
    bbox: Aabb<T>,
    lambda: T,
    dim: usize,
) -> Result<SimplicialFamily<T>, MeshError> {
    if dim != 2 && dim != 3 {
        return Err(MeshError::InvalidDimension(dim));
    }
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(MeshError::NonPositiveResolution(
            lambda.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let mut cells = [1usize; 3];
    for k in 0..dim {
        let extent = bbox.max[k] - bbox.min[k];
        if !(extent > T::zero()) || !extent.is_finite() {
            return Err(MeshError::DegenerateBBox { axis: k });
        }
        cells[k] = (extent / lambda).ceil().to_usize().unwrap_or(0).max(1);
    }
    let (nx, ny, nz) = (cells[0], cells[1], if dim == 3 { cells[2] } else { 0 });

    let vx = nx + 1;
    let vy = ny + 1;
    let vz = nz + 1;
    let vid = |i: usize, j: usize, k: usize| i + vx * (j + vy * k);

    let mut positions = Vec::with_capacity(vx * vy * vz);
    for k in 0..vz {
        for j in 0..vy {
            for i in 0..vx {
                positions.push([
                    bbox.min[0] + lambda * fl(i as f64),
                    bbox.min[1] + lambda * fl(j as f64),
                    if dim == 3 {
                        bbox.min[2] + lambda * fl(k as f64)
                    } else {
                        T::zero()
                    },
                ]);
            }
        }
    }

    let mut simplices = Vec::new();
    if dim == 2 {
        for j in 0..ny {
            for i in 0..nx {
                let a = vid(i, j, 0);
                let b = vid(i + 1, j, 0);
                let c = vid(i + 1, j + 1, 0);
                let d = vid(i, j + 1, 0);
                simplices.push(vec![a, b, c]);
                simplices.push(vec![a, c, d]);
            }
        }
    } else {
        // Kuhn split: one tetrahedron per monotone corner-to-corner path,
        // vertex order fixed up so every determinant is positive.
        const PERMS: [([usize; 3], bool); 6] = [
            ([0, 1, 2], true),
            ([1, 2, 0], true),
            ([2, 0, 1], true),
            ([0, 2, 1], false),
            ([2, 1, 0], false),
            ([1, 0, 2], false),
        ];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    for (perm, even) in PERMS {
                        let mut corner = [i, j, k];
                        let mut tuple = [vid(corner[0], corner[1], corner[2]), 0, 0, 0];
                        for (step, &axis) in perm.iter().enumerate() {
                            corner[axis] += 1;
                            tuple[step + 1] = vid(corner[0], corner[1], corner[2]);
                        }
                        if !even {
                            tuple.swap(2, 3);
                        }
                        simplices.push(tuple.to_vec());
                    }
                }
            }
        }
    }

    let structure = SimplicialStructure::new(dim, positions.len(), simplices)?;
    SimplicialFamily::new(structure, positions)
}

/// Uniform bucket grid over a family, answering lowest-index containment
/// queries without scanning every simplex.
pub struct PointLocator<'a, T: Scalar> {
    family: &'a SimplicialFamily<T>,
    origin: Point<T>,
    inv_cell: T,
    grid_dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl<'a, T: Scalar> PointLocator<'a, T> {
    fn new(family: &'a SimplicialFamily<T>) -> Self {
        let dim = family.dim();
        let bbox = family.bounding_box();
        // Cell side: the largest simplex bbox extent, so a simplex overlaps
        // at most 2 cells per axis.
        let mut cell = T::zero();
        for t in family.structure().simplices() {
            for k in 0..dim {
                let mut lo = T::infinity();
                let mut hi = T::neg_infinity();
                for &v in t {
                    lo = lo.min(family.positions()[v][k]);
                    hi = hi.max(family.positions()[v][k]);
                }
                cell = cell.max(hi - lo);
            }
        }
        if !(cell > T::zero()) {
            cell = T::one();
        }
        let mut grid_dims = [1usize; 3];
        for k in 0..dim {
            let extent = (bbox.max[k] - bbox.min[k]).max(T::zero());
            grid_dims[k] = ((extent / cell).ceil().to_usize().unwrap_or(1) + 1).max(1);
        }
        let mut buckets = vec![Vec::new(); grid_dims[0] * grid_dims[1] * grid_dims[2]];
        let inv_cell = T::one() / cell;
        let cell_of = |p: Point<T>, k: usize| -> usize {
            let c = ((p[k] - bbox.min[k]) * inv_cell).floor().to_isize().unwrap_or(0);
            c.clamp(0, grid_dims[k] as isize - 1) as usize
        };
        for (c, t) in family.structure().simplices().enumerate() {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for k in 0..dim {
                let mut pmin = T::infinity();
                let mut pmax = T::neg_infinity();
                for &v in t {
                    pmin = pmin.min(family.positions()[v][k]);
                    pmax = pmax.max(family.positions()[v][k]);
                }
                lo[k] = cell_of([pmin; 3], k);
                hi[k] = cell_of([pmax; 3], k);
            }
            for gz in lo[2]..=hi[2] {
                for gy in lo[1]..=hi[1] {
                    for gx in lo[0]..=hi[0] {
                        buckets[gx + grid_dims[0] * (gy + grid_dims[1] * gz)].push(c as u32);
                    }
                }
            }
        }
        Self {
            family,
            origin: bbox.min,
            inv_cell,
            grid_dims,
            buckets,
        }
    }

    /// Lowest-index simplex containing `y`, if any.
    pub fn locate(&self, y: Point<T>) -> Option<usize> {
        let dim = self.family.dim();
        let mut idx = [0usize; 3];
        for k in 0..dim {
            let c = ((y[k] - self.origin[k]) * self.inv_cell)
                .floor()
                .to_isize()
                .unwrap_or(-1);
            if c < 0 || c >= self.grid_dims[k] as isize {
                return None;
            }
            idx[k] = c as usize;
        }
        let bucket =
            &self.buckets[idx[0] + self.grid_dims[0] * (idx[1] + self.grid_dims[1] * idx[2])];
        // Buckets are filled in ascending simplex order, so the first hit is
        // the lowest-index simplex.
        bucket
            .iter()
            .map(|&c| c as usize)
            .find(|&c| self.family.simplex_contains(c, y))
    }
}
