//! Tetrahedral meshes: ASCII reader/writer, structured cube generator,
//! face connectivity and element geometry.
//!
//! The file format is a small line-oriented ASCII format:
//!
//! ```text
//! tetmesh 1
//! <nv> <nt> <nb>
//! x y z                 (nv vertex lines)
//! v0 v1 v2 v3 region    (nt element lines, 0-based vertex indices)
//! v0 v1 v2 tag          (nb boundary-face lines)
//! ```
//!
//! `#` starts a comment that runs to the end of the line; blank lines are
//! ignored. The face list and all incidence information are derived from the
//! elements; the boundary lines only attach integer tags to derived boundary
//! faces.

use nalgebra::Vector3;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// A point or direction in physical space.
pub type Point = Vector3<f64>;

/// Local faces of a tetrahedron, `LOCAL_FACES[i]` is the face opposite vertex `i`.
pub const LOCAL_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

/// Mesh construction and I/O failures.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("element {element} is degenerate (volume {volume:.3e} below threshold)")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("element {element} has negative orientation (signed volume {volume:.3e}); reorder its vertices")]
    NegativeOrientation { element: usize, volume: f64 },
    #[error("topology error: {0}")]
    Topology(String),
    #[error("boundary face ({0}, {1}, {2}) has no tag in the boundary list")]
    UntaggedBoundaryFace(usize, usize, usize),
    #[error("listed boundary face ({0}, {1}, {2}) is not a boundary face of the element mesh")]
    BogusBoundaryFace(usize, usize, usize),
    #[error("cube mesh subdivision count must be at least 1")]
    InvalidSubdivision,
}

/// One triangular face of the mesh, stored once and shared by its incident elements.
#[derive(Debug, Clone)]
pub struct Face {
    /// Canonical vertex triple, sorted ascending.
    pub vertices: [usize; 3],
    /// Incident elements as `(element, local_face)`; one entry for boundary
    /// faces, two for interior faces.
    pub incidence: Vec<(usize, usize)>,
    /// Tag for boundary faces, `None` for interior faces.
    pub boundary_tag: Option<i32>,
    /// Face area.
    pub area: f64,
    /// Longest edge of the face.
    pub h: f64,
}

impl Face {
    /// True when the face lies on the mesh boundary.
    pub fn is_boundary(&self) -> bool {
        self.incidence.len() == 1
    }
}

/// A conforming tetrahedral mesh with derived face connectivity.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    /// Vertex indices per element, positively oriented.
    pub tets: Vec<[usize; 4]>,
    /// Region id per element.
    pub regions: Vec<i32>,
    /// All distinct faces, ordered by canonical vertex triple.
    pub faces: Vec<Face>,
    /// Face index for each local face of each element.
    pub element_faces: Vec<[usize; 4]>,
    /// Outward unit normal for each local face of each element.
    pub element_normals: Vec<[Vector3<f64>; 4]>,
}

impl Mesh {
    /// Build connectivity from raw vertices/elements and validate the result.
    pub fn from_elements(
        vertices: Vec<Point>,
        tets: Vec<[usize; 4]>,
        regions: Vec<i32>,
        boundary_tags: &[([usize; 3], i32)],
    ) -> Result<Self, MeshError> {
        assert_eq!(tets.len(), regions.len());
        for (k, tet) in tets.iter().enumerate() {
            for &v in tet {
                if v >= vertices.len() {
                    return Err(MeshError::Topology(format!(
                        "element {k} references vertex {v} but the mesh has only {} vertices",
                        vertices.len()
                    )));
                }
            }
            let vol = signed_volume(&vertices, tet);
            let scale = tet_extent(&vertices, tet);
            if vol.abs() <= 1e-14 * scale.powi(3) {
                return Err(MeshError::DegenerateElement { element: k, volume: vol });
            }
            if vol < 0.0 {
                return Err(MeshError::NegativeOrientation { element: k, volume: vol });
            }
        }

        // Collect faces keyed by their sorted vertex triple.
        let mut map: BTreeMap<[usize; 3], Vec<(usize, usize)>> = BTreeMap::new();
        for (k, tet) in tets.iter().enumerate() {
            for (lf, idx) in LOCAL_FACES.iter().enumerate() {
                let mut key = [tet[idx[0]], tet[idx[1]], tet[idx[2]]];
                key.sort_unstable();
                map.entry(key).or_default().push((k, lf));
            }
        }
        let mut tag_map: BTreeMap<[usize; 3], i32> = BTreeMap::new();
        for (tri, tag) in boundary_tags {
            let mut key = *tri;
            key.sort_unstable();
            if tag_map.insert(key, *tag).is_some() {
                return Err(MeshError::Topology(format!(
                    "boundary face ({}, {}, {}) is listed twice",
                    tri[0], tri[1], tri[2]
                )));
            }
        }

        let mut faces = Vec::with_capacity(map.len());
        let mut element_faces = vec![[usize::MAX; 4]; tets.len()];
        for (key, incidence) in map {
            if incidence.len() > 2 {
                return Err(MeshError::Topology(format!(
                    "face ({}, {}, {}) is shared by {} elements",
                    key[0],
                    key[1],
                    key[2],
                    incidence.len()
                )));
            }
            let boundary_tag = if incidence.len() == 1 {
                match tag_map.remove(&key) {
                    Some(tag) => Some(tag),
                    None => return Err(MeshError::UntaggedBoundaryFace(key[0], key[1], key[2])),
                }
            } else {
                if let Some(_) = tag_map.remove(&key) {
                    return Err(MeshError::BogusBoundaryFace(key[0], key[1], key[2]));
                }
                None
            };
            let (area, h) = face_area_h(&vertices, &key);
            let id = faces.len();
            for &(k, lf) in &incidence {
                element_faces[k][lf] = id;
            }
            faces.push(Face { vertices: key, incidence, boundary_tag, area, h });
        }
        if let Some((key, _)) = tag_map.into_iter().next() {
            return Err(MeshError::BogusBoundaryFace(key[0], key[1], key[2]));
        }

        // Outward normals per element face.
        let mut element_normals = vec![[Vector3::zeros(); 4]; tets.len()];
        for (k, tet) in tets.iter().enumerate() {
            for (lf, idx) in LOCAL_FACES.iter().enumerate() {
                let a = vertices[tet[idx[0]]];
                let b = vertices[tet[idx[1]]];
                let c = vertices[tet[idx[2]]];
                let opposite = vertices[tet[lf]];
                let mut n = (b - a).cross(&(c - a));
                if n.dot(&(opposite - a)) > 0.0 {
                    n = -n;
                }
                element_normals[k][lf] = n.normalize();
            }
        }

        let mesh = Mesh { vertices, tets, regions, faces, element_faces, element_normals };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Structural checks: boundary closure and antiparallel interior normals.
    pub fn validate(&self) -> Result<(), MeshError> {
        // Every boundary edge must be shared by exactly two boundary faces.
        let mut edge_count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for face in self.faces.iter().filter(|f| f.is_boundary()) {
            let [a, b, c] = face.vertices;
            for e in [[a, b], [a, c], [b, c]] {
                *edge_count.entry(e).or_insert(0) += 1;
            }
        }
        for (edge, count) in edge_count {
            if count != 2 {
                return Err(MeshError::Topology(format!(
                    "boundary edge ({}, {}) lies on {} boundary faces, expected 2",
                    edge[0], edge[1], count
                )));
            }
        }
        // Interior normals from the two sides must be antiparallel.
        for (fid, face) in self.faces.iter().enumerate() {
            if let [(k0, l0), (k1, l1)] = face.incidence[..] {
                let n0 = self.element_normals[k0][l0];
                let n1 = self.element_normals[k1][l1];
                if (n0 + n1).norm() > 1e-12 {
                    return Err(MeshError::Topology(format!(
                        "interior face {fid} normals from elements {k0} and {k1} are not antiparallel"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.tets.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_boundary_faces(&self) -> usize {
        self.faces.iter().filter(|f| f.is_boundary()).count()
    }

    pub fn num_interior_faces(&self) -> usize {
        self.faces.len() - self.num_boundary_faces()
    }

    /// Vertex coordinates of element `k`.
    pub fn element_vertices(&self, k: usize) -> [Point; 4] {
        let t = self.tets[k];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]], self.vertices[t[3]]]
    }

    /// Vertex coordinates of face `f` in canonical order.
    pub fn face_vertices(&self, f: usize) -> [Point; 3] {
        let v = self.faces[f].vertices;
        [self.vertices[v[0]], self.vertices[v[1]], self.vertices[v[2]]]
    }

    /// Volume of element `k` (positive by construction).
    pub fn element_volume(&self, k: usize) -> f64 {
        signed_volume(&self.vertices, &self.tets[k])
    }

    /// Longest edge of element `k`.
    pub fn element_h(&self, k: usize) -> f64 {
        let vs = self.element_vertices(k);
        let mut h: f64 = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                h = h.max((vs[i] - vs[j]).norm());
            }
        }
        h
    }

    /// Centroid of element `k`.
    pub fn element_centroid(&self, k: usize) -> Point {
        let vs = self.element_vertices(k);
        (vs[0] + vs[1] + vs[2] + vs[3]) / 4.0
    }

    /// Largest `h_K / (2 r_K)` over all elements, where `r_K` is the inradius.
    /// Equals 1 + sqrt(3)/... ~ 4.9 for the regular tetrahedron and grows as
    /// elements flatten; reported, never enforced.
    pub fn shape_regularity(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.num_elements() {
            let vol = self.element_volume(k);
            let area_sum: f64 =
                self.element_faces[k].iter().map(|&f| self.faces[f].area).sum();
            let inradius = 3.0 * vol / area_sum;
            worst = worst.max(self.element_h(k) / (2.0 * inradius));
        }
        worst
    }

    /// Total mesh volume.
    pub fn total_volume(&self) -> f64 {
        (0..self.num_elements()).map(|k| self.element_volume(k)).sum()
    }

    /// The element containing `x`, by barycentric inclusion with tolerance
    /// `tol`; ties (shared faces) resolve to the lowest element index.
    pub fn locate_point(&self, x: &Point, tol: f64) -> Option<usize> {
        (0..self.num_elements()).find(|&k| self.barycentric(k, x).iter().all(|&b| b >= -tol))
    }

    /// Barycentric coordinates of `x` with respect to element `k`.
    pub fn barycentric(&self, k: usize, x: &Point) -> [f64; 4] {
        let vs = self.element_vertices(k);
        let total = signed_volume(&self.vertices, &self.tets[k]);
        let mut bary = [0.0; 4];
        for i in 0..4 {
            let mut sub = vs;
            sub[i] = *x;
            let v = (sub[1] - sub[0]).cross(&(sub[2] - sub[0])).dot(&(sub[3] - sub[0])) / 6.0;
            bary[i] = v / total;
        }
        bary
    }
}

fn signed_volume(vertices: &[Point], tet: &[usize; 4]) -> f64 {
    let a = vertices[tet[0]];
    let b = vertices[tet[1]];
    let c = vertices[tet[2]];
    let d = vertices[tet[3]];
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

fn tet_extent(vertices: &[Point], tet: &[usize; 4]) -> f64 {
    let mut h: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            h = h.max((vertices[tet[i]] - vertices[tet[j]]).norm());
        }
    }
    h.max(1e-300)
}

fn face_area_h(vertices: &[Point], tri: &[usize; 3]) -> (f64, f64) {
    let a = vertices[tri[0]];
    let b = vertices[tri[1]];
    let c = vertices[tri[2]];
    let area = 0.5 * (b - a).cross(&(c - a)).norm();
    let h = (b - a).norm().max((c - a).norm()).max((c - b).norm());
    (area, h)
}

/// Parse a mesh from the ASCII format described in the module docs.
pub fn load_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text.lines().enumerate().filter_map(|(i, raw)| {
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            None
        } else {
            Some((i + 1, stripped))
        }
    });

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| MeshError::Parse { line: 0, msg: "empty file".into() })?;
    if header != "tetmesh 1" {
        return Err(MeshError::Parse {
            line: line_no,
            msg: format!("expected header `tetmesh 1`, found `{header}`"),
        });
    }

    let (line_no, counts) = lines
        .next()
        .ok_or_else(|| MeshError::Parse { line: line_no, msg: "missing count line".into() })?;
    let counts_vec = parse_fields::<usize>(counts, line_no, 3)?;
    let (nv, nt, nb) = (counts_vec[0], counts_vec[1], counts_vec[2]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, s) = lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: line_no, msg: "unexpected end of vertex list".into() })?;
        let coords = parse_fields::<f64>(s, ln, 3)?;
        vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
    }

    let mut tets = Vec::with_capacity(nt);
    let mut regions = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, s) = lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: line_no, msg: "unexpected end of element list".into() })?;
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 5 {
            return Err(MeshError::Parse {
                line: ln,
                msg: format!("expected `v0 v1 v2 v3 region`, found {} fields", f.len()),
            });
        }
        let idx: Vec<usize> = parse_fields::<usize>(&f[..4].join(" "), ln, 4)?;
        let region: i32 = f[4]
            .parse()
            .map_err(|_| MeshError::Parse { line: ln, msg: format!("bad region id `{}`", f[4]) })?;
        tets.push([idx[0], idx[1], idx[2], idx[3]]);
        regions.push(region);
    }

    let mut boundary = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, s) = lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: line_no, msg: "unexpected end of boundary list".into() })?;
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 4 {
            return Err(MeshError::Parse {
                line: ln,
                msg: format!("expected `v0 v1 v2 tag`, found {} fields", f.len()),
            });
        }
        let tri: Vec<usize> = parse_fields::<usize>(&f[..3].join(" "), ln, 3)?;
        let tag: i32 = f[3]
            .parse()
            .map_err(|_| MeshError::Parse { line: ln, msg: format!("bad boundary tag `{}`", f[3]) })?;
        boundary.push(([tri[0], tri[1], tri[2]], tag));
    }

    if let Some((ln, s)) = lines.next() {
        return Err(MeshError::Parse { line: ln, msg: format!("trailing content `{s}`") });
    }

    Mesh::from_elements(vertices, tets, regions, &boundary)
}

fn parse_fields<T: std::str::FromStr>(s: &str, line: usize, expect: usize) -> Result<Vec<T>, MeshError> {
    let fields: Vec<&str> = s.split_whitespace().collect();
    if fields.len() != expect {
        return Err(MeshError::Parse {
            line,
            msg: format!("expected {expect} fields, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<T>()
                .map_err(|_| MeshError::Parse { line, msg: format!("bad value `{f}`") })
        })
        .collect()
}

/// Serialize a mesh in the canonical ASCII form; `load_mesh` round-trips it
/// bit-exactly (coordinates use 17 significant digits).
pub fn write_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    let nb = mesh.num_boundary_faces();
    writeln!(out, "tetmesh 1").unwrap();
    writeln!(out, "{} {} {}", mesh.num_vertices(), mesh.num_elements(), nb).unwrap();
    for v in &mesh.vertices {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", v.x, v.y, v.z).unwrap();
    }
    for (tet, region) in mesh.tets.iter().zip(&mesh.regions) {
        writeln!(out, "{} {} {} {} {}", tet[0], tet[1], tet[2], tet[3], region).unwrap();
    }
    for face in mesh.faces.iter().filter(|f| f.is_boundary()) {
        let [a, b, c] = face.vertices;
        writeln!(out, "{} {} {} {}", a, b, c, face.boundary_tag.unwrap()).unwrap();
    }
    out
}

/// Generate a structured mesh of the unit cube `[0,1]^3` with `n` subdivisions
/// per axis, each small cube split into six tetrahedra sharing its main
/// diagonal. All elements carry region id 0. Boundary faces receive tags
/// 1..=6 for the planes x=0, x=1, y=0, y=1, z=0, z=1 in that order.
pub fn generate_cube_mesh(n: usize) -> Result<Mesh, MeshError> {
    if n == 0 {
        return Err(MeshError::InvalidSubdivision);
    }
    let np = n + 1;
    let vid = |i: usize, j: usize, k: usize| i + np * (j + np * k);
    let mut vertices = Vec::with_capacity(np * np * np);
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                vertices.push(Vector3::new(
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    k as f64 / n as f64,
                ));
            }
        }
    }

    // The six path tetrahedra of a cube: one per permutation of the axes,
    // walking from corner (0,0,0) to (1,1,1) one axis at a time.
    const AXIS_ORDERS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * n * n * n);
    for ck in 0..n {
        for cj in 0..n {
            for ci in 0..n {
                let corner = [ci, cj, ck];
                for order in AXIS_ORDERS {
                    let mut steps = [[0usize; 3]; 4];
                    for s in 1..4 {
                        steps[s] = steps[s - 1];
                        steps[s][order[s - 1]] += 1;
                    }
                    let mut tet = [0usize; 4];
                    for (s, step) in steps.iter().enumerate() {
                        tet[s] = vid(corner[0] + step[0], corner[1] + step[1], corner[2] + step[2]);
                    }
                    if signed_volume(&vertices, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    let regions = vec![0; tets.len()];

    // Tag boundary faces by the cube face plane they lie on.
    let on_plane = |v: &Point, axis: usize, value: f64| (v[axis] - value).abs() < 1e-12;
    let mut map: BTreeMap<[usize; 3], usize> = BTreeMap::new();
    for tet in &tets {
        for idx in LOCAL_FACES {
            let mut key = [tet[idx[0]], tet[idx[1]], tet[idx[2]]];
            key.sort_unstable();
            *map.entry(key).or_insert(0) += 1;
        }
    }
    let mut boundary = Vec::new();
    for (key, count) in map {
        if count == 1 {
            let pts = [&vertices[key[0]], &vertices[key[1]], &vertices[key[2]]];
            let mut tag = None;
            for (t, (axis, value)) in
                [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0), (2, 0.0), (2, 1.0)].iter().enumerate()
            {
                if pts.iter().all(|p| on_plane(p, *axis, *value)) {
                    tag = Some(t as i32 + 1);
                    break;
                }
            }
            let tag = tag.expect("cube boundary face not on any cube plane");
            boundary.push((key, tag));
        }
    }

    Mesh::from_elements(vertices, tets, regions, &boundary)
}

/// A two-element mesh sharing one interior face; all boundary faces tagged 1.
pub fn two_tet_mesh() -> Mesh {
    let vertices = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(1.0, 1.0, 1.0),
    ];
    let tets = vec![[0, 1, 2, 3], [1, 2, 3, 4]];
    let regions = vec![0, 0];
    let boundary = vec![
        ([0, 1, 2], 1),
        ([0, 1, 3], 1),
        ([0, 2, 3], 1),
        ([1, 2, 4], 1),
        ([1, 3, 4], 1),
        ([2, 3, 4], 1),
    ];
    Mesh::from_elements(vertices, tets, regions, &boundary).expect("two-tet mesh is valid")
}

/// The reference tetrahedron (unit right tet) as a one-element mesh,
/// boundary tagged 1.
pub fn reference_tet_mesh() -> Mesh {
    let vertices = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
    ];
    let tets = vec![[0, 1, 2, 3]];
    let regions = vec![0];
    let boundary =
        vec![([0, 1, 2], 1), ([0, 1, 3], 1), ([0, 2, 3], 1), ([1, 2, 3], 1)];
    Mesh::from_elements(vertices, tets, regions, &boundary).expect("reference tet is valid")
}
