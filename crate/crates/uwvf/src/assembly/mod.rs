//! Assembly of the block system `D chi = C chi + b` from face integrals of
//! impedance traces.
//!
//! Per element `K`, the Hermitian positive-definite Gram block is
//! `D_K[m,n] = sum_{F in dK} int_F (1/lambda) F+_n . conj(F+_m) dA` over the
//! outgoing traces `F+` of the element's basis. Interior faces couple `K` to
//! its neighbor `K'` through `-int_F (1/lambda) F+_{K',n} . conj(F-_{K,m})`
//! (the neighbor's outgoing trace, built with the neighbor's own outward
//! normal, tested against the incoming trace of `K`); boundary faces
//! contribute `Q * int_F (1/lambda) F+_n . conj(F-_m)` and the data term
//! `b_m = int_F (1/lambda) g . conj(F-_m)`.

pub mod tipdg;

use crate::mesh::{Mesh, Point};
use crate::planewave::{
    impedance_trace_at, BasisError, CVector3, LocalBasis, PlaneWave, TraceSign,
};
use crate::quadrature::{
    face_quadrature_order, triangle_rule, QuadratureError, DEFAULT_SAFETY_TERMS,
};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

pub use crate::planewave::MaterialTable;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("boundary tag {0} has no boundary specification")]
    MissingBoundarySpec(i32),
    #[error("boundary reflection coefficient Q = {q} on tag {tag} is outside [-1, 1]")]
    InvalidQ { tag: i32, q: f64 },
    #[error("impedance weight lambda = {lambda} on {location} must be positive")]
    InvalidLambda { location: String, lambda: f64 },
    #[error("boundary data on face {face} is not tangential: |nu . g| = {magnitude:.3e} at a quadrature point")]
    NonTangentialData { face: usize, magnitude: f64 },
    #[error("element {element}: basis attached to element {basis_element}")]
    MismatchedBasis { element: usize, basis_element: usize },
    #[error("element {element}: Gram block condition number {cond:.3e} exceeds cap {cap:.3e} at {p} directions")]
    ConditionCapExceeded { element: usize, cond: f64, cap: f64, p: usize },
    #[error("interior-penalty equivalence mode requires real permittivity, but element {element} has eps_r = {re} + {im}i")]
    ComplexPermittivityInEquivalenceMode { element: usize, re: f64, im: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Per-element blocks of coefficients living on the mesh skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonVector {
    offsets: Vec<usize>,
    data: Vec<Complex64>,
}

impl SkeletonVector {
    pub fn zeros(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for &d in dims {
            total += d;
            offsets.push(total);
        }
        SkeletonVector { offsets, data: vec![Complex64::new(0.0, 0.0); total] }
    }

    pub fn num_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn block_dim(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, k: usize) -> &[Complex64] {
        &self.data[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [Complex64] {
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        &mut self.data[a..b]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Inner product `sum conj(self_i) * other_i`, summed in index order so
    /// the result does not depend on the worker count.
    pub fn dot(&self, other: &SkeletonVector) -> Complex64 {
        debug_assert_eq!(self.len(), other.len());
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a.conj() * b;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for a in &self.data {
            acc += a.norm_sqr();
        }
        acc.sqrt()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(Complex64::new(0.0, 0.0));
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: Complex64, x: &SkeletonVector) {
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: Complex64) {
        for a in self.data.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn block_dims(&self) -> Vec<usize> {
        (0..self.num_blocks()).map(|k| self.block_dim(k)).collect()
    }
}

/// What the boundary data `g` is on a tag.
#[derive(Debug, Clone)]
pub enum BoundaryData {
    /// Homogeneous data, `g = 0`.
    Zero,
    /// Data manufactured so that the given plane wave satisfies the
    /// impedance condition on this tag: `g = F^-(E) - Q F^+(E)`.
    PlaneWave(PlaneWave),
}

/// Boundary condition attached to one tag.
#[derive(Debug, Clone)]
pub struct BoundarySpec {
    /// Reflection coefficient, `|Q| <= 1`; `Q = 0` is fully absorbing,
    /// `Q = 1` the perfect electric conductor limit.
    pub q: f64,
    /// Impedance weight on faces of this tag.
    pub lambda: f64,
    pub data: BoundaryData,
}

/// Boundary specifications per tag plus the interior impedance weight.
#[derive(Debug, Clone)]
pub struct BoundaryConditions {
    pub interior_lambda: f64,
    specs: BTreeMap<i32, BoundarySpec>,
}

impl BoundaryConditions {
    pub fn new(interior_lambda: f64) -> Self {
        BoundaryConditions { interior_lambda, specs: BTreeMap::new() }
    }

    /// Same (Q, lambda, data) on every tag of the mesh.
    pub fn uniform(mesh: &Mesh, q: f64, lambda: f64, data: BoundaryData) -> Self {
        let mut bcs = BoundaryConditions::new(lambda);
        let mut tags: Vec<i32> =
            mesh.faces.iter().filter_map(|f| f.boundary_tag).collect();
        tags.sort_unstable();
        tags.dedup();
        for tag in tags {
            bcs.insert(tag, BoundarySpec { q, lambda, data: clone_data(&data) });
        }
        bcs
    }

    pub fn insert(&mut self, tag: i32, spec: BoundarySpec) {
        self.specs.insert(tag, spec);
    }

    pub fn spec_for(&self, tag: i32) -> Result<&BoundarySpec, AssemblyError> {
        self.specs.get(&tag).ok_or(AssemblyError::MissingBoundarySpec(tag))
    }

    pub fn tags(&self) -> impl Iterator<Item = i32> + '_ {
        self.specs.keys().copied()
    }

    /// Impedance weight on a face: the tag's weight on boundary faces, the
    /// interior weight elsewhere.
    pub fn lambda_for(&self, mesh: &Mesh, face: usize) -> Result<f64, AssemblyError> {
        match mesh.faces[face].boundary_tag {
            Some(tag) => Ok(self.spec_for(tag)?.lambda),
            None => Ok(self.interior_lambda),
        }
    }

    fn validate(&self, mesh: &Mesh) -> Result<(), AssemblyError> {
        if self.interior_lambda <= 0.0 {
            return Err(AssemblyError::InvalidLambda {
                location: "interior faces".into(),
                lambda: self.interior_lambda,
            });
        }
        for face in mesh.faces.iter().filter(|f| f.is_boundary()) {
            let tag = face.boundary_tag.unwrap();
            let spec = self.spec_for(tag)?;
            if spec.q.abs() > 1.0 {
                return Err(AssemblyError::InvalidQ { tag, q: spec.q });
            }
            if spec.lambda <= 0.0 {
                return Err(AssemblyError::InvalidLambda {
                    location: format!("boundary tag {tag}"),
                    lambda: spec.lambda,
                });
            }
        }
        Ok(())
    }
}

fn clone_data(data: &BoundaryData) -> BoundaryData {
    match data {
        BoundaryData::Zero => BoundaryData::Zero,
        BoundaryData::PlaneWave(w) => BoundaryData::PlaneWave(*w),
    }
}

/// One off-diagonal (or boundary diagonal) block of the coupling operator.
#[derive(Debug, Clone)]
pub struct CouplingBlock {
    /// Test (row) element.
    pub row: usize,
    /// Trial (column) element; equals `row` for boundary blocks.
    pub col: usize,
    /// Face the block integrates over.
    pub face: usize,
    pub matrix: DMatrix<Complex64>,
}

/// The assembled block system `D chi = C chi + b`.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub kappa: f64,
    pub dims: Vec<usize>,
    pub d_blocks: Vec<DMatrix<Complex64>>,
    pub coupling: Vec<CouplingBlock>,
    pub rhs: SkeletonVector,
    /// Quadrature order used on each face.
    pub face_orders: Vec<usize>,
    pub warnings: Vec<String>,
    row_blocks: Vec<Vec<usize>>,
}

impl AssembledSystem {
    /// Build a system directly from its blocks (used by tests and external
    /// verification tooling).
    pub fn from_parts(
        kappa: f64,
        dims: Vec<usize>,
        d_blocks: Vec<DMatrix<Complex64>>,
        coupling: Vec<CouplingBlock>,
        rhs: SkeletonVector,
        face_orders: Vec<usize>,
        warnings: Vec<String>,
    ) -> Self {
        let mut row_blocks = vec![Vec::new(); dims.len()];
        for (i, blk) in coupling.iter().enumerate() {
            row_blocks[blk.row].push(i);
        }
        AssembledSystem { kappa, dims, d_blocks, coupling, rhs, face_orders, warnings, row_blocks }
    }

    pub fn num_elements(&self) -> usize {
        self.dims.len()
    }

    pub fn dof_count(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn zeros_like(&self) -> SkeletonVector {
        SkeletonVector::zeros(&self.dims)
    }

    /// `y = C x`, parallel over row elements; within a row, blocks are
    /// applied in a fixed order so results are identical at any worker count.
    pub fn apply_coupling(&self, x: &SkeletonVector, y: &mut SkeletonVector) {
        let offsets: Vec<usize> = (0..self.num_elements()).map(|k| x.offsets[k]).collect();
        let dims = &self.dims;
        let coupling = &self.coupling;
        let row_blocks = &self.row_blocks;
        let xdata = &x.data;
        let ydata = y.as_mut_slice();
        // Partition y into disjoint row blocks for parallel writes.
        let mut slices: Vec<&mut [Complex64]> = Vec::with_capacity(dims.len());
        let mut rest = ydata;
        for &d in dims.iter() {
            let (head, tail) = rest.split_at_mut(d);
            slices.push(head);
            rest = tail;
        }
        slices.par_iter_mut().enumerate().for_each(|(row, yk)| {
            yk.fill(Complex64::new(0.0, 0.0));
            for &bi in &row_blocks[row] {
                let blk = &coupling[bi];
                let xcol = &xdata[offsets[blk.col]..offsets[blk.col] + dims[blk.col]];
                let m = &blk.matrix;
                for (r, yv) in yk.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (c, xv) in xcol.iter().enumerate() {
                        acc += m[(r, c)] * xv;
                    }
                    *yv += acc;
                }
            }
        });
    }

    /// Dense coupling matrix (small meshes only).
    pub fn dense_coupling(&self) -> DMatrix<Complex64> {
        let n = self.dof_count();
        let offsets = self.offsets();
        let mut dense = DMatrix::zeros(n, n);
        for blk in &self.coupling {
            let (r0, c0) = (offsets[blk.row], offsets[blk.col]);
            for r in 0..blk.matrix.nrows() {
                for c in 0..blk.matrix.ncols() {
                    dense[(r0 + r, c0 + c)] += blk.matrix[(r, c)];
                }
            }
        }
        dense
    }

    /// Dense block-diagonal Gram matrix (small meshes only).
    pub fn dense_d(&self) -> DMatrix<Complex64> {
        let n = self.dof_count();
        let offsets = self.offsets();
        let mut dense = DMatrix::zeros(n, n);
        for (k, d) in self.d_blocks.iter().enumerate() {
            let o = offsets[k];
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    dense[(o + r, o + c)] = d[(r, c)];
                }
            }
        }
        dense
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.dims.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for &d in &self.dims {
            total += d;
            offsets.push(total);
        }
        offsets
    }

    /// ASCII dump of all blocks for external verification. Layout:
    /// a header, then `D <elem> <dim>` / `C <row> <col> <face> <rows> <cols>`
    /// / `b <elem> <dim>` sections, each followed by row-major `re im` pairs,
    /// one matrix row (or the whole vector) per line, 17 significant digits.
    pub fn write_debug_dump(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "uwvf system dump v1")?;
        writeln!(out, "kappa {:.16e}", self.kappa)?;
        writeln!(out, "elements {}", self.num_elements())?;
        for (k, d) in self.d_blocks.iter().enumerate() {
            writeln!(out, "D {} {}", k, d.nrows())?;
            for r in 0..d.nrows() {
                let row: Vec<String> = (0..d.ncols())
                    .map(|c| format!("{:.16e} {:.16e}", d[(r, c)].re, d[(r, c)].im))
                    .collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        for blk in &self.coupling {
            writeln!(
                out,
                "C {} {} {} {} {}",
                blk.row,
                blk.col,
                blk.face,
                blk.matrix.nrows(),
                blk.matrix.ncols()
            )?;
            for r in 0..blk.matrix.nrows() {
                let row: Vec<String> = (0..blk.matrix.ncols())
                    .map(|c| format!("{:.16e} {:.16e}", blk.matrix[(r, c)].re, blk.matrix[(r, c)].im))
                    .collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        for k in 0..self.num_elements() {
            writeln!(out, "b {} {}", k, self.dims[k])?;
            let row: Vec<String> = self
                .rhs
                .block(k)
                .iter()
                .map(|v| format!("{:.16e} {:.16e}", v.re, v.im))
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        writeln!(out, "end")
    }
}

/// Total degrees of freedom for given per-element direction counts: two
/// polarizations per direction.
pub fn dof_count(directions_per_element: &[usize]) -> usize {
    directions_per_element.iter().map(|p| 2 * p).sum()
}

/// `sum conj(a_i) b_i`-style product for complex 3-vectors: `a . conj(b)`.
pub(crate) fn dot_conj(a: &CVector3, b: &CVector3) -> Complex64 {
    a.x * b.x.conj() + a.y * b.y.conj() + a.z * b.z.conj()
}

/// Quadrature order for a face. Every integrand here is a product of two
/// plane-wave traces, which oscillates at up to `2 kappa |sqrt(eps_r)|` per
/// unit length, so the order heuristic is fed twice the wavenumber and the
/// largest refractive index among incident elements.
pub fn face_order(
    mesh: &Mesh,
    bases: &[LocalBasis],
    face: usize,
) -> (usize, bool) {
    let f = &mesh.faces[face];
    let kappa = bases[f.incidence[0].0].kappa;
    let eps = f
        .incidence
        .iter()
        .map(|&(k, _)| bases[k].eps_r)
        .max_by(|a, b| a.sqrt().norm().total_cmp(&b.sqrt().norm()))
        .unwrap();
    face_quadrature_order(2.0 * kappa, eps, f.h, DEFAULT_SAFETY_TERMS)
}

/// Both impedance traces of every basis function of `element`, sampled at the
/// face quadrature points (physical weights included, impedance weight not).
struct FaceTraces {
    points: Vec<Point>,
    weights: Vec<f64>,
    /// `[q * dim + n]` layout.
    fplus: Vec<CVector3>,
    fminus: Vec<CVector3>,
    dim: usize,
}

fn face_traces(
    mesh: &Mesh,
    basis: &LocalBasis,
    face: usize,
    element: usize,
    lambda: f64,
    order: usize,
) -> Result<FaceTraces, AssemblyError> {
    let rule = triangle_rule(order)?;
    let verts = mesh.face_vertices(face);
    let local_face = mesh.faces[face]
        .incidence
        .iter()
        .find(|&&(k, _)| k == element)
        .map(|&(_, lf)| lf)
        .expect("element must be incident to the face");
    let nu = mesh.element_normals[element][local_face];
    let dim = basis.dim();
    let mut points = Vec::with_capacity(rule.len());
    let mut weights = Vec::with_capacity(rule.len());
    let mut fplus = Vec::with_capacity(rule.len() * dim);
    let mut fminus = Vec::with_capacity(rule.len() * dim);
    for (x, w) in rule.mapped(&verts) {
        for n in 0..dim {
            let (e, curl) = basis.wave(n).eval(&x);
            fplus.push(impedance_trace_at(&nu, basis.kappa, lambda, TraceSign::Plus, &e, &curl));
            fminus.push(impedance_trace_at(&nu, basis.kappa, lambda, TraceSign::Minus, &e, &curl));
        }
        points.push(x);
        weights.push(w);
    }
    Ok(FaceTraces { points, weights, fplus, fminus, dim })
}

/// The Hermitian Gram block `D_K` of one element.
pub fn assemble_local_d(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
    element: usize,
) -> Result<DMatrix<Complex64>, AssemblyError> {
    let basis = &bases[element];
    let dim = basis.dim();
    let mut d = DMatrix::zeros(dim, dim);
    for &face in &mesh.element_faces[element] {
        let lambda = bcs.lambda_for(mesh, face)?;
        let (order, _) = face_order(mesh, bases, face);
        let tr = face_traces(mesh, basis, face, element, lambda, order)?;
        for (q, &w) in tr.weights.iter().enumerate() {
            let wl = w / lambda;
            let row = &tr.fplus[q * dim..(q + 1) * dim];
            for m in 0..dim {
                for n in 0..dim {
                    d[(m, n)] += dot_conj(&row[n], &row[m]) * wl;
                }
            }
        }
    }
    Ok(d)
}

/// Interior coupling block: traces of the neighbor (column element) tested
/// against the row element's incoming trace, with the leading minus sign.
pub fn assemble_coupling(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
    face: usize,
    row_element: usize,
    col_element: usize,
) -> Result<DMatrix<Complex64>, AssemblyError> {
    assert!(!mesh.faces[face].is_boundary(), "coupling blocks live on interior faces");
    let lambda = bcs.lambda_for(mesh, face)?;
    let (order, _) = face_order(mesh, bases, face);
    let row_tr = face_traces(mesh, &bases[row_element], face, row_element, lambda, order)?;
    let col_tr = face_traces(mesh, &bases[col_element], face, col_element, lambda, order)?;
    let (rd, cd) = (row_tr.dim, col_tr.dim);
    let mut block = DMatrix::zeros(rd, cd);
    for (q, &w) in row_tr.weights.iter().enumerate() {
        let wl = -w / lambda;
        let rrow = &row_tr.fminus[q * rd..(q + 1) * rd];
        let crow = &col_tr.fplus[q * cd..(q + 1) * cd];
        for m in 0..rd {
            for n in 0..cd {
                block[(m, n)] += dot_conj(&crow[n], &rrow[m]) * wl;
            }
        }
    }
    Ok(block)
}

/// Boundary self-coupling block `Q * int (1/lambda) F+_n . conj(F-_m)`.
pub fn assemble_boundary(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
    face: usize,
    element: usize,
) -> Result<DMatrix<Complex64>, AssemblyError> {
    let tag = mesh.faces[face].boundary_tag.expect("boundary block needs a boundary face");
    let spec = bcs.spec_for(tag)?;
    let lambda = spec.lambda;
    let (order, _) = face_order(mesh, bases, face);
    let tr = face_traces(mesh, &bases[element], face, element, lambda, order)?;
    let dim = tr.dim;
    let mut block = DMatrix::zeros(dim, dim);
    if spec.q == 0.0 {
        return Ok(block);
    }
    for (q, &w) in tr.weights.iter().enumerate() {
        let wl = spec.q * w / lambda;
        let minus = &tr.fminus[q * dim..(q + 1) * dim];
        let plus = &tr.fplus[q * dim..(q + 1) * dim];
        for m in 0..dim {
            for n in 0..dim {
                block[(m, n)] += dot_conj(&plus[n], &minus[m]) * wl;
            }
        }
    }
    Ok(block)
}

/// Data block `b_m = int_F (1/lambda) g . conj(F-_m)`; rejects `g` with a
/// normal component above 1e-10 relative at any quadrature point.
pub fn assemble_rhs_block(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
    face: usize,
    element: usize,
    g: &dyn Fn(&Point) -> CVector3,
) -> Result<DVector<Complex64>, AssemblyError> {
    let lambda = bcs.lambda_for(mesh, face)?;
    let (order, _) = face_order(mesh, bases, face);
    let tr = face_traces(mesh, &bases[element], face, element, lambda, order)?;
    let local_face = mesh.faces[face]
        .incidence
        .iter()
        .find(|&&(k, _)| k == element)
        .map(|&(_, lf)| lf)
        .unwrap();
    let nu = mesh.element_normals[element][local_face];
    let dim = tr.dim;
    let mut b = DVector::zeros(dim);
    for (q, (&w, x)) in tr.weights.iter().zip(&tr.points).enumerate() {
        let gv = g(x);
        let normal_part = (Complex64::new(nu.x, 0.0) * gv.x
            + Complex64::new(nu.y, 0.0) * gv.y
            + Complex64::new(nu.z, 0.0) * gv.z)
            .norm();
        if normal_part > 1e-10 * gv.norm().max(1.0) {
            return Err(AssemblyError::NonTangentialData { face, magnitude: normal_part });
        }
        let wl = w / lambda;
        let minus = &tr.fminus[q * dim..(q + 1) * dim];
        for m in 0..dim {
            b[m] += dot_conj(&gv, &minus[m]) * wl;
        }
    }
    Ok(b)
}

/// Resolve the data evaluator for a boundary face from its tag's spec.
/// Returns `None` for homogeneous data.
fn boundary_data_evaluator(
    mesh: &Mesh,
    spec: &BoundarySpec,
    face: usize,
    element: usize,
) -> Option<impl Fn(&Point) -> CVector3> {
    let wave = match &spec.data {
        BoundaryData::Zero => return None,
        BoundaryData::PlaneWave(w) => *w,
    };
    let local_face = mesh.faces[face]
        .incidence
        .iter()
        .find(|&&(k, _)| k == element)
        .map(|&(_, lf)| lf)
        .unwrap();
    let nu = mesh.element_normals[element][local_face];
    let (q, lambda) = (spec.q, spec.lambda);
    Some(move |x: &Point| {
        let (e, curl) = wave.eval(x);
        let fminus = impedance_trace_at(&nu, wave.kappa, lambda, TraceSign::Minus, &e, &curl);
        let fplus = impedance_trace_at(&nu, wave.kappa, lambda, TraceSign::Plus, &e, &curl);
        fminus - fplus.map(|c| Complex64::new(q, 0.0) * c)
    })
}

/// Assemble the full system. Parallel over elements (D) and faces (C, b);
/// every output block is produced by exactly one task and reductions happen
/// in fixed index order, so the result is identical at any worker count and
/// independent of element traversal order.
pub fn assemble_system(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
) -> Result<AssembledSystem, AssemblyError> {
    assert_eq!(bases.len(), mesh.num_elements(), "one basis per element");
    for (k, basis) in bases.iter().enumerate() {
        if basis.element != k {
            return Err(AssemblyError::MismatchedBasis { element: k, basis_element: basis.element });
        }
    }
    bcs.validate(mesh)?;
    let kappa = bases.first().map(|b| b.kappa).unwrap_or(0.0);
    let dims: Vec<usize> = bases.iter().map(|b| b.dim()).collect();

    // Clamped-order warnings, gathered in face order.
    let mut warnings = Vec::new();
    let mut face_orders = Vec::with_capacity(mesh.faces.len());
    for f in 0..mesh.faces.len() {
        let (order, clamped) = face_order(mesh, bases, f);
        if clamped {
            let fv = mesh.faces[f].vertices;
            warnings.push(format!(
                "face ({}, {}, {}): quadrature order clamped at {order}; accuracy may degrade",
                fv[0], fv[1], fv[2]
            ));
        }
        face_orders.push(order);
    }

    let d_blocks: Vec<DMatrix<Complex64>> = (0..mesh.num_elements())
        .into_par_iter()
        .map(|k| assemble_local_d(mesh, bases, bcs, k))
        .collect::<Result<_, _>>()?;

    // One task per directed coupling block, in deterministic face order.
    let mut jobs: Vec<(usize, usize, usize, bool)> = Vec::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        match face.incidence[..] {
            [(k0, _), (k1, _)] => {
                jobs.push((f, k0, k1, false));
                jobs.push((f, k1, k0, false));
            }
            [(k0, _)] => {
                let spec = bcs.spec_for(face.boundary_tag.unwrap())?;
                if spec.q != 0.0 {
                    jobs.push((f, k0, k0, true));
                }
            }
            _ => unreachable!("faces have one or two incident elements"),
        }
    }
    let coupling: Vec<CouplingBlock> = jobs
        .par_iter()
        .map(|&(f, row, col, boundary)| {
            let matrix = if boundary {
                assemble_boundary(mesh, bases, bcs, f, row)?
            } else {
                assemble_coupling(mesh, bases, bcs, f, row, col)?
            };
            Ok(CouplingBlock { row, col, face: f, matrix })
        })
        .collect::<Result<_, AssemblyError>>()?;

    let mut row_blocks = vec![Vec::new(); mesh.num_elements()];
    for (i, blk) in coupling.iter().enumerate() {
        row_blocks[blk.row].push(i);
    }

    // Right-hand side: parallel per boundary face, then sequential
    // accumulation in face order.
    let rhs_parts: Vec<Option<(usize, DVector<Complex64>)>> = (0..mesh.faces.len())
        .into_par_iter()
        .map(|f| {
            let face = &mesh.faces[f];
            let tag = match face.boundary_tag {
                Some(t) => t,
                None => return Ok(None),
            };
            let element = face.incidence[0].0;
            let spec = bcs.spec_for(tag)?;
            match boundary_data_evaluator(mesh, spec, f, element) {
                Some(g) => {
                    let block = assemble_rhs_block(mesh, bases, bcs, f, element, &g)?;
                    Ok(Some((element, block)))
                }
                None => Ok(None),
            }
        })
        .collect::<Result<_, AssemblyError>>()?;
    let mut rhs = SkeletonVector::zeros(&dims);
    for part in rhs_parts.into_iter().flatten() {
        let (element, block) = part;
        for (slot, value) in rhs.block_mut(element).iter_mut().zip(block.iter()) {
            *slot += value;
        }
    }

    Ok(AssembledSystem {
        kappa,
        dims,
        d_blocks,
        coupling,
        rhs,
        face_orders,
        warnings,
        row_blocks,
    })
}
