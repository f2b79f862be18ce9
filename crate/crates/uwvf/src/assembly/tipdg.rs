//! Trefftz interior-penalty DG assembly, used to cross-validate the
//! impedance-trace system.
//!
//! Because the basis functions solve the homogeneous equation element-wise,
//! the volume terms of the interior-penalty form cancel by double integration
//! by parts and only face integrals remain: for each element `K` and test
//! function `xi`,
//!
//! `sum_{F in dK} int_F [ (nu_K x hcurl) . conj(xi_T)
//!                      + (nu_K x hE) . conj((curl xi)_T) ] dA = 0`
//!
//! with single-valued numerical fluxes on interior faces
//!
//! `hcurl = {{curl E}} - i kappa lambda alpha [[E]]`,
//! `hE    = {{E}} + (beta / (i kappa lambda)) [[curl E]]`,
//!
//! `[[v]] = nu_+ x v_+ + nu_- x v_-`, `{{v}} = (v_+ + v_-)/2`, and on a
//! boundary face with reflection coefficient `Q` and data `g`, writing
//! `R = F^-(E) - Q F^+(E) - g` for the residual of the impedance condition,
//!
//! `nu x hcurl = nu x curl E - delta R`,
//! `nu x hE    = nu x E + (delta / (i kappa lambda)) nu x R`.
//!
//! At `alpha = beta = delta = 1/2` the elemental equations equal
//! `-1/(2 i kappa)` times the impedance-trace equations `(D - C) chi = b`
//! face by face, for any `lambda > 0`; `equivalence_scaled` applies the
//! `-2 i kappa` factor so the two systems can be compared entry by entry.

use super::{AssembledSystem, AssemblyError, BoundaryConditions, BoundaryData, SkeletonVector};
use crate::mesh::Mesh;
use crate::planewave::{nu_cross, tangential, CVector3, LocalBasis};
use crate::quadrature::triangle_rule;
use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;

/// Weights of the numerical fluxes.
#[derive(Debug, Clone, Copy)]
pub struct TipdgParams {
    /// Penalty weight on the tangential jump of the field.
    pub alpha: f64,
    /// Weight on the jump of the curl in the field flux.
    pub beta: f64,
    /// Boundary-residual weight.
    pub delta: f64,
}

impl TipdgParams {
    /// The parameter choice under which the scheme reproduces the
    /// impedance-trace system exactly.
    pub fn uwvf_equivalent() -> Self {
        TipdgParams { alpha: 0.5, beta: 0.5, delta: 0.5 }
    }
}

/// Dense square system `M c = rhs` over the same element-blocked coefficient
/// layout as the impedance-trace system.
#[derive(Debug, Clone)]
pub struct TipdgSystem {
    pub matrix: DMatrix<Complex64>,
    pub rhs: DVector<Complex64>,
    pub dims: Vec<usize>,
    pub kappa: f64,
}

impl TipdgSystem {
    pub fn dof_count(&self) -> usize {
        self.dims.iter().sum()
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

    /// Direct dense solve.
    pub fn solve(&self) -> Option<SkeletonVector> {
        let x = self.matrix.clone().lu().solve(&self.rhs)?;
        let mut out = SkeletonVector::zeros(&self.dims);
        out.as_mut_slice().copy_from_slice(x.as_slice());
        Some(out)
    }

    /// `(-2 i kappa) * (matrix, rhs)`: with the equivalent parameter choice
    /// this matches `(D - C, b)` of the impedance-trace system.
    pub fn equivalence_scaled(&self) -> (DMatrix<Complex64>, DVector<Complex64>) {
        let scale = Complex64::new(0.0, -2.0 * self.kappa);
        (self.matrix.map(|v| scale * v), self.rhs.map(|v| scale * v))
    }
}

/// Sampled values and curls of every basis function of one face side.
struct SideValues {
    element: usize,
    nu: Vector3<f64>,
    /// `[q * dim + n]` layout.
    e: Vec<CVector3>,
    curl: Vec<CVector3>,
    dim: usize,
}

fn side_values(
    mesh: &Mesh,
    basis: &LocalBasis,
    face: usize,
    element: usize,
    points: &[crate::mesh::Point],
) -> SideValues {
    let local_face = mesh.faces[face]
        .incidence
        .iter()
        .find(|&&(k, _)| k == element)
        .map(|&(_, lf)| lf)
        .expect("element must be incident to the face");
    let nu = mesh.element_normals[element][local_face];
    let dim = basis.dim();
    let mut e = Vec::with_capacity(points.len() * dim);
    let mut curl = Vec::with_capacity(points.len() * dim);
    for x in points {
        for n in 0..dim {
            let (ev, cv) = basis.wave(n).eval(x);
            e.push(ev);
            curl.push(cv);
        }
    }
    SideValues { element, nu, e, curl, dim }
}

/// Assemble the interior-penalty system. With `equivalence_check` set, the
/// run refuses complex permittivities, for which the equivalence with the
/// impedance-trace system does not hold.
pub fn assemble_tipdg(
    mesh: &Mesh,
    bases: &[LocalBasis],
    bcs: &BoundaryConditions,
    params: TipdgParams,
    equivalence_check: bool,
) -> Result<TipdgSystem, AssemblyError> {
    assert_eq!(bases.len(), mesh.num_elements(), "one basis per element");
    if equivalence_check {
        for basis in bases {
            if basis.eps_r.im != 0.0 {
                return Err(AssemblyError::ComplexPermittivityInEquivalenceMode {
                    element: basis.element,
                    re: basis.eps_r.re,
                    im: basis.eps_r.im,
                });
            }
        }
    }
    let kappa = bases.first().map(|b| b.kappa).unwrap_or(0.0);
    let dims: Vec<usize> = bases.iter().map(|b| b.dim()).collect();
    let offsets = {
        let mut o = Vec::with_capacity(dims.len() + 1);
        let mut t = 0;
        o.push(0);
        for &d in &dims {
            t += d;
            o.push(t);
        }
        o
    };
    let n = *offsets.last().unwrap();
    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    let mut rhs = DVector::<Complex64>::zeros(n);
    let i_unit = Complex64::i();

    for (f, face) in mesh.faces.iter().enumerate() {
        let lambda = bcs.lambda_for(mesh, f)?;
        let (order, _) = super::face_order(mesh, bases, f);
        let rule = triangle_rule(order)?;
        let verts = mesh.face_vertices(f);
        let mapped: Vec<(crate::mesh::Point, f64)> = rule.mapped(&verts).collect();
        let points: Vec<crate::mesh::Point> = mapped.iter().map(|&(x, _)| x).collect();
        let iklam = i_unit * (kappa * lambda);

        if face.is_boundary() {
            let (k0, _) = face.incidence[0];
            let side = side_values(mesh, &bases[k0], f, k0, &points);
            let spec = bcs.spec_for(face.boundary_tag.unwrap())?;
            let q = Complex64::new(spec.q, 0.0);
            let delta = Complex64::new(params.delta, 0.0);
            let nu = side.nu;
            let dim = side.dim;
            let o = offsets[k0];
            for (qi, &(_, w)) in mapped.iter().enumerate() {
                let wq = Complex64::new(w, 0.0);
                for nn in 0..dim {
                    let ev = &side.e[qi * dim + nn];
                    let cv = &side.curl[qi * dim + nn];
                    let nu_x_c = nu_cross(&nu, cv);
                    let et = tangential(&nu, ev);
                    // Residual of the impedance condition for this trial
                    // function: (1-Q) nu x curl - i kappa lambda (1+Q) E_T.
                    let r = nu_x_c.map(|v| (Complex64::new(1.0, 0.0) - q) * v)
                        - et.map(|v| iklam * (Complex64::new(1.0, 0.0) + q) * v);
                    let flux_curl = nu_x_c - r.map(|v| delta * v);
                    let nu_x_e = nu_cross(&nu, ev);
                    let flux_e = nu_x_e + nu_cross(&nu, &r).map(|v| delta / iklam * v);
                    for m in 0..dim {
                        let te = tangential(&nu, &side.e[qi * dim + m]);
                        let tc = tangential(&nu, &side.curl[qi * dim + m]);
                        let val = super::dot_conj(&flux_curl, &te) + super::dot_conj(&flux_e, &tc);
                        matrix[(o + m, o + nn)] += wq * val;
                    }
                }
                // Data terms: the -g part of the residual, moved to the
                // right-hand side with flipped sign.
                if let BoundaryData::PlaneWave(wave) = &spec.data {
                    let x = &points[qi];
                    let (ew, cw) = wave.eval(x);
                    let fminus = crate::planewave::impedance_trace_at(
                        &nu,
                        wave.kappa,
                        lambda,
                        crate::planewave::TraceSign::Minus,
                        &ew,
                        &cw,
                    );
                    let fplus = crate::planewave::impedance_trace_at(
                        &nu,
                        wave.kappa,
                        lambda,
                        crate::planewave::TraceSign::Plus,
                        &ew,
                        &cw,
                    );
                    let g = fminus - fplus.map(|v| q * v);
                    let flux_curl_g = g.map(|v| delta * v);
                    let flux_e_g = nu_cross(&nu, &g).map(|v| -(delta / iklam) * v);
                    for m in 0..dim {
                        let te = tangential(&nu, &side.e[qi * dim + m]);
                        let tc = tangential(&nu, &side.curl[qi * dim + m]);
                        let val =
                            super::dot_conj(&flux_curl_g, &te) + super::dot_conj(&flux_e_g, &tc);
                        rhs[o + m] -= wq * val;
                    }
                }
            }
            continue;
        }

        let (k0, _) = face.incidence[0];
        let (k1, _) = face.incidence[1];
        let sides =
            [side_values(mesh, &bases[k0], f, k0, &points), side_values(mesh, &bases[k1], f, k1, &points)];
        let alpha = Complex64::new(params.alpha, 0.0);
        let beta = Complex64::new(params.beta, 0.0);
        let half = Complex64::new(0.5, 0.0);
        for (qi, &(_, w)) in mapped.iter().enumerate() {
            let wq = Complex64::new(w, 0.0);
            for trial in &sides {
                let tdim = trial.dim;
                let to = offsets[trial.element];
                for nn in 0..tdim {
                    let ev = &trial.e[qi * tdim + nn];
                    let cv = &trial.curl[qi * tdim + nn];
                    // Single-valued flux contributions of this trial
                    // function; the jump picks up the trial side's normal.
                    let flux_curl =
                        cv.map(|v| half * v) - nu_cross(&trial.nu, ev).map(|v| iklam * alpha * v);
                    let flux_e =
                        ev.map(|v| half * v) + nu_cross(&trial.nu, cv).map(|v| beta / iklam * v);
                    for test in &sides {
                        let sdim = test.dim;
                        let so = offsets[test.element];
                        let nu_x_fc = nu_cross(&test.nu, &flux_curl);
                        let nu_x_fe = nu_cross(&test.nu, &flux_e);
                        for m in 0..sdim {
                            let te = tangential(&test.nu, &test.e[qi * sdim + m]);
                            let tc = tangential(&test.nu, &test.curl[qi * sdim + m]);
                            let val =
                                super::dot_conj(&nu_x_fc, &te) + super::dot_conj(&nu_x_fe, &tc);
                            matrix[(so + m, to + nn)] += wq * val;
                        }
                    }
                }
            }
        }
    }

    Ok(TipdgSystem { matrix, rhs, dims, kappa })
}

/// `(D - C)` and `b` of an assembled impedance-trace system as dense objects,
/// for entrywise comparison against `equivalence_scaled`.
pub fn dense_trace_system(system: &AssembledSystem) -> (DMatrix<Complex64>, DVector<Complex64>) {
    let m = system.dense_d() - system.dense_coupling();
    let b = DVector::from_column_slice(system.rhs.as_slice());
    (m, b)
}
