//! Field reconstruction from skeleton coefficients, manufactured boundary
//! data, error norms, and slice sampling for output.
//!
//! The solution coefficients multiply traces of actual plane waves, so the
//! same coefficients reconstruct the volumetric field directly as a
//! plane-wave expansion per element.

use crate::assembly::SkeletonVector;
use crate::mesh::{Mesh, Point};
use crate::planewave::{impedance_trace_at, CVector3, LocalBasis, PlaneWave, TraceSign};
use crate::quadrature::{
    face_quadrature_order, tet_rule, triangle_rule, QuadratureError, DEFAULT_SAFETY_TERMS,
};
use nalgebra::Vector3;
use num_complex::Complex64;
use rayon::prelude::*;
use std::io::Write;
use thiserror::Error;

/// Barycentric tolerance for point-in-element tests; boundary points belong
/// to the lowest-index incident element.
pub const LOCATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("point ({x:.6}, {y:.6}, {z:.6}) lies outside element {element}")]
    PointOutsideElement { element: usize, x: f64, y: f64, z: f64 },
    #[error("element {element} has permittivity {basis_eps} but the exact solution was built for {exact_eps}")]
    InconsistentPermittivity { element: usize, basis_eps: Complex64, exact_eps: Complex64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// A closed-form solution of `curl curl E - kappa^2 eps_r E = 0`: a plane
/// wave in a homogeneous medium (direct branch, `sqrt(eps_r)` refraction).
#[derive(Debug, Clone, Copy)]
pub struct ExactSolution {
    wave: PlaneWave,
}

impl ExactSolution {
    pub fn plane_wave(
        direction: Vector3<f64>,
        polarization: Vector3<f64>,
        kappa: f64,
        eps_r: Complex64,
    ) -> Self {
        ExactSolution { wave: PlaneWave::new(direction, polarization, kappa, eps_r, false) }
    }

    pub fn with_amplitude(mut self, amplitude: Complex64) -> Self {
        self.wave = self.wave.with_amplitude(amplitude);
        self
    }

    pub fn kappa(&self) -> f64 {
        self.wave.kappa
    }

    pub fn eps_r(&self) -> Complex64 {
        self.wave.eps_r
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.wave.direction
    }

    /// Field and curl at a point.
    pub fn eval(&self, x: &Point) -> (CVector3, CVector3) {
        self.wave.eval(x)
    }
}

/// Evaluate the discrete field of element `k` at `x`, which must lie in the
/// element (up to the locate tolerance).
pub fn reconstruct_field(
    mesh: &Mesh,
    bases: &[LocalBasis],
    chi: &SkeletonVector,
    element: usize,
    x: &Point,
) -> Result<CVector3, PostprocessError> {
    if mesh.barycentric(element, x).iter().any(|&b| b < -LOCATE_TOLERANCE) {
        return Err(PostprocessError::PointOutsideElement {
            element,
            x: x.x,
            y: x.y,
            z: x.z,
        });
    }
    let (e, _) = bases[element].eval_expansion(chi.block(element), x);
    Ok(e)
}

/// Boundary data that makes the exact solution satisfy the impedance
/// condition with reflection coefficient `Q` on a face with outward normal
/// `nu`: `g = F^-(E) - Q F^+(E)`; tangential by construction.
pub fn manufacture_boundary_data(
    exact: &ExactSolution,
    nu: Vector3<f64>,
    q: f64,
    lambda: f64,
) -> impl Fn(&Point) -> CVector3 + '_ {
    let kappa = exact.kappa();
    move |x: &Point| {
        let (e, curl) = exact.eval(x);
        let fminus = impedance_trace_at(&nu, kappa, lambda, TraceSign::Minus, &e, &curl);
        let fplus = impedance_trace_at(&nu, kappa, lambda, TraceSign::Plus, &e, &curl);
        fminus - fplus.map(|v| Complex64::new(q, 0.0) * v)
    }
}

/// Absolute and relative errors of the discrete field against an exact
/// solution.
#[derive(Debug, Clone, Copy)]
pub struct ErrorNorms {
    /// `||E_h - E||_{L2(Omega)}`.
    pub volume_absolute: f64,
    /// Volume error over `||E||_{L2(Omega)}`.
    pub volume_relative: f64,
    /// Outgoing impedance-trace error over all element boundaries,
    /// `(sum_K sum_{F in dK} int_F (1/lambda) |F^+(E_h - E)|^2)^{1/2}`.
    pub trace_absolute: f64,
    /// Trace error over the same norm of the exact solution.
    pub trace_relative: f64,
}

/// Compute volume and trace error norms. The volume rule order follows the
/// same oscillation heuristic as assembly (products of waves, rate
/// `2 kappa |sqrt(eps_r)|`) applied with the element diameter.
pub fn error_norms(
    mesh: &Mesh,
    bases: &[LocalBasis],
    chi: &SkeletonVector,
    exact: &ExactSolution,
) -> Result<ErrorNorms, PostprocessError> {
    for basis in bases {
        if basis.eps_r != exact.eps_r() {
            return Err(PostprocessError::InconsistentPermittivity {
                element: basis.element,
                basis_eps: basis.eps_r,
                exact_eps: exact.eps_r(),
            });
        }
    }
    let kappa = exact.kappa();
    let per_element: Vec<Result<[f64; 4], PostprocessError>> = (0..mesh.num_elements())
        .into_par_iter()
        .map(|k| {
            let basis = &bases[k];
            let lambda = basis.lambda;
            let (order, _) = face_quadrature_order(
                2.0 * kappa,
                basis.eps_r,
                mesh.element_h(k),
                DEFAULT_SAFETY_TERMS,
            );
            let rule = tet_rule(order)?;
            let verts = mesh.element_vertices(k);
            let mut err2 = 0.0;
            let mut norm2 = 0.0;
            for (x, w) in rule.mapped(&verts) {
                let (eh, _) = basis.eval_expansion(chi.block(k), &x);
                let (ex, _) = exact.eval(&x);
                err2 += w * (eh - ex).norm_squared();
                norm2 += w * ex.norm_squared();
            }
            let mut trace_err2 = 0.0;
            let mut trace_norm2 = 0.0;
            for lf in 0..4 {
                let face = mesh.element_faces[k][lf];
                let nu = mesh.element_normals[k][lf];
                let (order, _) = crate::assembly::face_order(mesh, bases, face);
                let rule = triangle_rule(order)?;
                let fverts = mesh.face_vertices(face);
                for (x, w) in rule.mapped(&fverts) {
                    let (eh, ch) = basis.eval_expansion(chi.block(k), &x);
                    let (ex, cx) = exact.eval(&x);
                    let diff = impedance_trace_at(
                        &nu,
                        kappa,
                        lambda,
                        TraceSign::Plus,
                        &(eh - ex),
                        &(ch - cx),
                    );
                    let reference =
                        impedance_trace_at(&nu, kappa, lambda, TraceSign::Plus, &ex, &cx);
                    trace_err2 += w / lambda * diff.norm_squared();
                    trace_norm2 += w / lambda * reference.norm_squared();
                }
            }
            Ok([err2, norm2, trace_err2, trace_norm2])
        })
        .collect();
    let mut sums = [0.0f64; 4];
    for part in per_element {
        let part = part?;
        for (s, v) in sums.iter_mut().zip(part) {
            *s += v;
        }
    }
    let volume_absolute = sums[0].max(0.0).sqrt();
    let volume_norm = sums[1].max(0.0).sqrt();
    let trace_absolute = sums[2].max(0.0).sqrt();
    let trace_norm = sums[3].max(0.0).sqrt();
    Ok(ErrorNorms {
        volume_absolute,
        volume_relative: if volume_norm > 0.0 { volume_absolute / volume_norm } else { volume_absolute },
        trace_absolute,
        trace_relative: if trace_norm > 0.0 { trace_absolute / trace_norm } else { trace_absolute },
    })
}

/// One sampled field value; `element` is `None` outside the mesh.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample {
    pub point: Point,
    pub e: CVector3,
    pub element: Option<usize>,
}

/// A sampling plane: `origin + u * span_u + v * span_v` for `u, v` in
/// `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct SlicePlane {
    pub origin: Point,
    pub span_u: Vector3<f64>,
    pub span_v: Vector3<f64>,
}

/// Sample the reconstructed field on an `nu x nv` grid over the plane
/// (v-major row order). Points outside every element get a zero field and no
/// element id.
pub fn sample_slice(
    mesh: &Mesh,
    bases: &[LocalBasis],
    chi: &SkeletonVector,
    plane: &SlicePlane,
    nu: usize,
    nv: usize,
) -> Vec<FieldSample> {
    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let points: Vec<Point> = (0..nv)
        .flat_map(|iv| {
            (0..nu).map(move |iu| (coord(iu, nu), coord(iv, nv)))
        })
        .map(|(u, v)| plane.origin + plane.span_u * u + plane.span_v * v)
        .collect();
    points
        .par_iter()
        .map(|x| match mesh.locate_point(x, LOCATE_TOLERANCE) {
            Some(k) => {
                let (e, _) = bases[k].eval_expansion(chi.block(k), x);
                FieldSample { point: *x, e, element: Some(k) }
            }
            None => FieldSample { point: *x, e: CVector3::zeros(), element: None },
        })
        .collect()
}

/// Write samples as CSV with a header row; the last column holds the owning
/// element id or `outside`.
pub fn write_slice_csv(samples: &[FieldSample], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "x,y,z,ReEx,ImEx,ReEy,ImEy,ReEz,ImEz,element")?;
    for s in samples {
        let element = match s.element {
            Some(k) => k.to_string(),
            None => "outside".to_string(),
        };
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            s.point.x,
            s.point.y,
            s.point.z,
            s.e.x.re,
            s.e.x.im,
            s.e.y.re,
            s.e.y.im,
            s.e.z.re,
            s.e.z.im,
            element
        )?;
    }
    Ok(())
}

/// Self-check helper used in tests and documentation examples: the residual
/// of the impedance boundary condition for a manufactured `g` at one point.
pub fn boundary_condition_residual(
    exact: &ExactSolution,
    nu: &Vector3<f64>,
    q: f64,
    lambda: f64,
    g: &CVector3,
    x: &Point,
) -> f64 {
    let (e, curl) = exact.eval(x);
    let kappa = exact.kappa();
    let fminus = impedance_trace_at(nu, kappa, lambda, TraceSign::Minus, &e, &curl);
    let fplus = impedance_trace_at(nu, kappa, lambda, TraceSign::Plus, &e, &curl);
    let residual = fminus - fplus.map(|v| Complex64::new(q, 0.0) * v) - g;
    residual.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{reference_tet_mesh, two_tet_mesh};
    use crate::planewave::{build_local_bases, tangential, MaterialTable};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bases_for(mesh: &Mesh, p: usize, kappa: f64, eps: Complex64, lambda: f64) -> Vec<LocalBasis> {
        let materials = MaterialTable::uniform(0, eps);
        build_local_bases(mesh, &materials, &vec![p; mesh.num_elements()], kappa, lambda).unwrap()
    }

    #[test]
    fn exact_solution_satisfies_the_field_equation() {
        let exact = ExactSolution::plane_wave(
            Vector3::new(0.6, 0.64, 0.48),
            Vector3::new(0.0, 0.6, -0.8),
            3.0,
            c(2.0, 0.0),
        )
        .with_amplitude(c(0.3, 1.1));
        let x = Point::new(0.21, -0.35, 0.4);
        let h = 1e-5;
        // curl curl E at x by central differences of the analytic curl.
        let mut curl_curl = CVector3::zeros();
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let (_, cp) = exact.eval(&xp);
            let (_, cm) = exact.eval(&xm);
            let dc = (cp - cm).map(|v| v / c(2.0 * h, 0.0));
            match axis {
                0 => {
                    curl_curl.y -= dc.z;
                    curl_curl.z += dc.y;
                }
                1 => {
                    curl_curl.x += dc.z;
                    curl_curl.z -= dc.x;
                }
                _ => {
                    curl_curl.x -= dc.y;
                    curl_curl.y += dc.x;
                }
            }
        }
        let (e, _) = exact.eval(&x);
        let want = e.map(|v| c(9.0, 0.0) * c(2.0, 0.0) * v);
        let scale = want.norm().max(1.0);
        assert!(
            (curl_curl - want).norm() / scale < 1e-6,
            "field equation residual {:.3e}",
            (curl_curl - want).norm() / scale
        );
    }

    #[test]
    fn reconstruction_reproduces_single_basis_functions() {
        let mesh = reference_tet_mesh();
        let bases = bases_for(&mesh, 3, 2.0, c(1.0, 0.0), 1.0);
        let mut chi = SkeletonVector::zeros(&[bases[0].dim()]);
        chi.block_mut(0)[2] = c(1.0, 0.0);
        let x = Point::new(0.2, 0.3, 0.1);
        let got = reconstruct_field(&mesh, &bases, &chi, 0, &x).unwrap();
        let (want, _) = bases[0].wave(2).eval(&x);
        assert!((got - want).norm() <= 1e-15);

        let zero = SkeletonVector::zeros(&[bases[0].dim()]);
        let got = reconstruct_field(&mesh, &bases, &zero, 0, &x).unwrap();
        assert_eq!(got, CVector3::zeros());
    }

    #[test]
    fn reconstruction_rejects_outside_points() {
        let mesh = reference_tet_mesh();
        let bases = bases_for(&mesh, 2, 2.0, c(1.0, 0.0), 1.0);
        let chi = SkeletonVector::zeros(&[bases[0].dim()]);
        let err =
            reconstruct_field(&mesh, &bases, &chi, 0, &Point::new(0.5, 0.5, 0.5)).unwrap_err();
        assert!(matches!(err, PostprocessError::PointOutsideElement { element: 0, .. }));
    }

    #[test]
    fn reconstruction_is_linear_in_the_coefficients() {
        let mesh = two_tet_mesh();
        let bases = bases_for(&mesh, 3, 3.0, c(1.0, 0.0), 1.0);
        let dims: Vec<usize> = bases.iter().map(|b| b.dim()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut chi1 = SkeletonVector::zeros(&dims);
        let mut chi2 = SkeletonVector::zeros(&dims);
        for v in chi1.as_mut_slice() {
            *v = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        for v in chi2.as_mut_slice() {
            *v = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let (a, b) = (c(0.7, -0.2), c(-1.3, 0.4));
        let mut combo = chi1.clone();
        combo.scale(a);
        combo.axpy(b, &chi2);
        let x = Point::new(0.25, 0.3, 0.2);
        let k = mesh.locate_point(&x, LOCATE_TOLERANCE).unwrap();
        let f1 = reconstruct_field(&mesh, &bases, &chi1, k, &x).unwrap();
        let f2 = reconstruct_field(&mesh, &bases, &chi2, k, &x).unwrap();
        let fc = reconstruct_field(&mesh, &bases, &combo, k, &x).unwrap();
        let want = f1.map(|v| a * v) + f2.map(|v| b * v);
        assert!((fc - want).norm() <= 1e-14 * want.norm().max(1.0));
    }

    #[test]
    fn manufactured_data_satisfies_the_boundary_condition() {
        let exact = ExactSolution::plane_wave(
            Vector3::new(0.0, 0.6, 0.8),
            Vector3::new(1.0, 0.0, 0.0),
            2.5,
            c(1.0, 0.0),
        );
        let nu = Vector3::new(0.48, -0.6, 0.64).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for q in [0.0, 0.5, 1.0] {
            let lambda = 1.3;
            let g = manufacture_boundary_data(&exact, nu, q, lambda);
            for _ in 0..10 {
                let x = Point::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let gv = g(&x);
                assert!(boundary_condition_residual(&exact, &nu, q, lambda, &gv, &x) <= 1e-12);
                // Tangential by construction.
                let normal_part = (gv - tangential(&nu, &gv)).norm();
                assert!(normal_part <= 1e-12 * gv.norm().max(1.0));
            }
        }
        // Q = 0 returns the incoming trace itself.
        let g = manufacture_boundary_data(&exact, nu, 0.0, 1.0);
        let x = Point::new(0.1, 0.2, 0.3);
        let (e, curl) = exact.eval(&x);
        let fminus = impedance_trace_at(&nu, 2.5, 1.0, TraceSign::Minus, &e, &curl);
        assert!((g(&x) - fminus).norm() <= 1e-15);
    }

    #[test]
    fn error_norms_vanish_when_the_solution_is_in_the_space() {
        let mesh = two_tet_mesh();
        let kappa = 2.0;
        let bases = bases_for(&mesh, 3, kappa, c(1.0, 0.0), 1.0);
        // The exact solution is basis wave 0 of the shared direction set.
        let wave = bases[0].wave(0);
        let exact =
            ExactSolution::plane_wave(wave.direction, wave.polarization, kappa, c(1.0, 0.0));
        let dims: Vec<usize> = bases.iter().map(|b| b.dim()).collect();
        let mut chi = SkeletonVector::zeros(&dims);
        for k in 0..mesh.num_elements() {
            chi.block_mut(k)[0] = c(1.0, 0.0);
        }
        let norms = error_norms(&mesh, &bases, &chi, &exact).unwrap();
        assert!(norms.volume_relative <= 1e-12, "volume error {:.3e}", norms.volume_relative);
        assert!(norms.trace_relative <= 1e-12, "trace error {:.3e}", norms.trace_relative);
    }

    #[test]
    fn zero_coefficients_give_unit_relative_error() {
        let mesh = reference_tet_mesh();
        let kappa = 2.0;
        let bases = bases_for(&mesh, 2, kappa, c(1.0, 0.0), 1.0);
        let exact = ExactSolution::plane_wave(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            kappa,
            c(1.0, 0.0),
        );
        let chi = SkeletonVector::zeros(&[bases[0].dim()]);
        let norms = error_norms(&mesh, &bases, &chi, &exact).unwrap();
        assert_relative_eq!(norms.volume_relative, 1.0, max_relative = 1e-12);
        assert_relative_eq!(norms.trace_relative, 1.0, max_relative = 1e-12);
        assert!(norms.volume_absolute > 0.0);
    }

    #[test]
    fn relative_volume_error_ignores_the_impedance_weight() {
        let mesh = two_tet_mesh();
        let kappa = 2.0;
        let exact = ExactSolution::plane_wave(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            kappa,
            c(1.0, 0.0),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bases1 = bases_for(&mesh, 3, kappa, c(1.0, 0.0), 1.0);
        let bases2 = bases_for(&mesh, 3, kappa, c(1.0, 0.0), 2.0);
        let dims: Vec<usize> = bases1.iter().map(|b| b.dim()).collect();
        let mut chi = SkeletonVector::zeros(&dims);
        for v in chi.as_mut_slice() {
            *v = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let n1 = error_norms(&mesh, &bases1, &chi, &exact).unwrap();
        let n2 = error_norms(&mesh, &bases2, &chi, &exact).unwrap();
        assert_relative_eq!(n1.volume_relative, n2.volume_relative, max_relative = 1e-14);
        assert_relative_eq!(n1.volume_absolute, n2.volume_absolute, max_relative = 1e-14);
    }

    #[test]
    fn error_norms_reject_mismatched_media() {
        let mesh = reference_tet_mesh();
        let bases = bases_for(&mesh, 2, 2.0, c(2.0, 0.5), 1.0);
        let exact = ExactSolution::plane_wave(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            2.0,
            c(1.0, 0.0),
        );
        let chi = SkeletonVector::zeros(&[bases[0].dim()]);
        let err = error_norms(&mesh, &bases, &chi, &exact).unwrap_err();
        assert!(matches!(err, PostprocessError::InconsistentPermittivity { element: 0, .. }));
    }

    #[test]
    fn slice_sampling_flags_outside_points() {
        let mesh = reference_tet_mesh();
        let bases = bases_for(&mesh, 2, 2.0, c(1.0, 0.0), 1.0);
        let dims = vec![bases[0].dim()];
        let mut chi = SkeletonVector::zeros(&dims);
        chi.block_mut(0)[1] = c(0.4, -0.2);
        // A 2x2 grid with two corners inside the tet and two outside.
        let plane = SlicePlane {
            origin: Point::new(0.1, 0.1, 0.1),
            span_u: Vector3::new(0.8, 0.0, 0.0),
            span_v: Vector3::new(0.0, 0.8, 0.0),
        };
        let samples = sample_slice(&mesh, &bases, &chi, &plane, 2, 2);
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].element, Some(0));
        assert!(samples[1].element.is_none());
        assert!(samples[2].element.is_none());
        assert!(samples[3].element.is_none());
        assert_eq!(samples[1].e, CVector3::zeros());
        // Inside samples match pointwise reconstruction.
        let want =
            reconstruct_field(&mesh, &bases, &chi, 0, &samples[0].point).unwrap();
        assert_eq!(samples[0].e, want);

        // A plane entirely outside the mesh.
        let far = SlicePlane {
            origin: Point::new(5.0, 5.0, 5.0),
            span_u: Vector3::new(1.0, 0.0, 0.0),
            span_v: Vector3::new(0.0, 1.0, 0.0),
        };
        let samples = sample_slice(&mesh, &bases, &chi, &far, 3, 2);
        assert_eq!(samples.len(), 6);
        assert!(samples.iter().all(|s| s.element.is_none()));
    }

    #[test]
    fn slice_csv_has_documented_columns() {
        let mesh = reference_tet_mesh();
        let bases = bases_for(&mesh, 1, 1.0, c(1.0, 0.0), 1.0);
        let chi = SkeletonVector::zeros(&[bases[0].dim()]);
        let plane = SlicePlane {
            origin: Point::new(0.2, 0.2, 0.2),
            span_u: Vector3::new(1.0, 0.0, 0.0),
            span_v: Vector3::new(0.0, 1.0, 0.0),
        };
        let samples = sample_slice(&mesh, &bases, &chi, &plane, 2, 1);
        let mut buf = Vec::new();
        write_slice_csv(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y,z,ReEx,ImEx,ReEy,ImEy,ReEz,ImEz,element");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",0"), "first point lies in element 0: {}", lines[1]);
        assert!(lines[2].ends_with(",outside"));
        assert_eq!(lines[1].split(',').count(), 10);
    }
}
