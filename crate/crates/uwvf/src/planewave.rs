//! Per-element vector plane-wave bases: low-discrepancy direction sets,
//! polarization pairs, wave evaluation, and impedance traces.
//!
//! Each basis function has the form `p * exp(i*kappa*s*(d . x))` with a real
//! unit direction `d`, a real unit polarization `p` orthogonal to `d`, and
//! `s` the principal square root of the (possibly conjugated) relative
//! permittivity. Test and trial functions use the conjugated branch so that
//! they solve the adjoint equation `curl curl E = kappa^2 conj(eps_r) E`;
//! manufactured exact solutions use the direct branch.

use crate::mesh::{Mesh, Point};
use nalgebra::Vector3;
use num_complex::Complex64;
use std::collections::BTreeMap;
use thiserror::Error;

/// A complex-valued 3-vector field value.
pub type CVector3 = Vector3<Complex64>;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("no permittivity configured for mesh region {0}")]
    UnknownRegion(i32),
    #[error("direction count must be at least 1")]
    EmptyDirectionSet,
}

/// Relative permittivity per mesh region.
#[derive(Debug, Clone, Default)]
pub struct MaterialTable {
    regions: BTreeMap<i32, Complex64>,
}

impl MaterialTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// A single-region table, convenient for tests and generated meshes.
    pub fn uniform(region: i32, eps_r: Complex64) -> Self {
        let mut t = Self::new();
        t.insert(region, eps_r);
        t
    }

    pub fn insert(&mut self, region: i32, eps_r: Complex64) {
        self.regions.insert(region, eps_r);
    }

    pub fn eps_for(&self, region: i32) -> Result<Complex64, BasisError> {
        self.regions.get(&region).copied().ok_or(BasisError::UnknownRegion(region))
    }

    /// True when any region has a nonzero imaginary part (absorbing medium).
    pub fn has_complex_regions(&self) -> bool {
        self.regions.values().any(|e| e.im != 0.0)
    }

    pub fn regions(&self) -> impl Iterator<Item = (i32, Complex64)> + '_ {
        self.regions.iter().map(|(&r, &e)| (r, e))
    }
}

/// Base-2 radical inverse of `j`.
pub fn van_der_corput(mut j: u64) -> f64 {
    let mut value = 0.0;
    let mut scale = 0.5;
    while j > 0 {
        if j & 1 == 1 {
            value += scale;
        }
        scale *= 0.5;
        j >>= 1;
    }
    value
}

/// `n` Hammersley points mapped to the unit sphere: the `j`-th point uses
/// `(u, v) = ((j+0.5)/n, van_der_corput(j))`, `z = 1-2u`, azimuth `2*pi*v`.
pub fn hammersley_sphere(n: usize) -> Vec<Vector3<f64>> {
    assert!(n >= 1, "direction count must be at least 1");
    (0..n)
        .map(|j| {
            let u = (j as f64 + 0.5) / n as f64;
            let v = van_der_corput(j as u64);
            let z = 1.0 - 2.0 * u;
            let phi = 2.0 * std::f64::consts::PI * v;
            let r = (1.0 - z * z).max(0.0).sqrt();
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Two real unit polarizations orthogonal to `d` and to each other:
/// `p1 = normalize(a x d)` with `a` the coordinate axis of smallest `|a . d|`
/// (ties broken in x, y, z order) and `p2 = d x p1`.
pub fn polarization_pair(d: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut best = 0;
    for i in 1..3 {
        if axes[i].dot(d).abs() < axes[best].dot(d).abs() {
            best = i;
        }
    }
    let p1 = axes[best].cross(d).normalize();
    let p2 = d.cross(&p1);
    [p1, p2]
}

/// A set of directions with their polarization pairs; basis function
/// `n = 2j + l` uses direction `j` and polarization `l`.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    pub directions: Vec<Vector3<f64>>,
    pub polarizations: Vec<[Vector3<f64>; 2]>,
}

impl DirectionSet {
    /// The Hammersley set with `p` directions.
    pub fn hammersley(p: usize) -> Result<Self, BasisError> {
        if p == 0 {
            return Err(BasisError::EmptyDirectionSet);
        }
        let directions = hammersley_sphere(p);
        let polarizations = directions.iter().map(polarization_pair).collect();
        Ok(DirectionSet { directions, polarizations })
    }

    /// Number of directions `p_K`.
    pub fn count(&self) -> usize {
        self.directions.len()
    }

    /// Basis dimension `2 p_K`.
    pub fn dim(&self) -> usize {
        2 * self.directions.len()
    }
}

/// Which impedance-trace combination to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceSign {
    /// `nu x curl E + i kappa lambda E_T` (outgoing flux, the UWVF unknown).
    Plus,
    /// `nu x curl E - i kappa lambda E_T` (incoming flux).
    Minus,
}

impl TraceSign {
    pub fn factor(self) -> f64 {
        match self {
            TraceSign::Plus => 1.0,
            TraceSign::Minus => -1.0,
        }
    }
}

/// One vector plane wave `amplitude * p * exp(i*kappa*s*(d . x))` with
/// `curl = i*kappa*s*(d x p) * exp(...)`.
#[derive(Debug, Clone, Copy)]
pub struct PlaneWave {
    pub direction: Vector3<f64>,
    pub polarization: Vector3<f64>,
    pub kappa: f64,
    pub eps_r: Complex64,
    /// Use `sqrt(conj(eps_r))` (adjoint/test branch) instead of
    /// `sqrt(eps_r)`.
    pub conjugate_medium: bool,
    pub amplitude: Complex64,
}

impl PlaneWave {
    pub fn new(
        direction: Vector3<f64>,
        polarization: Vector3<f64>,
        kappa: f64,
        eps_r: Complex64,
        conjugate_medium: bool,
    ) -> Self {
        PlaneWave {
            direction,
            polarization,
            kappa,
            eps_r,
            conjugate_medium,
            amplitude: Complex64::new(1.0, 0.0),
        }
    }

    pub fn with_amplitude(mut self, amplitude: Complex64) -> Self {
        self.amplitude = amplitude;
        self
    }

    /// The refractive factor `s`: principal square root (Re >= 0) of the
    /// selected permittivity branch.
    pub fn refraction(&self) -> Complex64 {
        if self.conjugate_medium {
            self.eps_r.conj().sqrt()
        } else {
            self.eps_r.sqrt()
        }
    }

    /// Complex wave vector `kappa * s * d`.
    pub fn wavevector(&self) -> CVector3 {
        let ks = self.refraction() * self.kappa;
        Vector3::new(ks * self.direction.x, ks * self.direction.y, ks * self.direction.z)
    }

    /// Field and curl at `x`.
    pub fn eval(&self, x: &Point) -> (CVector3, CVector3) {
        let iks = Complex64::i() * self.kappa * self.refraction();
        let phase = (iks * self.direction.dot(x)).exp() * self.amplitude;
        let e = self.polarization.map(|c| phase * c);
        let dxp = self.direction.cross(&self.polarization);
        let curl = dxp.map(|c| iks * phase * c);
        (e, curl)
    }
}

/// Evaluate a plane wave given raw parameters; see [`PlaneWave::eval`].
pub fn eval_plane_wave(
    d: &Vector3<f64>,
    p: &Vector3<f64>,
    kappa: f64,
    eps_r: Complex64,
    conjugate_medium: bool,
    x: &Point,
) -> (CVector3, CVector3) {
    PlaneWave::new(*d, *p, kappa, eps_r, conjugate_medium).eval(x)
}

/// Tangential component `E_T = nu x (E x nu) = E - nu (nu . E)`.
/// `nu x v` for a real normal and a complex field value.
pub fn nu_cross(nu: &Vector3<f64>, v: &CVector3) -> CVector3 {
    Vector3::new(
        Complex64::new(nu.y, 0.0) * v.z - Complex64::new(nu.z, 0.0) * v.y,
        Complex64::new(nu.z, 0.0) * v.x - Complex64::new(nu.x, 0.0) * v.z,
        Complex64::new(nu.x, 0.0) * v.y - Complex64::new(nu.y, 0.0) * v.x,
    )
}

pub fn tangential(nu: &Vector3<f64>, e: &CVector3) -> CVector3 {
    let nu_dot_e = Complex64::new(nu.x, 0.0) * e.x
        + Complex64::new(nu.y, 0.0) * e.y
        + Complex64::new(nu.z, 0.0) * e.z;
    Vector3::new(e.x - nu_dot_e * nu.x, e.y - nu_dot_e * nu.y, e.z - nu_dot_e * nu.z)
}

/// Pointwise impedance trace `nu x curlE +/- i kappa lambda E_T` from field
/// and curl values.
pub fn impedance_trace_at(
    nu: &Vector3<f64>,
    kappa: f64,
    lambda: f64,
    sign: TraceSign,
    e: &CVector3,
    curl_e: &CVector3,
) -> CVector3 {
    let nu_c = Vector3::new(
        Complex64::new(nu.x, 0.0),
        Complex64::new(nu.y, 0.0),
        Complex64::new(nu.z, 0.0),
    );
    let nu_x_curl = nu_c.cross(curl_e);
    let et = tangential(nu, e);
    let coeff = Complex64::i() * (kappa * lambda * sign.factor());
    nu_x_curl + et.map(|c| coeff * c)
}

/// The trace `F^{+/-}` of a field evaluator as a pointwise-evaluable closure
/// on a face with outward normal `nu`.
pub fn impedance_trace<'a>(
    field: impl Fn(&Point) -> (CVector3, CVector3) + 'a,
    nu: Vector3<f64>,
    kappa: f64,
    lambda: f64,
    sign: TraceSign,
) -> impl Fn(&Point) -> CVector3 + 'a {
    move |x| {
        let (e, curl) = field(x);
        impedance_trace_at(&nu, kappa, lambda, sign, &e, &curl)
    }
}

/// The plane-wave basis attached to one element.
#[derive(Debug, Clone)]
pub struct LocalBasis {
    pub element: usize,
    pub set: DirectionSet,
    pub kappa: f64,
    pub eps_r: Complex64,
    /// Default impedance weight for this element's faces; assembly may
    /// override it per boundary tag.
    pub lambda: f64,
}

impl LocalBasis {
    pub fn new(
        element: usize,
        p: usize,
        kappa: f64,
        eps_r: Complex64,
        lambda: f64,
    ) -> Result<Self, BasisError> {
        Ok(LocalBasis { element, set: DirectionSet::hammersley(p)?, kappa, eps_r, lambda })
    }

    /// Basis dimension `2 p_K`.
    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn direction_count(&self) -> usize {
        self.set.count()
    }

    /// Basis function `n = 2j + l`: direction `j`, polarization `l`, on the
    /// adjoint branch (test and trial share it).
    pub fn wave(&self, n: usize) -> PlaneWave {
        let j = n / 2;
        let l = n % 2;
        PlaneWave::new(
            self.set.directions[j],
            self.set.polarizations[j][l],
            self.kappa,
            self.eps_r,
            true,
        )
    }

    /// Evaluate the expansion `sum_n coeffs[n] * wave_n` at `x`.
    pub fn eval_expansion(&self, coeffs: &[Complex64], x: &Point) -> (CVector3, CVector3) {
        assert_eq!(coeffs.len(), self.dim());
        let mut e = CVector3::zeros();
        let mut curl = CVector3::zeros();
        for (n, &c) in coeffs.iter().enumerate() {
            if c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let (we, wc) = self.wave(n).eval(x);
            e += we.map(|v| c * v);
            curl += wc.map(|v| c * v);
        }
        (e, curl)
    }
}

/// Build one basis per element with the given direction counts, looking up
/// each element's permittivity by region.
pub fn build_local_bases(
    mesh: &Mesh,
    materials: &MaterialTable,
    p_per_element: &[usize],
    kappa: f64,
    lambda: f64,
) -> Result<Vec<LocalBasis>, BasisError> {
    assert_eq!(p_per_element.len(), mesh.num_elements());
    (0..mesh.num_elements())
        .map(|k| {
            let eps = materials.eps_for(mesh.regions[k])?;
            LocalBasis::new(k, p_per_element[k], kappa, eps, lambda)
        })
        .collect()
}
