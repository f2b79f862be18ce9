//! Quadrature on the reference triangle and tetrahedron, an order heuristic
//! for oscillatory face integrals, and an independent adaptive oracle used to
//! validate assembled face integrals.
//!
//! Rules are built as conical products of Gauss-Jacobi and Gauss-Legendre
//! lines (computed by Golub-Welsch), then symmetrized over all vertex
//! permutations so that integration commutes with relabeling the simplex
//! vertices. Points are stored in barycentric coordinates; reference weights
//! sum to the reference measures 1/2 (triangle) and 1/6 (tetrahedron).

use crate::mesh::Point;
use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use std::sync::OnceLock;
use thiserror::Error;

/// Largest supported rule order; requests above it must be clamped by the
/// caller (and reported), requests of 0 are rejected.
pub const MAX_ORDER: usize = 20;

/// Extra terms added to the oscillation estimate when choosing a face order.
pub const DEFAULT_SAFETY_TERMS: usize = 6;

/// Recursion limit for the adaptive oracle.
pub const ORACLE_MAX_DEPTH: usize = 12;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("unsupported quadrature order {0}; supported range is 1..={MAX_ORDER}")]
    UnsupportedOrder(usize),
    #[error("oscillatory oracle failed to converge within {0} subdivision levels")]
    OracleNoConvergence(usize),
}

/// A quadrature rule on the reference simplex with `N` barycentric
/// coordinates per point (3 for triangles, 4 for tetrahedra). Exact for
/// polynomials of total degree `order` and invariant under vertex
/// permutations.
#[derive(Debug, Clone)]
pub struct QuadratureRule<const N: usize> {
    pub points: Vec<[f64; N]>,
    pub weights: Vec<f64>,
    pub order: usize,
}

pub type TriangleRule = QuadratureRule<3>;
pub type TetRule = QuadratureRule<4>;

impl<const N: usize> QuadratureRule<N> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl QuadratureRule<3> {
    /// Physical points and weights on the triangle `v`; the weights include
    /// the area scaling, so `sum w_q f(x_q)` approximates the surface
    /// integral of `f`.
    pub fn mapped<'a>(&'a self, v: &'a [Point; 3]) -> impl Iterator<Item = (Point, f64)> + 'a {
        let area = 0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm();
        let scale = 2.0 * area;
        self.points.iter().zip(&self.weights).map(move |(b, &w)| {
            (v[0] * b[0] + v[1] * b[1] + v[2] * b[2], w * scale)
        })
    }

    /// Integrate a complex-valued function over a physical triangle.
    pub fn integrate(
        &self,
        v: &[Point; 3],
        mut f: impl FnMut(&Point) -> Complex64,
    ) -> Complex64 {
        self.mapped(v).map(|(x, w)| f(&x) * w).sum()
    }
}

impl QuadratureRule<4> {
    /// Physical points and weights on the tetrahedron `v`; weights include
    /// the volume scaling.
    pub fn mapped<'a>(&'a self, v: &'a [Point; 4]) -> impl Iterator<Item = (Point, f64)> + 'a {
        let vol = ((v[1] - v[0]).cross(&(v[2] - v[0])).dot(&(v[3] - v[0])) / 6.0).abs();
        let scale = 6.0 * vol;
        self.points.iter().zip(&self.weights).map(move |(b, &w)| {
            (v[0] * b[0] + v[1] * b[1] + v[2] * b[2] + v[3] * b[3], w * scale)
        })
    }

    /// Integrate a complex-valued function over a physical tetrahedron.
    pub fn integrate(
        &self,
        v: &[Point; 4],
        mut f: impl FnMut(&Point) -> Complex64,
    ) -> Complex64 {
        self.mapped(v).map(|(x, w)| f(&x) * w).sum()
    }
}

/// The symmetric triangle rule of the given order (1..=20), from a shared
/// table built on first use.
pub fn triangle_rule(order: usize) -> Result<&'static TriangleRule, QuadratureError> {
    if order == 0 || order > MAX_ORDER {
        return Err(QuadratureError::UnsupportedOrder(order));
    }
    static TABLE: OnceLock<Vec<TriangleRule>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (1..=MAX_ORDER).map(build_triangle_rule).collect());
    Ok(&table[order - 1])
}

/// The symmetric tetrahedron rule of the given order (1..=20).
pub fn tet_rule(order: usize) -> Result<&'static TetRule, QuadratureError> {
    if order == 0 || order > MAX_ORDER {
        return Err(QuadratureError::UnsupportedOrder(order));
    }
    static TABLE: OnceLock<Vec<TetRule>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (1..=MAX_ORDER).map(build_tet_rule).collect());
    Ok(&table[order - 1])
}

/// Order needed to resolve a plane-wave product on a face of diameter `h`:
/// `ceil(kappa * |sqrt(eps)| * h) + safety`, clamped at [`MAX_ORDER`]. The
/// second component reports whether clamping occurred (accuracy can no longer
/// be guaranteed and the caller should warn).
pub fn face_quadrature_order(
    kappa: f64,
    eps_r: Complex64,
    h: f64,
    safety_terms: usize,
) -> (usize, bool) {
    let oscillation = (kappa * eps_r.sqrt().norm() * h).ceil() as usize;
    let wanted = oscillation + safety_terms;
    if wanted > MAX_ORDER {
        (MAX_ORDER, true)
    } else {
        (wanted.max(1), false)
    }
}

// ---------------------------------------------------------------------------
// Rule construction: Golub-Welsch lines and conical products.

/// Gauss rule with weight (1-x)^alpha on [-1,1] (alpha = 0 is
/// Gauss-Legendre), nodes ascending; weights sum to 2^(alpha+1)/(alpha+1).
fn gauss_jacobi(n: usize, alpha: u32) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let a = alpha as f64;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kk = k as f64;
        let diag = if k == 0 { -a / (a + 2.0) } else { -(a * a) / ((2.0 * kk + a) * (2.0 * kk + a + 2.0)) };
        jacobi[(k, k)] = diag;
        if k >= 1 {
            let b = 4.0 * kk * kk * (kk + a) * (kk + a)
                / ((2.0 * kk + a) * (2.0 * kk + a) * (2.0 * kk + a + 1.0) * (2.0 * kk + a - 1.0));
            let off = b.sqrt();
            jacobi[(k, k - 1)] = off;
            jacobi[(k - 1, k)] = off;
        }
    }
    let mu0 = 2f64.powi(alpha as i32 + 1) / (a + 1.0);
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    pairs.into_iter().unzip()
}

/// Number of Gauss points needed for exactness at polynomial degree `d`.
fn gauss_count(d: usize) -> usize {
    d / 2 + 1
}

fn build_triangle_rule(order: usize) -> TriangleRule {
    let n = gauss_count(order);
    // u-axis absorbs the Duffy Jacobian u: weight u on [0,1] maps to the
    // Jacobi weight (1-x) on [-1,1] through u = (1-x)/2.
    let (xu, wu) = gauss_jacobi(n, 1);
    let (xv, wv) = gauss_jacobi(n, 0);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (i, &xui) in xu.iter().enumerate() {
        let u = (1.0 - xui) / 2.0;
        let cu = wu[i] / 4.0;
        for (j, &xvj) in xv.iter().enumerate() {
            let v = (1.0 + xvj) / 2.0;
            let x = u * (1.0 - v);
            let y = u * v;
            points.push([1.0 - x - y, x, y]);
            weights.push(cu * wv[j] / 2.0);
        }
    }
    let (points, weights) = symmetrize(points, weights);
    TriangleRule { points, weights, order }
}

fn build_tet_rule(order: usize) -> TetRule {
    let n = gauss_count(order);
    let (xu, wu) = gauss_jacobi(n, 2);
    let (xv, wv) = gauss_jacobi(n, 1);
    let (xw, ww) = gauss_jacobi(n, 0);
    let mut points = Vec::with_capacity(n * n * n);
    let mut weights = Vec::with_capacity(n * n * n);
    for (i, &xui) in xu.iter().enumerate() {
        // Weight (1-u)^2 on [0,1] maps to (1-x)^2 through u = (1+x)/2.
        let u = (1.0 + xui) / 2.0;
        let cu = wu[i] / 8.0;
        for (j, &xvj) in xv.iter().enumerate() {
            let v = (1.0 + xvj) / 2.0;
            let cv = wv[j] / 4.0;
            for (k, &xwk) in xw.iter().enumerate() {
                let w = (1.0 + xwk) / 2.0;
                let x1 = u;
                let x2 = v * (1.0 - u);
                let x3 = w * (1.0 - u) * (1.0 - v);
                points.push([1.0 - x1 - x2 - x3, x1, x2, x3]);
                weights.push(cu * cv * ww[k] / 2.0);
            }
        }
    }
    let (points, weights) = symmetrize(points, weights);
    TetRule { points, weights, order }
}

/// Average a rule over all barycentric coordinate permutations. Base points
/// are first clustered by their sorted coordinate signature (tolerance 1e-12,
/// which is far below the node spacing of any supported order); each cluster
/// then emits one orbit as exact permutations of a single canonical tuple, so
/// the result is permutation-symmetric bit for bit. Total weight is
/// preserved.
fn symmetrize<const N: usize>(
    points: Vec<[f64; N]>,
    weights: Vec<f64>,
) -> (Vec<[f64; N]>, Vec<f64>) {
    // Sorted-descending signature per base point.
    let mut signatures: Vec<([f64; N], f64)> = points
        .iter()
        .zip(&weights)
        .map(|(p, &w)| {
            let mut s = *p;
            s.sort_by(|a, b| b.total_cmp(a));
            (s, w)
        })
        .collect();
    signatures.sort_by(|a, b| lex_cmp(&a.0, &b.0));

    // Windowed clustering: near-equal signatures need not be adjacent after
    // the sort, so scan forward while the leading coordinate stays close.
    let mut used = vec![false; signatures.len()];
    let mut clusters: Vec<([f64; N], f64)> = Vec::new();
    for i in 0..signatures.len() {
        if used[i] {
            continue;
        }
        let mut canon = signatures[i].0;
        let mut total = signatures[i].1;
        let mut members = 1.0;
        for j in (i + 1)..signatures.len() {
            if (signatures[j].0[0] - signatures[i].0[0]).abs() > 1e-12 {
                break;
            }
            if !used[j]
                && signatures[j]
                    .0
                    .iter()
                    .zip(&signatures[i].0)
                    .all(|(a, b)| (a - b).abs() <= 1e-12)
            {
                used[j] = true;
                for (c, v) in canon.iter_mut().zip(&signatures[j].0) {
                    *c += v;
                }
                total += signatures[j].1;
                members += 1.0;
            }
        }
        for c in canon.iter_mut() {
            *c /= members;
        }
        equalize_ties(&mut canon);
        clusters.push((canon, total));
    }

    // Emit each orbit once per distinct permutation image of its canonical
    // tuple; images that coincide are bitwise equal, so exact dedupe works.
    let perms = permutations(N);
    let factorial = perms.len() as f64;
    let mut out_points: Vec<[f64; N]> = Vec::new();
    let mut out_weights: Vec<f64> = Vec::new();
    for (canon, total) in clusters {
        let mut images: Vec<[f64; N]> = perms
            .iter()
            .map(|perm| {
                let mut q = [0.0; N];
                for (slot, &src) in perm.iter().enumerate() {
                    q[slot] = canon[src];
                }
                q
            })
            .collect();
        images.sort_by(|a, b| lex_cmp(a, b));
        let mut i = 0;
        while i < images.len() {
            let mut mult = 1;
            while i + mult < images.len() && images[i + mult] == images[i] {
                mult += 1;
            }
            out_points.push(images[i]);
            out_weights.push(total * mult as f64 / factorial);
            i += mult;
        }
    }
    (out_points, out_weights)
}

/// Components of a sorted signature that agree to 1e-12 represent the same
/// exact value; replace each tie group with its mean so permutation images
/// coincide bitwise (e.g. the centroid has exactly one image).
fn equalize_ties<const N: usize>(canon: &mut [f64; N]) {
    let mut i = 0;
    while i < N {
        let mut j = i + 1;
        while j < N && (canon[j] - canon[j - 1]).abs() <= 1e-12 {
            j += 1;
        }
        if j - i > 1 {
            let mean = canon[i..j].iter().sum::<f64>() / (j - i) as f64;
            for c in canon[i..j].iter_mut() {
                *c = mean;
            }
        }
        i = j;
    }
}

fn lex_cmp<const N: usize>(a: &[f64; N], b: &[f64; N]) -> std::cmp::Ordering {
    for i in 0..N {
        match a[i].total_cmp(&b[i]) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    permute(&mut items, 0, &mut out);
    out
}

fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k == items.len() {
        out.push(items.clone());
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, out);
        items.swap(k, i);
    }
}

// ---------------------------------------------------------------------------
// Independent adaptive oracle for oscillatory face integrals.
//
// Deliberately self-contained: its Gauss-Legendre nodes come from Newton
// iteration on the Legendre recurrence, not from the Golub-Welsch path used
// by the production rules, and the triangle is parametrized directly instead
// of going through the barycentric tables above.

/// Reference value of the integral of `exp(i*kappa*d.x)` over the physical
/// triangle `tri`, by adaptive 4-way subdivision with relative tolerance
/// 1e-13. Errors out instead of returning an unconverged value.
pub fn oscillatory_face_oracle(
    kappa: Complex64,
    direction: &Vector3<f64>,
    tri: &[Point; 3],
) -> Result<Complex64, QuadratureError> {
    let w = Vector3::new(
        kappa * direction.x,
        kappa * direction.y,
        kappa * direction.z,
    );
    oscillatory_wave_integral(&w, tri)
}

/// Reference value of the integral of `exp(i*w.x)` over the physical triangle
/// `tri`, for a complex wave vector `w`.
pub fn oscillatory_wave_integral(
    w: &Vector3<Complex64>,
    tri: &[Point; 3],
) -> Result<Complex64, QuadratureError> {
    let rule = oracle_base_rule();
    // Absolute tolerance derived from the integral of |f|, which never
    // suffers cancellation.
    let magnitude = oracle_apply_abs(rule, tri, w).max(1e-300);
    let tol = 1e-13 * magnitude;
    oracle_adaptive(rule, tri, w, tol, 0)
}

fn oracle_adaptive(
    rule: &OracleRule,
    tri: &[Point; 3],
    w: &Vector3<Complex64>,
    tol: f64,
    depth: usize,
) -> Result<Complex64, QuadratureError> {
    let coarse = oracle_apply(rule, tri, w);
    let mab = (tri[0] + tri[1]) / 2.0;
    let mac = (tri[0] + tri[2]) / 2.0;
    let mbc = (tri[1] + tri[2]) / 2.0;
    let children = [
        [tri[0], mab, mac],
        [mab, tri[1], mbc],
        [mac, mbc, tri[2]],
        [mab, mbc, mac],
    ];
    let fine: Complex64 = children.iter().map(|c| oracle_apply(rule, c, w)).sum();
    if (fine - coarse).norm() <= tol {
        return Ok(fine);
    }
    if depth >= ORACLE_MAX_DEPTH {
        return Err(QuadratureError::OracleNoConvergence(ORACLE_MAX_DEPTH));
    }
    let mut total = Complex64::new(0.0, 0.0);
    for c in &children {
        total += oracle_adaptive(rule, c, w, tol / 4.0, depth + 1)?;
    }
    Ok(total)
}

struct OracleRule {
    /// (u, v, weight) with the Duffy factor folded into the weight; weights
    /// sum to 1/2.
    nodes: Vec<(f64, f64, f64)>,
}

fn oracle_base_rule() -> &'static OracleRule {
    static RULE: OnceLock<OracleRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, wts) = newton_legendre(12);
        let mut nodes = Vec::with_capacity(x.len() * x.len());
        for (i, &xi) in x.iter().enumerate() {
            let u = (xi + 1.0) / 2.0;
            for (j, &xj) in x.iter().enumerate() {
                let v = (xj + 1.0) / 2.0;
                nodes.push((u, v, wts[i] / 2.0 * wts[j] / 2.0 * u));
            }
        }
        OracleRule { nodes }
    })
}

fn oracle_apply(rule: &OracleRule, tri: &[Point; 3], w: &Vector3<Complex64>) -> Complex64 {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let jac = e1.cross(&e2).norm();
    let mut sum = Complex64::new(0.0, 0.0);
    for &(u, v, wt) in &rule.nodes {
        let x = tri[0] + e1 * (u * (1.0 - v)) + e2 * (u * v);
        let phase = Complex64::i() * (w.x * x.x + w.y * x.y + w.z * x.z);
        sum += phase.exp() * wt;
    }
    sum * jac
}

fn oracle_apply_abs(rule: &OracleRule, tri: &[Point; 3], w: &Vector3<Complex64>) -> f64 {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let jac = e1.cross(&e2).norm();
    let mut sum = 0.0;
    for &(u, v, wt) in &rule.nodes {
        let x = tri[0] + e1 * (u * (1.0 - v)) + e2 * (u * v);
        let phase = Complex64::i() * (w.x * x.x + w.y * x.y + w.z * x.z);
        sum += phase.exp().norm() * wt;
    }
    sum * jac
}

/// Gauss-Legendre nodes and weights on [-1,1] by Newton iteration on the
/// three-term recurrence.
fn newton_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_value_deriv(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (_, d2) = legendre_value_deriv(n, x);
                dp = d2;
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    // Newton's starting guesses produce descending nodes; flip to ascending.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre_value_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn order_one_rules_are_centroid_rules() {
        let tri = triangle_rule(1).unwrap();
        assert_eq!(tri.len(), 1);
        assert_relative_eq!(tri.weights[0], 0.5, epsilon = 1e-14);
        for b in tri.points[0] {
            assert_relative_eq!(b, 1.0 / 3.0, epsilon = 1e-14);
        }
        let tet = tet_rule(1).unwrap();
        assert_eq!(tet.len(), 1);
        assert_relative_eq!(tet.weights[0], 1.0 / 6.0, epsilon = 1e-14);
        for b in tet.points[0] {
            assert_relative_eq!(b, 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn weights_positive_and_sum_to_reference_measure() {
        for order in 1..=MAX_ORDER {
            let tri = triangle_rule(order).unwrap();
            assert!(tri.weights.iter().all(|&w| w > 0.0));
            let sum: f64 = tri.weights.iter().sum();
            assert_relative_eq!(sum, 0.5, epsilon = 1e-13);
            for p in &tri.points {
                assert!(p.iter().all(|&b| b >= -1e-14));
                assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
            let tet = tet_rule(order).unwrap();
            assert!(tet.weights.iter().all(|&w| w > 0.0));
            let sum: f64 = tet.weights.iter().sum();
            assert_relative_eq!(sum, 1.0 / 6.0, epsilon = 1e-13);
            for p in &tet.points {
                assert!(p.iter().all(|&b| b >= -1e-14));
                assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rules_are_permutation_symmetric() {
        for order in [1, 2, 3, 5, 8, 13, 20] {
            let tri = triangle_rule(order).unwrap();
            for (p, &w) in tri.points.iter().zip(&tri.weights) {
                let swapped = [p[1], p[0], p[2]];
                let found = tri
                    .points
                    .iter()
                    .zip(&tri.weights)
                    .any(|(q, &wq)| {
                        q.iter().zip(&swapped).all(|(a, b)| (a - b).abs() < 1e-11)
                            && (wq - w).abs() < 1e-11
                    });
                assert!(found, "triangle rule {order} not symmetric at {p:?}");
            }
            let tet = tet_rule(order).unwrap();
            for (p, &w) in tet.points.iter().zip(&tet.weights) {
                let swapped = [p[0], p[2], p[1], p[3]];
                let found = tet
                    .points
                    .iter()
                    .zip(&tet.weights)
                    .any(|(q, &wq)| {
                        q.iter().zip(&swapped).all(|(a, b)| (a - b).abs() < 1e-11)
                            && (wq - w).abs() < 1e-11
                    });
                assert!(found, "tet rule {order} not symmetric at {p:?}");
            }
        }
    }

    /// Exact monomial integrals over the reference triangle with vertices
    /// (0,0), (1,0), (0,1): integral of x^a y^b equals a! b! / (a+b+2)!.
    #[test]
    fn triangle_monomial_exactness() {
        for order in 1..=MAX_ORDER {
            let rule = triangle_rule(order).unwrap();
            for a in 0..=order {
                for b in 0..=(order - a) {
                    let approx_val: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, &w)| w * p[1].powi(a as i32) * p[2].powi(b as i32))
                        .sum();
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert_relative_eq!(approx_val, exact, epsilon = 1e-13, max_relative = 1e-12);
                }
            }
        }
        // Frozen spot value: integral of x^2 y^3 is 2! 3! / 7! = 1/420.
        let rule = triangle_rule(6).unwrap();
        let value: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, &w)| w * p[1].powi(2) * p[2].powi(3))
            .sum();
        assert_relative_eq!(value, 1.0 / 420.0, epsilon = 1e-15, max_relative = 1e-13);
    }

    /// Exact monomial integrals over the reference tetrahedron:
    /// integral of x^a y^b z^c equals a! b! c! / (a+b+c+3)!.
    #[test]
    fn tet_monomial_exactness() {
        for order in 1..=MAX_ORDER {
            let rule = tet_rule(order).unwrap();
            for a in 0..=order {
                for b in 0..=(order - a) {
                    for c in 0..=(order - a - b) {
                        let approx_val: f64 = rule
                            .points
                            .iter()
                            .zip(&rule.weights)
                            .map(|(p, &w)| {
                                w * p[1].powi(a as i32) * p[2].powi(b as i32) * p[3].powi(c as i32)
                            })
                            .sum();
                        let exact =
                            factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3);
                        assert_relative_eq!(
                            approx_val,
                            exact,
                            epsilon = 1e-13,
                            max_relative = 1e-12
                        );
                    }
                }
            }
        }
        // Frozen spot value: integral of x y z is 1/720.
        let rule = tet_rule(3).unwrap();
        let value: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(p, &w)| w * p[1] * p[2] * p[3])
            .sum();
        assert_relative_eq!(value, 1.0 / 720.0, epsilon = 1e-15, max_relative = 1e-13);
    }

    #[test]
    fn unsupported_orders_are_rejected() {
        assert!(matches!(triangle_rule(0), Err(QuadratureError::UnsupportedOrder(0))));
        assert!(matches!(triangle_rule(21), Err(QuadratureError::UnsupportedOrder(21))));
        assert!(matches!(tet_rule(0), Err(QuadratureError::UnsupportedOrder(0))));
        assert!(matches!(tet_rule(25), Err(QuadratureError::UnsupportedOrder(25))));
    }

    #[test]
    fn physical_mapping_scales_measure() {
        let tri = triangle_rule(4).unwrap();
        let v = [
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.0, 0.0, 1.0),
        ];
        let area: f64 = tri.mapped(&v).map(|(_, w)| w).sum();
        assert_relative_eq!(area, 3.0f64.sqrt() / 2.0, epsilon = 1e-13);

        let tet = tet_rule(4).unwrap();
        let v4 = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(2.0, 0.0, 0.0),
            Point::new(0.0, 2.0, 0.0),
            Point::new(0.0, 0.0, 2.0),
        ];
        let vol: f64 = tet.mapped(&v4).map(|(_, w)| w).sum();
        assert_relative_eq!(vol, 8.0 / 6.0, epsilon = 1e-13);
    }

    #[test]
    fn order_heuristic() {
        let eps = Complex64::new(1.0, 0.0);
        assert_eq!(face_quadrature_order(3.0, eps, 1.0, 6), (9, false));
        assert_eq!(face_quadrature_order(1.0, Complex64::new(4.0, 0.0), 0.5, 6), (7, false));
        // Large oscillation clamps to MAX_ORDER and flags it.
        assert_eq!(face_quadrature_order(40.0, eps, 1.0, 6), (MAX_ORDER, true));
        // Tiny faces still get the safety terms.
        assert_eq!(face_quadrature_order(1.0, eps, 1e-6, 6), (7, false));
    }

    #[test]
    fn oracle_matches_closed_form() {
        // Integral of exp(i x) over the triangle (0,0),(1,0),(0,1) in the
        // z = 0 plane is 1 + i - exp(i).
        let tri = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        ];
        let value = oscillatory_face_oracle(
            Complex64::new(1.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
            &tri,
        )
        .unwrap();
        let exact = Complex64::new(1.0, 1.0) - Complex64::i().exp();
        assert_relative_eq!(value.re, exact.re, epsilon = 1e-13);
        assert_relative_eq!(value.im, exact.im, epsilon = 1e-13);
        assert_relative_eq!(exact.re, 0.4596976941318602, epsilon = 1e-15);
        assert_relative_eq!(exact.im, 0.1585290151921035, epsilon = 1e-15);
    }

    #[test]
    fn oracle_zero_wave_gives_area() {
        let tri = [
            Point::new(0.2, -0.4, 1.0),
            Point::new(1.3, 0.1, 0.7),
            Point::new(0.4, 0.9, -0.2),
        ];
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        let value =
            oscillatory_face_oracle(Complex64::new(0.0, 0.0), &Vector3::new(0.0, 0.0, 1.0), &tri)
                .unwrap();
        assert_relative_eq!(value.re, area, epsilon = 1e-13 * area.max(1.0));
        assert_relative_eq!(value.im, 0.0, epsilon = 1e-13);
    }

    #[test]
    fn oracle_handles_complex_wavevectors() {
        // With a complex wave vector the integrand decays; compare against a
        // high-order production rule (the integrand is smooth at this scale).
        let tri = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(0.8, 0.1, 0.0),
            Point::new(0.2, 0.9, 0.3),
        ];
        let w = Vector3::new(
            Complex64::new(2.0, 0.7),
            Complex64::new(-1.0, 0.3),
            Complex64::new(0.5, -0.4),
        );
        let oracle = oscillatory_wave_integral(&w, &tri).unwrap();
        let rule = triangle_rule(18).unwrap();
        let direct = rule.integrate(&tri, |x| {
            (Complex64::i() * (w.x * x.x + w.y * x.y + w.z * x.z)).exp()
        });
        assert_relative_eq!(oracle.re, direct.re, epsilon = 1e-12 * oracle.norm());
        assert_relative_eq!(oracle.im, direct.im, epsilon = 1e-12 * oracle.norm());
    }

    #[test]
    fn oracle_agrees_with_production_rules_for_resolved_waves() {
        let tri = [
            Point::new(0.1, 0.0, 0.2),
            Point::new(1.0, 0.2, 0.1),
            Point::new(0.3, 0.9, 0.5),
        ];
        let h = (tri[1] - tri[0])
            .norm()
            .max((tri[2] - tri[0]).norm())
            .max((tri[2] - tri[1]).norm());
        let d = Vector3::new(0.36, -0.48, 0.8);
        for kh in 1..=6 {
            let kappa = kh as f64 / h;
            let (order, clamped) =
                face_quadrature_order(kappa, Complex64::new(1.0, 0.0), h, DEFAULT_SAFETY_TERMS);
            assert!(!clamped);
            let rule = triangle_rule(order).unwrap();
            let direct = rule.integrate(&tri, |x| {
                (Complex64::i() * kappa * d.dot(x)).exp()
            });
            let oracle =
                oscillatory_face_oracle(Complex64::new(kappa, 0.0), &d, &tri).unwrap();
            let scale = oracle.norm().max(1e-3);
            assert!(
                (direct - oracle).norm() <= 1e-12 * scale,
                "kh = {kh}: production rule differs from oracle by {:.3e}",
                (direct - oracle).norm() / scale
            );
        }
    }

    #[test]
    fn product_integrals_match_oracle_with_doubled_rate_order() {
        // Products of two plane waves oscillate at up to twice the
        // wavenumber; feeding the heuristic that rate keeps the rules within
        // 1e-10 of the oracle for kappa * h_F up to 6.
        let tri = [
            Point::new(0.1, 0.0, 0.2),
            Point::new(1.0, 0.2, 0.1),
            Point::new(0.3, 0.9, 0.5),
        ];
        let h = (tri[1] - tri[0])
            .norm()
            .max((tri[2] - tri[0]).norm())
            .max((tri[2] - tri[1]).norm());
        let d1 = Vector3::new(0.36, -0.48, 0.8);
        let d2 = Vector3::new(-0.36, 0.48, -0.8);
        for kh in 1..=6 {
            let kappa = kh as f64 / h;
            let (order, clamped) = face_quadrature_order(
                2.0 * kappa,
                Complex64::new(1.0, 0.0),
                h,
                DEFAULT_SAFETY_TERMS,
            );
            assert!(!clamped);
            let rule = triangle_rule(order).unwrap();
            // exp(i k d1 . x) * conj(exp(i k d2 . x)) = exp(i k (d1 - d2) . x).
            let direct = rule.integrate(&tri, |x| {
                (Complex64::i() * kappa * d1.dot(x)).exp()
                    * (Complex64::i() * kappa * d2.dot(x)).exp().conj()
            });
            let w = (d1 - d2).map(|v| Complex64::new(kappa * v, 0.0));
            let oracle = oscillatory_wave_integral(&w, &tri).unwrap();
            let scale = oracle.norm().max(1e-3);
            assert!(
                (direct - oracle).norm() <= 1e-10 * scale,
                "kh = {kh}: product integral differs from oracle by {:.3e}",
                (direct - oracle).norm() / scale
            );
        }
    }

    #[test]
    fn oracle_refuses_unresolvable_oscillation() {
        let tri = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        ];
        let result = oscillatory_face_oracle(
            Complex64::new(1e8, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
            &tri,
        );
        assert!(matches!(result, Err(QuadratureError::OracleNoConvergence(_))));
    }

    #[test]
    fn oracle_is_affine_invariant() {
        // Rotating the triangle and the direction together leaves the
        // integral unchanged.
        let tri = [
            Point::new(0.0, 0.0, 0.0),
            Point::new(0.9, 0.0, 0.0),
            Point::new(0.2, 0.8, 0.0),
        ];
        let d = Vector3::new(0.6, 0.8, 0.0);
        let kappa = Complex64::new(4.0, 0.0);
        let base = oscillatory_face_oracle(kappa, &d, &tri).unwrap();
        let angle = 0.7f64;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
        let tri_rot = [rot * tri[0], rot * tri[1], rot * tri[2]];
        let d_rot = rot * d;
        let shifted = oscillatory_face_oracle(kappa, &d_rot, &tri_rot).unwrap();
        assert_relative_eq!(base.re, shifted.re, epsilon = 1e-12);
        assert_relative_eq!(base.im, shifted.im, epsilon = 1e-12);
    }
}
