//! Iterative solution of `(I - D^{-1}C) chi = D^{-1} b` and adaptive
//! selection of per-element direction counts.
//!
//! `D` is block-diagonal Hermitian positive definite, so its inverse and
//! square roots are applied exactly through cached per-block
//! eigendecompositions. The stationary method iterates the fixed point
//! `chi <- D^{-1}(C chi + b)` and stops on the D-weighted residual; BiCGstab
//! runs on the same operator with the Euclidean residual. All reductions are
//! performed in fixed index order, so solutions are bitwise reproducible at
//! any worker count.

use crate::assembly::{
    AssembledSystem, AssemblyError, BoundaryConditions, BoundaryData, SkeletonVector,
};
use crate::mesh::Mesh;
use crate::planewave::{build_local_bases, LocalBasis, MaterialTable};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

/// Relative floor applied to eigenvalues of a Gram block before inversion.
const EIGENVALUE_FLOOR: f64 = 1e-14;
/// Hard stop when the residual exceeds this multiple of the initial one.
const DIVERGENCE_FACTOR: f64 = 1e6;
/// Maximum BiCGstab restarts after scalar breakdowns.
const MAX_RESTARTS: usize = 3;
/// Direction-count step during adaptation.
const ADAPT_STEP: usize = 4;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("BiCGstab scalar breakdown at iteration {iteration} after {restarts} restarts")]
    Breakdown { iteration: usize, restarts: usize },
    #[error("residual diverged at iteration {iteration}: {residual:.3e} times the initial residual")]
    Diverged { iteration: usize, residual: f64 },
    #[error("element {element}: Gram block condition number {cond:.3e} exceeds cap {cap:.3e} even at {p} directions")]
    ConditionCap { element: usize, cond: f64, cap: f64, p: usize },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Stationary,
    BiCgStab,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Stationary => "stationary",
            SolverMethod::BiCgStab => "bicgstab",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Relative residual tolerance, in (0, 1).
    pub tol: f64,
    pub max_iterations: usize,
    /// Condition-number cap for the Gram blocks.
    pub cond_cap: f64,
    /// Direction-count bounds for adaptation.
    pub p_min: usize,
    pub p_max: usize,
    /// Seed for any randomized initialization (kept for reproducibility;
    /// the default initial guess is deterministic zero).
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::BiCgStab,
            tol: 1e-5,
            max_iterations: 500,
            cond_cap: 1e12,
            p_min: 1,
            p_max: 67,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(SolveError::InvalidConfig(format!(
                "tolerance {} must lie in (0, 1)",
                self.tol
            )));
        }
        if self.p_min < 1 {
            return Err(SolveError::InvalidConfig("p_min must be at least 1".into()));
        }
        if self.p_max < self.p_min {
            return Err(SolveError::InvalidConfig(format!(
                "p_max {} must be at least p_min {}",
                self.p_max, self.p_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub method: SolverMethod,
    pub iterations: usize,
    pub final_residual: f64,
    /// Relative residual after each iteration.
    pub history: Vec<f64>,
    pub wall_seconds: f64,
    /// Condition numbers of the Gram blocks, one per element.
    pub condition_numbers: Vec<f64>,
    pub restarts: usize,
    pub converged: bool,
}

/// Eigendecomposition of one Hermitian Gram block, with eigenvalues floored
/// at `1e-14` times the largest magnitude so near-singular blocks stay
/// invertible.
struct BlockFactor {
    vectors: DMatrix<Complex64>,
    eigenvalues: Vec<f64>,
    cond: f64,
}

impl BlockFactor {
    fn new(d: &DMatrix<Complex64>) -> Self {
        let eig = d.clone().symmetric_eigen();
        let vectors = eig.eigenvectors;
        let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let floor = EIGENVALUE_FLOOR * max_abs.max(f64::MIN_POSITIVE);
        let eigenvalues: Vec<f64> =
            eig.eigenvalues.iter().map(|&l| l.max(floor)).collect();
        let min = eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let max = eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        BlockFactor { vectors, eigenvalues, cond: max / min }
    }

    /// `y = V diag(e^power) V^H x`.
    fn apply_power(&self, x: &[Complex64], y: &mut [Complex64], power: f64) {
        let n = self.eigenvalues.len();
        let xv = DVector::from_column_slice(x);
        let mut t = self.vectors.ad_mul(&xv);
        for (i, v) in t.iter_mut().enumerate() {
            *v *= Complex64::new(self.eigenvalues[i].powf(power), 0.0);
        }
        let out = &self.vectors * t;
        y[..n].copy_from_slice(out.as_slice());
    }
}

/// Cached factorizations of all Gram blocks.
pub struct DFactor {
    blocks: Vec<BlockFactor>,
    dims: Vec<usize>,
}

impl DFactor {
    pub fn new(system: &AssembledSystem) -> Self {
        DFactor::from_blocks(&system.d_blocks)
    }

    pub fn from_blocks(d_blocks: &[DMatrix<Complex64>]) -> Self {
        let blocks: Vec<BlockFactor> =
            d_blocks.par_iter().map(BlockFactor::new).collect();
        let dims = d_blocks.iter().map(|d| d.nrows()).collect();
        DFactor { blocks, dims }
    }

    pub fn condition_numbers(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.cond).collect()
    }

    fn apply_all(&self, x: &SkeletonVector, y: &mut SkeletonVector, power: f64) {
        let mut slices: Vec<&mut [Complex64]> = Vec::with_capacity(self.dims.len());
        let mut rest = y.as_mut_slice();
        for &d in &self.dims {
            let (head, tail) = rest.split_at_mut(d);
            slices.push(head);
            rest = tail;
        }
        slices.par_iter_mut().enumerate().for_each(|(k, yk)| {
            self.blocks[k].apply_power(x.block(k), yk, power);
        });
    }

    /// `y = D^{-1} x`.
    pub fn apply_inv(&self, x: &SkeletonVector, y: &mut SkeletonVector) {
        self.apply_all(x, y, -1.0);
    }

    /// `y = D^{-1/2} x`.
    pub fn apply_inv_sqrt(&self, x: &SkeletonVector, y: &mut SkeletonVector) {
        self.apply_all(x, y, -0.5);
    }

    /// `y = D^{1/2} x`.
    pub fn apply_sqrt(&self, x: &SkeletonVector, y: &mut SkeletonVector) {
        self.apply_all(x, y, 0.5);
    }
}

/// Fixed-point iteration `chi <- D^{-1}(C chi + b)`, stopping when the
/// D-weighted residual `||D^{-1/2}(D chi - C chi - b)|| / ||D^{-1/2} b||`
/// drops below the tolerance. Running past `max_iterations` is reported, not
/// an error.
pub fn solve_stationary(
    system: &AssembledSystem,
    config: &SolverConfig,
) -> Result<(SkeletonVector, SolveReport), SolveError> {
    config.validate()?;
    let start = Instant::now();
    let factor = DFactor::new(system);
    let mut chi = system.zeros_like();
    let mut scratch = system.zeros_like();
    factor.apply_inv_sqrt(&system.rhs, &mut scratch);
    let b_norm = scratch.norm();
    let mut report = SolveReport {
        method: SolverMethod::Stationary,
        iterations: 0,
        final_residual: 0.0,
        history: Vec::new(),
        wall_seconds: 0.0,
        condition_numbers: factor.condition_numbers(),
        restarts: 0,
        converged: true,
    };
    if b_norm == 0.0 {
        report.wall_seconds = start.elapsed().as_secs_f64();
        return Ok((chi, report));
    }

    // y_n = C chi_n + b; the residual of chi_{n+1} = D^{-1} y_n is
    // D chi_{n+1} - C chi_{n+1} - b = y_n - y_{n+1}.
    let mut y = system.rhs.clone();
    let mut y_next = system.zeros_like();
    let mut residual_vec = system.zeros_like();
    report.converged = false;
    for it in 1..=config.max_iterations {
        factor.apply_inv(&y, &mut chi);
        system.apply_coupling(&chi, &mut y_next);
        for (v, b) in y_next.as_mut_slice().iter_mut().zip(system.rhs.as_slice()) {
            *v += b;
        }
        for ((r, a), b) in residual_vec
            .as_mut_slice()
            .iter_mut()
            .zip(y.as_slice())
            .zip(y_next.as_slice())
        {
            *r = a - b;
        }
        factor.apply_inv_sqrt(&residual_vec, &mut scratch);
        let res = scratch.norm() / b_norm;
        report.history.push(res);
        report.iterations = it;
        report.final_residual = res;
        std::mem::swap(&mut y, &mut y_next);
        if res <= config.tol {
            report.converged = true;
            break;
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((chi, report))
}

/// BiCGstab on `x -> x - D^{-1} C x` with right-hand side `D^{-1} b` and the
/// Euclidean residual. Scalar breakdowns restart from the current iterate
/// (at most three times); a residual exceeding `1e6` times the initial one
/// aborts as divergence.
pub fn solve_bicgstab(
    system: &AssembledSystem,
    config: &SolverConfig,
) -> Result<(SkeletonVector, SolveReport), SolveError> {
    config.validate()?;
    let start = Instant::now();
    let factor = DFactor::new(system);
    let mut report = SolveReport {
        method: SolverMethod::BiCgStab,
        iterations: 0,
        final_residual: 0.0,
        history: Vec::new(),
        wall_seconds: 0.0,
        condition_numbers: factor.condition_numbers(),
        restarts: 0,
        converged: true,
    };

    let mut rhs = system.zeros_like();
    factor.apply_inv(&system.rhs, &mut rhs);
    let rhs_norm = rhs.norm();
    let mut x = system.zeros_like();
    if rhs_norm == 0.0 {
        report.wall_seconds = start.elapsed().as_secs_f64();
        return Ok((x, report));
    }

    let mut scratch = system.zeros_like();
    let apply = |input: &SkeletonVector, output: &mut SkeletonVector, scratch: &mut SkeletonVector| {
        system.apply_coupling(input, scratch);
        factor.apply_inv(scratch, output);
        for (o, i) in output.as_mut_slice().iter_mut().zip(input.as_slice()) {
            *o = i - *o;
        }
    };

    // x = 0, so the initial residual is the right-hand side itself.
    let mut r = rhs.clone();
    let mut r_hat = rhs.clone();
    let mut p = system.zeros_like();
    let mut v = system.zeros_like();
    let mut s = system.zeros_like();
    let mut t = system.zeros_like();
    let mut rho_prev = Complex64::new(1.0, 0.0);
    let mut alpha = Complex64::new(1.0, 0.0);
    let mut omega = Complex64::new(1.0, 0.0);
    let mut fresh_start = true;
    report.converged = false;

    let breakdown_floor = f64::MIN_POSITIVE.sqrt();
    let mut it = 0;
    while it < config.max_iterations {
        it += 1;
        let rho = r_hat.dot(&r);
        let mut broke_down = rho.norm() <= breakdown_floor * rhs_norm * rhs_norm;
        if !broke_down {
            if fresh_start {
                p.as_mut_slice().copy_from_slice(r.as_slice());
                fresh_start = false;
            } else {
                let beta = (rho / rho_prev) * (alpha / omega);
                // p = r + beta (p - omega v), in index order.
                for ((pv, rv), vv) in p
                    .as_mut_slice()
                    .iter_mut()
                    .zip(r.as_slice())
                    .zip(v.as_slice())
                {
                    *pv = rv + beta * (*pv - omega * vv);
                }
            }
            apply(&p, &mut v, &mut scratch);
            let denom = r_hat.dot(&v);
            broke_down = denom.norm() <= breakdown_floor * rhs_norm * rhs_norm;
            if !broke_down {
                alpha = rho / denom;
                for ((sv, rv), vv) in s
                    .as_mut_slice()
                    .iter_mut()
                    .zip(r.as_slice())
                    .zip(v.as_slice())
                {
                    *sv = rv - alpha * vv;
                }
                apply(&s, &mut t, &mut scratch);
                let tt = t.dot(&t);
                if tt.re > 0.0 {
                    omega = t.dot(&s) / tt;
                } else {
                    omega = Complex64::new(0.0, 0.0);
                }
                for ((xv, pv), sv) in x
                    .as_mut_slice()
                    .iter_mut()
                    .zip(p.as_slice())
                    .zip(s.as_slice())
                {
                    *xv += alpha * pv + omega * sv;
                }
                for ((rv, sv), tv) in r
                    .as_mut_slice()
                    .iter_mut()
                    .zip(s.as_slice())
                    .zip(t.as_slice())
                {
                    *rv = sv - omega * tv;
                }
                let res = r.norm() / rhs_norm;
                report.history.push(res);
                report.iterations = it;
                report.final_residual = res;
                if res <= config.tol {
                    // Guard against drift in the recursive residual before
                    // declaring convergence.
                    apply(&x, &mut scratch, &mut v);
                    for (sv, rv) in scratch.as_mut_slice().iter_mut().zip(rhs.as_slice()) {
                        *sv = rv - *sv;
                    }
                    let true_res = scratch.norm() / rhs_norm;
                    report.final_residual = true_res;
                    if true_res <= config.tol {
                        report.converged = true;
                        break;
                    }
                    r.as_mut_slice().copy_from_slice(scratch.as_slice());
                    fresh_start = true;
                    r_hat.as_mut_slice().copy_from_slice(r.as_slice());
                    rho_prev = Complex64::new(1.0, 0.0);
                    continue;
                }
                if res > DIVERGENCE_FACTOR {
                    report.wall_seconds = start.elapsed().as_secs_f64();
                    return Err(SolveError::Diverged { iteration: it, residual: res });
                }
                if omega.norm() <= breakdown_floor {
                    broke_down = true;
                } else {
                    rho_prev = rho;
                    continue;
                }
            }
        }
        if broke_down {
            if report.restarts >= MAX_RESTARTS {
                report.wall_seconds = start.elapsed().as_secs_f64();
                return Err(SolveError::Breakdown { iteration: it, restarts: report.restarts });
            }
            report.restarts += 1;
            // Restart from the current iterate with a fresh residual.
            apply(&x, &mut scratch, &mut v);
            for (sv, rv) in scratch.as_mut_slice().iter_mut().zip(rhs.as_slice()) {
                *sv = rv - *sv;
            }
            r.as_mut_slice().copy_from_slice(scratch.as_slice());
            r_hat.as_mut_slice().copy_from_slice(r.as_slice());
            rho_prev = Complex64::new(1.0, 0.0);
            alpha = Complex64::new(1.0, 0.0);
            omega = Complex64::new(1.0, 0.0);
            fresh_start = true;
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((x, report))
}

/// Solve with the configured method.
pub fn solve(
    system: &AssembledSystem,
    config: &SolverConfig,
) -> Result<(SkeletonVector, SolveReport), SolveError> {
    match config.method {
        SolverMethod::Stationary => solve_stationary(system, config),
        SolverMethod::BiCgStab => solve_bicgstab(system, config),
    }
}

/// Result of per-element direction-count adaptation.
#[derive(Debug, Clone)]
pub struct DirectionAdaptation {
    pub counts: Vec<usize>,
    pub condition_numbers: Vec<f64>,
}

/// Choose per-element direction counts: start every element at `p_max` and
/// step down by four while its Gram block's condition number exceeds the cap.
/// An element still over the cap at `p_min` is a hard error. `lambda` is the
/// impedance weight used on all faces during the scan.
pub fn adapt_directions(
    mesh: &Mesh,
    materials: &MaterialTable,
    kappa: f64,
    lambda: f64,
    config: &SolverConfig,
) -> Result<DirectionAdaptation, SolveError> {
    config.validate()?;
    let bcs = BoundaryConditions::uniform(mesh, 0.0, lambda, BoundaryData::Zero);
    let base = build_local_bases(
        mesh,
        materials,
        &vec![config.p_max; mesh.num_elements()],
        kappa,
        lambda,
    )
    .map_err(AssemblyError::from)?;

    let results: Vec<Result<(usize, f64), SolveError>> = (0..mesh.num_elements())
        .into_par_iter()
        .map(|k| {
            let mut p = config.p_max;
            loop {
                let mut bases: Vec<LocalBasis> = base.clone();
                if p != config.p_max {
                    bases[k] = LocalBasis::new(k, p, kappa, bases[k].eps_r, lambda)
                        .map_err(AssemblyError::from)?;
                }
                let d = crate::assembly::assemble_local_d(mesh, &bases, &bcs, k)?;
                let cond = BlockFactor::new(&d).cond;
                if cond <= config.cond_cap {
                    return Ok((p, cond));
                }
                if p == config.p_min {
                    return Err(SolveError::ConditionCap {
                        element: k,
                        cond,
                        cap: config.cond_cap,
                        p,
                    });
                }
                p = p.saturating_sub(ADAPT_STEP).max(config.p_min);
            }
        })
        .collect();

    let mut counts = Vec::with_capacity(results.len());
    let mut condition_numbers = Vec::with_capacity(results.len());
    for r in results {
        let (p, cond) = r?;
        counts.push(p);
        condition_numbers.push(cond);
    }
    Ok(DirectionAdaptation { counts, condition_numbers })
}
