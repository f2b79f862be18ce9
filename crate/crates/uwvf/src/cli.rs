//! Command-line driver: run-configuration parsing, the end-to-end pipeline
//! (mesh, bases, assembly, solve, postprocessing), and the text outputs
//! (`summary.txt`, `residuals.csv`, `solution.txt`, slice CSVs, system dump).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use nalgebra::Vector3;
use num_complex::Complex64;
use thiserror::Error;

use crate::assembly::{
    assemble_system, AssembledSystem, AssemblyError, BoundaryConditions, BoundaryData,
    BoundarySpec, SkeletonVector,
};
use crate::mesh::{generate_cube_mesh, load_mesh, Mesh, MeshError};
use crate::planewave::{build_local_bases, MaterialTable, PlaneWave};
use crate::postprocess::{
    error_norms, sample_slice, write_slice_csv, ErrorNorms, ExactSolution, PostprocessError,
    SlicePlane,
};
use crate::solve::{
    adapt_directions, solve, SolveError, SolveReport, SolverConfig, SolverMethod,
};

/// Tolerance for checking that a configured polarization is orthogonal to its
/// propagation direction.
const TRANSVERSALITY_TOL: f64 = 1e-10;

/// Driver failures, each mapped to a process exit code: configuration errors
/// exit 2, mesh errors 3, system-construction errors 4, solver failures 5,
/// and output I/O failures 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read mesh file `{path}`: {source}")]
    MeshFile { path: PathBuf, source: std::io::Error },
    #[error("mesh error: {0}")]
    Mesh(#[from] MeshError),
    #[error("assembly error: {0}")]
    Assembly(#[from] AssemblyError),
    #[error("direction adaptation failed: {0}")]
    Adaptation(SolveError),
    #[error("solver error: {0}")]
    Solver(SolveError),
    #[error("postprocessing error: {0}")]
    Postprocess(#[from] PostprocessError),
    #[error("cannot write output `{path}`: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MeshFile { .. } | CliError::Mesh(_) => 3,
            CliError::Assembly(_) | CliError::Adaptation(_) | CliError::Postprocess(_) => 4,
            CliError::Solver(_) => 5,
            CliError::Output { .. } => 1,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Where the mesh comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MeshSource {
    /// Load from a mesh text file.
    File(PathBuf),
    /// Generate the unit cube split into `6 n^3` tetrahedra.
    Cube(usize),
}

/// Boundary data selection for one tag.
#[derive(Debug, Clone)]
pub enum DataConfig {
    /// Homogeneous data `g = 0`.
    None,
    /// Manufacture data from the configured exact solution.
    Exact,
    /// Manufacture data from a custom plane wave.
    PlaneWave { direction: Vector3<f64>, polarization: Vector3<f64> },
}

/// Per-tag boundary condition as configured.
#[derive(Debug, Clone)]
pub struct TagConfig {
    /// Reflection coefficient, `|Q| <= 1`.
    pub q: f64,
    /// Impedance weight override; the global weight when absent.
    pub lambda: Option<f64>,
    pub data: DataConfig,
}

/// The exact plane-wave solution used for manufactured data and error norms.
#[derive(Debug, Clone, Copy)]
pub struct ExactConfig {
    pub direction: Vector3<f64>,
    pub polarization: Vector3<f64>,
    pub amplitude: Complex64,
}

/// How per-element direction counts are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirectionPolicy {
    /// The same count everywhere.
    Fixed { p: usize },
    /// Start at `p_max` and shrink while the Gram block's condition number
    /// exceeds `cond_cap`; an element still over the cap at `p_min` fails.
    Adaptive { p_min: usize, p_max: usize, cond_cap: f64 },
}

/// Iterative-solver settings.
#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub method: SolverMethod,
    pub tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

/// One sampling plane written as `slice_<name>.csv`.
#[derive(Debug, Clone)]
pub struct SliceConfig {
    pub plane: SlicePlane,
    pub nu: usize,
    pub nv: usize,
}

/// Optional outputs beyond the always-written `summary.txt`.
#[derive(Debug, Clone, Default)]
pub struct OutputConfig {
    /// Write `residuals.csv` with the per-iteration relative residual.
    pub residual_history: bool,
    /// Write `solution.txt` with the raw coefficient vector.
    pub solution: bool,
    /// Write `system_dump.txt` with the assembled blocks (also enabled by
    /// the `--dump-system` flag).
    pub dump_system: bool,
    pub slices: BTreeMap<String, SliceConfig>,
}

/// A fully parsed run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mesh: MeshSource,
    /// Free-space wavenumber, positive.
    pub kappa: f64,
    /// Global impedance weight (interior faces and any tag without an
    /// override), positive.
    pub lambda: f64,
    /// Relative permittivity per mesh region.
    pub regions: BTreeMap<i32, Complex64>,
    /// Explicit per-tag boundary conditions.
    pub boundaries: BTreeMap<i32, TagConfig>,
    /// Fallback condition for mesh tags without an explicit entry.
    pub default_boundary: Option<TagConfig>,
    pub exact: Option<ExactConfig>,
    pub directions: DirectionPolicy,
    pub solver: SolverSettings,
    pub outputs: OutputConfig,
}

impl RunConfig {
    /// Solver configuration with the direction-policy bounds folded in.
    fn solver_config(&self) -> SolverConfig {
        let defaults = SolverConfig::default();
        let (p_min, p_max, cond_cap) = match self.directions {
            DirectionPolicy::Fixed { p } => (p, p, defaults.cond_cap),
            DirectionPolicy::Adaptive { p_min, p_max, cond_cap } => (p_min, p_max, cond_cap),
        };
        SolverConfig {
            method: self.solver.method,
            tol: self.solver.tol,
            max_iterations: self.solver.max_iterations,
            cond_cap,
            p_min,
            p_max,
            seed: self.solver.seed,
        }
    }
}

/// One `key = value` line retained for error reporting.
struct RawEntry {
    line: usize,
    value: String,
}

/// Key-value store over the config text with removal-based consumption, so
/// anything left at the end is an unknown key.
struct ConfigReader {
    entries: BTreeMap<String, RawEntry>,
}

impl ConfigReader {
    fn from_text(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                config_err(format!("line {line}: expected `key = value`, got `{stripped}`"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(config_err(format!("line {line}: missing key before `=`")));
            }
            if value.is_empty() {
                return Err(config_err(format!("line {line}: key `{key}` has no value")));
            }
            if let Some(prev) = entries.get(&key) {
                return Err(config_err(format!(
                    "duplicate key `{key}` (lines {} and {line})",
                    prev.line
                )));
            }
            entries.insert(key, RawEntry { line, value });
        }
        Ok(ConfigReader { entries })
    }

    fn take(&mut self, key: &str) -> Option<RawEntry> {
        self.entries.remove(key)
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|e| e.value)
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        self.take(key).map(|e| parse_f64(key, &e.value)).transpose()
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        self.take(key).map(|e| parse_usize(key, &e.value)).transpose()
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        self.take(key)
            .map(|e| {
                e.value.parse::<u64>().map_err(|_| {
                    config_err(format!(
                        "key `{key}`: cannot parse `{}` as a nonnegative integer",
                        e.value
                    ))
                })
            })
            .transpose()
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>, CliError> {
        self.take(key)
            .map(|e| match e.value.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(config_err(format!(
                    "key `{key}`: expected `true` or `false`, got `{other}`"
                ))),
            })
            .transpose()
    }

    fn take_triple(&mut self, key: &str) -> Result<Option<Vector3<f64>>, CliError> {
        self.take(key).map(|e| parse_triple(key, &e.value)).transpose()
    }

    /// Keys starting with `prefix`, in sorted order.
    fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Error out if any key was never consumed.
    fn finish(self) -> Result<(), CliError> {
        match self.entries.into_iter().min_by_key(|(_, e)| e.line) {
            None => Ok(()),
            Some((key, entry)) => Err(config_err(format!(
                "unknown configuration key `{key}` (line {})",
                entry.line
            ))),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let x: f64 = value
        .parse()
        .map_err(|_| config_err(format!("key `{key}`: cannot parse `{value}` as a number")))?;
    if !x.is_finite() {
        return Err(config_err(format!("key `{key}`: value must be finite, got `{value}`")));
    }
    Ok(x)
}

fn parse_usize(key: &str, value: &str) -> Result<usize, CliError> {
    value.parse::<usize>().map_err(|_| {
        config_err(format!("key `{key}`: cannot parse `{value}` as a nonnegative integer"))
    })
}

fn parse_triple(key: &str, value: &str) -> Result<Vector3<f64>, CliError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(config_err(format!(
            "key `{key}`: expected three comma-separated numbers, got `{value}`"
        )));
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = parse_f64(key, part)?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

/// Check that `polarization` is a valid transverse polarization for
/// `direction` and return the pair with the direction normalized.
fn check_wave_pair(
    context: &str,
    direction: Vector3<f64>,
    polarization: Vector3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>), CliError> {
    let dn = direction.norm();
    if dn == 0.0 {
        return Err(config_err(format!("{context}: direction must be nonzero")));
    }
    let d = direction / dn;
    let pn = polarization.norm();
    if pn == 0.0 {
        return Err(config_err(format!("{context}: polarization must be nonzero")));
    }
    if d.dot(&polarization).abs() > TRANSVERSALITY_TOL * pn {
        return Err(config_err(format!(
            "{context}: polarization must be orthogonal to the propagation direction"
        )));
    }
    Ok((d, polarization))
}

/// Split a dotted key into segments and check the segment count.
fn key_segments<'a>(key: &'a str, expected: usize) -> Result<Vec<&'a str>, CliError> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.len() != expected {
        return Err(config_err(format!("unknown configuration key `{key}`")));
    }
    Ok(segments)
}

fn parse_tag_id(key: &str, segment: &str) -> Result<i32, CliError> {
    segment.parse::<i32>().map_err(|_| {
        config_err(format!("key `{key}`: `{segment}` is not an integer tag or region id"))
    })
}

fn parse_boundary_group(
    reader: &mut ConfigReader,
    prefix: &str,
    context: &str,
) -> Result<Option<TagConfig>, CliError> {
    let q_key = format!("{prefix}.Q");
    let lambda_key = format!("{prefix}.lambda");
    let data_key = format!("{prefix}.data");
    let dir_key = format!("{prefix}.data_direction");
    let pol_key = format!("{prefix}.data_polarization");

    let q = reader.take_f64(&q_key)?;
    let lambda = reader.take_f64(&lambda_key)?;
    let data = reader.take_string(&data_key);
    let data_direction = reader.take_triple(&dir_key)?;
    let data_polarization = reader.take_triple(&pol_key)?;

    if q.is_none()
        && lambda.is_none()
        && data.is_none()
        && data_direction.is_none()
        && data_polarization.is_none()
    {
        return Ok(None);
    }
    let q = q.ok_or_else(|| config_err(format!("{context}: missing key `{q_key}`")))?;
    if !(-1.0..=1.0).contains(&q) {
        return Err(config_err(format!("key `{q_key}`: Q = {q} is outside [-1, 1]")));
    }
    if let Some(l) = lambda {
        if !(l > 0.0) {
            return Err(config_err(format!(
                "key `{lambda_key}`: impedance weight must be positive, got {l}"
            )));
        }
    }
    let data = match data.as_deref().unwrap_or("none") {
        "none" => {
            if data_direction.is_some() || data_polarization.is_some() {
                return Err(config_err(format!(
                    "{context}: `data_direction`/`data_polarization` require `{data_key} = plane-wave`"
                )));
            }
            DataConfig::None
        }
        "exact" => {
            if data_direction.is_some() || data_polarization.is_some() {
                return Err(config_err(format!(
                    "{context}: `data_direction`/`data_polarization` require `{data_key} = plane-wave`"
                )));
            }
            DataConfig::Exact
        }
        "plane-wave" => {
            let direction = data_direction
                .ok_or_else(|| config_err(format!("{context}: missing key `{dir_key}`")))?;
            let polarization = data_polarization
                .ok_or_else(|| config_err(format!("{context}: missing key `{pol_key}`")))?;
            let (direction, polarization) =
                check_wave_pair(context, direction, polarization)?;
            DataConfig::PlaneWave { direction, polarization }
        }
        other => {
            return Err(config_err(format!(
                "key `{data_key}`: expected `none`, `exact`, or `plane-wave`, got `{other}`"
            )))
        }
    };
    Ok(Some(TagConfig { q, lambda, data }))
}

/// True when `key` matches some recognized configuration key pattern.
fn is_known_key(key: &str) -> bool {
    const EXACT: &[&str] = &[
        "mesh.file",
        "mesh.cube",
        "kappa",
        "lambda",
        "exact.direction",
        "exact.polarization",
        "exact.amplitude_re",
        "exact.amplitude_im",
        "directions.policy",
        "directions.p",
        "directions.p_min",
        "directions.p_max",
        "directions.cond_cap",
        "solver.method",
        "solver.tol",
        "solver.max_iterations",
        "solver.seed",
        "output.residual_history",
        "output.solution",
        "output.dump_system",
    ];
    if EXACT.contains(&key) {
        return true;
    }
    let segments: Vec<&str> = key.split('.').collect();
    match segments.as_slice() {
        ["region", id, field] => {
            id.parse::<i32>().is_ok() && matches!(*field, "eps_re" | "eps_im")
        }
        ["boundary", tag, field] => {
            (*tag == "default" || tag.parse::<i32>().is_ok())
                && matches!(
                    *field,
                    "Q" | "lambda" | "data" | "data_direction" | "data_polarization"
                )
        }
        ["output", "slice", name, field] => {
            !name.is_empty() && matches!(*field, "origin" | "span_u" | "span_v" | "nu" | "nv")
        }
        _ => false,
    }
}

/// Parse a flat `key = value` configuration. Comments start with `#`;
/// unknown or duplicate keys are errors.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let mut reader = ConfigReader::from_text(text)?;
    if let Some((key, entry)) = reader
        .entries
        .iter()
        .filter(|(k, _)| !is_known_key(k))
        .min_by_key(|(_, e)| e.line)
    {
        return Err(config_err(format!(
            "unknown configuration key `{key}` (line {})",
            entry.line
        )));
    }

    // Mesh source.
    let mesh_file = reader.take_string("mesh.file");
    let mesh_cube = reader.take_usize("mesh.cube")?;
    let mesh = match (mesh_file, mesh_cube) {
        (Some(path), None) => MeshSource::File(PathBuf::from(path)),
        (None, Some(n)) => {
            if n == 0 {
                return Err(config_err("key `mesh.cube`: subdivision count must be at least 1"));
            }
            MeshSource::Cube(n)
        }
        (Some(_), Some(_)) => {
            return Err(config_err("set exactly one of `mesh.file` and `mesh.cube`, not both"))
        }
        (None, None) => {
            return Err(config_err("missing mesh source: set `mesh.file` or `mesh.cube`"))
        }
    };

    let kappa = reader
        .take_f64("kappa")?
        .ok_or_else(|| config_err("missing required key `kappa`"))?;
    if !(kappa > 0.0) {
        return Err(config_err(format!("key `kappa`: wavenumber must be positive, got {kappa}")));
    }
    let lambda = reader.take_f64("lambda")?.unwrap_or(1.0);
    if !(lambda > 0.0) {
        return Err(config_err(format!(
            "key `lambda`: impedance weight must be positive, got {lambda}"
        )));
    }

    // Regions.
    let mut regions: BTreeMap<i32, Complex64> = BTreeMap::new();
    let mut region_ids: Vec<i32> = Vec::new();
    for key in reader.keys_with_prefix("region.") {
        let segments = key_segments(&key, 3)?;
        let id = parse_tag_id(&key, segments[1])?;
        if !region_ids.contains(&id) {
            region_ids.push(id);
        }
    }
    for id in region_ids {
        let re_key = format!("region.{id}.eps_re");
        let im_key = format!("region.{id}.eps_im");
        let re = reader
            .take_f64(&re_key)?
            .ok_or_else(|| config_err(format!("region {id}: missing key `{re_key}`")))?;
        let im = reader.take_f64(&im_key)?.unwrap_or(0.0);
        let eps = Complex64::new(re, im);
        if eps == Complex64::new(0.0, 0.0) {
            return Err(config_err(format!("region {id}: permittivity must be nonzero")));
        }
        regions.insert(id, eps);
    }
    if regions.is_empty() {
        return Err(config_err(
            "no permittivity configured: set `region.<id>.eps_re` for every mesh region",
        ));
    }

    // Boundary tags.
    let mut boundaries: BTreeMap<i32, TagConfig> = BTreeMap::new();
    let mut tag_ids: Vec<i32> = Vec::new();
    let mut has_default = false;
    for key in reader.keys_with_prefix("boundary.") {
        let segments = key_segments(&key, 3)?;
        if segments[1] == "default" {
            has_default = true;
            continue;
        }
        let id = parse_tag_id(&key, segments[1])?;
        if !tag_ids.contains(&id) {
            tag_ids.push(id);
        }
    }
    for id in tag_ids {
        let prefix = format!("boundary.{id}");
        let context = format!("boundary tag {id}");
        let tc = parse_boundary_group(&mut reader, &prefix, &context)?
            .expect("group has at least one key");
        boundaries.insert(id, tc);
    }
    let default_boundary = if has_default {
        parse_boundary_group(&mut reader, "boundary.default", "boundary default")?
    } else {
        None
    };
    if boundaries.is_empty() && default_boundary.is_none() {
        return Err(config_err(
            "no boundary condition configured: set `boundary.<tag>.Q` or `boundary.default.Q`",
        ));
    }

    // Exact solution.
    let exact_direction = reader.take_triple("exact.direction")?;
    let exact_polarization = reader.take_triple("exact.polarization")?;
    let exact_amp_re = reader.take_f64("exact.amplitude_re")?;
    let exact_amp_im = reader.take_f64("exact.amplitude_im")?;
    let exact = match (exact_direction, exact_polarization) {
        (Some(d), Some(p)) => {
            let (direction, polarization) = check_wave_pair("exact solution", d, p)?;
            let amplitude =
                Complex64::new(exact_amp_re.unwrap_or(1.0), exact_amp_im.unwrap_or(0.0));
            if amplitude == Complex64::new(0.0, 0.0) {
                return Err(config_err("exact solution: amplitude must be nonzero"));
            }
            Some(ExactConfig { direction, polarization, amplitude })
        }
        (None, None) => {
            if exact_amp_re.is_some() || exact_amp_im.is_some() {
                return Err(config_err(
                    "exact solution: amplitude given without `exact.direction`/`exact.polarization`",
                ));
            }
            None
        }
        _ => {
            return Err(config_err(
                "exact solution: set both `exact.direction` and `exact.polarization`",
            ))
        }
    };
    let uses_exact_data = default_boundary
        .iter()
        .chain(boundaries.values())
        .any(|tc| matches!(tc.data, DataConfig::Exact));
    if uses_exact_data && exact.is_none() {
        return Err(config_err(
            "boundary data `exact` requires `exact.direction` and `exact.polarization`",
        ));
    }

    // Direction policy.
    let policy = reader.take_string("directions.policy").unwrap_or_else(|| "fixed".into());
    let p_fixed = reader.take_usize("directions.p")?;
    let p_min = reader.take_usize("directions.p_min")?;
    let p_max = reader.take_usize("directions.p_max")?;
    let cond_cap = reader.take_f64("directions.cond_cap")?;
    let directions = match policy.as_str() {
        "fixed" => {
            if p_min.is_some() || p_max.is_some() || cond_cap.is_some() {
                return Err(config_err(
                    "keys `directions.p_min`/`p_max`/`cond_cap` require `directions.policy = adaptive`",
                ));
            }
            let p = p_fixed
                .ok_or_else(|| config_err("fixed direction policy: missing key `directions.p`"))?;
            if p == 0 {
                return Err(config_err("key `directions.p`: direction count must be at least 1"));
            }
            DirectionPolicy::Fixed { p }
        }
        "adaptive" => {
            if p_fixed.is_some() {
                return Err(config_err(
                    "key `directions.p` requires `directions.policy = fixed`",
                ));
            }
            let p_min = p_min.ok_or_else(|| {
                config_err("adaptive direction policy: missing key `directions.p_min`")
            })?;
            let p_max = p_max.ok_or_else(|| {
                config_err("adaptive direction policy: missing key `directions.p_max`")
            })?;
            if p_min == 0 {
                return Err(config_err("key `directions.p_min`: must be at least 1"));
            }
            if p_max < p_min {
                return Err(config_err(format!(
                    "key `directions.p_max`: {p_max} is below `directions.p_min` = {p_min}"
                )));
            }
            let cond_cap = cond_cap.unwrap_or(SolverConfig::default().cond_cap);
            if !(cond_cap > 1.0) {
                return Err(config_err(format!(
                    "key `directions.cond_cap`: must exceed 1, got {cond_cap}"
                )));
            }
            DirectionPolicy::Adaptive { p_min, p_max, cond_cap }
        }
        other => {
            return Err(config_err(format!(
                "key `directions.policy`: expected `fixed` or `adaptive`, got `{other}`"
            )))
        }
    };

    // Solver.
    let defaults = SolverConfig::default();
    let method = match reader
        .take_string("solver.method")
        .unwrap_or_else(|| "bicgstab".into())
        .as_str()
    {
        "bicgstab" => SolverMethod::BiCgStab,
        "stationary" => SolverMethod::Stationary,
        other => {
            return Err(config_err(format!(
                "key `solver.method`: expected `bicgstab` or `stationary`, got `{other}`"
            )))
        }
    };
    let tol = reader.take_f64("solver.tol")?.unwrap_or(defaults.tol);
    if !(tol > 0.0 && tol < 1.0) {
        return Err(config_err(format!(
            "key `solver.tol`: tolerance must lie in (0, 1), got {tol}"
        )));
    }
    let max_iterations =
        reader.take_usize("solver.max_iterations")?.unwrap_or(defaults.max_iterations);
    if max_iterations == 0 {
        return Err(config_err("key `solver.max_iterations`: must be at least 1"));
    }
    let seed = reader.take_u64("solver.seed")?.unwrap_or(defaults.seed);
    let solver = SolverSettings { method, tol, max_iterations, seed };

    // Outputs.
    let residual_history = reader.take_bool("output.residual_history")?.unwrap_or(false);
    let solution = reader.take_bool("output.solution")?.unwrap_or(false);
    let dump_system = reader.take_bool("output.dump_system")?.unwrap_or(false);
    let mut slices: BTreeMap<String, SliceConfig> = BTreeMap::new();
    let mut slice_names: Vec<String> = Vec::new();
    for key in reader.keys_with_prefix("output.slice.") {
        let segments = key_segments(&key, 4)?;
        let name = segments[2].to_string();
        if name.is_empty()
            || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(config_err(format!(
                "key `{key}`: slice name `{name}` must use only letters, digits, `_`, `-`"
            )));
        }
        if !slice_names.contains(&name) {
            slice_names.push(name);
        }
    }
    for name in slice_names {
        let prefix = format!("output.slice.{name}");
        let need = |field: &str| {
            config_err(format!("slice `{name}`: missing key `{prefix}.{field}`"))
        };
        let origin =
            reader.take_triple(&format!("{prefix}.origin"))?.ok_or_else(|| need("origin"))?;
        let span_u =
            reader.take_triple(&format!("{prefix}.span_u"))?.ok_or_else(|| need("span_u"))?;
        let span_v =
            reader.take_triple(&format!("{prefix}.span_v"))?.ok_or_else(|| need("span_v"))?;
        if span_u.norm() == 0.0 || span_v.norm() == 0.0 {
            return Err(config_err(format!("slice `{name}`: spans must be nonzero")));
        }
        let nu = reader.take_usize(&format!("{prefix}.nu"))?.ok_or_else(|| need("nu"))?;
        let nv = reader.take_usize(&format!("{prefix}.nv"))?.ok_or_else(|| need("nv"))?;
        if nu == 0 || nv == 0 {
            return Err(config_err(format!("slice `{name}`: `nu` and `nv` must be at least 1")));
        }
        slices.insert(
            name,
            SliceConfig { plane: SlicePlane { origin: origin.into(), span_u, span_v }, nu, nv },
        );
    }
    let outputs = OutputConfig { residual_history, solution, dump_system, slices };

    reader.finish()?;
    Ok(RunConfig {
        mesh,
        kappa,
        lambda,
        regions,
        boundaries,
        default_boundary,
        exact,
        directions,
        solver,
        outputs,
    })
}

/// Flags controlling a run beyond the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Print progress to stderr.
    pub verbose: bool,
    /// Force writing `system_dump.txt`.
    pub dump_system: bool,
}

/// Wall-clock seconds spent in each pipeline phase.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    pub mesh_s: f64,
    pub directions_s: f64,
    pub assemble_s: f64,
    pub solve_s: f64,
    pub postprocess_s: f64,
    pub total_s: f64,
}

/// Everything `summary.txt` reports about a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mesh_elements: usize,
    pub mesh_vertices: usize,
    pub mesh_interior_faces: usize,
    pub mesh_boundary_faces: usize,
    pub mesh_h_max: f64,
    pub mesh_shape_regularity: f64,
    pub dof_count: usize,
    /// Direction count per element.
    pub direction_counts: Vec<usize>,
    pub solver: SolveReport,
    pub errors: Option<ErrorNorms>,
    pub warnings: Vec<String>,
    pub timings: PhaseTimings,
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write the key-value summary. Every numeric value carries 17 significant
/// digits; timing keys are grouped under the `time.` prefix so differing
/// runs of the same configuration agree byte-for-byte elsewhere.
pub fn write_summary(summary: &RunSummary, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "mesh.elements = {}", summary.mesh_elements)?;
    writeln!(out, "mesh.vertices = {}", summary.mesh_vertices)?;
    writeln!(out, "mesh.interior_faces = {}", summary.mesh_interior_faces)?;
    writeln!(out, "mesh.boundary_faces = {}", summary.mesh_boundary_faces)?;
    writeln!(out, "mesh.h_max = {}", fmt_float(summary.mesh_h_max))?;
    writeln!(out, "mesh.shape_regularity = {}", fmt_float(summary.mesh_shape_regularity))?;
    writeln!(out, "dof.count = {}", summary.dof_count)?;
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &summary.direction_counts {
        *histogram.entry(p).or_insert(0) += 1;
    }
    let histogram: Vec<String> =
        histogram.into_iter().map(|(p, n)| format!("{p}:{n}")).collect();
    writeln!(out, "dof.directions_histogram = {}", histogram.join(","))?;
    writeln!(out, "solver.method = {}", summary.solver.method.name())?;
    writeln!(out, "solver.converged = {}", summary.solver.converged)?;
    writeln!(out, "solver.iterations = {}", summary.solver.iterations)?;
    writeln!(out, "solver.final_residual = {}", fmt_float(summary.solver.final_residual))?;
    writeln!(out, "solver.restarts = {}", summary.solver.restarts)?;
    let cond_max =
        summary.solver.condition_numbers.iter().fold(0.0f64, |a, &b| a.max(b));
    writeln!(out, "solver.gram_condition_max = {}", fmt_float(cond_max))?;
    if let Some(errors) = &summary.errors {
        writeln!(out, "error.volume_absolute = {}", fmt_float(errors.volume_absolute))?;
        writeln!(out, "error.volume_relative = {}", fmt_float(errors.volume_relative))?;
        writeln!(out, "error.trace_absolute = {}", fmt_float(errors.trace_absolute))?;
        writeln!(out, "error.trace_relative = {}", fmt_float(errors.trace_relative))?;
    }
    writeln!(out, "warning.count = {}", summary.warnings.len())?;
    for (i, w) in summary.warnings.iter().enumerate() {
        writeln!(out, "warning.{i} = {w}")?;
    }
    writeln!(out, "time.mesh_s = {}", fmt_float(summary.timings.mesh_s))?;
    writeln!(out, "time.directions_s = {}", fmt_float(summary.timings.directions_s))?;
    writeln!(out, "time.assemble_s = {}", fmt_float(summary.timings.assemble_s))?;
    writeln!(out, "time.solve_s = {}", fmt_float(summary.timings.solve_s))?;
    writeln!(out, "time.postprocess_s = {}", fmt_float(summary.timings.postprocess_s))?;
    writeln!(out, "time.total_s = {}", fmt_float(summary.timings.total_s))?;
    Ok(())
}

/// Write the coefficient vector, one `re im` pair per line within per-element
/// blocks.
pub fn write_solution(chi: &SkeletonVector, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "uwvf solution v1")?;
    writeln!(out, "blocks {}", chi.num_blocks())?;
    for k in 0..chi.num_blocks() {
        let block = chi.block(k);
        writeln!(out, "block {} dim {}", k, block.len())?;
        for v in block {
            writeln!(out, "{:.16e} {:.16e}", v.re, v.im)?;
        }
    }
    writeln!(out, "end")
}

/// Write the per-iteration relative residuals as CSV.
pub fn write_residuals(history: &[f64], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "iteration,residual")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(out, "{},{:.16e}", i + 1, r)?;
    }
    Ok(())
}

/// Render into a buffer, then write the file in one shot.
fn write_file(
    path: &Path,
    render: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let mut buf: Vec<u8> = Vec::new();
    render(&mut buf)
        .and_then(|()| fs::write(path, &buf))
        .map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

/// Mesh-dependent checks that `parse_config` cannot do: region and tag sets
/// must match between the configuration and the mesh.
fn validate_against_mesh(config: &RunConfig, mesh: &Mesh) -> Result<(), CliError> {
    let mut mesh_regions: Vec<i32> = mesh.regions.clone();
    mesh_regions.sort_unstable();
    mesh_regions.dedup();
    for id in config.regions.keys() {
        if !mesh_regions.contains(id) {
            return Err(config_err(format!(
                "configured region {id} does not appear in the mesh"
            )));
        }
    }
    for id in &mesh_regions {
        if !config.regions.contains_key(id) {
            return Err(config_err(format!(
                "mesh region {id} has no configured permittivity"
            )));
        }
    }
    let mut mesh_tags: Vec<i32> =
        mesh.faces.iter().filter_map(|f| f.boundary_tag).collect();
    mesh_tags.sort_unstable();
    mesh_tags.dedup();
    for tag in config.boundaries.keys() {
        if !mesh_tags.contains(tag) {
            return Err(config_err(format!(
                "configured boundary tag {tag} does not appear in the mesh"
            )));
        }
    }
    if config.default_boundary.is_none() {
        for tag in &mesh_tags {
            if !config.boundaries.contains_key(tag) {
                return Err(config_err(format!(
                    "boundary tag {tag} has no configured condition"
                )));
            }
        }
    }
    Ok(())
}

/// The single permittivity shared by every region, required whenever a plane
/// wave must traverse the whole domain (exact solutions, manufactured data).
fn uniform_permittivity(config: &RunConfig, purpose: &str) -> Result<Complex64, CliError> {
    let mut values = config.regions.values();
    let first = *values.next().expect("at least one region");
    if values.any(|&e| e != first) {
        return Err(config_err(format!(
            "{purpose} requires a single uniform permittivity, but regions differ"
        )));
    }
    Ok(first)
}

fn tag_config<'a>(config: &'a RunConfig, tag: i32) -> Option<&'a TagConfig> {
    config.boundaries.get(&tag).or(config.default_boundary.as_ref())
}

/// Build the per-tag boundary conditions for the mesh's tags.
fn boundary_conditions(config: &RunConfig, mesh: &Mesh) -> Result<BoundaryConditions, CliError> {
    let mut bcs = BoundaryConditions::new(config.lambda);
    let mut tags: Vec<i32> = mesh.faces.iter().filter_map(|f| f.boundary_tag).collect();
    tags.sort_unstable();
    tags.dedup();
    for tag in tags {
        let tc = tag_config(config, tag)
            .ok_or_else(|| config_err(format!("boundary tag {tag} has no configured condition")))?;
        let data = match &tc.data {
            DataConfig::None => BoundaryData::Zero,
            DataConfig::Exact => {
                let exact = config
                    .exact
                    .ok_or_else(|| config_err("boundary data `exact` requires an exact solution"))?;
                let eps = uniform_permittivity(config, "manufactured boundary data")?;
                BoundaryData::PlaneWave(
                    PlaneWave::new(exact.direction, exact.polarization, config.kappa, eps, false)
                        .with_amplitude(exact.amplitude),
                )
            }
            DataConfig::PlaneWave { direction, polarization } => {
                let eps = uniform_permittivity(config, "manufactured boundary data")?;
                BoundaryData::PlaneWave(PlaneWave::new(
                    *direction,
                    *polarization,
                    config.kappa,
                    eps,
                    false,
                ))
            }
        };
        bcs.insert(tag, BoundarySpec { q: tc.q, lambda: tc.lambda.unwrap_or(config.lambda), data });
    }
    Ok(bcs)
}

fn split_adaptation_error(e: SolveError) -> CliError {
    match e {
        SolveError::Assembly(a) => CliError::Assembly(a),
        other => CliError::Adaptation(other),
    }
}

fn split_solver_error(e: SolveError) -> CliError {
    match e {
        SolveError::Assembly(a) => CliError::Assembly(a),
        other => CliError::Solver(other),
    }
}

/// Execute a full run and write all outputs into `out_dir`. A completed run
/// with a non-converged solver still returns `Ok`; the summary records
/// `converged = false` and the driver maps that to exit code 5.
pub fn run(
    config: &RunConfig,
    options: &RunOptions,
    out_dir: &Path,
) -> Result<RunSummary, CliError> {
    let total_start = Instant::now();
    let vlog = |msg: String| {
        if options.verbose {
            eprintln!("uwvf: {msg}");
        }
    };

    // Mesh.
    let phase = Instant::now();
    let mesh = match &config.mesh {
        MeshSource::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|source| CliError::MeshFile { path: path.clone(), source })?;
            load_mesh(&text)?
        }
        MeshSource::Cube(n) => generate_cube_mesh(*n)?,
    };
    let mesh_s = phase.elapsed().as_secs_f64();
    vlog(format!(
        "mesh: {} elements, {} vertices, {} interior / {} boundary faces",
        mesh.num_elements(),
        mesh.num_vertices(),
        mesh.num_interior_faces(),
        mesh.num_boundary_faces()
    ));

    validate_against_mesh(config, &mesh)?;
    let mut materials = MaterialTable::new();
    for (&id, &eps) in &config.regions {
        materials.insert(id, eps);
    }
    if config.exact.is_some() {
        uniform_permittivity(config, "an exact plane-wave solution")?;
    }

    let mut warnings: Vec<String> = Vec::new();
    if materials.has_complex_regions() {
        warnings.push("convergence unproven for complex permittivity".into());
    }
    {
        let mut tags: Vec<i32> = mesh.faces.iter().filter_map(|f| f.boundary_tag).collect();
        tags.sort_unstable();
        tags.dedup();
        for tag in tags {
            if let Some(tc) = tag_config(config, tag) {
                if tc.q.abs() == 1.0 {
                    warnings.push(format!(
                        "boundary tag {tag} has |Q| = 1; uniqueness requires |Q| < 1"
                    ));
                }
            }
        }
    }

    // Direction counts and local bases.
    let phase = Instant::now();
    let solver_config = config.solver_config();
    let counts = match config.directions {
        DirectionPolicy::Fixed { p } => vec![p; mesh.num_elements()],
        DirectionPolicy::Adaptive { .. } => {
            adapt_directions(&mesh, &materials, config.kappa, config.lambda, &solver_config)
                .map_err(split_adaptation_error)?
                .counts
        }
    };
    let bases = build_local_bases(&mesh, &materials, &counts, config.kappa, config.lambda)
        .map_err(|e| CliError::Assembly(AssemblyError::from(e)))?;
    let directions_s = phase.elapsed().as_secs_f64();
    vlog(format!(
        "directions: {} per element (min {}, max {})",
        if counts.windows(2).all(|w| w[0] == w[1]) { counts[0].to_string() } else { "varying".into() },
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    ));

    // Assembly.
    let phase = Instant::now();
    let bcs = boundary_conditions(config, &mesh)?;
    let system = assemble_system(&mesh, &bases, &bcs)?;
    warnings.extend(system.warnings.iter().cloned());
    let assemble_s = phase.elapsed().as_secs_f64();
    vlog(format!(
        "assembled system: {} unknowns, {} coupling blocks",
        system.dof_count(),
        system.coupling.len()
    ));

    // Solve.
    let phase = Instant::now();
    let (chi, report) = solve(&system, &solver_config).map_err(split_solver_error)?;
    let solve_s = phase.elapsed().as_secs_f64();
    vlog(format!(
        "solver: {} after {} iterations (relative residual {:.3e})",
        if report.converged { "converged" } else { "did not converge" },
        report.iterations,
        report.final_residual
    ));

    // Postprocess.
    let phase = Instant::now();
    let errors = match &config.exact {
        Some(exact) => {
            let eps = uniform_permittivity(config, "an exact plane-wave solution")?;
            let solution =
                ExactSolution::plane_wave(exact.direction, exact.polarization, config.kappa, eps)
                    .with_amplitude(exact.amplitude);
            Some(error_norms(&mesh, &bases, &chi, &solution)?)
        }
        None => None,
    };
    for (name, slice) in &config.outputs.slices {
        let samples = sample_slice(&mesh, &bases, &chi, &slice.plane, slice.nu, slice.nv);
        write_file(&out_dir.join(format!("slice_{name}.csv")), |out| {
            write_slice_csv(&samples, out)
        })?;
    }
    let postprocess_s = phase.elapsed().as_secs_f64();

    // Remaining outputs.
    if config.outputs.residual_history {
        write_file(&out_dir.join("residuals.csv"), |out| write_residuals(&report.history, out))?;
    }
    if config.outputs.solution {
        write_file(&out_dir.join("solution.txt"), |out| write_solution(&chi, out))?;
    }
    if config.outputs.dump_system || options.dump_system {
        write_file(&out_dir.join("system_dump.txt"), |out| dump_system(&system, out))?;
    }

    let summary = RunSummary {
        mesh_elements: mesh.num_elements(),
        mesh_vertices: mesh.num_vertices(),
        mesh_interior_faces: mesh.num_interior_faces(),
        mesh_boundary_faces: mesh.num_boundary_faces(),
        mesh_h_max: (0..mesh.num_elements())
            .map(|k| mesh.element_h(k))
            .fold(0.0, f64::max),
        mesh_shape_regularity: mesh.shape_regularity(),
        dof_count: system.dof_count(),
        direction_counts: counts,
        solver: report,
        errors,
        warnings,
        timings: PhaseTimings {
            mesh_s,
            directions_s,
            assemble_s,
            solve_s,
            postprocess_s,
            total_s: total_start.elapsed().as_secs_f64(),
        },
    };
    write_file(&out_dir.join("summary.txt"), |out| write_summary(&summary, out))?;
    for w in &summary.warnings {
        eprintln!("uwvf: warning: {w}");
    }
    Ok(summary)
}

fn dump_system(system: &AssembledSystem, out: &mut dyn Write) -> std::io::Result<()> {
    system.write_debug_dump(out)
}

/// Command-line arguments.
#[derive(Debug, Parser)]
#[command(
    name = "uwvf",
    version,
    about = "Plane-wave solver for the time-harmonic Maxwell equations"
)]
pub struct Args {
    /// Path to the run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (default: all available cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(long)]
    pub verbose: bool,
    /// Write the assembled system to system_dump.txt.
    #[arg(long)]
    pub dump_system: bool,
}

/// Entry point used by the binary: parse arguments and configuration, run
/// the pipeline in the current directory, and map failures to exit codes.
pub fn main() -> ExitCode {
    let args = Args::parse();
    let text = match fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!(
                "uwvf: configuration error: cannot read `{}`: {e}",
                args.config.display()
            );
            return ExitCode::from(2);
        }
    };
    let config = match parse_config(&text) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("uwvf: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let options = RunOptions { verbose: args.verbose, dump_system: args.dump_system };
    let out_dir = PathBuf::from(".");
    let result = match args.threads {
        Some(n) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool,
                Err(e) => {
                    eprintln!("uwvf: cannot build thread pool: {e}");
                    return ExitCode::from(1);
                }
            };
            pool.install(|| run(&config, &options, &out_dir))
        }
        None => run(&config, &options, &out_dir),
    };
    match result {
        Ok(summary) => {
            if summary.solver.converged {
                ExitCode::SUCCESS
            } else {
                eprintln!(
                    "uwvf: solver error: no convergence within {} iterations (relative residual {:.3e})",
                    summary.solver.iterations, summary.solver.final_residual
                );
                ExitCode::from(5)
            }
        }
        Err(e) => {
            eprintln!("uwvf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
