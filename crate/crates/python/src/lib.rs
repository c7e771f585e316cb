use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use linereg::features::{NetConfig, TrunkParams};
use linereg::harness::bench::{net_match, register as run_register, Models, Timing};
use linereg::harness::config::{Method, RunConfig};
use linereg::harness::io;
use linereg::ot::{sinkhorn_robust, CostMatrix, SinkhornConfig};
use linereg::plucker::{self, PluckerLine, RigidTransform};
use linereg::pose::RegistrationResult;
use linereg::scene::{self, NoiseConfig, SceneSpec};
use linereg::train::{self, TrainConfig, TrainState};

create_exception!(pylinereg, LineregError, PyException);
create_exception!(pylinereg, NumericalError, LineregError);

fn err(e: linereg::Error) -> PyErr {
    if e.is_numerical() {
        NumericalError::new_err(e.to_string())
    } else {
        LineregError::new_err(e.to_string())
    }
}

type V3 = [f64; 3];

fn v3(a: V3) -> Vector3<f64> {
    Vector3::from(a)
}

fn arr(v: &Vector3<f64>) -> V3 {
    [v.x, v.y, v.z]
}

#[pyclass(name = "Line", module = "pylinereg", frozen, from_py_object)]
#[derive(Clone)]
struct PyLine(PluckerLine);

#[pymethods]
impl PyLine {
    /// Canonical line from a direction and a moment (any scale, any sign).
    #[new]
    fn new(direction: V3, moment: V3) -> PyResult<Self> {
        plucker::canonicalize(v3(direction), v3(moment)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_endpoints(p: V3, q: V3) -> PyResult<Self> {
        plucker::from_endpoints(&v3(p), &v3(q)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_point_direction(point: V3, direction: V3) -> PyResult<Self> {
        plucker::from_point_direction(&v3(point), &v3(direction)).map(Self).map_err(err)
    }

    #[getter]
    fn direction(&self) -> V3 {
        arr(&self.0.direction())
    }

    #[getter]
    fn moment(&self) -> V3 {
        arr(&self.0.moment())
    }

    /// `[vx, vy, vz, mx, my, mz]`.
    fn to_list(&self) -> [f64; 6] {
        self.0.to_array()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (v, m) = (self.0.direction(), self.0.moment());
        format!("Line(direction=[{}, {}, {}], moment=[{}, {}, {}])", v.x, v.y, v.z, m.x, m.y, m.z)
    }
}

#[pyclass(name = "Pose", module = "pylinereg", frozen, from_py_object)]
#[derive(Clone)]
struct PyPose(RigidTransform);

#[pymethods]
impl PyPose {
    /// Rotation as three rows, translation as a 3-vector.
    #[new]
    #[pyo3(signature = (rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation = [0.0; 3]))]
    fn new(rotation: [V3; 3], translation: V3) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        let g = RigidTransform::new(r, v3(translation));
        if !g.is_valid(1e-9) {
            return Err(LineregError::new_err("rotation is not orthonormal with det +1"));
        }
        Ok(Self(g))
    }

    #[staticmethod]
    #[pyo3(signature = (axis, angle_rad, translation = [0.0; 3]))]
    fn from_axis_angle(axis: V3, angle_rad: f64, translation: V3) -> Self {
        Self(RigidTransform::from_axis_angle(&v3(axis), angle_rad, v3(translation)))
    }

    /// `[w, x, y, z]`.
    #[staticmethod]
    #[pyo3(signature = (q, translation = [0.0; 3]))]
    fn from_quaternion(q: [f64; 4], translation: V3) -> Self {
        Self(RigidTransform::from_quaternion(q, v3(translation)))
    }

    #[getter]
    fn rotation(&self) -> [V3; 3] {
        let r = &self.0.rotation;
        [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])
    }

    #[getter]
    fn translation(&self) -> V3 {
        arr(&self.0.translation)
    }

    fn quaternion(&self) -> [f64; 4] {
        self.0.quaternion()
    }

    fn angle_deg(&self) -> f64 {
        self.0.rotation_angle_deg()
    }

    /// `self ∘ first`: apply `first`, then `self`.
    fn compose(&self, first: &PyPose) -> Self {
        Self(self.0.compose(&first.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn transform_line(&self, line: &PyLine) -> PyLine {
        PyLine(plucker::transform_line(&self.0, &line.0))
    }

    fn __repr__(&self) -> String {
        format!("Pose(angle_deg={:.6}, translation={:?})", self.angle_deg(), self.translation())
    }
}

#[pyfunction]
fn line_distance(a: &PyLine, b: &PyLine) -> f64 {
    plucker::line_distance(&a.0, &b.0)
}

/// Geodesic rotation error in degrees.
#[pyfunction]
fn rotation_error(gt: &PyPose, est: &PyPose) -> f64 {
    plucker::rotation_error(&gt.0.rotation, &est.0.rotation)
}

#[pyfunction]
fn translation_error(gt: &PyPose, est: &PyPose) -> f64 {
    plucker::translation_error(&gt.0.translation, &est.0.translation)
}

fn lines(v: &[PluckerLine]) -> Vec<PyLine> {
    v.iter().copied().map(PyLine).collect()
}

fn unwrap_lines(v: Vec<PyLine>) -> Vec<PluckerLine> {
    v.into_iter().map(|l| l.0).collect()
}

#[pyclass(name = "Scene", module = "pylinereg", frozen, from_py_object)]
#[derive(Clone)]
struct PyScene(scene::ScenePair);

#[pymethods]
impl PyScene {
    /// Synthetic partial-to-partial pair number `index` of the run seeded with `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed, index = 0, num_lines = 40, overlap = 0.7, noise = true, max_rotation_deg = 45.0))]
    fn synthesize(
        seed: u64,
        index: u64,
        num_lines: usize,
        overlap: f64,
        noise: bool,
        max_rotation_deg: f64,
    ) -> PyResult<Self> {
        let mut spec = SceneSpec {
            overlap,
            noise: if noise { NoiseConfig::default() } else { NoiseConfig::zero() },
            ..SceneSpec::default()
        };
        spec.lines.num_lines = num_lines;
        spec.pose.rotation_deg = (0.0, max_rotation_deg);
        scene::synth_scene(&spec, seed, index).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::read_scene(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_scene(&path, &self.0).map_err(err)
    }

    #[getter]
    fn source(&self) -> Vec<PyLine> {
        lines(&self.0.source)
    }

    #[getter]
    fn target(&self) -> Vec<PyLine> {
        lines(&self.0.target)
    }

    #[getter]
    fn gt_pose(&self) -> PyPose {
        PyPose(self.0.gt_pose)
    }

    #[getter]
    fn gt_matches(&self) -> Vec<(usize, usize)> {
        self.0.gt_matches.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(source={}, target={}, matches={})",
            self.0.source.len(),
            self.0.target.len(),
            self.0.gt_matches.len()
        )
    }
}

#[pyfunction]
fn read_lineset(path: PathBuf) -> PyResult<Vec<PyLine>> {
    io::read_lineset(&path).map(|v| lines(&v)).map_err(err)
}

#[pyfunction]
fn write_lineset(path: PathBuf, lines: Vec<PyLine>) -> PyResult<()> {
    io::write_lineset(&path, &unwrap_lines(lines)).map_err(err)
}

/// Entropic transport plan for `cost` (rows = source) with marginals `r`, `s`.
#[pyfunction]
#[pyo3(signature = (cost, r, s, lam = 0.1, iterations = 30))]
fn sinkhorn(cost: Vec<Vec<f64>>, r: Vec<f64>, s: Vec<f64>, lam: f64, iterations: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || cost.iter().any(|row| row.len() != n) {
        return Err(LineregError::new_err("cost must be a non-empty rectangular matrix"));
    }
    let h = CostMatrix(nalgebra::DMatrix::from_fn(m, n, |i, j| cost[i][j]));
    let w = sinkhorn_robust(&h, &r, &s, &SinkhornConfig { lambda: lam, iterations }).map_err(err)?;
    Ok((0..m).map(|i| (0..n).map(|j| w.0[(i, j)]).collect()).collect())
}

#[pyclass(name = "Registration", module = "pylinereg", frozen, skip_from_py_object)]
struct PyRegistration {
    #[pyo3(get)]
    pose: PyPose,
    #[pyo3(get)]
    inlier_pairs: Vec<(usize, usize)>,
    #[pyo3(get)]
    score_sum: f64,
    #[pyo3(get)]
    hypothesis_count: usize,
    #[pyo3(get)]
    seconds: (f64, f64, f64),
}

impl PyRegistration {
    fn new(r: RegistrationResult, t: Timing) -> Self {
        Self {
            pose: PyPose(r.pose),
            inlier_pairs: r.inlier_pairs,
            score_sum: r.score_sum,
            hypothesis_count: r.hypothesis_count,
            seconds: (t.features_s, t.matching_s, t.pose_s),
        }
    }
}

#[pymethods]
impl PyRegistration {
    fn __repr__(&self) -> String {
        format!(
            "Registration({}, inliers={}, hypotheses={})",
            self.pose.__repr__(),
            self.inlier_pairs.len(),
            self.hypothesis_count
        )
    }
}

/// Network parameters plus optimizer state.
#[pyclass(name = "Model", module = "pylinereg", skip_from_py_object)]
struct PyModel(TrainState);

fn profile(name: &str) -> PyResult<NetConfig> {
    match name {
        "desk" => Ok(NetConfig::desk()),
        "tiny" => Ok(NetConfig::tiny()),
        "full" => Ok(NetConfig::full()),
        other => Err(LineregError::new_err(format!("unknown profile `{other}`"))),
    }
}

fn method(name: &str) -> PyResult<Method> {
    name.parse().map_err(err)
}

#[pymethods]
impl PyModel {
    /// Freshly initialized network of the named profile (`desk`, `tiny`, `full`).
    #[new]
    #[pyo3(signature = (profile_name = "desk", seed = 0))]
    fn new(profile_name: &str, seed: u64) -> PyResult<Self> {
        let cfg = profile(profile_name)?;
        let mut rng = scene::scene_rng(seed, u64::MAX);
        let params = TrunkParams::init(&cfg, &mut rng).map_err(err)?;
        Ok(Self(TrainState::new(params)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        train::load_checkpoint(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&path, &self.0).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params.num_scalars()
    }

    /// Trains until `epochs` epochs are complete; returns `(epoch, mean_loss, precision)` rows.
    #[pyo3(signature = (scenes, epochs, learning_rate = 1e-3, batch_size = 12, seed = 0, regression = false))]
    fn train(
        &mut self,
        py: Python<'_>,
        scenes: Vec<PyScene>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        regression: bool,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let set: Vec<_> = scenes.into_iter().map(|s| s.0).collect();
        let cfg = TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
            objective: if regression {
                train::Objective::Regression
            } else {
                train::Objective::Matching
            },
            ..TrainConfig::default()
        };
        let state = &mut self.0;
        let recs = py
            .detach(|| train::train(state, &set, &[], &cfg, &SinkhornConfig::default(), |_, _| Ok(())))
            .map_err(err)?;
        Ok(recs.iter().map(|r| (r.epoch, r.mean_loss, r.match_precision_at_k)).collect())
    }

    /// Top-K learned matches as `(source, target, weight)`.
    #[pyo3(signature = (source, target, top_k = 200))]
    fn match_lines(&self, source: Vec<PyLine>, target: Vec<PyLine>, top_k: usize) -> PyResult<Vec<(usize, usize, f64)>> {
        let (src, dst) = (unwrap_lines(source), unwrap_lines(target));
        let m = net_match(&src, &dst, &self.0.params, &SinkhornConfig::default(), top_k, &mut Timing::default())
            .map_err(err)?;
        Ok(m.matches.iter().map(|x| (x.source, x.target, x.weight)).collect())
    }
}

/// Registers `source` onto `target` with `net`, `icl`, or `regression`.
#[pyfunction]
#[pyo3(signature = (source, target, method_name = "icl", model = None, seed = 0, top_k = 200))]
fn register(
    py: Python<'_>,
    source: Vec<PyLine>,
    target: Vec<PyLine>,
    method_name: &str,
    model: Option<PyRef<'_, PyModel>>,
    seed: u64,
    top_k: usize,
) -> PyResult<PyRegistration> {
    let m = method(method_name)?;
    let mut cfg = RunConfig {
        top_k,
        ..RunConfig::default()
    };
    cfg.ransac.seed = seed;
    let params = model.map(|p| p.0.params.clone());
    let models = Models {
        net: params.clone(),
        regression: params,
    };
    let (src, dst) = (unwrap_lines(source), unwrap_lines(target));
    let (r, t) = py.detach(|| run_register(m, &src, &dst, &cfg, &models)).map_err(err)?;
    Ok(PyRegistration::new(r, t))
}

#[pymodule]
fn pylinereg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LineregError", m.py().get_type::<LineregError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyLine>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyRegistration>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(line_distance, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_error, m)?)?;
    m.add_function(wrap_pyfunction!(translation_error, m)?)?;
    m.add_function(wrap_pyfunction!(read_lineset, m)?)?;
    m.add_function(wrap_pyfunction!(write_lineset, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    Ok(())
}
