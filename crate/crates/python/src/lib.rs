//! Python bindings. Images cross the boundary as nested lists: colour images
//! as `[height][width][3]`, depth and other planes as `[height][width]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use uwsplat::adapt::{classify_water, WaterClass, WaterProfile};
use uwsplat::attenuation::AttenuationParams;
use uwsplat::diff::{to_color_field, to_scalar_field, ParamVars, Tape};
use uwsplat::field::{ColorField, ScalarField};
use uwsplat::gate::{gradient_gate, GATE_SEEDS, GATE_STEP};
use uwsplat::io;
use uwsplat::losses;
use uwsplat::renderer::rasterize_var;
use uwsplat::scattering::{ScatterConfig, ScatterParams};
use uwsplat::synth::{self, default_classifier, generate_scene, SceneBundle, SceneSpec};
use uwsplat::train::{self, view_model, Checkpoint, Observation, RecoveryConfig, TrainConfig, TrainViews};
use uwsplat::Error;

type Image = Vec<Vec<[f64; 3]>>;
type Plane = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config { .. } => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_in(rows: Image) -> PyResult<ColorField> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows differ in length"));
    }
    ColorField::new(w, h, rows.into_iter().flatten().flatten().collect()).map_err(py_err)
}

fn plane_in(rows: Plane) -> PyResult<ScalarField> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("plane rows differ in length"));
    }
    ScalarField::new(w, h, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn image_out(f: &ColorField) -> Image {
    (0..f.height).map(|y| (0..f.width).map(|x| f.get(x, y)).collect()).collect()
}

fn plane_out(f: &ScalarField) -> Plane {
    (0..f.height).map(|y| (0..f.width).map(|x| f.get(x, y)).collect()).collect()
}

fn parse_class(name: &str) -> PyResult<WaterClass> {
    name.parse().map_err(py_err)
}

/// A synthetic scene: clean views, depth, degraded views and the medium.
#[pyclass(module = "uwsplat", frozen)]
struct Scene {
    inner: SceneBundle,
}

impl Scene {
    fn view(&self, i: usize) -> PyResult<usize> {
        if i < self.inner.cameras.len() {
            Ok(i)
        } else {
            Err(PyIndexError::new_err(format!("view {i} out of range ({} views)", self.inner.cameras.len())))
        }
    }
}

#[pymethods]
impl Scene {
    #[getter]
    fn width(&self) -> usize {
        self.inner.spec.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.spec.height
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.cameras.len()
    }

    #[getter]
    fn water_class(&self) -> &'static str {
        self.inner.spec.class.name()
    }

    #[getter]
    fn beta(&self) -> [f64; 3] {
        self.inner.spec.beta
    }

    #[getter]
    fn b(&self) -> f64 {
        self.inner.spec.b
    }

    #[getter]
    fn b_inf(&self) -> [f64; 3] {
        self.inner.spec.b_inf
    }

    fn clean(&self, view: usize) -> PyResult<Image> {
        Ok(image_out(&self.inner.clean[self.view(view)?]))
    }

    fn degraded(&self, view: usize) -> PyResult<Image> {
        Ok(image_out(&self.inner.degraded[self.view(view)?]))
    }

    fn depth(&self, view: usize) -> PyResult<Plane> {
        Ok(plane_out(&self.inner.depth[self.view(view)?]))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_bundle(&path, &self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!("Scene({}, {}x{}, {} views)", s.class.name(), s.width, s.height, self.inner.cameras.len())
    }
}

/// Generates a synthetic scene with a medium sampled for `water_class`.
#[pyfunction]
#[pyo3(signature = (water_class = "medium", seed = 0, n_gaussians = 200, width = 64, height = 64, n_views = 3))]
fn synth_scene(py: Python<'_>, water_class: &str, seed: u64, n_gaussians: usize, width: usize, height: usize, n_views: usize) -> PyResult<Scene> {
    let spec = SceneSpec::sample(parse_class(water_class)?, seed, n_gaussians, width, height, n_views);
    let inner = py.detach(|| generate_scene(&spec)).map_err(py_err)?;
    Ok(Scene { inner })
}

/// Reads a scene bundle directory.
#[pyfunction]
fn load_scene(path: PathBuf) -> PyResult<Scene> {
    Ok(Scene { inner: io::read_bundle(&path).map_err(py_err)? })
}

/// Medium parameters fitted to clean/degraded pairs.
#[pyclass(module = "uwsplat", frozen, get_all)]
struct Physics {
    beta: [f64; 3],
    b: f64,
    b_inf: [f64; 3],
    loss: f64,
}

#[pymethods]
impl Physics {
    fn __repr__(&self) -> String {
        format!("Physics(beta={:?}, b={}, b_inf={:?}, loss={:e})", self.beta, self.b, self.b_inf, self.loss)
    }
}

/// Fits `beta`, `b` and `B_inf` on the listed views of `scene`.
#[pyfunction]
#[pyo3(signature = (scene, views = None, iterations = None))]
fn recover(py: Python<'_>, scene: &Scene, views: Option<Vec<usize>>, iterations: Option<usize>) -> PyResult<Physics> {
    let b = &scene.inner;
    let views = views.unwrap_or_else(|| (0..b.cameras.len()).collect());
    let mut obs = Vec::with_capacity(views.len());
    for v in views {
        let i = scene.view(v)?;
        obs.push(Observation { clean: &b.clean[i], depth: &b.depth[i], degraded: &b.degraded[i] });
    }
    let mut cfg = RecoveryConfig::default();
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let r = py.detach(|| train::recover_physics(&obs, &cfg)).map_err(py_err)?;
    Ok(Physics { beta: r.attenuation.beta(), b: r.scatter.b(), b_inf: r.scatter.b_inf(), loss: r.loss })
}

/// Applies the plain medium model to a clean image.
#[pyfunction]
fn degrade(image: Image, depth: Plane, beta: [f64; 3], b: f64, b_inf: [f64; 3]) -> PyResult<Image> {
    let out = synth::degrade(&image_in(image)?, &plane_in(depth)?, beta, b, b_inf).map_err(py_err)?;
    Ok(image_out(&out))
}

/// Inverts the plain medium model; returns the restored image and the mask of
/// pixels whose attenuation fell below `a_min`.
#[pyfunction]
#[pyo3(signature = (image, depth, physics, a_min = 1e-3))]
fn restore(image: Image, depth: Plane, physics: &Physics, a_min: f64) -> PyResult<(Image, Vec<Vec<bool>>)> {
    let depth = plane_in(depth)?;
    let att = AttenuationParams::from_beta(physics.beta, [1.0; 3], 0.0);
    let sca = ScatterParams::init(0, physics.b_inf, physics.b, 0.0, 0.0);
    let r = train::restore(&image_in(image)?, &depth, &att, &sca, &ScatterConfig::neutral(), &WaterProfile::neutral(), a_min).map_err(py_err)?;
    let mask = r.mask.chunks(depth.width.max(1)).map(<[bool]>::to_vec).collect();
    Ok((image_out(&r.image), mask))
}

#[pyfunction]
fn psnr(a: Image, b: Image) -> PyResult<f64> {
    losses::psnr(&image_in(a)?, &image_in(b)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: Image, b: Image) -> PyResult<f64> {
    losses::ssim(&image_in(a)?, &image_in(b)?).map_err(py_err)
}

/// Water class, class probabilities and the continuous index `w` of an image
/// under the built-in classifier.
#[pyfunction]
fn classify(py: Python<'_>, image: Image) -> PyResult<(&'static str, [f64; 3], f64)> {
    let img = image_in(image)?;
    let p = py.detach(|| default_classifier().and_then(|cw| classify_water(&img, &cw))).map_err(py_err)?;
    Ok((p.class().name(), p.probs, p.w))
}

/// Finite-difference gradient check; one `(case, max_rel_err, slot)` per case.
#[pyfunction]
#[pyo3(signature = (seeds = None, step = GATE_STEP))]
fn gradcheck(py: Python<'_>, seeds: Option<Vec<u64>>, step: f64) -> PyResult<Vec<(String, f64, String)>> {
    let seeds = seeds.unwrap_or_else(|| GATE_SEEDS.to_vec());
    let reports = py.detach(|| gradient_gate(&seeds, step)).map_err(py_err)?;
    Ok(reports.into_iter().map(|r| (r.op, r.max_rel_err, r.argmax_slot)).collect())
}

/// A trained model: Gaussians, medium parameters and the training log.
#[pyclass(module = "uwsplat", frozen)]
struct Model {
    checkpoint: Checkpoint,
    log: Vec<train::LogRow>,
    diverged: Option<String>,
}

#[pymethods]
impl Model {
    #[getter]
    fn iteration(&self) -> usize {
        self.checkpoint.iteration
    }

    #[getter]
    fn water_class(&self) -> &'static str {
        self.checkpoint.profile.class().name()
    }

    #[getter]
    fn water_probs(&self) -> [f64; 3] {
        self.checkpoint.profile.probs
    }

    #[getter]
    fn diverged(&self) -> Option<String> {
        self.diverged.clone()
    }

    #[getter]
    fn n_gaussians(&self) -> PyResult<usize> {
        Ok(self.checkpoint.cloud().map_err(py_err)?.len())
    }

    #[getter]
    fn beta(&self) -> PyResult<[f64; 3]> {
        Ok(self.checkpoint.attenuation().map_err(py_err)?.beta())
    }

    #[getter]
    fn b(&self) -> PyResult<f64> {
        Ok(self.checkpoint.scatter().map_err(py_err)?.b())
    }

    #[getter]
    fn b_inf(&self) -> PyResult<[f64; 3]> {
        Ok(self.checkpoint.scatter().map_err(py_err)?.b_inf())
    }

    /// Training log rows as dicts; empty for a loaded checkpoint.
    #[getter]
    fn log<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("iter", r.iter)?;
                for (k, v) in [("basic", r.basic), ("ab", r.ab), ("wat", r.wat), ("edge", r.edge), ("ms", r.ms), ("total", r.total), ("psnr", r.psnr)] {
                    d.set_item(k, v)?;
                }
                Ok(d)
            })
            .collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_checkpoint(&path, &self.checkpoint).map_err(py_err)
    }

    /// Renders `view` of `scene`; returns a dict of the image and medium fields.
    fn render<'py>(&self, py: Python<'py>, scene: &Scene, view: usize) -> PyResult<Bound<'py, PyDict>> {
        let cam = &scene.inner.cameras[scene.view(view)?];
        let ck = &self.checkpoint;
        let mut t = Tape::new();
        let vars = ParamVars::load(&mut t, &ck.params, false);
        let observed = rasterize_var(&mut t, &vars, cam, &ck.config.render).color;
        let m = view_model(&mut t, &vars, cam, observed, &ck.profile, &ck.config);
        let d = PyDict::new(py);
        for (k, v) in [("j_hat", m.j_hat), ("degraded", m.degraded), ("attenuation", m.attenuation), ("backscatter", m.backscatter)] {
            d.set_item(k, image_out(&to_color_field(&t, v)))?;
        }
        for (k, v) in [("depth", m.depth), ("alpha", m.alpha), ("scatter_opacity", m.scatter_opacity), ("edge", m.edge)] {
            d.set_item(k, plane_out(&to_scalar_field(&t, v)))?;
        }
        Ok(d)
    }

    /// Inverts the learned medium on an observed image.
    #[pyo3(signature = (image, depth, a_min = 1e-3))]
    fn restore(&self, image: Image, depth: Plane, a_min: f64) -> PyResult<Image> {
        let ck = &self.checkpoint;
        let r = train::restore(&image_in(image)?, &plane_in(depth)?, &ck.attenuation().map_err(py_err)?, &ck.scatter().map_err(py_err)?, &ck.config.scatter, &ck.profile, a_min)
            .map_err(py_err)?;
        Ok(image_out(&r.image))
    }

    fn __repr__(&self) -> String {
        format!("Model(iteration={}, water_class={})", self.checkpoint.iteration, self.water_class())
    }
}

/// Trains on the degraded views of `scene`.
#[pyfunction]
#[pyo3(signature = (scene, iterations = 2000, n_gaussians = 200, seed = 0, eval_interval = 100))]
fn train_model(py: Python<'_>, scene: &Scene, iterations: usize, n_gaussians: usize, seed: u64, eval_interval: usize) -> PyResult<Model> {
    let cfg = TrainConfig { iterations, n_gaussians, seed, eval_interval, ..TrainConfig::default() };
    let b = &scene.inner;
    let views = TrainViews { cameras: &b.cameras, images: &b.degraded, depth: &b.depth };
    let out = py.detach(|| default_classifier().and_then(|cw| train::train(&views, &cfg, &cw))).map_err(py_err)?;
    Ok(Model { checkpoint: out.checkpoint, log: out.log, diverged: out.diverged })
}

/// Reads a checkpoint written by `Model.save` or the command-line trainer.
#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<Model> {
    Ok(Model { checkpoint: io::read_checkpoint(&path).map_err(py_err)?, log: Vec::new(), diverged: None })
}

#[pymodule]
#[pyo3(name = "uwsplat")]
fn uwsplat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Physics>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(load_scene, m)?)?;
    m.add_function(wrap_pyfunction!(recover, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(restore, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    Ok(())
}
