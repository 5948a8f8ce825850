//! Python bindings. Structured values cross the boundary as native dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use autocollect_core::dataset::{content_hash, read_episodes, replay, EpisodeFilter};
use autocollect_core::demos::{record_seed_library, SCRIPTS};
use autocollect_core::fsm::{self, FsmEvent, FsmState};
use autocollect_core::library::{load_library, save_library, AffordanceLibrary, SimilarityWeights};
use autocollect_core::orchestrator::{
    dry_run, load_registry, plan_world, render_report, run_campaign_with, CampaignConfig, CampaignStats,
};
use autocollect_core::planner::{validate_lifo, OracleReasoner, PlannerConfig, TaskPlan};
use autocollect_core::sim::{all_predicates, describe_scene, spawn_scene, TemplateRegistry, WorldState};

create_exception!(autocollect, AutocollectError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    AutocollectError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A simulated tabletop scene.
#[pyclass(module = "autocollect", skip_from_py_object)]
#[derive(Clone)]
struct World {
    inner: WorldState,
}

#[pymethods]
impl World {
    #[staticmethod]
    #[pyo3(signature = (template, seed=0))]
    fn spawn(template: &str, seed: u64) -> PyResult<Self> {
        let inner = spawn_scene(&TemplateRegistry::builtin(), template, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_dict(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Self { inner: from_py(py, value)? })
    }

    #[getter]
    fn template(&self) -> &str {
        &self.inner.template
    }

    fn object_names(&self) -> Vec<String> {
        self.inner.objects.values().map(|o| o.descriptor.name.clone()).collect()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn describe(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &describe_scene(&self.inner))
    }

    /// Ground-truth value of every predicate over the scene's objects.
    fn predicates(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &all_predicates(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!("World(template={:?}, objects={})", self.inner.template, self.inner.objects.len())
    }
}

/// The skill-keyed store of demonstrations.
#[pyclass(module = "autocollect")]
struct Library {
    inner: AffordanceLibrary,
}

#[pymethods]
impl Library {
    #[staticmethod]
    #[pyo3(signature = (per_verb=3, seed=0))]
    fn record_seed(per_verb: usize, seed: u64) -> PyResult<Self> {
        let inner = record_seed_library(&TemplateRegistry::builtin(), &SCRIPTS, per_verb, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_library(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_library(&self.inner, &path).map_err(err)
    }

    fn snapshot_hash(&self) -> String {
        self.inner.snapshot_hash()
    }

    fn demo_ids(&self) -> Vec<String> {
        self.inner.iter().map(|d| d.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Plans a paired forward and reverse task for `world` with the oracle reasoner.
    #[pyo3(signature = (world, seed=0))]
    fn plan(&self, py: Python<'_>, world: &World, seed: u64) -> PyResult<Py<PyAny>> {
        let registry = Arc::new(TemplateRegistry::builtin());
        let mut backend = OracleReasoner::new(registry.clone(), SimilarityWeights::default(), seed);
        let plan = plan_world(&mut backend, &world.inner, &registry, &self.inner, &PlannerConfig::default())
            .map_err(err)?;
        to_py(py, &plan)
    }
}

/// Reverse-order violations of a plan dict as `(step, reason)` pairs.
#[pyfunction]
fn validate_plan(py: Python<'_>, plan: &Bound<'_, PyAny>) -> PyResult<Vec<(usize, String)>> {
    let plan: TaskPlan = from_py(py, plan)?;
    Ok(validate_lifo(&plan).into_iter().map(|v| (v.step, v.reason)).collect())
}

/// One FSM transition. Events are `plan_ready`, `plan_failed`,
/// `repetition_cap_reached`, `forward_result` and `reverse_result`; the last two need `success`.
#[pyfunction]
#[pyo3(signature = (state, event, success=None))]
fn step_fsm(state: &str, event: &str, success: Option<bool>) -> PyResult<(String, String)> {
    let state: FsmState =
        serde_json::from_value(serde_json::Value::String(state.into())).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let event = match (event, success) {
        ("plan_ready", None) => FsmEvent::PlanReady,
        ("plan_failed", None) => FsmEvent::PlanFailed,
        ("repetition_cap_reached", None) => FsmEvent::RepetitionCapReached,
        ("forward_result", Some(b)) => FsmEvent::ForwardResult(b),
        ("reverse_result", Some(b)) => FsmEvent::ReverseResult(b),
        _ => return Err(PyValueError::new_err(format!("bad event {event:?} with success={success:?}"))),
    };
    let (next, storage) = fsm::step_fsm(state, event).map_err(err)?;
    let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
    Ok((
        name(serde_json::to_value(next).map_err(err)?),
        name(serde_json::to_value(storage).map_err(err)?),
    ))
}

fn config_from_toml(text: &str) -> PyResult<CampaignConfig> {
    CampaignConfig::from_toml(text, &PathBuf::from("config.toml")).map_err(err)
}

fn campaign_library(cfg: &CampaignConfig) -> PyResult<AffordanceLibrary> {
    if cfg.library_path.exists() {
        return load_library(&cfg.library_path).map_err(err);
    }
    let lib = record_seed_library(&TemplateRegistry::builtin(), &SCRIPTS, 3, cfg.master_seed).map_err(err)?;
    save_library(&lib, &cfg.library_path).map_err(err)?;
    Ok(lib)
}

/// Runs a campaign described by TOML text and returns its stats. A missing
/// library is recorded from the scripted seed demonstrations first.
#[pyfunction]
fn run_campaign(py: Python<'_>, config_toml: &str) -> PyResult<Py<PyAny>> {
    let cfg = config_from_toml(config_toml)?;
    let registry = load_registry(&cfg).map_err(err)?;
    cfg.validate(&registry).map_err(err)?;
    let library = campaign_library(&cfg)?;
    let outcome = run_campaign_with(&cfg, Arc::new(registry), &library).map_err(err)?;
    to_py(py, &outcome.stats)
}

/// Plans the first scene of every lane without executing anything.
#[pyfunction]
fn plan_campaign(py: Python<'_>, config_toml: &str) -> PyResult<Py<PyAny>> {
    let cfg = config_from_toml(config_toml)?;
    let registry = load_registry(&cfg).map_err(err)?;
    let library = campaign_library(&cfg)?;
    to_py(py, &dry_run(&cfg, Arc::new(registry), &library).map_err(err)?)
}

/// Reads a dataset file: `(episodes, corrupt_records)`.
#[pyfunction]
fn read_dataset(py: Python<'_>, path: PathBuf) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let out = read_episodes(&path, &EpisodeFilter::all()).map_err(err)?;
    Ok((to_py(py, &out.episodes)?, to_py(py, &out.corrupt)?))
}

/// Re-simulates every stored episode and returns the replay reports.
#[pyfunction]
fn replay_dataset(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let registry = TemplateRegistry::builtin();
    let out = read_episodes(&path, &EpisodeFilter::all()).map_err(err)?;
    let reports = out.episodes.iter().map(|e| replay(e, &registry, None)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    to_py(py, &reports)
}

#[pyfunction]
fn dataset_hash(path: PathBuf) -> PyResult<String> {
    content_hash(&path).map_err(err)
}

/// Renders a stats dict as the text table printed after a campaign.
#[pyfunction]
fn format_stats(py: Python<'_>, stats: &Bound<'_, PyAny>) -> PyResult<String> {
    let stats: CampaignStats = from_py(py, stats)?;
    Ok(render_report(&stats))
}

#[pyfunction]
fn templates() -> Vec<String> {
    TemplateRegistry::builtin().names().into_iter().map(String::from).collect()
}

#[pymodule]
fn autocollect(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AutocollectError", m.py().get_type::<AutocollectError>())?;
    m.add_class::<World>()?;
    m.add_class::<Library>()?;
    m.add_function(wrap_pyfunction!(validate_plan, m)?)?;
    m.add_function(wrap_pyfunction!(step_fsm, m)?)?;
    m.add_function(wrap_pyfunction!(run_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(plan_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(replay_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_hash, m)?)?;
    m.add_function(wrap_pyfunction!(format_stats, m)?)?;
    m.add_function(wrap_pyfunction!(templates, m)?)?;
    Ok(())
}
