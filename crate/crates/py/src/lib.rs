//! Python bindings for the maze environment, datasets, training and
//! evaluation.

use std::path::PathBuf;

use a2pr_core::dataset::{generate_maze_dataset, OfflineDataset, Recipe, DEFAULT_EXPERT_NOISE};
use a2pr_core::eval::{evaluate_actor, load_or_compute_anchors, true_q_report, ScoreAnchors};
use a2pr_core::maze::MazeConfig;
use a2pr_core::rng::{stream, SeededRng};
use a2pr_core::trainer::{self, load_checkpoint, MetricsRow, TrainConfig, METRICS_HEADER};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: a2pr_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Offline transition dataset.
#[pyclass(name = "Dataset", module = "a2pr")]
struct PyDataset {
    inner: OfflineDataset,
}

#[pymethods]
impl PyDataset {
    /// Generate `n` transitions from a recipe such as
    /// `"expert:g0:0.05,expert:g1:0.45,expert:g2:0.50"`.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, recipe=None, expert_noise=DEFAULT_EXPERT_NOISE))]
    fn generate(n: usize, seed: u64, recipe: Option<&str>, expert_noise: f64) -> PyResult<Self> {
        let recipe = match recipe {
            Some(r) => r.parse::<Recipe>().map_err(py_err)?,
            None => Recipe::multi_goal(),
        };
        let mut rng = SeededRng::with_stream(seed, stream::DATA);
        let (inner, _) = generate_maze_dataset(&MazeConfig::default(), &recipe, n, expert_noise, &mut rng)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: OfflineDataset::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: OfflineDataset::from_bytes(data).map_err(py_err)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    /// `(state, action, reward, next_state, done)` at index `i`.
    fn transition(&self, i: usize) -> PyResult<(Vec<f32>, Vec<f32>, f32, Vec<f32>, bool)> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!("index {i} out of range")));
        }
        let d = &self.inner;
        Ok((d.state(i).to_vec(), d.action(i).to_vec(), d.reward(i), d.next_state(i).to_vec(), d.done(i)))
    }

    /// `(reward, count)` pairs.
    fn reward_histogram(&self) -> Vec<(f32, usize)> {
        self.inner.reward_histogram()
    }
}

/// Training hyperparameters; every key is readable and settable by name.
#[pyclass(name = "TrainConfig", module = "a2pr")]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                inner.set(&key, &value).map_err(py_err)?;
            }
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::from_kv_text(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_kv_text()
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let value = value.str()?.to_string();
        self.inner.set(key, &value).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key '{key}'")))
    }

    fn keys(&self) -> Vec<&'static str> {
        TrainConfig::KEYS.to_vec()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }
}

fn row_dict<'py>(py: Python<'py>, row: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let line = row.to_csv_line();
    for (k, v) in METRICS_HEADER.split(',').zip(line.split(',')) {
        if k == "step" {
            d.set_item(k, row.step)?;
        } else if v.is_empty() {
            d.set_item(k, py.None())?;
        } else {
            d.set_item(k, v.parse::<f64>().unwrap_or(f64::NAN))?;
        }
    }
    Ok(d)
}

/// Step-by-step trainer on the default maze.
#[pyclass(name = "Trainer", module = "a2pr")]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    /// Score anchors are computed once and cached under `anchor_dir` when
    /// given.
    #[new]
    #[pyo3(signature = (config, dataset, anchor_dir=None))]
    fn new(config: &PyTrainConfig, dataset: &PyDataset, anchor_dir: Option<PathBuf>) -> PyResult<Self> {
        let env = MazeConfig::default();
        let anchors = load_or_compute_anchors(&env, anchor_dir.as_deref()).map_err(py_err)?;
        let inner = trainer::Trainer::new(config.inner.clone(), env, &dataset.inner, anchors).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn resume(config: &PyTrainConfig, dataset: &PyDataset, checkpoint: PathBuf) -> PyResult<Self> {
        let env = MazeConfig::default();
        let anchors = load_or_compute_anchors(&env, None).map_err(py_err)?;
        let inner = trainer::Trainer::resume(config.inner.clone(), env, &dataset.inner, anchors, &checkpoint)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// One gradient step; returns `(q_loss, v_loss, policy_loss or None)`.
    fn step(&mut self) -> PyResult<(f64, f64, Option<f64>)> {
        let m = self.inner.train_step().map_err(py_err)?;
        Ok((m.q_loss, m.v_loss, m.policy.map(|p| p.loss)))
    }

    /// Train to `total_steps`, writing outputs to `output_dir` when given.
    #[pyo3(signature = (output_dir=None))]
    fn run(&mut self, py: Python<'_>, output_dir: Option<PathBuf>) -> PyResult<()> {
        self.inner.output_dir = output_dir;
        let inner = &mut self.inner;
        py.detach(|| inner.run()).map_err(py_err)
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.state.step
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.metrics().iter().map(|r| row_dict(py, r)).collect()
    }

    fn metrics_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        trainer::write_metrics_csv(&mut buf, self.inner.metrics())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(py_err)
    }

    /// Deterministic action for raw observation `obs`.
    fn act(&self, obs: Vec<f64>) -> PyResult<(f64, f64)> {
        let s = &self.inner.state;
        let a = a2pr_core::eval::actor_action(&s.actor, &s.stats, &obs).map_err(py_err)?;
        Ok((a.fx, a.fy))
    }
}

/// Roll out a saved checkpoint; returns a dict of the evaluation report.
#[pyfunction]
#[pyo3(signature = (checkpoint, episodes=10, noise=0.0, seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    episodes: usize,
    noise: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
    let env = MazeConfig::default();
    let anchors = load_or_compute_anchors(&env, None).map_err(py_err)?;
    let (r, _) =
        evaluate_actor(&ck.state.actor, &ck.state.stats, &env, episodes, noise, seed, &anchors).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("episodes", r.episodes)?;
    d.set_item("return_mean", r.return_mean)?;
    d.set_item("return_std", r.return_std)?;
    d.set_item("normalized_score", r.normalized_score)?;
    d.set_item("goal_hit_fractions", r.goal_hit_fractions)?;
    d.set_item("length_mean", r.length_mean)?;
    Ok(d)
}

/// `(est_q_mean, true_q_mean)` over `states` initial states.
#[pyfunction]
#[pyo3(signature = (checkpoint, states=10, seed=0))]
fn true_q(checkpoint: PathBuf, states: usize, seed: u64) -> PyResult<(f64, f64)> {
    let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
    let mut rng = SeededRng::with_stream(seed, stream::EVAL);
    let r = true_q_report(
        &ck.state.actor,
        &ck.state.critic,
        &ck.state.stats,
        &MazeConfig::default(),
        states,
        ck.config.gamma,
        &mut rng,
    )
    .map_err(py_err)?;
    Ok((r.est_q_mean, r.true_q_mean))
}

/// `100 * (j - j_random) / (j_expert - j_random)`.
#[pyfunction]
fn normalized_score(j: f64, j_random: f64, j_expert: f64) -> f64 {
    a2pr_core::eval::normalized_score(j, &ScoreAnchors { j_random, j_expert })
}

#[pymodule]
fn a2pr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(true_q, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_score, m)?)?;
    m.add("VARIANTS", ["a2pr", "td3bc", "base_vae", "no_epbl", "no_aapc"])?;
    Ok(())
}
