//! Single-variable synthetic sweeps.
//!
//! Each grid point runs independent trials: random scene, events, boundary
//! lines with endpoint noise, then CELC (optionally refined) and the
//! three-line baseline. Trials run in parallel; output order is fixed by
//! (grid point, trial, method).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CelcError, Result};
use crate::geometry::{lift_pixel, CameraModel, Vec3};
use crate::harness::metrics::metrics;
use crate::refine::{refine_velocity, RefineParams};
use crate::solver::{solve_celc, solve_ce3lc, ClusterData, MotionEstimate, Observation, SolverParams, ThreeLineCluster};
use crate::synth::{self, LabeledEvent, MotionSpec, NoiseSpec, SceneSpec, Volume};

const MAX_SCENE_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    EventNoise,
    LineNoise,
    OmegaNoise,
    Speed,
    Interval,
    NLines,
}

impl SweepVariable {
    pub const ALL: [SweepVariable; 6] = [
        SweepVariable::EventNoise,
        SweepVariable::LineNoise,
        SweepVariable::OmegaNoise,
        SweepVariable::Speed,
        SweepVariable::Interval,
        SweepVariable::NLines,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::EventNoise => "event_noise",
            SweepVariable::LineNoise => "line_noise",
            SweepVariable::OmegaNoise => "omega_noise",
            SweepVariable::Speed => "speed",
            SweepVariable::Interval => "interval",
            SweepVariable::NLines => "n_lines",
        }
    }

    pub fn default_grid(&self) -> Vec<f64> {
        let steps = |start: f64, step: f64, n: usize| (0..n).map(|i| start + i as f64 * step).collect();
        match self {
            SweepVariable::EventNoise | SweepVariable::LineNoise => steps(0.0, 0.5, 11),
            SweepVariable::OmegaNoise => steps(0.0, 0.1, 11),
            SweepVariable::Speed => steps(0.0, 1.0, 11),
            SweepVariable::Interval => steps(0.2, 0.2, 11),
            SweepVariable::NLines => steps(2.0, 1.0, 9),
        }
    }

    fn is_noise(&self) -> bool {
        matches!(
            self,
            SweepVariable::EventNoise | SweepVariable::LineNoise | SweepVariable::OmegaNoise
        )
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVariable {
    type Err = CelcError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CelcError::InvalidParameter(format!("unknown sweep variable {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CELC")]
    Celc,
    #[serde(rename = "CELC+opt")]
    CelcOpt,
    #[serde(rename = "CE3LC")]
    Ce3lc,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Celc => "CELC",
            Method::CelcOpt => "CELC+opt",
            Method::Ce3lc => "CE3LC",
        }
    }
}

/// Scenario every sweep starts from; the swept variable overrides one field.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseScenario {
    pub omega: Vec3,
    pub v: Vec3,
    pub duration: f64,
    pub n_lines: usize,
    pub n_events: usize,
    pub event_sigma: f64,
    pub line_sigma: f64,
    pub omega_sigma: f64,
    pub volume: Volume,
    pub camera: CameraModel,
}

impl Default for BaseScenario {
    fn default() -> Self {
        let m = MotionSpec::default();
        Self {
            omega: m.omega,
            v: m.v,
            duration: m.duration,
            n_lines: 5,
            n_events: 5000,
            event_sigma: 2.0,
            line_sigma: 2.0,
            omega_sigma: 0.0,
            volume: Volume::default(),
            camera: CameraModel::davis346(),
        }
    }
}

/// Motion, noise and line count of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointScenario {
    pub motion: MotionSpec,
    pub noise: NoiseSpec,
    pub n_lines: usize,
}

impl BaseScenario {
    /// Noise sweeps switch the other noise sources off so the swept one is
    /// isolated; factor sweeps keep the base noise.
    pub fn at(&self, variable: SweepVariable, value: f64) -> Result<PointScenario> {
        let mut motion = MotionSpec {
            omega: self.omega,
            v: self.v,
            duration: self.duration,
        };
        let mut noise = if variable.is_noise() {
            NoiseSpec::default()
        } else {
            NoiseSpec {
                event_sigma: self.event_sigma,
                line_endpoint_sigma: self.line_sigma,
                omega_sigma: self.omega_sigma,
                seed: 0,
            }
        };
        let mut n_lines = self.n_lines;
        let bad = || CelcError::InvalidParameter(format!("{variable} = {value}"));
        match variable {
            SweepVariable::EventNoise => noise.event_sigma = value,
            SweepVariable::LineNoise => noise.line_endpoint_sigma = value,
            SweepVariable::OmegaNoise => noise.omega_sigma = value,
            SweepVariable::Speed => {
                let dir = self.v.try_normalize(0.0).ok_or_else(bad)?;
                motion.v = value * dir;
            }
            SweepVariable::Interval => motion.duration = value,
            SweepVariable::NLines => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(bad());
                }
                n_lines = value as usize;
            }
        }
        let ok = noise.event_sigma >= 0.0
            && noise.line_endpoint_sigma >= 0.0
            && noise.omega_sigma >= 0.0
            && motion.duration > 0.0
            && value.is_finite();
        if !ok {
            return Err(bad());
        }
        Ok(PointScenario { motion, noise, n_lines })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub base: BaseScenario,
    pub seed: u64,
    pub refine: bool,
    pub ce3lc: bool,
    pub solver: SolverParams,
    pub refine_params: RefineParams,
    /// Record per-trial wall time. Off by default so outputs are reproducible.
    pub timing: bool,
    /// Trial `i` draws from the same seed at every grid point, so points are
    /// compared on common scenes and noise draws.
    pub paired: bool,
}

impl SweepConfig {
    pub fn new(variable: SweepVariable) -> Self {
        let base = BaseScenario::default();
        Self {
            variable,
            grid: variable.default_grid(),
            trials: 500,
            refine_params: RefineParams::for_camera(&base.camera),
            base,
            seed: 0,
            refine: true,
            ce3lc: true,
            solver: SolverParams::default(),
            timing: false,
            paired: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub variable: SweepVariable,
    pub value: f64,
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    /// `ok`, `degenerate`, `undefined` (zero ground truth) or `failed`.
    pub status: String,
    pub degeneracy: String,
    pub epsilon: Option<f64>,
    pub phi: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl TrialRecord {
    /// Counts towards the per-point statistics.
    pub fn is_valid(&self) -> bool {
        self.status == "ok" && self.phi.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub variable: SweepVariable,
    pub value: f64,
    pub method: Method,
    pub n_trials: usize,
    pub n_used: usize,
    pub n_excluded: usize,
    pub mean_epsilon: Option<f64>,
    pub std_epsilon: Option<f64>,
    pub mean_phi: Option<f64>,
    pub std_phi: Option<f64>,
    pub median_phi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<PointSummary>,
}

impl SweepResult {
    pub fn summary_for(&self, method: Method) -> Vec<&PointSummary> {
        self.summary.iter().filter(|s| s.method == method).collect()
    }
}

/// Seed of one trial, distinct for every (grid point, trial) pair.
pub fn trial_seed(base: u64, point: usize, trial: usize) -> u64 {
    let mut z = base ^ ((point as u64) << 32 | trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic clusters for one trial.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub scene: SceneSpec,
    pub events: Vec<LabeledEvent>,
    pub clusters: Vec<ClusterData>,
    pub three_line: Vec<ThreeLineCluster>,
    /// Angular velocity handed to the solvers, with gyro noise applied.
    pub omega_measured: Vec3,
}

/// Draws a scene whose lines all project in front of the camera at both
/// ends and the middle of the interval, then its events and lines.
pub fn generate_trial<R: Rng + ?Sized>(
    point: &PointScenario,
    base: &BaseScenario,
    n_events: usize,
    rng: &mut R,
) -> Result<TrialData> {
    let cam = &base.camera;
    let m = &point.motion;
    let (t_s, t_e) = (0.0, m.duration);
    let t_mid = 0.5 * (t_s + t_e);
    let sigma = point.noise.line_endpoint_sigma;
    // one stream per noise source, so grid points that share a seed differ
    // only in the swept quantity
    let mut scene_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut line_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut event_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut gyro_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut last_err = None;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let scene = synth::random_scene(point.n_lines, base.volume, &mut scene_rng);
        let lines: Result<Vec<_>> = scene
            .segments
            .iter()
            .map(|seg| {
                let geometry = synth::ground_truth_boundary_lines(seg, m, cam, t_s, t_e, sigma, &mut line_rng)?;
                let center = synth::ground_truth_line(seg, m, cam, t_mid, sigma, &mut line_rng)?;
                Ok(ThreeLineCluster { geometry, center, t_mid })
            })
            .collect();
        let three_line = match lines {
            Ok(l) => l,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let events = synth::generate_events(&scene, m, cam, n_events, &point.noise, &mut event_rng);
        let mut clusters: Vec<ClusterData> = three_line
            .iter()
            .map(|c| ClusterData {
                geometry: c.geometry,
                observations: Vec::new(),
            })
            .collect();
        for e in &events {
            clusters[e.label].observations.push(Observation {
                bearing: lift_pixel(&e.event.pixel(), cam)?,
                t: e.event.t,
            });
        }
        let omega_measured = if point.noise.omega_sigma > 0.0 {
            let n = Normal::new(0.0, point.noise.omega_sigma).expect("positive sigma");
            m.omega + Vec3::new(n.sample(&mut gyro_rng), n.sample(&mut gyro_rng), n.sample(&mut gyro_rng))
        } else {
            m.omega
        };
        return Ok(TrialData {
            scene,
            events,
            clusters,
            three_line,
            omega_measured,
        });
    }
    Err(last_err.unwrap_or(CelcError::EmptyInput("no usable scene".into())))
}

fn record_for(
    cfg: &SweepConfig,
    value: f64,
    trial: usize,
    seed: u64,
    method: Method,
    v_gt: &Vec3,
    outcome: Result<(Vec3, Option<&MotionEstimate>)>,
    wall: Option<f64>,
) -> TrialRecord {
    let mut rec = TrialRecord {
        variable: cfg.variable,
        value,
        trial,
        seed,
        method,
        status: "ok".into(),
        degeneracy: "none".into(),
        epsilon: None,
        phi: None,
        wall_time_s: wall,
    };
    match outcome {
        Err(e) => {
            rec.status = "failed".into();
            log::debug!("{} trial {trial} {}: {e}", cfg.variable, method.tag());
        }
        Ok((v, est)) => {
            if let Some(est) = est {
                rec.degeneracy = est.degeneracy_kind.as_str().into();
                if est.degenerate {
                    rec.status = "degenerate".into();
                }
            }
            match metrics(v_gt, &v) {
                Ok(m) => {
                    rec.epsilon = Some(m.epsilon);
                    rec.phi = Some(m.phi);
                }
                Err(_) => {
                    if rec.status == "ok" {
                        rec.status = "undefined".into();
                    }
                }
            }
        }
    }
    rec
}

/// All method records of one trial, in method order.
pub fn run_trial(cfg: &SweepConfig, point_index: usize, value: f64, trial: usize) -> Vec<TrialRecord> {
    let seed = trial_seed(cfg.seed, if cfg.paired { 0 } else { point_index }, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let methods = 1 + cfg.refine as usize + cfg.ce3lc as usize;
    let fail_all = |e: &CelcError| -> Vec<TrialRecord> {
        let mut out = Vec::new();
        for method in [Method::Celc, Method::CelcOpt, Method::Ce3lc] {
            if (method == Method::CelcOpt && !cfg.refine) || (method == Method::Ce3lc && !cfg.ce3lc) {
                continue;
            }
            out.push(record_for(cfg, value, trial, seed, method, &Vec3::zeros(), Err(CelcError::Mismatch(e.to_string())), None));
        }
        out
    };
    let point = match cfg.base.at(cfg.variable, value) {
        Ok(p) => p,
        Err(e) => return fail_all(&e),
    };
    let data = match generate_trial(&point, &cfg.base, cfg.base.n_events, &mut rng) {
        Ok(d) => d,
        Err(e) => return fail_all(&e),
    };
    let v_gt = point.motion.v;
    let omega = data.omega_measured;
    let mut out = Vec::with_capacity(methods);

    let clock = Instant::now();
    let celc = solve_celc(&data.clusters, &omega, &cfg.solver);
    let celc_time = clock.elapsed().as_secs_f64();
    let wall = |t: f64| cfg.timing.then_some(t);
    out.push(record_for(
        cfg,
        value,
        trial,
        seed,
        Method::Celc,
        &v_gt,
        celc.as_ref().map(|e| (e.v_dir, Some(e))).map_err(clone_err),
        wall(celc_time),
    ));
    if cfg.refine {
        let clock = Instant::now();
        let refined = celc.as_ref().map_err(clone_err).and_then(|est| {
            refine_velocity(&data.clusters, &omega, &est.v_dir, &cfg.refine_params).map(|r| (r.v_refined, Some(est)))
        });
        let t = celc_time + clock.elapsed().as_secs_f64();
        out.push(record_for(cfg, value, trial, seed, Method::CelcOpt, &v_gt, refined, wall(t)));
    }
    if cfg.ce3lc {
        let clock = Instant::now();
        let est = solve_ce3lc(&data.three_line, &omega, &cfg.solver);
        let t = clock.elapsed().as_secs_f64();
        out.push(record_for(
            cfg,
            value,
            trial,
            seed,
            Method::Ce3lc,
            &v_gt,
            est.as_ref().map(|e| (e.v_dir, Some(e))).map_err(clone_err),
            wall(t),
        ));
    }
    out
}

fn clone_err(e: &CelcError) -> CelcError {
    CelcError::Mismatch(e.to_string())
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per (grid value, method) statistics over valid trials.
pub fn summarize(records: &[TrialRecord]) -> Vec<PointSummary> {
    let mut keys: Vec<(usize, SweepVariable, f64, Method)> = Vec::new();
    for r in records {
        if !keys.iter().any(|k| k.1 == r.variable && k.2 == r.value && k.3 == r.method) {
            keys.push((keys.len(), r.variable, r.value, r.method));
        }
    }
    keys.into_iter()
        .map(|(_, variable, value, method)| {
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.variable == variable && r.value == value && r.method == method)
                .collect();
            let used: Vec<&&TrialRecord> = group.iter().filter(|r| r.is_valid()).collect();
            let eps: Vec<f64> = used.iter().filter_map(|r| r.epsilon).collect();
            let phi: Vec<f64> = used.iter().filter_map(|r| r.phi).collect();
            let (mean_epsilon, std_epsilon) = mean_std(&eps);
            let (mean_phi, std_phi) = mean_std(&phi);
            PointSummary {
                variable,
                value,
                method,
                n_trials: group.len(),
                n_used: used.len(),
                n_excluded: group.len() - used.len(),
                mean_epsilon,
                std_epsilon,
                mean_phi,
                std_phi,
                median_phi: median(&phi),
            }
        })
        .collect()
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.grid.is_empty() || cfg.trials == 0 {
        return Err(CelcError::InvalidParameter("sweep needs a grid and at least one trial".into()));
    }
    for v in &cfg.grid {
        cfg.base.at(cfg.variable, *v)?;
    }
    let jobs: Vec<(usize, f64, usize)> = cfg
        .grid
        .iter()
        .enumerate()
        .flat_map(|(p, v)| (0..cfg.trials).map(move |t| (p, *v, t)))
        .collect();
    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(p, v, t)| run_trial(cfg, p, v, t))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summary = summarize(&records);
    Ok(SweepResult { records, summary })
}
