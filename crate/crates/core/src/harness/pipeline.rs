//! Windowed estimation over a recorded event stream with a gyro track.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_events, make_window, ClusteringParams, Event};
use crate::error::{CelcError, Result};
use crate::geometry::{lift_pixel, CameraModel, Distortion};
use crate::harness::io::{read_calibration, read_events, read_gyro, GyroTrack};
use crate::linefit::{extract_boundary_lines, LineFitParams};
use crate::refine::{refine_velocity, RefineParams};
use crate::solver::{solve_celc, ClusterData, Observation, SolverParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    /// Events per window.
    pub window: usize,
    pub clustering: ClusteringParams,
    pub linefit: LineFitParams,
    pub solver: SolverParams,
    pub refine: Option<RefineParams>,
    /// Largest tolerated gyro sample spacing around the window midpoint, s.
    /// `None` uses the window's own time span.
    pub max_gyro_gap: Option<f64>,
    /// Process a trailing window that holds fewer than `window` events.
    pub allow_partial: bool,
    pub min_clusters: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            window: 1_000_000,
            clustering: ClusteringParams::default(),
            linefit: LineFitParams::default(),
            solver: SolverParams::default(),
            refine: None,
            max_gyro_gap: None,
            allow_partial: false,
            min_clusters: 2,
        }
    }
}

/// One output row per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub t_mid: f64,
    pub n_events: usize,
    pub n_clusters: usize,
    /// `ok` or `skipped`.
    pub status: String,
    /// Why a window was skipped; empty otherwise.
    pub reason: String,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
    pub vz: Option<f64>,
    pub sigma1: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma3: Option<f64>,
    pub degenerate: Option<bool>,
    pub degeneracy: String,
    pub ill_conditioned: Option<bool>,
    pub inlier_fraction: Option<f64>,
    pub refined: bool,
}

impl WindowReport {
    fn skipped(window: usize, events: &[Event], n_clusters: usize, reason: &str) -> Self {
        let (t_start, t_end) = match (events.first(), events.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (f64::NAN, f64::NAN),
        };
        Self {
            window,
            t_start,
            t_end,
            t_mid: 0.5 * (t_start + t_end),
            n_events: events.len(),
            n_clusters,
            status: "skipped".into(),
            reason: reason.into(),
            vx: None,
            vy: None,
            vz: None,
            sigma1: None,
            sigma2: None,
            sigma3: None,
            degenerate: None,
            degeneracy: String::new(),
            ill_conditioned: None,
            inlier_fraction: None,
            refined: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn ideal(cam: &CameraModel) -> CameraModel {
    cam.with_distortion(Distortion::default())
}

/// Pixels moved to their ideal pinhole positions; events that fail to undistort are dropped.
fn undistort_events(events: &[Event], cam: &CameraModel) -> Vec<Event> {
    if cam.distortion.is_zero() {
        return events.to_vec();
    }
    events
        .iter()
        .filter_map(|e| {
            cam.undistort_pixel(&e.pixel())
                .ok()
                .map(|p| Event::new(p.x, p.y, e.t, e.polarity))
        })
        .collect()
}

fn process_window(index: usize, raw: &[Event], gyro: &GyroTrack, cam: &CameraModel, params: &PipelineParams) -> Result<WindowReport> {
    let events = undistort_events(raw, cam);
    if events.is_empty() {
        return Ok(WindowReport::skipped(index, raw, 0, "no_events"));
    }
    let t_start = raw[0].t;
    let t_end = raw[raw.len() - 1].t;
    let t_mid = 0.5 * (t_start + t_end);
    let max_gap = params.max_gyro_gap.unwrap_or(t_end - t_start);
    let omega = match gyro.interpolate(t_mid) {
        Some(w) if gyro.gap_at(t_mid) <= max_gap => w,
        _ => return Ok(WindowReport::skipped(index, raw, 0, "gyro_gap")),
    };

    let pinhole = ideal(cam);
    let clusters = cluster_events(&events, &params.clustering)?;
    let mut data = Vec::new();
    for c in &clusters {
        let lines = match extract_boundary_lines(c, &params.linefit, &pinhole) {
            Ok(l) => l,
            Err(e) => {
                log::debug!("window {index}: cluster {} dropped: {e}", c.id);
                continue;
            }
        };
        let g = lines.geometry;
        let observations = c
            .events
            .iter()
            .filter(|e| e.t >= g.t_s && e.t <= g.t_e)
            .map(|e| {
                Ok(Observation {
                    bearing: lift_pixel(&e.pixel(), &pinhole)?,
                    t: e.t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        data.push(ClusterData { geometry: g, observations });
    }
    if data.len() < params.min_clusters {
        return Ok(WindowReport::skipped(index, raw, data.len(), "too_few_clusters"));
    }
    let est = match solve_celc(&data, &omega, &params.solver) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("window {index}: solver failed: {e}");
            return Ok(WindowReport::skipped(index, raw, data.len(), "solver_failed"));
        }
    };
    let mut v = est.v_dir;
    let mut refined = false;
    if let Some(rp) = &params.refine {
        if !est.degenerate {
            match refine_velocity(&data, &omega, &v, rp) {
                Ok(r) => {
                    v = r.v_refined;
                    refined = true;
                }
                Err(e) => log::warn!("window {index}: refinement failed: {e}"),
            }
        }
    }
    Ok(WindowReport {
        window: index,
        t_start,
        t_end,
        t_mid,
        n_events: raw.len(),
        n_clusters: data.len(),
        status: "ok".into(),
        reason: String::new(),
        vx: Some(v.x),
        vy: Some(v.y),
        vz: Some(v.z),
        sigma1: Some(est.singular_values[0]),
        sigma2: Some(est.singular_values[1]),
        sigma3: Some(est.singular_values[2]),
        degenerate: Some(est.degenerate),
        degeneracy: est.degeneracy_kind.as_str().into(),
        ill_conditioned: Some(est.ill_conditioned),
        inlier_fraction: Some(est.inlier_fraction),
        refined,
    })
}

/// Splits the stream into consecutive windows and estimates each one.
pub fn estimate_stream(events: &[Event], gyro: &GyroTrack, cam: &CameraModel, params: &PipelineParams) -> Result<Vec<WindowReport>> {
    if params.window == 0 {
        return Err(CelcError::InvalidParameter("window must hold at least one event".into()));
    }
    if events.is_empty() {
        return Err(CelcError::EmptyInput("event stream".into()));
    }
    let mut stream = events.iter().copied();
    let mut out = Vec::new();
    loop {
        let window = make_window(&mut stream, params.window);
        if window.events().is_empty() {
            break;
        }
        let index = out.len();
        let partial = window.is_partial();
        if partial && !params.allow_partial {
            out.push(WindowReport::skipped(index, window.events(), 0, "partial_window"));
            break;
        }
        out.push(process_window(index, window.events(), gyro, cam, params)?);
        if partial {
            break;
        }
    }
    Ok(out)
}

pub fn estimate_from_files(events: &Path, gyro: &Path, calibration: &Path, params: &PipelineParams) -> Result<Vec<WindowReport>> {
    let cam = read_calibration(calibration)?;
    let gyro = read_gyro(gyro)?;
    let events = read_events(events)?;
    estimate_stream(&events, &gyro, &cam, params)
}
