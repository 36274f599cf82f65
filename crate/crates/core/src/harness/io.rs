//! Text formats: event streams, gyro tracks, calibration and CSV reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clustering::{Event, Polarity};
use crate::error::{CelcError, Result};
use crate::geometry::{AngularVelocity, CameraModel, Distortion, Vec3};

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> CelcError {
    CelcError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn fields<const N: usize>(path: &Path, lineno: usize, line: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != N {
        return Err(parse_error(path, lineno, format!("expected {N} fields, found {}", parts.len())));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_error(path, lineno, format!("not a finite number: {p:?}")))?;
    }
    Ok(out)
}

/// Reads `t x y p` lines. Pixels may be fractional; `p` is 0/1 or -1/+1.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (lineno, line) in data_lines(path)? {
        let [t, x, y, p] = fields::<4>(path, lineno, &line)?;
        let polarity = match p {
            1.0 => Polarity::Positive,
            0.0 | -1.0 => Polarity::Negative,
            _ => return Err(parse_error(path, lineno, format!("polarity must be 0, 1 or -1, got {p}"))),
        };
        if t < last {
            return Err(parse_error(path, lineno, format!("timestamp {t} decreases (previous {last})")));
        }
        last = t;
        events.push(Event::new(x, y, t, polarity));
    }
    Ok(events)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# t x y p")?;
    for e in events {
        let p = match e.polarity {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        };
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, p)?;
    }
    w.flush()?;
    Ok(())
}

/// Angular velocity samples with piecewise-linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct GyroTrack {
    samples: Vec<(f64, AngularVelocity)>,
}

impl GyroTrack {
    pub fn new(samples: Vec<(f64, AngularVelocity)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CelcError::EmptyInput("gyro track".into()));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(CelcError::InvalidParameter("gyro timestamps must be strictly increasing".into()));
        }
        Ok(Self { samples })
    }

    /// Constant rate sampled every `step` seconds over `[t0, t1]`.
    pub fn constant(omega: AngularVelocity, t0: f64, t1: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(t1 >= t0) {
            return Err(CelcError::InvalidParameter(format!("gyro range [{t0}, {t1}] step {step}")));
        }
        let n = ((t1 - t0) / step).ceil() as usize;
        let samples = (0..=n)
            .map(|i| (if i == n { t1 } else { t0 + i as f64 * step }, omega))
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[(f64, AngularVelocity)] {
        &self.samples
    }

    /// Index `i` such that `samples[i].0 <= t <= samples[i+1].0`.
    fn bracket(&self, t: f64) -> Option<usize> {
        let s = &self.samples;
        if s.len() == 1 {
            return (t == s[0].0).then_some(0);
        }
        if t < s[0].0 || t > s[s.len() - 1].0 {
            return None;
        }
        let i = s.partition_point(|(ts, _)| *ts <= t);
        Some(i.saturating_sub(1).min(s.len() - 2))
    }

    /// `None` outside the sampled range.
    pub fn interpolate(&self, t: f64) -> Option<AngularVelocity> {
        let i = self.bracket(t)?;
        if self.samples.len() == 1 {
            return Some(self.samples[0].1);
        }
        let (t0, w0) = self.samples[i];
        let (t1, w1) = self.samples[i + 1];
        let a = (t - t0) / (t1 - t0);
        Some(w0 + (w1 - w0) * a)
    }

    /// Spacing of the samples bracketing `t`; infinite outside the range.
    pub fn gap_at(&self, t: f64) -> f64 {
        match self.bracket(t) {
            Some(_) if self.samples.len() == 1 => 0.0,
            Some(i) => self.samples[i + 1].0 - self.samples[i].0,
            None => f64::INFINITY,
        }
    }
}

/// Reads `t wx wy wz` lines.
pub fn read_gyro(path: &Path) -> Result<GyroTrack> {
    let mut samples = Vec::new();
    for (lineno, line) in data_lines(path)? {
        let [t, x, y, z] = fields::<4>(path, lineno, &line)?;
        if let Some((prev, _)) = samples.last() {
            if t <= *prev {
                return Err(parse_error(path, lineno, format!("timestamp {t} not after {prev}")));
            }
        }
        samples.push((t, Vec3::new(x, y, z)));
    }
    GyroTrack::new(samples).map_err(|e| parse_error(path, 0, e.to_string()))
}

pub fn write_gyro(path: &Path, track: &GyroTrack) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# t wx wy wz")?;
    for (t, o) in track.samples() {
        writeln!(w, "{} {} {} {}", t, o.x, o.y, o.z)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub dist: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

impl Calibration {
    pub fn camera(&self) -> Result<CameraModel> {
        let cam = CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        Ok(cam.with_distortion(Distortion::from_slice(&self.dist)?))
    }
}

impl From<&CameraModel> for Calibration {
    fn from(c: &CameraModel) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            dist: if c.distortion.is_zero() { Vec::new() } else { c.distortion.to_vec() },
            width: c.width,
            height: c.height,
        }
    }
}

/// TOML with keys `fx fy cx cy dist width height`.
pub fn read_calibration(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path)?;
    let calib: Calibration = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
        parse_error(path, line, e.message().to_string())
    })?;
    calib.camera().map_err(|e| parse_error(path, 0, e.to_string()))
}

pub fn write_calibration(path: &Path, cam: &CameraModel) -> Result<()> {
    let text = toml::to_string(&Calibration::from(cam)).map_err(|e| CelcError::InvalidParameter(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_to<T: Serialize, W: Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn event_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ev.txt");
        let events = vec![
            Event::new(12.0, 7.0, 0.0, Polarity::Positive),
            Event::new(0.1 + 0.2, 259.999_999_999_9, 1e-7, Polarity::Negative),
            Event::new(345.5, 3.25, 0.7000000000000001, Polarity::Positive),
        ];
        write_events(&p, &events).unwrap();
        assert_eq!(read_events(&p).unwrap(), events);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ev.txt");
        fs::write(&p, "# header\n0.1 3 4 1\nabc\n").unwrap();
        match read_events(&p) {
            Err(CelcError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "0.2 3 4 1\n0.1 3 4 0\n").unwrap();
        assert!(matches!(read_events(&p), Err(CelcError::Parse { line: 2, .. })));
        fs::write(&p, "0.2 3 4 2\n").unwrap();
        assert!(matches!(read_events(&p), Err(CelcError::Parse { line: 1, .. })));
        fs::write(&p, "0.2 3 4\n").unwrap();
        assert!(matches!(read_events(&p), Err(CelcError::Parse { line: 1, .. })));
    }

    #[test]
    fn polarity_mapping() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("ev.txt");
        fs::write(&p, "0 1 1 0\n0 1 1 1\n0 1 1 -1\n").unwrap();
        let ev = read_events(&p).unwrap();
        assert_eq!(ev[0].polarity.sign(), -1);
        assert_eq!(ev[1].polarity.sign(), 1);
        assert_eq!(ev[2].polarity.sign(), -1);
    }

    #[test]
    fn gyro_interpolation() {
        let track = GyroTrack::new(vec![
            (0.0, Vec3::new(0.0, 0.0, 1.0)),
            (1.0, Vec3::new(2.0, 0.0, 3.0)),
            (3.0, Vec3::new(2.0, 4.0, 3.0)),
        ])
        .unwrap();
        assert_eq!(track.interpolate(0.0).unwrap(), Vec3::new(0.0, 0.0, 1.0));
        let w = track.interpolate(0.25).unwrap();
        assert_relative_eq!(w, Vec3::new(0.5, 0.0, 1.5), epsilon = 1e-15);
        assert_relative_eq!(track.interpolate(2.0).unwrap(), Vec3::new(2.0, 2.0, 3.0), epsilon = 1e-15);
        assert_eq!(track.interpolate(3.0).unwrap(), Vec3::new(2.0, 4.0, 3.0));
        assert!(track.interpolate(-0.1).is_none());
        assert!(track.interpolate(3.1).is_none());
        assert_eq!(track.gap_at(2.0), 2.0);
        assert_eq!(track.gap_at(5.0), f64::INFINITY);
        assert!(GyroTrack::new(vec![(0.0, Vec3::zeros()), (0.0, Vec3::zeros())]).is_err());
    }

    #[test]
    fn gyro_file_round_trip_and_ordering() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.txt");
        let track = GyroTrack::constant(Vec3::new(0.1, -0.2, 2.0), 0.0, 0.5, 0.01).unwrap();
        assert_eq!(track.samples().last().unwrap().0, 0.5);
        write_gyro(&p, &track).unwrap();
        assert_eq!(read_gyro(&p).unwrap(), track);
        fs::write(&p, "0 0 0 1\n0 0 0 1\n").unwrap();
        assert!(matches!(read_gyro(&p), Err(CelcError::Parse { line: 2, .. })));
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let cam = CameraModel::davis346().with_distortion(Distortion::from_slice(&[-0.1, 0.02, 0.001, -0.002, 0.0]).unwrap());
        write_calibration(&p, &cam).unwrap();
        assert_eq!(read_calibration(&p).unwrap(), cam);
        fs::write(&p, "fx = 200.0\nfy = 200.0\ncx = 1.0\ncy = 1.0\nwidth = 10\nheight = 10\n").unwrap();
        assert!(read_calibration(&p).unwrap().distortion.is_zero());
        fs::write(&p, "fx = 200.0\nfy = \"x\"\n").unwrap();
        assert!(matches!(read_calibration(&p), Err(CelcError::Parse { .. })));
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: f64,
        b: Option<f64>,
        tag: String,
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(a in any::<f64>().prop_filter("finite", |x| x.is_finite()), b in proptest::option::of(-1e300..1e300f64)) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("r.csv");
            let rows = vec![Row { a, b, tag: "CELC+opt".into() }];
            write_csv(&p, &rows).unwrap();
            let back: Vec<Row> = read_csv(&p).unwrap();
            prop_assert_eq!(back, rows);
        }
    }
}
