//! Localization error decomposition and recall tables.
//!
//! Position errors are measured in meters between predicted and
//! ground-truth camera positions, decomposed onto the ground-truth
//! heading: the longitudinal component lies along the driving direction,
//! the lateral component perpendicular to it. Azimuth errors are wrapped
//! absolute angle differences in degrees. Recalls use strict `<` at the
//! threshold and are reported in percent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Se2Pose};
use crate::{Error, Result};

/// Error decomposition for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub id: String,
    /// Euclidean position error (m).
    pub location_m: f64,
    /// Position error perpendicular to the GT heading (m, absolute).
    pub lateral_m: f64,
    /// Position error along the GT heading (m, absolute).
    pub longitudinal_m: f64,
    /// Wrapped absolute heading error (degrees).
    pub azimuth_deg: f64,
}

/// Recall thresholds: two position cutoffs in meters, two azimuth
/// cutoffs in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallThresholds {
    pub position_m: [f64; 2],
    pub azimuth_deg: [f64; 2],
}

impl Default for RecallThresholds {
    fn default() -> Self {
        RecallThresholds {
            position_m: [1.0, 5.0],
            azimuth_deg: [1.0, 5.0],
        }
    }
}

/// Aggregated metrics over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub samples: usize,
    pub mean_location_m: f64,
    pub median_location_m: f64,
    /// Lateral recall (%) at the two position thresholds.
    pub recall_lateral_pct: [f64; 2],
    /// Longitudinal recall (%) at the two position thresholds.
    pub recall_longitudinal_pct: [f64; 2],
    pub mean_azimuth_deg: f64,
    pub median_azimuth_deg: f64,
    /// Azimuth recall (%) at the two angle thresholds.
    pub recall_azimuth_pct: [f64; 2],
    pub thresholds: RecallThresholds,
}

/// Decomposes the error of a predicted pose against the ground truth.
///
/// Both poses map the same BEV `anchor` into the satellite map; pixel
/// differences convert to meters by `meters_per_pixel`.
pub fn localization_errors(
    id: impl Into<String>,
    pred: &Se2Pose,
    gt: &Se2Pose,
    anchor: [f64; 2],
    meters_per_pixel: f64,
) -> Result<ErrorRecord> {
    if !(meters_per_pixel > 0.0) {
        return Err(Error::Invalid(format!(
            "meters_per_pixel must be positive, got {meters_per_pixel}"
        )));
    }
    let p = pred.apply(anchor);
    let g = gt.apply(anchor);
    let e = [
        (p[0] - g[0]) * meters_per_pixel,
        (p[1] - g[1]) * meters_per_pixel,
    ];
    let heading = gt.heading();
    let longitudinal = (e[0] * heading[0] + e[1] * heading[1]).abs();
    let lateral = (e[0] * heading[1] - e[1] * heading[0]).abs();
    Ok(ErrorRecord {
        id: id.into(),
        location_m: e[0].hypot(e[1]),
        lateral_m: lateral,
        longitudinal_m: longitudinal,
        azimuth_deg: wrap_angle(pred.theta - gt.theta).abs().to_degrees(),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median with the even-count convention: average of the two middle
/// order statistics.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Percentage of values strictly below the threshold.
fn recall(values: &[f64], threshold: f64) -> f64 {
    100.0 * values.iter().filter(|&&v| v < threshold).count() as f64 / values.len() as f64
}

/// Aggregates error records into the metrics table.
pub fn aggregate(records: &[ErrorRecord], thresholds: &RecallThresholds) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(Error::Degenerate("no error records to aggregate".into()));
    }
    let location: Vec<f64> = records.iter().map(|r| r.location_m).collect();
    let lateral: Vec<f64> = records.iter().map(|r| r.lateral_m).collect();
    let longitudinal: Vec<f64> = records.iter().map(|r| r.longitudinal_m).collect();
    let azimuth: Vec<f64> = records.iter().map(|r| r.azimuth_deg).collect();
    Ok(MetricsTable {
        samples: records.len(),
        mean_location_m: mean(&location),
        median_location_m: median(&location),
        recall_lateral_pct: [
            recall(&lateral, thresholds.position_m[0]),
            recall(&lateral, thresholds.position_m[1]),
        ],
        recall_longitudinal_pct: [
            recall(&longitudinal, thresholds.position_m[0]),
            recall(&longitudinal, thresholds.position_m[1]),
        ],
        mean_azimuth_deg: mean(&azimuth),
        median_azimuth_deg: median(&azimuth),
        recall_azimuth_pct: [
            recall(&azimuth, thresholds.azimuth_deg[0]),
            recall(&azimuth, thresholds.azimuth_deg[1]),
        ],
        thresholds: *thresholds,
    })
}

impl MetricsTable {
    /// Aligned text rendering with the usual column layout.
    pub fn render_text(&self) -> String {
        let t = &self.thresholds;
        let header = format!(
            "{:<10} {:>9} {:>9} | {:>8} {:>8} | {:>8} {:>8} | {:>9} {:>9} | {:>8} {:>8}",
            "Samples",
            "Loc mean",
            "Loc med",
            format!("Lat@{}m", t.position_m[0]),
            format!("Lat@{}m", t.position_m[1]),
            format!("Lon@{}m", t.position_m[0]),
            format!("Lon@{}m", t.position_m[1]),
            "Az mean",
            "Az med",
            format!("Az@{}", t.azimuth_deg[0]),
            format!("Az@{}", t.azimuth_deg[1]),
        );
        let row = format!(
            "{:<10} {:>9.3} {:>9.3} | {:>8.2} {:>8.2} | {:>8.2} {:>8.2} | {:>9.3} {:>9.3} | {:>8.2} {:>8.2}",
            self.samples,
            self.mean_location_m,
            self.median_location_m,
            self.recall_lateral_pct[0],
            self.recall_lateral_pct[1],
            self.recall_longitudinal_pct[0],
            self.recall_longitudinal_pct[1],
            self.mean_azimuth_deg,
            self.median_azimuth_deg,
            self.recall_azimuth_pct[0],
            self.recall_azimuth_pct[1],
        );
        format!("{header}\n{row}\n")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }
}

/// Writes a pose list as CSV with header `id,theta_rad,tu_px,tv_px`.
pub fn save_pose_csv(path: impl AsRef<Path>, poses: &[(String, Se2Pose)]) -> Result<()> {
    let mut text = String::from("id,theta_rad,tu_px,tv_px\n");
    for (id, pose) in poses {
        text.push_str(&format!("{},{},{},{}\n", id, pose.theta, pose.t[0], pose.t[1]));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a pose list CSV (header `id,theta_rad,tu_px,tv_px`).
pub fn load_pose_csv(path: impl AsRef<Path>) -> Result<Vec<(String, Se2Pose)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,theta_rad,tu_px,tv_px" => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header `id,theta_rad,tu_px,tv_px`, got `{header}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "empty pose file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("expected 4 comma-separated values, got {}", fields.len()),
            });
        }
        let parse = |f: &str| -> Result<f64> {
            f.trim().parse().map_err(|_| Error::Parse {
                line: idx + 1,
                reason: format!("`{f}` is not a number"),
            })
        };
        out.push((
            fields[0].trim().to_string(),
            Se2Pose::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?),
        ));
    }
    Ok(out)
}
