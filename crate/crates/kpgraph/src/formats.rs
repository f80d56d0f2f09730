//! CSV files for key-points, matches, curves and homographies.

use std::path::Path;

use anyhow::{Context, Result};
use kpgraph_core::detector::Keypoint;
use kpgraph_core::geometry::Point2;
use kpgraph_core::matcher::{CurveRow, MatchSet};
use kpgraph_core::mosaic::Homography;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct KeypointRecord {
    x: f64,
    y: f64,
    response: f64,
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for k in kps {
        w.serialize(KeypointRecord { x: k.position.x, y: k.position.y, response: k.response })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .map(|rec| {
            let k: KeypointRecord = rec?;
            Ok(Keypoint { position: Point2::new(k.x, k.y), response: k.response })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MatchRecord {
    pub i: usize,
    pub x_a: f64,
    pub y_a: f64,
    pub j: usize,
    pub x_b: f64,
    pub y_b: f64,
    pub distance: f64,
    /// 1 or 0; empty without ground truth.
    pub correct: Option<u8>,
}

/// `kps_a[m.i]` and `kps_b[m.j]` give the coordinates of each match.
pub fn match_records(matches: &MatchSet, kps_a: &[Point2], kps_b: &[Point2]) -> Vec<MatchRecord> {
    matches
        .matches
        .iter()
        .map(|m| MatchRecord {
            i: m.i,
            x_a: kps_a[m.i].x,
            y_a: kps_a[m.i].y,
            j: m.j,
            x_b: kps_b[m.j].x,
            y_b: kps_b[m.j].y,
            distance: m.distance,
            correct: m.correct.map(u8::from),
        })
        .collect()
}

pub fn write_matches(path: &Path, records: &[MatchRecord]) -> Result<()> {
    write_rows(path, records)
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchRecord>> {
    read_rows(path)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CurveRecord {
    threshold: f64,
    recall: Option<f64>,
    one_minus_precision: Option<f64>,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let recs: Vec<CurveRecord> = rows
        .iter()
        .map(|r| CurveRecord { threshold: r.threshold, recall: r.recall, one_minus_precision: r.one_minus_precision })
        .collect();
    write_rows(path, &recs)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let recs: Vec<CurveRecord> = read_rows(path)?;
    Ok(recs
        .into_iter()
        .map(|r| CurveRow { threshold: r.threshold, recall: r.recall, one_minus_precision: r.one_minus_precision })
        .collect())
}

/// One homography per line: its 9 entries in row-major order, no header.
pub fn write_homographies(path: &Path, hs: &[Homography]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for h in hs {
        w.serialize(h.entries())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_homographies(path: &Path) -> Result<Vec<Homography>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .map(|rec| {
            let e: [f64; 9] = rec?;
            Ok(Homography::from_entries(&e))
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}
