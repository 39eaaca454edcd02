//! Splits a capture into overlapping, easy-to-track segments.
//!
//! The object's apparent area (mask pixel count per frame) is smoothed with
//! a Gaussian window; its local maxima and minima delimit segments. Each
//! segment is tracked from its area maximum toward the adjacent minimum —
//! backward in time when the maximum comes later — because a large apparent
//! area is where tracking is best conditioned. Neighboring segments overlap
//! by a few frames so they can be stitched afterwards.

use crate::dataset::LabelMask;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("cannot split an empty mask sequence")]
    EmptySequence,
    #[error("no segment boundaries found (need at least two area extrema)")]
    NoValidSegments,
}

/// Apparent-area curve of the object mask.
#[derive(Debug, Clone)]
pub struct AreaCurve {
    pub frames: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl AreaCurve {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("frame,raw,smoothed\n");
        for i in 0..self.raw.len() {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", self.frames[i], self.raw[i], self.smoothed[i]);
        }
        out
    }
}

/// Counts object-labeled pixels per frame. The smoothed track starts equal
/// to the raw one; apply [`smooth_curve`] to fill it.
pub fn compute_area_curve(masks: &[LabelMask]) -> Result<AreaCurve, SplitError> {
    if masks.is_empty() {
        return Err(SplitError::EmptySequence);
    }
    debug_assert!(masks.iter().all(|m| m.width == masks[0].width && m.height == masks[0].height));
    let raw: Vec<f64> = masks.iter().map(|m| m.object_pixel_count() as f64).collect();
    Ok(AreaCurve { frames: (0..raw.len()).collect(), smoothed: raw.clone(), raw })
}

/// Normalized Gaussian taps covering `window` frames (radius `window / 2`,
/// sigma `window / 4`).
fn gaussian_kernel(window: usize) -> Vec<f64> {
    let radius = (window / 2).max(1) as isize;
    let sigma = (window as f64 / 4.0).max(f64::MIN_POSITIVE);
    let mut taps: Vec<f64> =
        (-radius..=radius).map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Mirrors an index into `[0, len)` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Gaussian smoothing with reflected boundaries; the output has the same
/// length as the input.
pub fn smooth_curve(curve: &mut AreaCurve, window: usize) {
    assert!(window >= 1);
    let n = curve.raw.len();
    if n == 0 {
        return;
    }
    let taps = gaussian_kernel(window);
    let radius = (taps.len() / 2) as isize;
    let mut smoothed = Vec::with_capacity(n);
    for i in 0..n as isize {
        let mut v = 0.0;
        for (t, tap) in taps.iter().enumerate() {
            v += tap * curve.raw[reflect(i + t as isize - radius, n)];
        }
        smoothed.push(v);
    }
    curve.smoothed = smoothed;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtremumKind {
    Max,
    Min,
}

/// Local extrema of a smoothed curve: alternating maxima and minima
/// including both endpoints (classified by the adjacent slope). Interior
/// plateaus collapse to their midpoint frame; a completely flat curve
/// degenerates to a maximum at the first frame and a minimum at the last so
/// the sequence still forms one segment.
pub fn find_extrema(smoothed: &[f64]) -> Vec<(usize, ExtremumKind)> {
    assert!(smoothed.len() >= 3, "need at least three frames");
    // Maximal runs of equal value: (start, end inclusive, value).
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &v) in smoothed.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == v => r.1 = i,
            _ => runs.push((i, i, v)),
        }
    }
    let n = smoothed.len();
    if runs.len() == 1 {
        return vec![(0, ExtremumKind::Max), (n - 1, ExtremumKind::Min)];
    }
    let mut extrema = Vec::new();
    let last = runs.len() - 1;
    for (j, &(start, end, v)) in runs.iter().enumerate() {
        if j == 0 {
            let kind = if runs[1].2 > v { ExtremumKind::Min } else { ExtremumKind::Max };
            extrema.push((0, kind));
        } else if j == last {
            let kind = if runs[last - 1].2 < v { ExtremumKind::Max } else { ExtremumKind::Min };
            extrema.push((n - 1, kind));
        } else {
            let (prev, next) = (runs[j - 1].2, runs[j + 1].2);
            if prev < v && next < v {
                extrema.push(((start + end) / 2, ExtremumKind::Max));
            } else if prev > v && next > v {
                extrema.push(((start + end) / 2, ExtremumKind::Min));
            }
        }
    }
    debug_assert!(extrema.windows(2).all(|w| w[0].1 != w[1].1), "extrema must alternate");
    extrema
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One trackable segment. `start` is where tracking begins (the area
/// maximum) and `end` where it stops, so `start > end` for backward
/// segments. Both bounds are inclusive.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub direction: Direction,
    /// Frames shared with the chronologically previous segment.
    pub shared_with_prev: Vec<usize>,
    /// Frames shared with the chronologically next segment.
    pub shared_with_next: Vec<usize>,
}

impl Segment {
    /// First frame in capture order.
    pub fn first(&self) -> usize {
        self.start.min(self.end)
    }

    /// Last frame in capture order.
    pub fn last(&self) -> usize {
        self.start.max(self.end)
    }

    pub fn len(&self) -> usize {
        self.last() - self.first() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Capture indices in tracking order.
    pub fn tracking_frames(&self) -> Vec<usize> {
        match self.direction {
            Direction::Forward => (self.start..=self.end).collect(),
            Direction::Backward => (self.end..=self.start).rev().collect(),
        }
    }
}

/// Builds segments from alternating extrema: one per adjacent extrema pair,
/// tracked from the higher-area end toward the lower. Segments shorter than
/// `min_len` are merged into their shorter neighbor, then every boundary is
/// extended by `overlap` frames (clipped to the sequence) so neighbors
/// share frames.
pub fn build_segments(
    extrema: &[(usize, ExtremumKind)],
    smoothed: &[f64],
    overlap: usize,
    min_len: usize,
) -> Result<Vec<Segment>, SplitError> {
    assert!(extrema.windows(2).all(|w| w[0].1 != w[1].1), "extrema must alternate");
    if extrema.len() < 2 {
        return Err(SplitError::NoValidSegments);
    }
    let len = smoothed.len();
    let mut spans: Vec<(usize, usize)> =
        extrema.windows(2).map(|w| (w[0].0, w[1].0)).collect();

    // Merge short spans into their shorter neighbor until everything meets
    // min_len or a single span remains.
    while spans.len() > 1 {
        let (idx, &(lo, hi)) = spans
            .iter()
            .enumerate()
            .min_by_key(|(_, &(lo, hi))| hi - lo)
            .expect("spans is nonempty");
        if hi - lo + 1 >= min_len {
            break;
        }
        let neighbor = if idx == 0 {
            1
        } else if idx == spans.len() - 1 {
            idx - 1
        } else {
            let prev_len = spans[idx - 1].1 - spans[idx - 1].0;
            let next_len = spans[idx + 1].1 - spans[idx + 1].0;
            if prev_len <= next_len {
                idx - 1
            } else {
                idx + 1
            }
        };
        let (a, b) = (idx.min(neighbor), idx.max(neighbor));
        spans[a] = (spans[a].0, spans[b].1);
        spans.remove(b);
    }

    let mut segments: Vec<Segment> = Vec::with_capacity(spans.len());
    let extended: Vec<(usize, usize)> = spans
        .iter()
        .map(|&(lo, hi)| (lo.saturating_sub(overlap), (hi + overlap).min(len - 1)))
        .collect();
    for (i, &(lo, hi)) in extended.iter().enumerate() {
        // Track from the higher-area end toward the lower one.
        let (start, end, direction) = if smoothed[lo] >= smoothed[hi] {
            (lo, hi, Direction::Forward)
        } else {
            (hi, lo, Direction::Backward)
        };
        let shared_with_prev = if i > 0 && extended[i - 1].1 >= lo {
            (lo..=extended[i - 1].1.min(hi)).collect()
        } else {
            Vec::new()
        };
        let shared_with_next = if i + 1 < extended.len() && extended[i + 1].0 <= hi {
            (extended[i + 1].0.max(lo)..=hi).collect()
        } else {
            Vec::new()
        };
        segments.push(Segment { start, end, direction, shared_with_prev, shared_with_next });
    }
    Ok(segments)
}

fn default_window() -> usize {
    12
}

fn default_overlap() -> usize {
    2
}

fn default_min_len() -> usize {
    10
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SplitterConfig {
    /// Gaussian smoothing window in frames.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Frames each segment extends into its neighbors.
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    /// Segments shorter than this are merged into a neighbor.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        SplitterConfig {
            window: default_window(),
            overlap: default_overlap(),
            min_len: default_min_len(),
        }
    }
}

/// Full split: area curve, smoothing, extrema, segments.
pub fn split_sequence(
    masks: &[LabelMask],
    cfg: &SplitterConfig,
) -> Result<(AreaCurve, Vec<Segment>), SplitError> {
    let mut curve = compute_area_curve(masks)?;
    smooth_curve(&mut curve, cfg.window);
    if curve.len() < 3 {
        // Too short to classify extrema; one degenerate forward segment.
        let segment = Segment {
            start: 0,
            end: curve.len() - 1,
            direction: Direction::Forward,
            shared_with_prev: Vec::new(),
            shared_with_next: Vec::new(),
        };
        return Ok((curve, vec![segment]));
    }
    let extrema = find_extrema(&curve.smoothed);
    let segments = build_segments(&extrema, &curve.smoothed, cfg.overlap, cfg.min_len)?;
    Ok((curve, segments))
}
