//! Per-term loss curves from the training term log.
//!
//! The log has one row per step and objective term:
//! `step,boundary,task,domain,kind,value`. Learning terms become
//! `metalearning` series and backward terms `acl_bwd` series, keyed by
//! domain and by the task's position in the sequence. With two domains and
//! two tasks per sequence that gives four plus two series.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective::TermKind;
use crate::tensor::Real;

pub const TERM_LOG_HEADER: &str = "step,boundary,task,domain,kind,value";
pub const CURVE_HEADER: &str = "series,kind,domain,position,step,count,value";

#[derive(Clone, Debug, PartialEq)]
pub struct TermRow {
    pub step: u64,
    pub boundary: usize,
    pub task: usize,
    pub domain: String,
    pub kind: TermKind,
    pub value: Real,
}

impl TermRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.boundary, self.task, self.domain, self.kind.as_str(), self.value)
    }
}

pub fn read_term_log(text: &str) -> Result<Vec<TermRow>> {
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        None => return Ok(rows),
        Some((_, h)) if h.trim() == TERM_LOG_HEADER => {}
        Some((i, h)) => {
            return Err(Error::Parse { line: i + 1, detail: format!("expected header `{TERM_LOG_HEADER}`, found `{h}`") })
        }
    }
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |detail: String| Error::Parse { line: line_no, detail };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| err(format!("bad {what} `{s}`")));
        rows.push(TermRow {
            step: int(f[0], "step")?,
            boundary: int(f[1], "boundary")? as usize,
            task: int(f[2], "task")? as usize,
            domain: f[3].to_string(),
            kind: TermKind::parse(f[4]).ok_or_else(|| err(format!("unknown kind `{}`", f[4])))?,
            value: f[5].parse().map_err(|_| err(format!("bad value `{}`", f[5])))?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub series: String,
    pub kind: &'static str,
    pub domain: String,
    pub position: usize,
    pub step: u64,
    /// Log rows averaged into this point.
    pub count: usize,
    pub value: Real,
}

/// Groups rows by `(kind, domain, position)` and averages per step.
/// Auxiliary one-shot rows are not part of any series.
pub fn curve_extract(rows: &[TermRow]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(u8, String, usize, u64), (usize, Real)> = BTreeMap::new();
    for r in rows {
        let kind = match r.kind {
            TermKind::Learn => 0,
            TermKind::Backward => 1,
            TermKind::AuxOneShot => continue,
        };
        let e = groups.entry((kind, r.domain.clone(), r.task, r.step)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += r.value;
    }
    groups
        .into_iter()
        .map(|((kind, domain, position, step), (count, sum))| {
            let (kind, prefix) = if kind == 0 { ("metalearning", "metalearn") } else { ("acl_bwd", "bwd") };
            CurvePoint {
                series: format!("{prefix}/{domain}/pos{position}"),
                kind,
                domain,
                position,
                step,
                count,
                value: sum / count as Real,
            }
        })
        .collect()
}

pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", p.series, p.kind, p.domain, p.position, p.step, p.count, p.value));
    }
    out
}

pub fn series_names(points: &[CurvePoint]) -> Vec<String> {
    let mut names: Vec<String> = points.iter().map(|p| p.series.clone()).collect();
    names.dedup();
    names.sort();
    names.dedup();
    names
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    /// First step where the smoothed learning loss is below the threshold.
    pub cross_step: u64,
    pub bwd_at_cross: Real,
    pub bwd_final: Real,
    /// Backward loss ends higher than where it stood at the crossing.
    pub holds: bool,
}

fn smoothed(points: &[CurvePoint], kind: &str, window: usize) -> Vec<(u64, Real)> {
    let mut by_step: BTreeMap<u64, (usize, Real)> = BTreeMap::new();
    for p in points.iter().filter(|p| p.kind == kind) {
        let e = by_step.entry(p.step).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += p.value;
    }
    let raw: Vec<(u64, Real)> = by_step.into_iter().map(|(s, (n, v))| (s, v / n as Real)).collect();
    let w = window.max(1);
    (0..raw.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let slice = &raw[lo..=i];
            (raw[i].0, slice.iter().map(|p| p.1).sum::<Real>() / slice.len() as Real)
        })
        .collect()
}

/// Checks whether the mean backward-transfer loss rises after the mean
/// meta-learning loss first drops below `threshold`. Both curves are
/// smoothed with a trailing mean over `window` logged steps. `None` when the
/// learning curve never crosses or there are no backward rows.
pub fn divergence_signature(points: &[CurvePoint], threshold: Real, window: usize) -> Option<Divergence> {
    let learn = smoothed(points, "metalearning", window);
    let bwd = smoothed(points, "acl_bwd", window);
    let &(cross_step, _) = learn.iter().find(|(_, v)| *v < threshold)?;
    let bwd_at_cross = bwd.iter().rev().find(|(s, _)| *s <= cross_step)?.1;
    let bwd_final = bwd.last()?.1;
    Some(Divergence { cross_step, bwd_at_cross, bwd_final, holds: bwd_final > bwd_at_cross })
}
