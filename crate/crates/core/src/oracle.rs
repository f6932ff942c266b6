//! Hit rate of ranked region proposals against ground truth.
//!
//! Proposal files hold one whitespace-separated line per proposal:
//!
//! ```text
//! <id> <rank> <x1> <y1> <x2> <y2> [score]
//! ```
//!
//! Ranks start at 1 and order the proposals of one sample; coordinates are
//! original-image pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::GroundingModel;
use crate::training::TrainSample;

/// Sample id to proposals in rank order.
pub type ProposalSet = BTreeMap<String, Vec<BBox>>;

pub fn parse_proposals(text: &str, path: &str) -> Result<ProposalSet> {
    let mut ranked: BTreeMap<String, Vec<(u64, BBox)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 && f.len() != 7 {
            return Err(err(format!(
                "expected `id rank x1 y1 x2 y2 [score]`, found {} fields",
                f.len()
            )));
        }
        let rank: u64 = f[1]
            .parse()
            .ok()
            .filter(|&r| r >= 1)
            .ok_or_else(|| err(format!("rank `{}` is not a positive integer", f[1])))?;
        let mut v = [0.0; 5];
        for (slot, s) in v.iter_mut().zip(&f[2..]) {
            *slot = s.parse().map_err(|_| err(format!("`{s}` is not a number")))?;
        }
        let b = BBox::try_new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
        let list = ranked.entry(f[0].to_string()).or_default();
        if list.iter().any(|(r, _)| *r == rank) {
            return Err(err(format!("duplicate rank {rank} for `{}`", f[0])));
        }
        list.push((rank, b));
    }
    Ok(ranked
        .into_iter()
        .map(|(id, mut list)| {
            list.sort_by_key(|(r, _)| *r);
            (id, list.into_iter().map(|(_, b)| b).collect())
        })
        .collect())
}

pub fn format_proposals(set: &ProposalSet) -> String {
    let mut s = String::new();
    for (id, list) in set {
        for (r, b) in list.iter().enumerate() {
            writeln!(s, "{id} {} {} {} {} {}", r + 1, b.x1, b.y1, b.x2, b.y2).unwrap();
        }
    }
    s
}

/// Fraction of annotations whose box has IoU strictly greater than `tau`
/// with at least one of the first `n` proposals. Samples without proposals
/// count as misses.
pub fn hit_rate(proposals: &ProposalSet, annotations: &[AnnotationRecord], n: usize, tau: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("hit rate needs N >= 1"));
    }
    if annotations.is_empty() {
        return Err(Error::invalid("no annotations"));
    }
    let hits = annotations
        .iter()
        .filter(|a| {
            let gt = a.gt_box();
            proposals
                .get(&a.id)
                .is_some_and(|list| list.iter().take(n).any(|b| iou(b, &gt) > tau))
        })
        .count();
    Ok(hits as f64 / annotations.len() as f64)
}

/// The model's `n` most probable decoded anchors per sample, as proposals.
pub fn model_as_proposer(model: &GroundingModel, samples: &[TrainSample], n: usize) -> Result<ProposalSet> {
    let mut out = ProposalSet::new();
    for s in samples {
        let top = model.top_n(&s.visual, &s.query, &s.transform, n)?;
        out.insert(s.id.clone(), top.into_iter().map(|p| p.bbox).collect());
    }
    Ok(out)
}

/// Hit rates laid out as methods (rows) by splits (columns).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HitRateTable {
    pub splits: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl HitRateTable {
    pub fn set(&mut self, method: &str, split: &str, value: f64) {
        let col = match self.splits.iter().position(|s| s == split) {
            Some(c) => c,
            None => {
                self.splits.push(split.to_string());
                for (_, r) in &mut self.rows {
                    r.push(None);
                }
                self.splits.len() - 1
            }
        };
        let row = match self.rows.iter().position(|(m, _)| m == method) {
            Some(r) => r,
            None => {
                self.rows.push((method.to_string(), vec![None; self.splits.len()]));
                self.rows.len() - 1
            }
        };
        self.rows[row].1[col] = Some(value);
    }

    /// Percentages with two decimals; absent cells print as `-`.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16}", "method");
        for sp in &self.splits {
            write!(s, " {sp:>12}").unwrap();
        }
        s.push('\n');
        for (m, vals) in &self.rows {
            write!(s, "{m:<16}").unwrap();
            for v in vals {
                match v {
                    Some(v) => write!(s, " {:>12.2}", v * 100.0).unwrap(),
                    None => write!(s, " {:>12}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (m, vals) in &self.rows {
            for (sp, v) in self.splits.iter().zip(vals) {
                if let Some(v) = v {
                    writeln!(s, "hit_rate.{m}.{sp}={v}").unwrap();
                }
            }
        }
        s
    }
}
