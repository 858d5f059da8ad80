use std::fmt::Write as _;

use super::{RankRow, RankTable, NUM_VIEWS};
use crate::skeleton::VIEWS;
use crate::{Error, Result};

/// Shortest round-trip decimal, or `n/a`.
pub fn format_accuracy(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

pub fn parse_accuracy(s: &str) -> Result<Option<f64>> {
    match s.trim() {
        "n/a" => Ok(None),
        t => t.parse::<f64>().map(Some).map_err(|_| Error::Format(format!("bad accuracy `{t}`"))),
    }
}

impl RankTable {
    /// `condition,0,18,...,180,mean,probes,excluded` with one row per condition.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition");
        for v in VIEWS {
            let _ = write!(s, ",{v}");
        }
        s.push_str(",mean,probes,excluded\n");
        for r in &self.rows {
            s.push_str(&r.condition.to_string());
            for a in r.per_view {
                let _ = write!(s, ",{}", format_accuracy(a));
            }
            let _ = writeln!(s, ",{},{},{}", format_accuracy(r.mean), r.probes, r.excluded);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty rank table".into()))?;
        let expected = RankTable { rows: vec![] }.to_csv();
        if header != expected.trim_end() {
            return Err(Error::Format(format!("unexpected rank table header `{header}`")));
        }
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != NUM_VIEWS + 4 {
                return Err(Error::Format(format!("rank table row `{line}` has {} fields", f.len())));
            }
            let mut per_view = [None; NUM_VIEWS];
            for (slot, cell) in per_view.iter_mut().zip(&f[1..=NUM_VIEWS]) {
                *slot = parse_accuracy(cell)?;
            }
            let count = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad count `{s}`")));
            rows.push(RankRow {
                condition: f[0].parse()?,
                per_view,
                mean: parse_accuracy(f[NUM_VIEWS + 1])?,
                probes: count(f[NUM_VIEWS + 2])?,
                excluded: count(f[NUM_VIEWS + 3])?,
            });
        }
        Ok(RankTable { rows })
    }

    /// Aligned plain-text table of percentages.
    pub fn to_text(&self) -> String {
        let cell = |a: Option<f64>| a.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut s = format!("{:<6}", "probe");
        for v in VIEWS {
            let _ = write!(s, "{:>7}", format!("{v}°"));
        }
        let _ = writeln!(s, "{:>7}", "mean");
        for r in &self.rows {
            let _ = write!(s, "{:<6}", r.condition.to_string());
            for a in r.per_view {
                let _ = write!(s, "{:>7}", cell(a));
            }
            let _ = writeln!(s, "{:>7}", cell(r.mean));
        }
        s
    }
}
