//! Track reports: per-rate columns, per-task MS, an OM column and best/worst
//! markers, rendered as comma-separated and aligned text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use postprune::metrics::{
    self, om_alloc, om_arch, om_recon, om_robust, om_task, per_task_ms, percent, recon_gain,
    recon_term, render, GainRecord, ModelKey, Orientation, Phase, ScoreTable, EXP_CLAMP,
};

use crate::error::{HarnessError, Result};
use crate::sweep::{Algorithm, ReconSetting, SweepConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Track {
    Alloc,
    Recon,
    Arch,
    Robust,
    Task,
}

impl Track {
    pub const ALL: [Track; 5] = [
        Track::Alloc,
        Track::Recon,
        Track::Arch,
        Track::Robust,
        Track::Task,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Track::Alloc => "alloc",
            Track::Recon => "recon",
            Track::Arch => "arch",
            Track::Robust => "robust",
            Track::Task => "task",
        }
    }
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Track {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Track::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                format!("unknown track {s:?} (expected alloc, recon, arch, robust or task)")
            })
    }
}

/// Settings shared by every report of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    /// Score table behind the arch, robust and task tracks.
    pub reference: String,
    pub notes: Vec<String>,
}

impl Meta {
    pub fn new(root_seed: Option<u64>) -> Self {
        let mut notes = Vec::new();
        if let Some(seed) = root_seed {
            notes.push(format!(
                "root seed {seed}; sub-seeds dataset/<task>, init/<fixture>, training/<fixture>, \
                 calibration/<fixture>/s<seed>, shuffle/<cell>"
            ));
        }
        notes.push("values x100, rounded to 4 decimals, rendered with 2".into());
        notes.push("MS and OM columns aggregate rates above 0 only".into());
        notes.push("OM_robust is the population standard deviation (lower is better)".into());
        notes.push(format!("lower-is-better reconstruction terms are exp(mean(dense/gain)) clamped to {EXP_CLAMP:e}"));
        notes.push("markers: (b) best, (w) worst in a column".into());
        Self {
            reference: Algorithm::Recon(ReconSetting::REFERENCE).to_string(),
            notes,
        }
    }

    pub fn for_sweep(cfg: &SweepConfig) -> Self {
        let mut m = Self::new(Some(cfg.root_seed));
        let s = &cfg.scale;
        m.notes.push(format!(
            "calibration {} samples, batch {}, {} iterations, lr {}, momentum {}",
            s.calibration, s.batch_size, s.iterations, s.lr, s.momentum
        ));
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub higher_better: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub track: Track,
    pub row_label: String,
    pub columns: Vec<Column>,
    /// Row name and one fraction per column (`None` renders as `n/a`).
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    /// Whole-table aggregates printed under the rows.
    pub footer: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl Report {
    /// Best and worst row indices of column `c`, compared after rounding to
    /// report precision so that displayed ties share a marker. When every
    /// defined value is equal the rows are marked best only.
    pub fn markers(&self, c: usize) -> (Vec<usize>, Vec<usize>) {
        let vals: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, (_, v))| v[c].map(|x| (i, percent(x))))
            .collect();
        if vals.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let hi = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let (best, worst) = if self.columns[c].higher_better {
            (hi, lo)
        } else {
            (lo, hi)
        };
        let pick = |t: f64| {
            vals.iter()
                .filter(|v| v.1 == t)
                .map(|v| v.0)
                .collect::<Vec<_>>()
        };
        if hi == lo {
            return (pick(best), Vec::new());
        }
        (pick(best), pick(worst))
    }

    fn cell(&self, r: usize, c: usize, marks: &[(Vec<usize>, Vec<usize>)]) -> String {
        match self.rows[r].1[c] {
            None => "n/a".into(),
            Some(v) if marks[c].0.contains(&r) => format!("{}(b)", render(v)),
            Some(v) if marks[c].1.contains(&r) => format!("{}(w)", render(v)),
            Some(v) => render(v),
        }
    }

    fn all_markers(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        (0..self.columns.len()).map(|c| self.markers(c)).collect()
    }

    pub fn to_csv(&self) -> String {
        let marks = self.all_markers();
        let mut lines = vec![std::iter::once(self.row_label.clone())
            .chain(self.columns.iter().map(|c| c.name.clone()))
            .collect::<Vec<_>>()
            .join(",")];
        for (name, vals) in &self.rows {
            let cells = vals.iter().map(|v| v.map_or("n/a".to_string(), render));
            lines.push(
                std::iter::once(name.clone())
                    .chain(cells)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        for (label, which) in [("best", 0), ("worst", 1)] {
            let cells = marks.iter().map(|m| {
                let rows = if which == 0 { &m.0 } else { &m.1 };
                rows.iter()
                    .map(|&i| self.rows[i].0.as_str())
                    .collect::<Vec<_>>()
                    .join(";")
            });
            lines.push(
                std::iter::once(label.to_string())
                    .chain(cells)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        for (name, v) in &self.footer {
            lines.push(format!("{name},{}", render(*v)));
        }
        lines.join("\n") + "\n"
    }

    pub fn to_text(&self) -> String {
        let marks = self.all_markers();
        let mut grid = vec![std::iter::once(self.row_label.clone())
            .chain(self.columns.iter().map(|c| c.name.clone()))
            .collect::<Vec<_>>()];
        for r in 0..self.rows.len() {
            let mut line = vec![self.rows[r].0.clone()];
            line.extend((0..self.columns.len()).map(|c| self.cell(r, c, &marks)));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("[{} track]\n", self.track);
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            out += cells.join("  ").trim_end();
            out.push('\n');
        }
        for (name, v) in &self.footer {
            out += &format!("{name}: {}\n", render(*v));
        }
        for n in &self.notes {
            out += &format!("# {n}\n");
        }
        out
    }
}

pub fn write(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (ext, body) in [("csv", report.to_csv()), ("txt", report.to_text())] {
        let path = dir.join(format!("{}.{ext}", report.track));
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Building.

fn empty(track: Track) -> HarnessError {
    HarnessError::Data(format!("no scores for the {track} track"))
}

fn rate_label(rate: f64) -> String {
    format!("{}", percent(rate))
}

/// Relative scores of `phase` grouped by task, then rate.
type ByTaskRate = BTreeMap<String, BTreeMap<u64, Vec<(ModelKey, f64)>>>;

fn group(rel: Vec<(ModelKey, f64, f64)>) -> ByTaskRate {
    let mut out: ByTaskRate = BTreeMap::new();
    for (key, rate, v) in rel {
        out.entry(key.task.clone())
            .or_default()
            .entry(rate.to_bits())
            .or_default()
            .push((key, v));
    }
    out
}

fn positive(rates: &BTreeMap<u64, Vec<(ModelKey, f64)>>) -> Vec<f64> {
    rates
        .iter()
        .filter(|(r, _)| f64::from_bits(**r) > 0.0)
        .flat_map(|(_, v)| v.iter().map(|x| x.1))
        .collect()
}

/// Ascending rates per task over a set of groupings.
fn task_rates<'a>(groups: impl Iterator<Item = &'a ByTaskRate>) -> BTreeMap<String, Vec<f64>> {
    let mut set: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for g in groups {
        for (task, rates) in g {
            set.entry(task.clone())
                .or_default()
                .extend(rates.keys().copied());
        }
    }
    set.into_iter()
        .map(|(t, r)| {
            let mut v: Vec<f64> = r.into_iter().map(f64::from_bits).collect();
            v.sort_by(f64::total_cmp);
            (t, v)
        })
        .collect()
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    metrics::mean(xs).ok()
}

fn track_tables<'a>(
    tables: &'a BTreeMap<String, ScoreTable>,
    prefix: &str,
) -> Vec<(String, &'a ScoreTable)> {
    tables
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t)))
        .collect()
}

pub fn build(tables: &BTreeMap<String, ScoreTable>, track: Track, meta: &Meta) -> Result<Report> {
    let report = match track {
        Track::Alloc => build_alloc(tables)?,
        Track::Recon => build_recon(tables)?,
        Track::Arch | Track::Robust => build_model(tables, track, meta)?,
        Track::Task => build_task(tables, meta)?,
    };
    if report.rows.is_empty() {
        return Err(empty(track));
    }
    Ok(Report {
        notes: meta.notes.clone(),
        ..report
    })
}

fn build_alloc(tables: &BTreeMap<String, ScoreTable>) -> Result<Report> {
    let rows_in = track_tables(tables, "alloc-");
    let grouped: Vec<(String, ByTaskRate)> = rows_in
        .iter()
        .map(|(n, t)| Ok((n.clone(), group(t.relative(Phase::Sparse)?))))
        .collect::<Result<_>>()?;
    let rates = task_rates(grouped.iter().map(|g| &g.1));
    let mut columns = Vec::new();
    for (task, rs) in &rates {
        columns.extend(rs.iter().map(|r| Column {
            name: format!("{task} {}", rate_label(*r)),
            higher_better: true,
        }));
        columns.push(Column {
            name: format!("{task} MS"),
            higher_better: true,
        });
    }
    columns.push(Column {
        name: "OM_alloc".into(),
        higher_better: true,
    });
    let mut rows = Vec::new();
    for (name, g) in grouped {
        let mut vals = Vec::new();
        let mut ms = BTreeMap::new();
        for (task, rs) in &rates {
            let by_rate = g.get(task);
            for r in rs {
                let xs: Vec<f64> = by_rate
                    .and_then(|b| b.get(&r.to_bits()))
                    .map(|v| v.iter().map(|x| x.1).collect())
                    .unwrap_or_default();
                vals.push(mean_opt(&xs));
            }
            let m = by_rate.and_then(|b| per_task_ms(&positive(b)).ok());
            if let Some(m) = m {
                ms.insert(task.clone(), m);
            }
            vals.push(m);
        }
        vals.push(om_alloc(&ms).ok());
        rows.push((name, vals));
    }
    Ok(Report {
        track: Track::Alloc,
        row_label: "allocator".into(),
        columns,
        rows,
        footer: Vec::new(),
        notes: Vec::new(),
    })
}

/// Gain records grouped by task (with its orientation), then rate.
type GainsByTask = BTreeMap<String, (Orientation, BTreeMap<u64, Vec<GainRecord>>)>;

/// Gain records of one reconstruction table.
fn gains(table: &ScoreTable) -> Result<GainsByTask> {
    let mut out: GainsByTask = BTreeMap::new();
    for r in table
        .records()
        .iter()
        .filter(|r| r.phase == Phase::SparseReconstructed)
    {
        let sparse = table.get(&r.key, r.rate, Phase::Sparse).ok_or_else(|| {
            HarnessError::Data(format!(
                "{} at rate {} has no pre-reconstruction score",
                r.key, r.rate
            ))
        })?;
        let dense = table
            .dense(&r.key)
            .ok_or_else(|| HarnessError::Data(format!("{} has no dense score", r.key)))?;
        let gain = recon_gain(r.score, sparse)?;
        out.entry(r.key.task.clone())
            .or_insert_with(|| (r.score.orientation, BTreeMap::new()))
            .1
            .entry(r.rate.to_bits())
            .or_default()
            .push(GainRecord {
                dense: dense.value,
                gain,
            });
    }
    Ok(out)
}

fn build_recon(tables: &BTreeMap<String, ScoreTable>) -> Result<Report> {
    let rows_in = track_tables(tables, "recon-");
    let grouped: Vec<_> = rows_in
        .iter()
        .map(|(n, t)| Ok((n.clone(), gains(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rate_set: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for (_, g) in &grouped {
        for (task, (_, rs)) in g {
            rate_set
                .entry(task.clone())
                .or_default()
                .extend(rs.keys().copied());
        }
    }
    let rates: BTreeMap<String, Vec<f64>> = rate_set
        .into_iter()
        .map(|(t, r)| {
            let mut v: Vec<f64> = r.into_iter().map(f64::from_bits).collect();
            v.sort_by(f64::total_cmp);
            (t, v)
        })
        .collect();
    let mut columns = Vec::new();
    for (task, rs) in &rates {
        columns.extend(rs.iter().map(|r| Column {
            name: format!("{task} {}", rate_label(*r)),
            higher_better: true,
        }));
        columns.push(Column {
            name: format!("{task} MS"),
            higher_better: true,
        });
    }
    columns.push(Column {
        name: "OM_recon".into(),
        higher_better: true,
    });
    let mut rows = Vec::new();
    for (name, g) in grouped {
        let mut vals = Vec::new();
        let mut terms = BTreeMap::new();
        for (task, rs) in &rates {
            let entry = g.get(task);
            for r in rs {
                let term = match entry.and_then(|(o, b)| b.get(&r.to_bits()).map(|v| (*o, v))) {
                    Some((o, recs)) => recon_term(o, recs)?,
                    None => None,
                };
                vals.push(term);
            }
            let ms = match entry {
                Some((o, b)) => {
                    let recs: Vec<GainRecord> = b
                        .iter()
                        .filter(|(r, _)| f64::from_bits(**r) > 0.0)
                        .flat_map(|(_, v)| v.iter().copied())
                        .collect();
                    if recs.is_empty() {
                        None
                    } else {
                        recon_term(*o, &recs)?
                    }
                }
                None => None,
            };
            if let Some(m) = ms {
                terms.insert(task.clone(), m);
            }
            vals.push(ms);
        }
        vals.push(om_recon(&terms).ok());
        rows.push((name, vals));
    }
    Ok(Report {
        track: Track::Recon,
        row_label: "config".into(),
        columns,
        rows,
        footer: Vec::new(),
        notes: Vec::new(),
    })
}

fn reference<'a>(
    tables: &'a BTreeMap<String, ScoreTable>,
    meta: &Meta,
    track: Track,
) -> Result<&'a ScoreTable> {
    tables.get(&meta.reference).ok_or_else(|| {
        HarnessError::Data(format!(
            "the {track} track needs the reference table {}",
            meta.reference
        ))
    })
}

/// Architecture and size-robustness tracks: rows are families of the
/// classification task, scored with the reference reconstruction.
fn build_model(tables: &BTreeMap<String, ScoreTable>, track: Track, meta: &Meta) -> Result<Report> {
    let table = reference(tables, meta, track)?;
    let rel: Vec<_> = table
        .relative(Phase::SparseReconstructed)?
        .into_iter()
        .filter(|r| r.0.task == "cls")
        .collect();
    let mut rates: Vec<f64> = rel.iter().map(|r| r.1).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut families: BTreeMap<String, Vec<(ModelKey, f64, f64)>> = BTreeMap::new();
    for r in rel {
        families.entry(r.0.arch.clone()).or_default().push(r);
    }
    let om_name = if track == Track::Arch {
        "OM_arch"
    } else {
        "OM_robust"
    };
    let mut columns: Vec<Column> = rates
        .iter()
        .map(|r| Column {
            name: format!("cls {}", rate_label(*r)),
            higher_better: true,
        })
        .collect();
    columns.push(Column {
        name: om_name.into(),
        higher_better: track == Track::Arch,
    });
    let mut rows = Vec::new();
    for (family, recs) in families {
        let mut vals: Vec<Option<f64>> = rates
            .iter()
            .map(|&rate| {
                mean_opt(
                    &recs
                        .iter()
                        .filter(|r| r.1 == rate)
                        .map(|r| r.2)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let mut by_size: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.1 > 0.0) {
            by_size.entry(r.0.size.as_str()).or_default().push(r.2);
        }
        let size_means: Vec<f64> = by_size.values().filter_map(|v| mean_opt(v)).collect();
        let om = if track == Track::Arch {
            om_arch(&size_means)
        } else {
            om_robust(&size_means)
        };
        vals.push(om.ok());
        rows.push((family, vals));
    }
    Ok(Report {
        track,
        row_label: "family".into(),
        columns,
        rows,
        footer: Vec::new(),
        notes: Vec::new(),
    })
}

fn build_task(tables: &BTreeMap<String, ScoreTable>, meta: &Meta) -> Result<Report> {
    let table = reference(tables, meta, Track::Task)?;
    let g = group(table.relative(Phase::SparseReconstructed)?);
    let mut rates: Vec<f64> = g
        .values()
        .flat_map(|b| b.keys().map(|r| f64::from_bits(*r)))
        .collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut columns: Vec<Column> = rates
        .iter()
        .map(|r| Column {
            name: rate_label(*r),
            higher_better: true,
        })
        .collect();
    columns.push(Column {
        name: "MS".into(),
        higher_better: true,
    });
    columns.push(Column {
        name: "OM_task".into(),
        higher_better: true,
    });
    let mut rows = Vec::new();
    let mut all_ms = Vec::new();
    for (task, b) in &g {
        let mut vals: Vec<Option<f64>> = rates
            .iter()
            .map(|r| {
                b.get(&r.to_bits())
                    .and_then(|v| mean_opt(&v.iter().map(|x| x.1).collect::<Vec<_>>()))
            })
            .collect();
        let ms = per_task_ms(&positive(b)).ok();
        vals.push(ms);
        vals.push(ms.and_then(|m| om_task(&[m]).ok()));
        all_ms.extend(ms);
        rows.push((task.clone(), vals));
    }
    let footer = om_task(&all_ms)
        .map(|v| vec![("OM_task (all tasks)".to_string(), v)])
        .unwrap_or_default();
    Ok(Report {
        track: Track::Task,
        row_label: "task".into(),
        columns,
        rows,
        footer,
        notes: Vec::new(),
    })
}
