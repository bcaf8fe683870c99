//! Oriented task scores and the overall metrics built from them.
//!
//! Every aggregate here works on fractions; reports multiply by 100.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Upper clamp for the exponential lower-is-better reconstruction term.
pub const EXP_CLAMP: f64 = 1e6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no values to aggregate")]
    Empty,
    #[error("need at least {needed} sizes, got {got}")]
    TooFewSizes { needed: usize, got: usize },
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("orientation mismatch: {0} vs {1}")]
    OrientationMismatch(Orientation, Orientation),
    #[error("invalid score {value} for {orientation}")]
    InvalidScore {
        value: f64,
        orientation: Orientation,
    },
    #[error("no dense record for {0}")]
    MissingDense(String),
    #[error("score table line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::HigherBetter => "higher_better",
            Orientation::LowerBetter => "lower_better",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "higher_better" => Ok(Orientation::HigherBetter),
            "lower_better" => Ok(Orientation::LowerBetter),
            other => Err(format!("unknown orientation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskScore {
    pub value: f64,
    pub orientation: Orientation,
}

impl TaskScore {
    /// Higher-is-better values must be finite and non-negative, lower-is-better
    /// ones finite and strictly positive.
    pub fn new(value: f64, orientation: Orientation) -> Result<Self> {
        let ok = value.is_finite()
            && match orientation {
                Orientation::HigherBetter => value >= 0.0,
                Orientation::LowerBetter => value > 0.0,
            };
        if ok {
            Ok(Self { value, orientation })
        } else {
            Err(MetricError::InvalidScore { value, orientation })
        }
    }

    pub fn higher(value: f64) -> Result<Self> {
        Self::new(value, Orientation::HigherBetter)
    }

    pub fn lower(value: f64) -> Result<Self> {
        Self::new(value, Orientation::LowerBetter)
    }
}

/// Sparse-over-dense for higher-is-better, dense-over-sparse otherwise.
pub fn relative_score(sparse: TaskScore, dense: TaskScore) -> Result<f64> {
    if sparse.orientation != dense.orientation {
        return Err(MetricError::OrientationMismatch(
            sparse.orientation,
            dense.orientation,
        ));
    }
    let (num, den) = match dense.orientation {
        Orientation::HigherBetter => (sparse.value, dense.value),
        Orientation::LowerBetter => (dense.value, sparse.value),
    };
    if den == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    Ok(num / den)
}

/// Reconstruction gain: score with the technique minus score without it.
pub fn recon_gain(with: TaskScore, without: TaskScore) -> Result<f64> {
    if with.orientation != without.orientation {
        return Err(MetricError::OrientationMismatch(
            with.orientation,
            without.orientation,
        ));
    }
    Ok(with.value - without.value)
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn quadratic_mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok((xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Quadratic mean of per-task mean relative scores. Absent tasks simply do
/// not appear in the map.
pub fn om_alloc(per_task_means: &BTreeMap<String, f64>) -> Result<f64> {
    quadratic_mean(&per_task_means.values().copied().collect::<Vec<_>>())
}

/// Quadratic mean of per-task reconstruction terms (see [`recon_term`]).
pub fn om_recon(per_task_terms: &BTreeMap<String, f64>) -> Result<f64> {
    quadratic_mean(&per_task_terms.values().copied().collect::<Vec<_>>())
}

/// One record feeding a reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainRecord {
    pub dense: f64,
    pub gain: f64,
}

/// Per-task reconstruction term: mean of `gain / dense` for higher-is-better
/// tasks; for lower-is-better tasks `exp(mean(dense / gain))`, clamped to
/// `[0, EXP_CLAMP]`. Zero lower-is-better gains are undefined and skipped.
/// Returns `None` when every record was skipped.
pub fn recon_term(orientation: Orientation, records: &[GainRecord]) -> Result<Option<f64>> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    match orientation {
        Orientation::HigherBetter => {
            if records.iter().any(|r| r.dense == 0.0) {
                return Err(MetricError::ZeroDenominator);
            }
            let ratios: Vec<f64> = records.iter().map(|r| r.gain / r.dense).collect();
            mean(&ratios).map(Some)
        }
        Orientation::LowerBetter => {
            let mut ratios = Vec::with_capacity(records.len());
            for r in records {
                if r.gain == 0.0 {
                    log::warn!(
                        "lower-is-better gain of 0 (dense {}): term undefined, record excluded",
                        r.dense
                    );
                } else {
                    ratios.push(r.dense / r.gain);
                }
            }
            if ratios.is_empty() {
                return Ok(None);
            }
            Ok(Some(exp_term(mean(&ratios)?)))
        }
    }
}

pub fn exp_term(x: f64) -> f64 {
    x.exp().clamp(0.0, EXP_CLAMP)
}

/// Quadratic mean over model sizes of the per-size mean relative scores.
pub fn om_arch(per_size_means: &[f64]) -> Result<f64> {
    quadratic_mean(per_size_means)
}

/// Population standard deviation of per-size mean relative scores.
pub fn om_robust(per_size_means: &[f64]) -> Result<f64> {
    if per_size_means.len() < 2 {
        return Err(MetricError::TooFewSizes {
            needed: 2,
            got: per_size_means.len(),
        });
    }
    let m = mean(per_size_means)?;
    let var = per_size_means
        .iter()
        .map(|x| (x - m) * (x - m))
        .sum::<f64>()
        / per_size_means.len() as f64;
    Ok(var.sqrt())
}

pub fn om_task(per_task_means: &[f64]) -> Result<f64> {
    quadratic_mean(per_task_means)
}

/// A task's component before cross-task aggregation: the mean relative score.
pub fn per_task_ms(scores: &[f64]) -> Result<f64> {
    mean(scores)
}

/// Fraction to report units, rounded to 4 decimals.
pub fn percent(x: f64) -> f64 {
    (x * 100.0 * 1e4).round() / 1e4
}

/// Report rendering: ×100 with 2 decimals.
pub fn render(x: f64) -> String {
    format!("{:.2}", percent(x))
}

// ---------------------------------------------------------------------------
// Score table.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Dense,
    Sparse,
    SparseReconstructed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Sparse => "sparse",
            Phase::SparseReconstructed => "sparse_reconstructed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dense" => Ok(Phase::Dense),
            "sparse" => Ok(Phase::Sparse),
            "sparse_reconstructed" => Ok(Phase::SparseReconstructed),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// Identity of a model/dataset combination, without rate or phase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelKey {
    pub task: String,
    pub arch: String,
    pub size: String,
    pub dataset: String,
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.task, self.arch, self.size, self.dataset
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub key: ModelKey,
    pub rate: f64,
    pub phase: Phase,
    pub score: TaskScore,
}

pub const SCORE_TABLE_HEADER: &str = "task,arch,size,dataset,rate,phase,orientation,value";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ScoreRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorts records into a canonical order so serialization does not depend
    /// on insertion order.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (&a.key, a.phase)
                .cmp(&(&b.key, b.phase))
                .then(a.rate.total_cmp(&b.rate))
        });
    }

    pub fn dense(&self, key: &ModelKey) -> Option<TaskScore> {
        self.records
            .iter()
            .find(|r| r.phase == Phase::Dense && &r.key == key)
            .map(|r| r.score)
    }

    pub fn get(&self, key: &ModelKey, rate: f64, phase: Phase) -> Option<TaskScore> {
        self.records
            .iter()
            .find(|r| r.phase == phase && r.rate == rate && &r.key == key)
            .map(|r| r.score)
    }

    /// Every non-dense record needs a dense record with the same key.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.phase != Phase::Dense {
                let d = self
                    .dense(&r.key)
                    .ok_or_else(|| MetricError::MissingDense(r.key.to_string()))?;
                if d.orientation != r.score.orientation {
                    return Err(MetricError::OrientationMismatch(
                        r.score.orientation,
                        d.orientation,
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(key, rate, relative score)` for every record of `phase`.
    pub fn relative(&self, phase: Phase) -> Result<Vec<(ModelKey, f64, f64)>> {
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| r.phase == phase) {
            let d = self
                .dense(&r.key)
                .ok_or_else(|| MetricError::MissingDense(r.key.to_string()))?;
            out.push((r.key.clone(), r.rate, relative_score(r.score, d)?));
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SCORE_TABLE_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.key.task,
                r.key.arch,
                r.key.size,
                r.key.dataset,
                r.rate,
                r.phase,
                r.score.orientation,
                r.score.value
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == SCORE_TABLE_HEADER => {}
            _ => {
                return Err(MetricError::Parse {
                    line: 1,
                    msg: format!("expected header {SCORE_TABLE_HEADER:?}"),
                })
            }
        }
        let mut table = Self::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| MetricError::Parse { line: line_no, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(format!("expected 8 fields, got {}", f.len())));
            }
            let rate: f64 = f[4]
                .parse()
                .map_err(|_| err(format!("bad rate {:?}", f[4])))?;
            let phase: Phase = f[5].parse().map_err(err)?;
            let orientation: Orientation = f[6].parse().map_err(err)?;
            let value: f64 = f[7]
                .parse()
                .map_err(|_| err(format!("bad value {:?}", f[7])))?;
            let score = TaskScore::new(value, orientation).map_err(|e| err(e.to_string()))?;
            let key = ModelKey {
                task: f[0].into(),
                arch: f[1].into(),
                size: f[2].into(),
                dataset: f[3].into(),
            };
            table.push(ScoreRecord {
                key,
                rate,
                phase,
                score,
            });
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let key = ModelKey {
            task: "cls".into(),
            arch: "mlp".into(),
            size: "s".into(),
            dataset: "blobs:s0".into(),
        };
        let mut t = ScoreTable::new();
        t.push(ScoreRecord {
            key: key.clone(),
            rate: 0.0,
            phase: Phase::Dense,
            score: TaskScore::higher(0.95).unwrap(),
        });
        t.push(ScoreRecord {
            key,
            rate: 0.5,
            phase: Phase::Sparse,
            score: TaskScore::higher(0.1 + 0.2).unwrap(),
        });
        let csv = t.to_csv();
        assert_eq!(ScoreTable::from_csv(&csv).unwrap(), t);
        t.validate().unwrap();
    }

    #[test]
    fn missing_dense_is_rejected() {
        let key = ModelKey {
            task: "den".into(),
            arch: "mlp".into(),
            size: "s".into(),
            dataset: "d".into(),
        };
        let mut t = ScoreTable::new();
        t.push(ScoreRecord {
            key,
            rate: 0.5,
            phase: Phase::Sparse,
            score: TaskScore::lower(1.0).unwrap(),
        });
        assert!(matches!(t.validate(), Err(MetricError::MissingDense(_))));
    }

    #[test]
    fn invalid_scores() {
        assert!(TaskScore::lower(0.0).is_err());
        assert!(TaskScore::higher(-0.1).is_err());
        assert!(TaskScore::higher(f64::NAN).is_err());
        assert!(TaskScore::higher(0.0).is_ok());
    }
}
