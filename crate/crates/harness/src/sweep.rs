//! Resumable benchmark sweeps over (fixture, seed, rate, algorithm) cells.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use postprune::allocation::{allocate, apply_plan, AllocOptions, Strategy};
use postprune::graph::Granularity;
use postprune::io::{load_model, save_model};
use postprune::metrics::{ModelKey, Phase, ScoreRecord, ScoreTable, TaskScore};
use postprune::reconstruction::{
    run_reconstruction, CalibrationSet, InputMode, ReconConfig, StatsScope, DEFAULT_BATCH_SIZE,
    DEFAULT_CALIBRATION_SIZE, DEFAULT_ITERATIONS, DEFAULT_LR, DEFAULT_MOMENTUM,
};
use postprune::rng::sub_seed;
use postprune::ModelGraph;
use rayon::prelude::*;

use crate::data::{gen_dataset, load_dataset, save_dataset, DataSpec, Dataset, Task};
use crate::error::{HarnessError, Result};
use crate::evaluate::evaluate;
use crate::fixtures::FixtureSpec;
use crate::report::{self, Track};
use crate::train::{train, TrainConfig};

/// One reconstruction technique combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReconSetting {
    pub granularity: Granularity,
    pub input_mode: InputMode,
    pub error_correction: bool,
}

impl ReconSetting {
    /// Configuration behind the architecture, robustness and task tracks.
    pub const REFERENCE: ReconSetting = ReconSetting {
        granularity: Granularity::BlockWise,
        input_mode: InputMode::Sparse,
        error_correction: false,
    };

    /// The reference plus one-technique variations of it.
    pub fn track_variants() -> Vec<ReconSetting> {
        let r = Self::REFERENCE;
        vec![
            r,
            ReconSetting {
                error_correction: true,
                ..r
            },
            ReconSetting {
                input_mode: InputMode::Dense,
                ..r
            },
            ReconSetting {
                granularity: Granularity::LayerWise,
                ..r
            },
            ReconSetting {
                granularity: Granularity::Single,
                ..r
            },
        ]
    }
}

impl fmt::Display for ReconSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ec = if self.error_correction { "ec" } else { "noec" };
        write!(f, "{}-{}-{}", self.granularity, self.input_mode, ec)
    }
}

impl FromStr for ReconSetting {
    type Err = String;

    /// `<granularity>-<input>-<ec|noec>`, e.g. `block-sparse-noec`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('-').collect();
        let [g, i, ec] = parts.as_slice() else {
            return Err(format!(
                "reconstruction setting {s:?} is not <granularity>-<input>-<ec|noec>"
            ));
        };
        let error_correction = match *ec {
            "ec" => true,
            "noec" => false,
            other => return Err(format!("expected ec or noec, got {other:?}")),
        };
        Ok(Self {
            granularity: g.parse()?,
            input_mode: i.parse()?,
            error_correction,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    /// Allocation only; scores are taken before any reconstruction.
    Alloc(Strategy),
    /// Global-magnitude allocation followed by reconstruction.
    Recon(ReconSetting),
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Alloc(s) => write!(f, "alloc-{}", s.as_str()),
            Algorithm::Recon(r) => write!(f, "recon-{r}"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(a) = s.strip_prefix("alloc-") {
            Ok(Algorithm::Alloc(a.parse()?))
        } else if let Some(r) = s.strip_prefix("recon-") {
            Ok(Algorithm::Recon(r.parse()?))
        } else {
            Err(format!("unknown algorithm {s:?}"))
        }
    }
}

/// Calibration and optimizer constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Scale {
    pub calibration: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Scale {
    pub fn desk() -> Self {
        Self {
            calibration: 256,
            batch_size: 32,
            iterations: 2000,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn paper() -> Self {
        Self {
            calibration: DEFAULT_CALIBRATION_SIZE,
            batch_size: DEFAULT_BATCH_SIZE,
            iterations: DEFAULT_ITERATIONS,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub fixtures: Vec<FixtureSpec>,
    pub rates: Vec<f64>,
    pub allocators: Vec<Strategy>,
    pub recon: Vec<ReconSetting>,
    pub keep_last_dense: bool,
    /// Cell seeds; each varies calibration sampling and batch order.
    pub seeds: Vec<u64>,
    /// Root of every derived seed (datasets, training, cells).
    pub root_seed: u64,
    pub scale: Scale,
    pub epochs: usize,
    pub threads: usize,
    pub out_dir: PathBuf,
}

impl SweepConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            fixtures: FixtureSpec::zoo(),
            rates: vec![0.5, 0.6, 0.7, 0.8],
            allocators: vec![Strategy::Uniform, Strategy::GlobalMagnitude, Strategy::Erk],
            recon: ReconSetting::track_variants(),
            keep_last_dense: false,
            seeds: vec![0],
            root_seed: 0,
            scale: Scale::desk(),
            epochs: TrainConfig::default().epochs,
            threads: 1,
            out_dir: out_dir.into(),
        }
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        self.allocators
            .iter()
            .map(|&s| Algorithm::Alloc(s))
            .chain(self.recon.iter().map(|&r| Algorithm::Recon(r)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(HarnessError::Usage(m));
        if self.fixtures.is_empty() || self.rates.is_empty() || self.seeds.is_empty() {
            return usage("sweep needs at least one fixture, rate and seed".into());
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return usage(format!("sparsity rate {r} outside [0, 1]"));
        }
        if self.allocators.contains(&Strategy::Custom) {
            return usage("custom plans are per model; use `sparsify --plan` instead".into());
        }
        if self.algorithms().is_empty() {
            return usage("sweep needs at least one allocator or reconstruction setting".into());
        }
        if self.threads == 0 {
            return usage("threads must be at least 1".into());
        }
        Ok(())
    }

    fn recon_config(&self, setting: ReconSetting, seed: u64) -> ReconConfig {
        ReconConfig {
            granularity: setting.granularity,
            input_mode: setting.input_mode,
            error_correction: setting.error_correction,
            stats_scope: StatsScope::PerChannel,
            lr: self.scale.lr,
            momentum: self.scale.momentum,
            iterations: self.scale.iterations,
            batch_size: self.scale.batch_size,
            seed,
        }
    }
}

pub fn dataset_name(task: Task) -> &'static str {
    match task {
        Task::Cls => "blobs",
        Task::Den => "denoise",
    }
}

/// A prepared fixture: trained model and its dense test score.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: FixtureSpec,
    pub model: ModelGraph,
    pub dense: TaskScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub fixture: FixtureSpec,
    pub seed: u64,
    pub rate: f64,
    pub algorithm: Algorithm,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}__s{}__r{}__{}",
            self.fixture, self.seed, self.rate, self.algorithm
        )
    }

    pub fn key(&self) -> ModelKey {
        ModelKey {
            task: self.fixture.task.to_string(),
            arch: self.fixture.family.to_string(),
            size: self.fixture.size.to_string(),
            dataset: format!("{}:s{}", dataset_name(self.fixture.task), self.seed),
        }
    }
}

/// Per-unit summary kept with a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSummary {
    pub output: String,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub iterations: usize,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub records: Vec<ScoreRecord>,
    pub units: Vec<UnitSummary>,
    /// Achieved per-layer zero counts before and after reconstruction.
    pub zeros_before: Vec<usize>,
    pub zeros_after: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    /// Score table per algorithm name.
    pub tables: BTreeMap<String, ScoreTable>,
    pub cells: BTreeMap<String, CellResult>,
    pub errors: Vec<(String, String)>,
    pub computed: usize,
    pub reused: usize,
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

/// Loads the dataset for `task` from `<out>/data`, generating it first if absent.
pub fn prepare_dataset(out_dir: &Path, task: Task, root_seed: u64) -> Result<Dataset> {
    let dir = out_dir.join("data");
    ensure_dir(&dir)?;
    let path = dir.join(format!("{}.ptsd", dataset_name(task)));
    if !path.exists() {
        let d = gen_dataset(
            &DataSpec::default_for(task),
            sub_seed(root_seed, &format!("dataset/{task}")),
        )?;
        save_dataset(&d, &path)?;
    }
    load_dataset(&path)
}

/// Loads (or trains and stores) a fixture and scores it on the test split.
pub fn prepare_fixture(
    out_dir: &Path,
    spec: FixtureSpec,
    data: &Dataset,
    root_seed: u64,
    epochs: usize,
) -> Result<Prepared> {
    let dir = out_dir.join("fixtures");
    ensure_dir(&dir)?;
    let path = dir.join(format!("{spec}.ptsm"));
    if !path.exists() {
        let mut model = spec.build(&data.spec, sub_seed(root_seed, &format!("init/{spec}")))?;
        let cfg = TrainConfig {
            epochs,
            seed: sub_seed(root_seed, &format!("training/{spec}")),
            ..TrainConfig::default()
        };
        let loss = train(&mut model, data, &cfg)?;
        log::info!("trained {spec}: final loss {loss:.5}");
        let tmp = path.with_extension("tmp");
        save_model(&model, &tmp)?;
        fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))?;
    }
    let model: ModelGraph = load_model(&path)?;
    let dense = evaluate(&model, &data.test, spec.task)?;
    Ok(Prepared { spec, model, dense })
}

fn zero_counts(g: &ModelGraph) -> Vec<usize> {
    g.prunable_ids()
        .into_iter()
        .map(|id| {
            g.node(id)
                .and_then(|n| n.layer.weight())
                .map_or(0, |w| w.data().iter().filter(|v| **v == 0.0).count())
        })
        .collect()
}

/// Runs one cell: allocate, mask, score, and (for reconstruction cells)
/// reconstruct and score again.
pub fn run_cell(
    cfg: &SweepConfig,
    cell: &Cell,
    fixture: &Prepared,
    data: &Dataset,
) -> Result<CellResult> {
    let strategy = match cell.algorithm {
        Algorithm::Alloc(s) => s,
        Algorithm::Recon(_) => Strategy::GlobalMagnitude,
    };
    let opts = AllocOptions {
        keep_last_dense: cfg.keep_last_dense,
    };
    let plan = allocate(&fixture.model, strategy, cell.rate, opts)?;
    let (mask, sparse) = apply_plan(&fixture.model, &plan)?;
    let task = cell.fixture.task;
    let key = cell.key();
    let record = |phase, score| ScoreRecord {
        key: key.clone(),
        rate: cell.rate,
        phase,
        score,
    };
    let before = evaluate(&sparse, &data.test, task)?;
    let mut out = CellResult {
        records: vec![record(Phase::Sparse, before)],
        units: Vec::new(),
        zeros_before: zero_counts(&sparse),
        zeros_after: Vec::new(),
    };
    if let Algorithm::Recon(setting) = cell.algorithm {
        let calib_seed = sub_seed(
            cfg.root_seed,
            &format!("calibration/{}/s{}", cell.fixture, cell.seed),
        );
        let calib = CalibrationSet::sample(&data.train.inputs, cfg.scale.calibration, calib_seed)?;
        let rc = cfg.recon_config(
            setting,
            sub_seed(cfg.root_seed, &format!("shuffle/{}", cell.id())),
        );
        let rec = run_reconstruction(&fixture.model, &sparse, &mask, &calib, &rc)?;
        let after = evaluate(&rec.graph, &data.test, task)?;
        out.records.push(record(Phase::SparseReconstructed, after));
        out.zeros_after = zero_counts(&rec.graph);
        if out.zeros_after != out.zeros_before {
            return Err(HarnessError::Numerical(
                "reconstruction changed the sparsity pattern".into(),
            ));
        }
        out.units = rec
            .units
            .iter()
            .map(|u| UnitSummary {
                output: u.output.clone(),
                initial_mse: u.initial_mse,
                final_mse: u.final_mse,
                iterations: u.loss_trace.len(),
                aborted: u.aborted.clone(),
            })
            .collect();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cell files.

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn format_cell(id: &str, r: &CellResult) -> String {
    let mut s = format!(
        "cell {id}\nzeros_before {}\nzeros_after {}\n",
        join(&r.zeros_before),
        join(&r.zeros_after)
    );
    for rec in &r.records {
        s += &format!(
            "record {} {} {} {} {} {} {} {}\n",
            rec.key.task,
            rec.key.arch,
            rec.key.size,
            rec.key.dataset,
            rec.rate,
            rec.phase,
            rec.score.orientation,
            rec.score.value
        );
    }
    for u in &r.units {
        let aborted = u
            .aborted
            .as_deref()
            .map_or("-".to_string(), |a| a.replace(char::is_whitespace, "_"));
        s += &format!(
            "unit {} {} {} {} {}\n",
            u.output, u.initial_mse, u.final_mse, u.iterations, aborted
        );
    }
    s
}

pub fn parse_cell(text: &str) -> Result<(String, CellResult)> {
    let bad = |line: usize, m: &str| HarnessError::Data(format!("cell file line {line}: {m}"));
    let mut id = None;
    let mut out = CellResult {
        records: Vec::new(),
        units: Vec::new(),
        zeros_before: Vec::new(),
        zeros_after: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split(' ').collect();
        let nums = |xs: &[&str]| -> Result<Vec<usize>> {
            xs.iter()
                .filter(|x| !x.is_empty())
                .map(|x| x.parse().map_err(|_| bad(i + 1, "bad count")))
                .collect()
        };
        match f[0] {
            "cell" if f.len() == 2 => id = Some(f[1].to_string()),
            "zeros_before" => out.zeros_before = nums(&f[1..])?,
            "zeros_after" => out.zeros_after = nums(&f[1..])?,
            "record" if f.len() == 9 => {
                let csv = f[1..].join(",");
                let table = ScoreTable::from_csv(&format!(
                    "{}\n{csv}\n",
                    postprune::metrics::SCORE_TABLE_HEADER
                ))?;
                out.records.extend(table.records().iter().cloned());
            }
            "unit" if f.len() == 6 => {
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
                out.units.push(UnitSummary {
                    output: f[1].to_string(),
                    initial_mse: num(f[2])?,
                    final_mse: num(f[3])?,
                    iterations: f[4]
                        .parse()
                        .map_err(|_| bad(i + 1, "bad iteration count"))?,
                    aborted: (f[5] != "-").then(|| f[5].to_string()),
                });
            }
            "" => {}
            _ => return Err(bad(i + 1, "unrecognized line")),
        }
    }
    Ok((id.ok_or_else(|| bad(1, "missing cell id"))?, out))
}

// ---------------------------------------------------------------------------
// Driver.

fn cell_path(out_dir: &Path, id: &str) -> PathBuf {
    out_dir.join("cells").join(format!("{id}.cell"))
}

/// Runs (or resumes) a sweep, writes score tables, the errors file and all
/// track reports under `cfg.out_dir`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let out_dir = &cfg.out_dir;
    ensure_dir(&out_dir.join("cells"))?;
    ensure_dir(&out_dir.join("scores"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HarnessError::Usage(format!("cannot start worker pool: {e}")))?;

    let mut tasks: Vec<Task> = cfg.fixtures.iter().map(|f| f.task).collect();
    tasks.sort();
    tasks.dedup();
    let datasets: BTreeMap<Task, Dataset> = tasks
        .iter()
        .map(|&t| Ok((t, prepare_dataset(out_dir, t, cfg.root_seed)?)))
        .collect::<Result<_>>()?;
    let mut fixtures = cfg.fixtures.clone();
    fixtures.sort();
    fixtures.dedup();
    let prepared: Vec<Prepared> = pool.install(|| {
        fixtures
            .par_iter()
            .map(|&f| prepare_fixture(out_dir, f, &datasets[&f.task], cfg.root_seed, cfg.epochs))
            .collect::<Result<_>>()
    })?;
    let by_name: BTreeMap<String, &Prepared> =
        prepared.iter().map(|p| (p.spec.to_string(), p)).collect();

    let mut cells = Vec::new();
    for f in &fixtures {
        for &seed in &cfg.seeds {
            for &rate in &cfg.rates {
                for algorithm in cfg.algorithms() {
                    cells.push(Cell {
                        fixture: *f,
                        seed,
                        rate,
                        algorithm,
                    });
                }
            }
        }
    }

    let results: Vec<(Cell, bool, Result<CellResult>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let id = cell.id();
                let path = cell_path(out_dir, &id);
                if let Ok(text) = fs::read_to_string(&path) {
                    match parse_cell(&text) {
                        Ok((stored, r)) if stored == id => return (*cell, false, Ok(r)),
                        _ => log::warn!("ignoring unreadable cell file {}", path.display()),
                    }
                }
                let fixture = by_name[&cell.fixture.to_string()];
                let r = run_cell(cfg, cell, fixture, &datasets[&cell.fixture.task]);
                if let Ok(ok) = &r {
                    if let Err(e) = write_atomic(&path, format_cell(&id, ok).as_bytes()) {
                        return (*cell, true, Err(e));
                    }
                }
                (*cell, true, r)
            })
            .collect()
    });

    let mut outcome = SweepOutcome::default();
    for algorithm in cfg.algorithms() {
        let mut table = ScoreTable::new();
        for p in &prepared {
            for &seed in &cfg.seeds {
                let key = Cell {
                    fixture: p.spec,
                    seed,
                    rate: 0.0,
                    algorithm,
                }
                .key();
                table.push(ScoreRecord {
                    key,
                    rate: 0.0,
                    phase: Phase::Dense,
                    score: p.dense,
                });
            }
        }
        outcome.tables.insert(algorithm.to_string(), table);
    }
    for (cell, computed, r) in results {
        let id = cell.id();
        match r {
            Ok(r) => {
                if computed {
                    outcome.computed += 1;
                } else {
                    outcome.reused += 1;
                }
                let table = outcome
                    .tables
                    .get_mut(&cell.algorithm.to_string())
                    .expect("table per algorithm");
                for rec in &r.records {
                    table.push(rec.clone());
                }
                outcome.cells.insert(id, r);
            }
            Err(e) => {
                log::error!("cell {id} failed: {e}");
                outcome.errors.push((id, e.to_string()));
            }
        }
    }
    outcome.errors.sort();

    for (name, table) in outcome.tables.iter_mut() {
        table.sort();
        write_atomic(
            &out_dir.join("scores").join(format!("{name}.csv")),
            table.to_csv().as_bytes(),
        )?;
    }
    let errors: String = outcome
        .errors
        .iter()
        .map(|(id, e)| format!("{id}\t{e}\n"))
        .collect();
    write_atomic(&out_dir.join("errors.txt"), errors.as_bytes())?;

    let meta = report::Meta::for_sweep(cfg);
    for track in Track::ALL {
        match report::build(&outcome.tables, track, &meta) {
            Ok(r) => report::write(&r, &out_dir.join("reports"))?,
            Err(e) => log::info!("{track} report skipped: {e}"),
        }
    }
    Ok(outcome)
}

/// Reads every `scores/*.csv` under a sweep directory.
pub fn load_tables(out_dir: &Path) -> Result<BTreeMap<String, ScoreTable>> {
    let dir = out_dir.join("scores");
    let mut tables = BTreeMap::new();
    let entries = fs::read_dir(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path
                .file_stem()
                .expect("file name")
                .to_string_lossy()
                .to_string();
            let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            tables.insert(name, ScoreTable::from_csv(&text)?);
        }
    }
    Ok(tables)
}
