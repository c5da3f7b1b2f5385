//! Split generation (A random, B yellow squares, C red squares, E relativity),
//! JSONL persistence and an independent constraint validator.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{
    sample_world, Color, GeneratorConfig, ObjectSpec, Shape, WorldError, WorldState,
};
use crate::language::{
    self, referent_class, resolve_referent, Command, LanguageError, SizeWord, Vocabulary,
};
use crate::model::Profile;
use crate::planner::{plan, Action};

/// Attempts per stall-detection window and the minimum accepted in it (0.1%).
const STALL_WINDOW: usize = 10_000;
const STALL_MIN_ACCEPTED: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("requested an empty {0} set")]
    EmptyRequest(Phase),
    #[error(
        "generation stalled for split {kind} ({phase}): {accepted} of {attempts} worlds accepted"
    )]
    Stalled {
        kind: SplitKind,
        phase: Phase,
        accepted: usize,
        attempts: usize,
    },
    #[error("object range {min}..={max} is invalid for a {d}x{d} grid")]
    BadObjectRange { min: usize, max: usize, d: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Language(#[from] LanguageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "A")]
    Random,
    #[serde(rename = "B")]
    YellowSquares,
    #[serde(rename = "C")]
    RedSquares,
    #[serde(rename = "E")]
    Relativity,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Random,
        SplitKind::YellowSquares,
        SplitKind::RedSquares,
        SplitKind::Relativity,
    ];

    pub fn letter(self) -> &'static str {
        match self {
            SplitKind::Random => "A",
            SplitKind::YellowSquares => "B",
            SplitKind::RedSquares => "C",
            SplitKind::Relativity => "E",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            SplitKind::Random => "A: Random",
            SplitKind::YellowSquares => "B: Yellow squares",
            SplitKind::RedSquares => "C: Red squares",
            SplitKind::Relativity => "E: Relativity",
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A" | "RANDOM" => Ok(SplitKind::Random),
            "B" | "YELLOW_SQUARES" => Ok(SplitKind::YellowSquares),
            "C" | "RED_SQUARES" => Ok(SplitKind::RedSquares),
            "E" | "RELATIVITY" => Ok(SplitKind::Relativity),
            _ => Err(format!("unknown split {s:?} (expected A, B, C or E)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Dev,
    Test,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Train, Phase::Dev, Phase::Test];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Dev => "dev",
            Phase::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn is_yellow_square(o: &ObjectSpec) -> bool {
    o.shape == Shape::Square && o.color == Color::Yellow
}

fn is_red_square(o: &ObjectSpec) -> bool {
    o.shape == Shape::Square && o.color == Color::Red
}

fn is_size2_circle(o: &ObjectSpec) -> bool {
    o.shape == Shape::Circle && o.size == 2
}

/// Which (command, referent) pairs a split admits in a given phase.
/// Dev always follows the training distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConstraints {
    pub kind: SplitKind,
    pub phase: Phase,
}

impl SplitConstraints {
    pub fn new(kind: SplitKind, phase: Phase) -> Self {
        Self { kind, phase }
    }

    pub fn admits(&self, cmd: &Command, target: &ObjectSpec, world: &WorldState) -> bool {
        let test = self.phase == Phase::Test;
        match self.kind {
            SplitKind::Random => true,
            SplitKind::YellowSquares => {
                let named = cmd.color_word == Some(Color::Yellow);
                if test {
                    is_yellow_square(target) && named
                } else {
                    !(is_yellow_square(target) && cmd.color_word.is_some())
                }
            }
            SplitKind::RedSquares => is_red_square(target) == test,
            SplitKind::Relativity => {
                let small = cmd.size_word == Some(SizeWord::Small);
                if test {
                    let larger = world
                        .objects()
                        .any(|(_, o)| o.shape == Shape::Circle && o.size > 2);
                    is_size2_circle(target) && small && larger
                } else {
                    !(is_size2_circle(target) && small)
                }
            }
        }
    }
}

/// One dataset record, serialized as a single JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub command: Vec<String>,
    pub world: WorldState,
    /// Flattened row-major target cell index.
    pub target: usize,
    pub actions: Vec<Action>,
    pub referent: String,
}

impl Example {
    pub fn from_command(cmd: &Command, world: WorldState) -> Result<Self, LanguageError> {
        let cell = resolve_referent(cmd, &world)?;
        Ok(Self {
            command: cmd.words().into_iter().map(String::from).collect(),
            target: world.flat_index(cell),
            actions: plan(&world, cell),
            referent: referent_class(cmd),
            world,
        })
    }

    pub fn parsed_command(&self) -> Result<Command, LanguageError> {
        Command::parse(&self.command)
    }

    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>, LanguageError> {
        self.command.iter().map(|w| vocab.index(w)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl SplitSizes {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.n_train,
            Phase::Dev => self.n_dev,
            Phase::Test => self.n_test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    pub d: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sizes: SplitSizes,
}

impl DataConfig {
    pub fn micro() -> Self {
        Self {
            d: 4,
            min_objects: 2,
            max_objects: 6,
            sizes: SplitSizes {
                n_train: 3000,
                n_dev: 500,
                n_test: 1000,
            },
        }
    }

    pub fn full() -> Self {
        Self {
            d: 6,
            min_objects: 2,
            max_objects: 10,
            sizes: SplitSizes {
                n_train: 20_000,
                n_dev: 500,
                n_test: 2000,
            },
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Micro => Self::micro(),
            Profile::Full => Self::full(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSplit {
    pub kind: SplitKind,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl GeneratedSplit {
    pub fn phase(&self, phase: Phase) -> &[Example] {
        match phase {
            Phase::Train => &self.train,
            Phase::Dev => &self.dev,
            Phase::Test => &self.test,
        }
    }
}

/// Rejection-samples `n` examples for one phase. Worlds are drawn until one
/// admits a command under the phase constraints.
fn generate_phase(
    rng: &mut ChaCha8Rng,
    cfg: &DataConfig,
    constraints: SplitConstraints,
    n: usize,
) -> Result<Vec<Example>, DatasetError> {
    let mut out = Vec::with_capacity(n);
    let (mut attempts, mut accepted_in_window) = (0usize, 0usize);
    while out.len() < n {
        attempts += 1;
        let gen = GeneratorConfig {
            d: cfg.d,
            num_objects: rng.gen_range(cfg.min_objects..=cfg.max_objects),
        };
        let world = sample_world(rng, &gen)?;
        match language::sample_command(rng, &world, &constraints) {
            Ok((cmd, _)) => {
                out.push(Example::from_command(&cmd, world)?);
                accepted_in_window += 1;
            }
            Err(LanguageError::Unsatisfiable) => {}
            Err(e) => return Err(e.into()),
        }
        if attempts % STALL_WINDOW == 0 {
            if accepted_in_window < STALL_MIN_ACCEPTED {
                return Err(DatasetError::Stalled {
                    kind: constraints.kind,
                    phase: constraints.phase,
                    accepted: accepted_in_window,
                    attempts: STALL_WINDOW,
                });
            }
            accepted_in_window = 0;
        }
    }
    Ok(out)
}

/// Stream for one (phase, worker) shard: base seed plus worker index, with
/// the phase selecting an independent ChaCha stream.
pub fn shard_rng(seed: u64, phase: Phase, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(worker as u64));
    rng.set_stream(phase as u64);
    rng
}

fn shard_sizes(n: usize, workers: usize) -> Vec<usize> {
    (0..workers)
        .map(|w| n / workers + usize::from(w < n % workers))
        .collect()
}

/// Generates all three phases. Output depends only on `(kind, cfg, seed, workers)`;
/// shards are concatenated in worker order.
pub fn generate_split(
    kind: SplitKind,
    cfg: &DataConfig,
    seed: u64,
    workers: usize,
) -> Result<GeneratedSplit, DatasetError> {
    if cfg.min_objects == 0
        || cfg.min_objects > cfg.max_objects
        || cfg.max_objects + 1 > cfg.d * cfg.d
    {
        return Err(DatasetError::BadObjectRange {
            min: cfg.min_objects,
            max: cfg.max_objects,
            d: cfg.d,
        });
    }
    for phase in Phase::ALL {
        if cfg.sizes.get(phase) == 0 {
            return Err(DatasetError::EmptyRequest(phase));
        }
    }
    let workers = workers.max(1);
    let mut phases = Vec::with_capacity(3);
    for phase in Phase::ALL {
        let constraints = SplitConstraints::new(kind, phase);
        let shards = shard_sizes(cfg.sizes.get(phase), workers);
        let results: Vec<Result<Vec<Example>, DatasetError>> = if workers == 1 {
            vec![generate_phase(
                &mut shard_rng(seed, phase, 0),
                cfg,
                constraints,
                shards[0],
            )]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = shards
                    .iter()
                    .enumerate()
                    .map(|(w, &n)| {
                        s.spawn(move || {
                            generate_phase(&mut shard_rng(seed, phase, w), cfg, constraints, n)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("generator thread panicked"))
                    .collect()
            })
        };
        let mut all = Vec::with_capacity(cfg.sizes.get(phase));
        for r in results {
            all.extend(r?);
        }
        phases.push(all);
    }
    let test = phases.pop().expect("three phases");
    let dev = phases.pop().expect("three phases");
    let train = phases.pop().expect("three phases");
    Ok(GeneratedSplit {
        kind,
        train,
        dev,
        test,
    })
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).expect("examples serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitMeta {
    pub split: SplitKind,
    pub seed: u64,
    pub workers: usize,
    pub config: DataConfig,
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl`, `vocab.json` and `meta.json`.
pub fn write_split(
    dir: &Path,
    split: &GeneratedSplit,
    meta: &SplitMeta,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for phase in Phase::ALL {
        write_jsonl(&dir.join(phase.file_name()), split.phase(phase))?;
    }
    let vocab_path = dir.join("vocab.json");
    fs::write(&vocab_path, Vocabulary::commands().to_json()).map_err(io_err(&vocab_path))?;
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_path, meta_json + "\n").map_err(io_err(&meta_path))
}

pub fn read_meta(dir: &Path) -> Result<SplitMeta, DatasetError> {
    let path = dir.join("meta.json");
    let s = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&s).map_err(|e| DatasetError::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_phase(dir: &Path, phase: Phase) -> Result<Vec<Example>, DatasetError> {
    read_jsonl(&dir.join(phase.file_name()))
}

// ---------------------------------------------------------------------------
// Validation. Deliberately re-derives every rule from the stored record
// instead of calling `SplitConstraints::admits`.

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    pub records: usize,
    pub violations: Vec<Violation>,
    pub parse_errors: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl PhaseReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.parse_errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub split: SplitKind,
    pub phases: Vec<(Phase, PhaseReport)>,
}

impl ValidationReport {
    pub fn total_violations(&self) -> usize {
        self.phases
            .iter()
            .map(|(_, r)| r.violations.len() + r.parse_errors.len())
            .sum()
    }

    pub fn total_records(&self) -> usize {
        self.phases.iter().map(|(_, r)| r.records).sum()
    }
}

/// Returns the first problem with `ex` as a member of `(kind, phase)`, if any.
pub fn check_example(ex: &Example, kind: SplitKind, phase: Phase) -> Option<String> {
    let cmd = match ex.parsed_command() {
        Ok(c) => c,
        Err(e) => return Some(format!("command does not parse: {e}")),
    };
    let world = &ex.world;
    let agent = world.agent();
    if world.object_at((agent.row, agent.col)).is_some() {
        return Some("agent starts on an object".into());
    }
    if ex.referent != referent_class(&cmd) {
        return Some(format!("referent {:?} does not match command", ex.referent));
    }
    let cell = match resolve_referent(&cmd, world) {
        Ok(c) => c,
        Err(e) => return Some(format!("referent does not resolve: {e}")),
    };
    if world.flat_index(cell) != ex.target {
        return Some(format!(
            "target {} but command resolves to {}",
            ex.target,
            world.flat_index(cell)
        ));
    }
    if plan(world, cell) != ex.actions {
        return Some("actions differ from the canonical plan".into());
    }
    let obj = world
        .object_at(cell)
        .expect("resolved cell holds an object");
    let words: Vec<&str> = ex.command.iter().map(String::as_str).collect();
    let has = |w: &str| words.contains(&w);
    let yellow_square = obj.shape == Shape::Square && obj.color == Color::Yellow;
    let red_square = obj.shape == Shape::Square && obj.color == Color::Red;
    let size2_circle = obj.shape == Shape::Circle && obj.size == 2;
    let named_color = Color::ALL.iter().any(|c| has(c.word()));
    let test = phase == Phase::Test;
    match (kind, test) {
        (SplitKind::Random, _) => None,
        (SplitKind::YellowSquares, false) if yellow_square && named_color => {
            Some("yellow square target referred to with a color word".into())
        }
        (SplitKind::YellowSquares, true) if !(yellow_square && has("yellow")) => {
            Some("test target is not a yellow square named \"yellow\"".into())
        }
        (SplitKind::RedSquares, false) if red_square => {
            Some("red square target in training data".into())
        }
        (SplitKind::RedSquares, true) if !red_square => {
            Some("test target is not a red square".into())
        }
        (SplitKind::Relativity, false) if size2_circle && has("small") => {
            Some("size-2 circle referred to as \"small\" in training data".into())
        }
        (SplitKind::Relativity, true) => {
            let larger = world
                .objects()
                .any(|(_, o)| o.shape == Shape::Circle && o.size > 2);
            (!(size2_circle && has("small") && larger)).then(|| {
                "test target is not a \"small\" size-2 circle with a larger circle present".into()
            })
        }
        _ => None,
    }
}

pub fn validate_file(
    path: &Path,
    kind: SplitKind,
    phase: Phase,
) -> Result<PhaseReport, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut report = PhaseReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Example>(&line) {
            Ok(ex) => {
                report.records += 1;
                if let Some(message) = check_example(&ex, kind, phase) {
                    report.violations.push(Violation {
                        line: i + 1,
                        message,
                    });
                }
            }
            Err(e) => report.parse_errors.push(Violation {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if report.records == 0 && report.parse_errors.is_empty() {
        report
            .warnings
            .push(format!("{} contains no records", path.display()));
    }
    Ok(report)
}

/// Validates whichever of `train/dev/test.jsonl` exist under `dir`.
pub fn validate_split(dir: &Path, kind: SplitKind) -> Result<ValidationReport, DatasetError> {
    let mut phases = Vec::new();
    for phase in Phase::ALL {
        let path = dir.join(phase.file_name());
        if path.exists() {
            phases.push((phase, validate_file(&path, kind, phase)?));
        }
    }
    Ok(ValidationReport {
        split: kind,
        phases,
    })
}
