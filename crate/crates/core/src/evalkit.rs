//! Exact match, target accuracy, per-referent breakdowns and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{Example, SplitKind};
use crate::diffcore::{Graph, ParamStore};
use crate::language::Vocabulary;
use crate::model::{Batch, Decode, ModelError, Network, Variant, Weighting};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no results for {0}")]
    EmptyCell(String),
    #[error(transparent)]
    Model(#[from] ModelError),
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

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Token-for-token equality, lengths included.
pub fn exact_match<T: PartialEq>(pred: &[T], gold: &[T]) -> bool {
    pred == gold
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate() {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

pub fn target_accuracy(scores: &[f64], target: usize) -> bool {
    !scores.is_empty() && argmax(scores) == target
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleResult {
    pub referent: String,
    pub exact_match: bool,
    /// `None` for variants without target scores.
    pub target_correct: Option<bool>,
    /// Predicted output classes (EOS included when emitted).
    pub predicted: Vec<usize>,
}

type IndexedChunk = (usize, Result<Vec<ExampleResult>, EvalError>);

/// Greedy-decodes `examples` in fixed chunks of `batch_size`; `workers`
/// threads share the chunks. Chunking does not depend on `workers`, so
/// results are identical for any worker count.
pub fn evaluate(
    net: &Network,
    store: &ParamStore,
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
    workers: usize,
) -> Result<Vec<ExampleResult>, EvalError> {
    let chunks: Vec<&[Example]> = examples.chunks(batch_size.max(1)).collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let run_chunk = |chunk: &[Example]| -> Result<Vec<ExampleResult>, EvalError> {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&refs, vocab)?;
        let mut g = Graph::new();
        let out = net.forward(&mut g, store, &batch, Decode::Greedy)?;
        let scores = out.target.map(|t| g.value(t.scores).clone());
        Ok(chunk
            .iter()
            .enumerate()
            .map(|(b, ex)| ExampleResult {
                referent: ex.referent.clone(),
                exact_match: exact_match(&out.predictions[b], &batch.gold[b]),
                target_correct: scores
                    .as_ref()
                    .map(|s| target_accuracy(s.row(b), ex.target)),
                predicted: out.predictions[b].clone(),
            })
            .collect())
    };
    let mut per_chunk: Vec<Option<Result<Vec<ExampleResult>, EvalError>>> =
        (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, c) in chunks.iter().enumerate() {
            per_chunk[i] = Some(run_chunk(c));
        }
    } else {
        let done: Vec<Vec<IndexedChunk>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run_chunk = &run_chunk;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|i| (i, run_chunk(chunks[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        for (i, r) in done.into_iter().flatten() {
            per_chunk[i] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(examples.len());
    for r in per_chunk {
        out.extend(r.expect("every chunk evaluated")?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    /// Fractions in [0, 1].
    pub exact_match: f64,
    pub target_accuracy: Option<f64>,
}

pub fn summarize(results: &[ExampleResult]) -> EvalSummary {
    let n = results.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let em = results.iter().filter(|r| r.exact_match).count();
    let ta = results
        .iter()
        .map(|r| r.target_correct)
        .collect::<Option<Vec<bool>>>();
    EvalSummary {
        n,
        exact_match: frac(em),
        target_accuracy: ta
            .filter(|v| !v.is_empty())
            .map(|v| frac(v.iter().filter(|c| **c).count())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferentRow {
    pub referent: String,
    pub count: usize,
    /// Fraction of exact matches in this class.
    pub exact_match: f64,
}

/// Per-referent exact match, classes sorted lexicographically.
pub fn breakdown_by_referent(results: &[ExampleResult]) -> Vec<ReferentRow> {
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in results {
        let e = groups.entry(&r.referent).or_default();
        e.0 += 1;
        e.1 += usize::from(r.exact_match);
    }
    groups
        .into_iter()
        .map(|(k, (n, m))| ReferentRow {
            referent: k.to_string(),
            count: n,
            exact_match: m as f64 / n as f64,
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn format_mean_std(values: &[f64]) -> Option<String> {
    mean_std(values).map(|(m, s)| format!("{m:.2} ± {s:.2}"))
}

/// One trained model evaluated on one test set; metrics in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub split: SplitKind,
    pub variant: Variant,
    pub weighting: Weighting,
    pub seed: u64,
    pub exact_match: f64,
    pub target_accuracy: Option<f64>,
}

pub const RESULTS_HEADER: &str = "split,variant,weighting,seed,exact_match,target_accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    fields
        .iter()
        .map(|f| csv_field(f))
        .collect::<Vec<_>>()
        .join(",")
        + "\n"
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(results: &[RunResult]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in results {
        s += &csv_line(&[
            r.split.letter().into(),
            r.variant.to_string(),
            r.weighting.to_string(),
            r.seed.to_string(),
            r.exact_match.to_string(),
            opt(r.target_accuracy),
        ]);
    }
    s
}

pub fn write_results_csv(path: &Path, results: &[RunResult]) -> Result<(), EvalError> {
    fs::write(path, results_csv(results)).map_err(io_err(path))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<RunResult>, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| EvalError::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        message,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => return Err(bad(0, format!("expected header {RESULTS_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i, format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i, format!("{s:?}: {e}")));
        out.push(RunResult {
            split: f[0].parse().map_err(|e| bad(i, e))?,
            variant: f[1]
                .parse()
                .map_err(|e: ModelError| bad(i, e.to_string()))?,
            weighting: f[2]
                .parse()
                .map_err(|e: ModelError| bad(i, e.to_string()))?,
            seed: f[3].parse().map_err(|e| bad(i, format!("{e}")))?,
            exact_match: num(f[4])?,
            target_accuracy: if f[5].is_empty() {
                None
            } else {
                Some(num(f[5])?)
            },
        });
    }
    Ok(out)
}

/// Aggregate over seeds for one (split, variant, weighting).
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub split: SplitKind,
    pub variant: Variant,
    pub weighting: Weighting,
    pub seeds: usize,
    pub exact_match: (f64, f64),
    pub target_accuracy: Option<(f64, f64)>,
}

impl TableRow {
    pub fn exact_match_cell(&self) -> String {
        format!("{:.2} ± {:.2}", self.exact_match.0, self.exact_match.1)
    }

    pub fn target_accuracy_cell(&self) -> String {
        self.target_accuracy
            .map(|(m, s)| format!("{m:.2} ± {s:.2}"))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<TableRow>,
}

type CellKey = (SplitKind, Variant, Weighting);

/// Groups runs by (split, variant, weighting) and aggregates over seeds.
pub fn report(results: &[RunResult]) -> Result<Report, EvalError> {
    if results.is_empty() {
        return Err(EvalError::EmptyCell("report: no runs".into()));
    }
    let mut groups: BTreeMap<CellKey, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.split, r.variant, r.weighting))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((split, variant, weighting), runs) in groups {
        let em: Vec<f64> = runs.iter().map(|r| r.exact_match).collect();
        let ta: Option<Vec<f64>> = runs.iter().map(|r| r.target_accuracy).collect();
        rows.push(TableRow {
            split,
            variant,
            weighting,
            seeds: runs.len(),
            exact_match: mean_std(&em).expect("non-empty group"),
            target_accuracy: ta.and_then(|v| mean_std(&v)),
        });
    }
    Ok(Report { rows })
}

pub const TABLE_HEADER: &str = "split,variant,weighting,seeds,exact_match_mean,exact_match_stddev,exact_match,target_accuracy_mean,target_accuracy_stddev,target_accuracy";
pub const SCATTER_HEADER: &str = "variant,weighting,split,exact_match_mean,target_accuracy_mean";

impl Report {
    fn find(&self, split: SplitKind, variant: Variant, weighting: Weighting) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.variant == variant && r.weighting == weighting)
    }

    fn splits(&self) -> Vec<SplitKind> {
        let mut s: Vec<SplitKind> = self.rows.iter().map(|r| r.split).collect();
        s.dedup();
        s
    }

    /// Aggregated rows (`table.csv`).
    pub fn table_csv(&self) -> String {
        let mut s = format!("{TABLE_HEADER}\n");
        for r in &self.rows {
            s += &csv_line(&[
                r.split.letter().into(),
                r.variant.to_string(),
                r.weighting.to_string(),
                r.seeds.to_string(),
                format!("{:.2}", r.exact_match.0),
                format!("{:.2}", r.exact_match.1),
                r.exact_match_cell(),
                r.target_accuracy
                    .map(|t| format!("{:.2}", t.0))
                    .unwrap_or_default(),
                r.target_accuracy
                    .map(|t| format!("{:.2}", t.1))
                    .unwrap_or_default(),
                r.target_accuracy_cell(),
            ]);
        }
        s
    }

    /// Mean exact match against mean target accuracy, one row per
    /// (variant, weighting, split) that has target scores (`scatter.csv`).
    pub fn scatter_csv(&self) -> String {
        let mut rows: Vec<&TableRow> = self
            .rows
            .iter()
            .filter(|r| r.target_accuracy.is_some())
            .collect();
        rows.sort_by_key(|r| (r.variant, r.weighting, r.split));
        let mut s = format!("{SCATTER_HEADER}\n");
        for r in rows {
            s += &csv_line(&[
                r.variant.to_string(),
                r.weighting.to_string(),
                r.split.letter().into(),
                format!("{:.2}", r.exact_match.0),
                format!("{:.2}", r.target_accuracy.expect("filtered").0),
            ]);
        }
        s
    }

    fn paper_table(&self, header: &[&str], cells: &[(Variant, Weighting, bool)]) -> String {
        let mut s = csv_line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
        for split in self.splits() {
            let mut fields = vec![split.label().to_string()];
            for &(v, w, target) in cells {
                fields.push(
                    self.find(split, v, w)
                        .map(|r| {
                            if target {
                                r.target_accuracy_cell()
                            } else {
                                r.exact_match_cell()
                            }
                        })
                        .unwrap_or_default(),
                );
            }
            s += &csv_line(&fields);
        }
        s
    }

    /// Exact match per split for all four variants (weighting on where it applies).
    pub fn exact_match_table(&self) -> String {
        self.paper_table(
            &[
                "Split",
                "Baseline w/o aux",
                "Baseline w/ aux",
                "Ours (world)",
                "Ours (both)",
            ],
            &[
                (Variant::BaselineNoAux, Weighting::Ablated, false),
                (Variant::BaselineAux, Weighting::Ablated, false),
                (Variant::World, Weighting::On, false),
                (Variant::Both, Weighting::On, false),
            ],
        )
    }

    /// Target prediction accuracy per split for the variants with an auxiliary loss.
    pub fn target_accuracy_table(&self) -> String {
        self.paper_table(
            &["Split", "Baseline w/ aux", "Ours (world)", "Ours (both)"],
            &[
                (Variant::BaselineAux, Weighting::Ablated, true),
                (Variant::World, Weighting::On, true),
                (Variant::Both, Weighting::On, true),
            ],
        )
    }

    /// Exact match and target accuracy of the ablated target-first variants.
    pub fn ablation_table(&self) -> String {
        self.paper_table(
            &[
                "Split",
                "Exact match: World, ablated",
                "Exact match: Both, ablated",
                "Target accuracy: World, ablated",
                "Target accuracy: Both, ablated",
            ],
            &[
                (Variant::World, Weighting::Ablated, false),
                (Variant::Both, Weighting::Ablated, false),
                (Variant::World, Weighting::Ablated, true),
                (Variant::Both, Weighting::Ablated, true),
            ],
        )
    }
}

/// Per-referent breakdown of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferentRun {
    pub variant: Variant,
    pub weighting: Weighting,
    pub seed: u64,
    pub rows: Vec<ReferentRow>,
}

/// Exact match (percent, "m ± s" over seeds) by referred target for the
/// variants with an auxiliary loss.
pub fn referent_table(runs: &[ReferentRun]) -> String {
    let columns = [
        (Variant::BaselineAux, Weighting::Ablated),
        (Variant::World, Weighting::On),
        (Variant::Both, Weighting::On),
    ];
    let mut values: BTreeMap<&str, BTreeMap<(Variant, Weighting), Vec<f64>>> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            values
                .entry(&row.referent)
                .or_default()
                .entry((run.variant, run.weighting))
                .or_default()
                .push(100.0 * row.exact_match);
        }
    }
    let mut s = csv_line(
        &[
            "Referred target",
            "Baseline w/ aux",
            "Ours (world)",
            "Ours (both)",
        ]
        .map(String::from),
    );
    for (referent, by_col) in values {
        let mut fields = vec![referent.to_string()];
        for c in &columns {
            fields.push(
                by_col
                    .get(c)
                    .and_then(|v| format_mean_std(v))
                    .unwrap_or_default(),
            );
        }
        s += &csv_line(&fields);
    }
    s
}

/// Human-readable summary of a report.
pub fn render_text(report: &Report) -> String {
    let mut s = String::new();
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<18} {:<16} {:<8} seeds={} exact_match={} target_accuracy={}",
            r.split.label(),
            r.variant,
            r.weighting,
            r.seeds,
            r.exact_match_cell(),
            if r.target_accuracy.is_some() {
                r.target_accuracy_cell()
            } else {
                "-".into()
            },
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(referent: &str, em: bool) -> ExampleResult {
        ExampleResult {
            referent: referent.into(),
            exact_match: em,
            target_correct: None,
            predicted: vec![],
        }
    }

    fn run(
        split: SplitKind,
        variant: Variant,
        weighting: Weighting,
        seed: u64,
        em: f64,
        ta: Option<f64>,
    ) -> RunResult {
        RunResult {
            split,
            variant,
            weighting,
            seed,
            exact_match: em,
            target_accuracy: ta,
        }
    }

    #[test]
    fn exact_match_cases() {
        assert!(exact_match(&[0, 1, 3], &[0, 1, 3]));
        assert!(!exact_match(&[0, 1, 0, 3], &[0, 1, 3]));
    }

    #[test]
    fn target_accuracy_cases() {
        let mut s = vec![0.0; 9];
        s[4] = 1.0;
        assert!(target_accuracy(&s, 4));
        assert!(!target_accuracy(&[0.5; 9], 3));
        assert!(target_accuracy(&[0.5; 9], 0));
    }

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(&[50.0, 50.0]).unwrap(), "50.00 ± 0.00");
        assert_eq!(format_mean_std(&[40.0, 60.0]).unwrap(), "50.00 ± 10.00");
        assert!(format_mean_std(&[]).is_none());
    }

    #[test]
    fn breakdown_single_class_and_ordering() {
        let rows = breakdown_by_referent(&[result("square", true), result("square", false)]);
        assert_eq!(
            rows,
            vec![ReferentRow {
                referent: "square".into(),
                count: 2,
                exact_match: 0.5
            }]
        );
        let rows = breakdown_by_referent(&[
            result("small yellow circle", true),
            result("small circle", false),
            result("small circle", true),
        ]);
        let names: Vec<&str> = rows.iter().map(|r| r.referent.as_str()).collect();
        assert_eq!(names, ["small circle", "small yellow circle"]);
    }

    proptest! {
        #[test]
        fn breakdown_is_a_count_weighted_partition(
            items in prop::collection::vec((0usize..5, any::<bool>()), 1..60)
        ) {
            let names = ["big red square", "circle", "small circle", "small yellow circle", "square"];
            let results: Vec<ExampleResult> = items.iter().map(|&(k, em)| result(names[k], em)).collect();
            let rows = breakdown_by_referent(&results);
            let total: usize = rows.iter().map(|r| r.count).sum();
            prop_assert_eq!(total, results.len());
            let weighted: f64 = rows.iter().map(|r| r.exact_match * r.count as f64).sum::<f64>() / total as f64;
            prop_assert!((weighted - summarize(&results).exact_match).abs() < 1e-12);
            prop_assert!(rows.windows(2).all(|w| w[0].referent < w[1].referent));
        }

        #[test]
        fn exact_match_is_an_equivalence(a in prop::collection::vec(0usize..4, 0..8), b in prop::collection::vec(0usize..4, 0..8)) {
            prop_assert!(exact_match(&a, &a));
            prop_assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
        }
    }

    #[test]
    fn report_aggregates_and_is_pure() {
        let runs = vec![
            run(
                SplitKind::Random,
                Variant::World,
                Weighting::On,
                1,
                40.0,
                Some(90.0),
            ),
            run(
                SplitKind::Random,
                Variant::World,
                Weighting::On,
                2,
                60.0,
                Some(100.0),
            ),
            run(
                SplitKind::Random,
                Variant::BaselineNoAux,
                Weighting::Ablated,
                1,
                70.0,
                None,
            ),
        ];
        let rep = report(&runs).unwrap();
        let world = rep
            .find(SplitKind::Random, Variant::World, Weighting::On)
            .unwrap();
        assert_eq!(world.exact_match_cell(), "50.00 ± 10.00");
        assert_eq!(world.target_accuracy_cell(), "95.00 ± 5.00");
        assert_eq!(rep.table_csv(), report(&runs).unwrap().table_csv());
        assert_eq!(rep.scatter_csv().lines().count(), 2);
        assert!(report(&[]).is_err());
        let t1 = rep.exact_match_table();
        assert_eq!(
            t1.lines().next().unwrap(),
            "Split,Baseline w/o aux,Baseline w/ aux,Ours (world),Ours (both)"
        );
        assert_eq!(
            t1.lines().nth(1).unwrap(),
            "A: Random,70.00 ± 0.00,,50.00 ± 10.00,"
        );
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let runs = vec![
            run(
                SplitKind::RedSquares,
                Variant::Both,
                Weighting::Ablated,
                3,
                12.5,
                Some(1.0 / 3.0),
            ),
            run(
                SplitKind::Relativity,
                Variant::BaselineNoAux,
                Weighting::Ablated,
                0,
                0.0,
                None,
            ),
        ];
        write_results_csv(&path, &runs).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), runs);
        assert!(fs::read_to_string(&path)
            .unwrap()
            .starts_with(RESULTS_HEADER));
    }

    #[test]
    fn referent_table_layout() {
        let rows = |em: f64| {
            vec![ReferentRow {
                referent: "small circle".into(),
                count: 4,
                exact_match: em,
            }]
        };
        let runs = vec![
            ReferentRun {
                variant: Variant::World,
                weighting: Weighting::On,
                seed: 0,
                rows: rows(0.4),
            },
            ReferentRun {
                variant: Variant::World,
                weighting: Weighting::On,
                seed: 1,
                rows: rows(0.6),
            },
        ];
        let t = referent_table(&runs);
        assert_eq!(t, "Referred target,Baseline w/ aux,Ours (world),Ours (both)\nsmall circle,,50.00 ± 10.00,\n");
    }
}
