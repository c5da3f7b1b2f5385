//! End-to-end runs: generate a split, train one arm, evaluate on test, and
//! collect the comparison tables over variants, splits and seeds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{
    generate_split, write_split, DataConfig, DatasetError, Example, GeneratedSplit, SplitKind,
    SplitMeta, SplitSizes,
};
use crate::diffcore::{grad_check, DiffError, GradCheckReport, Graph, ParamStore};
use crate::evalkit::{
    breakdown_by_referent, evaluate, referent_table, render_text, report, summarize,
    write_results_csv, EvalError, EvalSummary, ReferentRun, Report, RunResult,
};
use crate::language::Vocabulary;
use crate::model::{Batch, Decode, ModelConfig, ModelError, Network, Profile, Variant, Weighting};
use crate::trainer::{
    metrics_csv, total_loss, train, Settings, TrainConfig, TrainError, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("experiment config: {0}")]
    Config(String),
}

/// The four model variants at their default weighting.
pub const DEFAULT_ARMS: [(Variant, Weighting); 4] = [
    (Variant::BaselineNoAux, Weighting::Ablated),
    (Variant::BaselineAux, Weighting::Ablated),
    (Variant::World, Weighting::On),
    (Variant::Both, Weighting::On),
];

/// Variants evaluated with the reweighting switched off.
pub const ABLATION_ARMS: [(Variant, Weighting); 2] = [
    (Variant::World, Weighting::Ablated),
    (Variant::Both, Weighting::Ablated),
];

#[derive(Debug, Clone)]
pub struct ArmSpec {
    pub variant: Variant,
    pub weighting: Weighting,
    pub profile: Profile,
    pub seed: u64,
    pub settings: Settings,
    pub workers: usize,
}

impl ArmSpec {
    pub fn new(variant: Variant, weighting: Weighting, profile: Profile, seed: u64) -> Self {
        Self {
            variant,
            weighting,
            profile,
            seed,
            settings: Settings::default(),
            workers: 1,
        }
    }

    pub fn configs(
        &self,
        vocab: &Vocabulary,
        d: usize,
    ) -> Result<(ModelConfig, TrainConfig), ExperimentError> {
        let mut model =
            ModelConfig::for_profile(self.profile, d, vocab.len(), self.variant, self.weighting);
        let mut tc = match self.profile {
            Profile::Micro => TrainConfig::micro(self.seed),
            Profile::Full => TrainConfig::full(self.seed),
        };
        self.settings.apply(&mut model, &mut tc);
        tc.workers = self.workers.max(1);
        model.validate()?;
        Ok((model, tc))
    }
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub training: TrainOutcome,
    pub dev: EvalSummary,
    pub test: EvalSummary,
    pub result: RunResult,
    pub referents: ReferentRun,
}

/// Trains one arm on `data` and evaluates its best checkpoint on dev and test.
pub fn run_arm(
    data: &GeneratedSplit,
    arm: &ArmSpec,
    out_dir: Option<&Path>,
) -> Result<ArmOutcome, ExperimentError> {
    let vocab = Vocabulary::commands();
    let d = data
        .train
        .first()
        .map(|e| e.world.d())
        .ok_or_else(|| ExperimentError::Config("empty training set".into()))?;
    let (model, tc) = arm.configs(&vocab, d)?;
    let training = train(&data.train, &data.dev, &vocab, &model, &tc, out_dir)?;
    let dev = summarize(&evaluate(
        &training.network,
        &training.best,
        &data.dev,
        &vocab,
        tc.eval_batch_size,
        tc.workers,
    )?);
    let test_results = evaluate(
        &training.network,
        &training.best,
        &data.test,
        &vocab,
        tc.eval_batch_size,
        tc.workers,
    )?;
    let test = summarize(&test_results);
    let result = RunResult {
        split: data.kind,
        variant: arm.variant,
        weighting: arm.weighting,
        seed: arm.seed,
        exact_match: 100.0 * test.exact_match,
        target_accuracy: test.target_accuracy.map(|t| 100.0 * t),
    };
    let referents = ReferentRun {
        variant: arm.variant,
        weighting: arm.weighting,
        seed: arm.seed,
        rows: breakdown_by_referent(&test_results),
    };
    Ok(ArmOutcome {
        training,
        dev,
        test,
        result,
        referents,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub splits: Vec<SplitKind>,
    pub seeds: Vec<u64>,
    pub arms: Vec<(Variant, Weighting)>,
    /// Overrides applied to every arm.
    pub settings: Settings,
    pub workers: usize,
    /// Replaces the profile's data sizes when set.
    pub data: Option<DataConfig>,
}

impl ExperimentConfig {
    /// All four variants on splits A, B, C and E with seeds 0, 1, 2.
    pub fn micro() -> Self {
        Self {
            profile: Profile::Micro,
            splits: SplitKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            arms: DEFAULT_ARMS.to_vec(),
            settings: Settings::default(),
            workers: 1,
            data: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub referents: Vec<(SplitKind, ReferentRun)>,
    pub report: Report,
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn run_dir_name(arm: &ArmSpec) -> String {
    format!("{}_{}/seed{}", arm.variant, arm.weighting, arm.seed)
}

/// Runs every (split, seed, arm) combination. The dataset for a (split, seed)
/// pair is generated with that seed and shared by all arms.
///
/// Layout under `out`:
/// `data/<split>/seed<k>/`, `runs/<split>/<variant>_<weighting>/seed<k>/`,
/// `results.csv`, `table.csv`, `scatter.csv`, `table1.csv`, `table_a1.csv`,
/// `table_a2_<split>.csv`, `table_a3.csv` and `report.txt`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    mut progress: impl FnMut(&RunResult),
) -> Result<ExperimentOutcome, ExperimentError> {
    if cfg.splits.is_empty() || cfg.seeds.is_empty() || cfg.arms.is_empty() {
        return Err(ExperimentError::Config(
            "splits, seeds and arms must be non-empty".into(),
        ));
    }
    let data_cfg = cfg
        .data
        .unwrap_or_else(|| DataConfig::for_profile(cfg.profile));
    let mut results = Vec::new();
    let mut referents = Vec::new();
    for &split in &cfg.splits {
        for &seed in &cfg.seeds {
            let data = generate_split(split, &data_cfg, seed, cfg.workers.max(1))?;
            let meta = SplitMeta {
                split,
                seed,
                workers: cfg.workers.max(1),
                config: data_cfg,
            };
            write_split(
                &out.join("data")
                    .join(split.letter())
                    .join(format!("seed{seed}")),
                &data,
                &meta,
            )?;
            for &(variant, weighting) in &cfg.arms {
                let arm = ArmSpec {
                    variant,
                    weighting,
                    profile: cfg.profile,
                    seed,
                    settings: cfg.settings.clone(),
                    workers: cfg.workers,
                };
                let dir = out
                    .join("runs")
                    .join(split.letter())
                    .join(run_dir_name(&arm));
                let o = run_arm(&data, &arm, Some(&dir))?;
                progress(&o.result);
                results.push(o.result);
                referents.push((split, o.referents));
            }
        }
    }
    let report = write_tables(out, &results, &referents)?;
    Ok(ExperimentOutcome {
        results,
        referents,
        report,
    })
}

/// Writes the results CSV and every derived table into `out`.
pub fn write_tables(
    out: &Path,
    results: &[RunResult],
    referents: &[(SplitKind, ReferentRun)],
) -> Result<Report, ExperimentError> {
    fs::create_dir_all(out).map_err(|source| ExperimentError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_results_csv(&out.join("results.csv"), results)?;
    let rep = report(results)?;
    write(&out.join("table.csv"), &rep.table_csv())?;
    write(&out.join("scatter.csv"), &rep.scatter_csv())?;
    write(&out.join("table1.csv"), &rep.exact_match_table())?;
    write(&out.join("table_a1.csv"), &rep.target_accuracy_table())?;
    write(&out.join("table_a3.csv"), &rep.ablation_table())?;
    let mut splits: Vec<SplitKind> = referents.iter().map(|(s, _)| *s).collect();
    splits.dedup();
    for split in splits {
        let runs: Vec<ReferentRun> = referents
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, r)| r.clone())
            .collect();
        write(
            &out.join(format!("table_a2_{}.csv", split.letter())),
            &referent_table(&runs),
        )?;
    }
    write(&out.join("report.txt"), &render_text(&rep))?;
    Ok(rep)
}

/// Loss log of one arm, as written by the trainer.
pub fn arm_metrics_csv(o: &ArmOutcome) -> String {
    metrics_csv(&o.training.metrics)
}

/// Finite-difference check of the training loss of one micro-profile model
/// on a small batch of split-A examples. Parameters (biases included) are
/// moved to a random point first so no ReLU input sits exactly at its kink.
pub fn model_grad_check(
    variant: Variant,
    weighting: Weighting,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ExperimentError> {
    let vocab = Vocabulary::commands();
    let sizes = SplitSizes {
        n_train: 3,
        n_dev: 1,
        n_test: 1,
    };
    let data = generate_split(
        SplitKind::Random,
        &DataConfig {
            sizes,
            ..DataConfig::micro()
        },
        seed,
        1,
    )?;
    let refs: Vec<&Example> = data.train.iter().collect();
    let batch = Batch::new(&refs, &vocab)?;
    let cfg = ModelConfig::micro(data.train[0].world.d(), vocab.len(), variant, weighting);
    let aux_weight = cfg.aux_weight;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, mut store) = Network::new(cfg, &mut rng)?;
    for id in store.ids().collect::<Vec<_>>() {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let build = |g: &mut Graph, s: &ParamStore| {
        let as_diff = |e: &dyn std::fmt::Display| DiffError::Invalid(e.to_string());
        let out = net
            .forward(g, s, &batch, Decode::TeacherForced)
            .map_err(|e| as_diff(&e))?;
        let scores = out.target.map(|t| t.scores);
        let loss = total_loss(
            g,
            &out.logits,
            &batch.gold,
            scores,
            &batch.targets,
            aux_weight,
        )
        .map_err(|e| as_diff(&e))?;
        Ok(loss.total)
    };
    Ok(grad_check(&mut store, build, eps, samples, &mut rng)?)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[1.0, f64::NAN]), None);
    }

    #[test]
    fn full_micro_model_gradients_agree_with_finite_differences() {
        for variant in [Variant::World, Variant::Both] {
            let r = model_grad_check(variant, Weighting::On, 1e-5, 60, 3).unwrap();
            assert!(r.coordinates >= 50);
            assert!(r.max_rel_error < 1e-3, "{variant}: {r:?}");
        }
    }

    #[test]
    fn baseline_arms_reject_reweighting() {
        let arm = ArmSpec::new(Variant::BaselineAux, Weighting::On, Profile::Micro, 0);
        assert!(matches!(
            arm.configs(&Vocabulary::commands(), 4),
            Err(ExperimentError::Model(_))
        ));
    }

    #[test]
    fn tiny_experiment_writes_every_table() {
        let dir = tempfile::tempdir().unwrap();
        let settings = Settings {
            iterations: Some(4),
            eval_every: Some(2),
            ..Settings::default()
        };
        let cfg = ExperimentConfig {
            profile: Profile::Micro,
            splits: vec![SplitKind::RedSquares],
            seeds: vec![0, 1],
            arms: DEFAULT_ARMS.to_vec(),
            settings,
            workers: 1,
            data: Some(DataConfig {
                d: 4,
                min_objects: 2,
                max_objects: 4,
                sizes: SplitSizes {
                    n_train: 40,
                    n_dev: 10,
                    n_test: 10,
                },
            }),
        };
        let mut seen = 0;
        let o = run_experiment(&cfg, dir.path(), |_| seen += 1).unwrap();
        assert_eq!(seen, 8);
        assert_eq!(o.results.len(), 8);
        for f in [
            "results.csv",
            "table.csv",
            "scatter.csv",
            "table1.csv",
            "table_a1.csv",
            "table_a2_C.csv",
            "table_a3.csv",
            "report.txt",
        ] {
            assert!(dir.path().join(f).is_file(), "{f} missing");
        }
        assert!(dir
            .path()
            .join("runs/C/world_on/seed1/best/params.bin")
            .is_file());
        assert!(dir.path().join("data/C/seed0/train.jsonl").is_file());
        let ta_rows = o
            .results
            .iter()
            .filter(|r| r.target_accuracy.is_some())
            .count();
        assert_eq!(ta_rows, 6);
    }
}
