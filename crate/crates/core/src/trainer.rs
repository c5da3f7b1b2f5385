//! Training: combined sequence + target loss, Adam, dev-based checkpoint
//! selection, metrics log and the hyperparameter grid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Example;
use crate::diffcore::{save_checkpoint, DiffError, Graph, ParamStore, Var};
use crate::evalkit::{evaluate, summarize, EvalError};
use crate::language::Vocabulary;
use crate::model::{Batch, Decode, Dropout, ModelConfig, ModelError, Network, OUTPUT_CLASSES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss is not finite at iteration {step}")]
    NonFinite { step: u64 },
    #[error("{0} decoder steps for gold outputs of length up to {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    NoData,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// Seeds of the independent random streams of one run.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Evaluate on dev every this many iterations (and after the last one).
    pub eval_every: u64,
    /// Evaluation batch size; does not affect results.
    pub eval_batch_size: usize,
    pub workers: usize,
}

impl TrainConfig {
    pub fn micro(seed: u64) -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed,
            eval_every: 500,
            eval_batch_size: 100,
            workers: 1,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            iterations: 200_000,
            batch_size: 200,
            learning_rate: 1e-3,
            seed,
            eval_every: 1000,
            eval_batch_size: 200,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::Config(
                "batch sizes and eval cadence must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} is not a finite non-negative number",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// JSON run settings; dropout and auxiliary-weight keys follow the names of
/// the reported hyperparameters. Missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub cnn_dropout: f64,
    pub decoder_dropout: f64,
    pub encoder_dropout: f64,
    pub aux_weight: f64,
    pub learning_rate: f64,
    pub iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            cnn_dropout: 0.0,
            decoder_dropout: 0.0,
            encoder_dropout: 0.0,
            aux_weight: 0.3,
            learning_rate: 1e-3,
            iterations: None,
            batch_size: None,
            eval_every: None,
        }
    }
}

impl Settings {
    pub fn from_json_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TrainError::Json {
            path: path.into(),
            source,
        })
    }

    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) {
        model.dropout = Dropout {
            encoder: self.encoder_dropout,
            decoder: self.decoder_dropout,
            cnn: self.cnn_dropout,
        };
        model.aux_weight = self.aux_weight;
        train.learning_rate = self.learning_rate;
        if let Some(n) = self.iterations {
            train.iterations = n;
        }
        if let Some(b) = self.batch_size {
            train.batch_size = b;
        }
        if let Some(e) = self.eval_every {
            train.eval_every = e;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub seq: Var,
    pub aux: Option<Var>,
}

/// `(1 − w)·seq + w·aux`, where `seq` is each example's mean per-token
/// cross-entropy (EOS included) averaged over the batch and `aux` is the
/// cross-entropy of the target scores against the target cell, averaged
/// over the batch. Without scores the total is the sequence loss alone.
pub fn total_loss(
    g: &mut Graph,
    logits: &[Var],
    gold: &[Vec<usize>],
    scores: Option<Var>,
    targets: &[usize],
    aux_weight: f64,
) -> Result<LossTerms, TrainError> {
    let b = gold.len();
    let steps = logits.len();
    let max_gold = gold.iter().map(Vec::len).max().unwrap_or(0);
    if steps < max_gold || b == 0 || targets.len() != b {
        return Err(TrainError::LengthMismatch(steps, max_gold));
    }
    let stacked = g.concat(logits)?;
    let flat = g.reshape(stacked, &[b * steps, OUTPUT_CLASSES])?;
    let mut tgt = Vec::with_capacity(b * steps);
    let mut wts = Vec::with_capacity(b * steps);
    for seq in gold {
        let per = 1.0 / (seq.len() as f64 * b as f64);
        for t in 0..steps {
            tgt.push(seq.get(t).copied().unwrap_or(0));
            wts.push(if t < seq.len() { per } else { 0.0 });
        }
    }
    let seq = g.cross_entropy(flat, &tgt, &wts)?;
    let Some(scores) = scores else {
        return Ok(LossTerms {
            total: seq,
            seq,
            aux: None,
        });
    };
    let aux = g.cross_entropy(scores, targets, &vec![1.0 / b as f64; b])?;
    let a = g.scale(seq, 1.0 - aux_weight)?;
    let c = g.scale(aux, aux_weight)?;
    let total = g.add(a, c)?;
    Ok(LossTerms {
        total,
        seq,
        aux: Some(aux),
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.value(id).len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in store.ids().collect::<Vec<_>>() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let (value, grad) = store.value_and_grad(id);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub seq_loss: f64,
    pub aux_loss: Option<f64>,
    pub dev_exact_match: Option<f64>,
    pub dev_target_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,seq_loss,aux_loss,dev_exact_match,dev_target_acc";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.loss,
            r.seq_loss,
            o(r.aux_loss),
            o(r.dev_exact_match),
            o(r.dev_target_acc)
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Parameters of the best dev checkpoint.
    pub best: ParamStore,
    /// Parameters after the last iteration.
    pub last: ParamStore,
    pub best_step: u64,
    pub best_dev_exact_match: f64,
    pub best_dev_target_acc: Option<f64>,
    pub metrics: Vec<MetricsRow>,
}

/// Files written by [`train`] into an output directory.
pub const BEST_DIR: &str = "best";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// Trains from a fresh initialisation. With `out_dir`, writes the best
/// checkpoint, the metrics log and both configs there.
///
/// The best checkpoint maximises dev exact match, then dev target accuracy;
/// the earliest evaluation wins remaining ties.
pub fn train(
    train_set: &[Example],
    dev_set: &[Example],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::NoData);
    }
    let (network, mut store) = Network::new(model_cfg.clone(), &mut stream(cfg.seed, INIT_STREAM))?;
    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = Some(stream(cfg.seed, DROPOUT_STREAM));
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let batch_size = cfg.batch_size.min(train_set.len());

    let mut metrics = Vec::with_capacity(cfg.iterations as usize);
    let mut best = (store.clone(), 0u64, f64::NEG_INFINITY, None::<f64>);
    for step in 1..=cfg.iterations {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let refs: Vec<&Example> = order[cursor..cursor + batch_size]
            .iter()
            .map(|&i| &train_set[i])
            .collect();
        cursor += batch_size;
        let batch = Batch::new(&refs, vocab)?;

        let mut g = Graph::training(dropout_rng.take().expect("rng returned after each step"));
        let out = network.forward(&mut g, &store, &batch, Decode::TeacherForced)?;
        let loss = total_loss(
            &mut g,
            &out.logits,
            &batch.gold,
            out.target.map(|t| t.scores),
            &batch.targets,
            model_cfg.aux_weight,
        )?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        store.zero_grad();
        g.backward_into(loss.total, &mut store)?;
        let mut row = MetricsRow {
            step,
            loss: total,
            seq_loss: g.value(loss.seq).item(),
            aux_loss: loss.aux.map(|a| g.value(a).item()),
            dev_exact_match: None,
            dev_target_acc: None,
        };
        dropout_rng = Some(g.into_rng());
        adam.step(&mut store);

        if !dev_set.is_empty() && (step % cfg.eval_every == 0 || step == cfg.iterations) {
            let results = evaluate(
                &network,
                &store,
                dev_set,
                vocab,
                cfg.eval_batch_size,
                cfg.workers,
            )?;
            let s = summarize(&results);
            row.dev_exact_match = Some(s.exact_match);
            row.dev_target_acc = s.target_accuracy;
            let key = (s.exact_match, s.target_accuracy.unwrap_or(0.0));
            if key > (best.2, best.3.unwrap_or(0.0)) {
                best = (store.clone(), step, s.exact_match, s.target_accuracy);
            }
        }
        metrics.push(row);
    }
    if dev_set.is_empty() {
        best = (store.clone(), cfg.iterations, f64::NAN, None);
    }
    let outcome = TrainOutcome {
        network,
        best: best.0,
        last: store,
        best_step: best.1,
        best_dev_exact_match: best.2,
        best_dev_target_acc: best.3,
        metrics,
    };
    if let Some(dir) = out_dir {
        write_run(dir, &outcome, model_cfg, cfg)?;
    }
    Ok(outcome)
}

fn write_run(
    dir: &Path,
    o: &TrainOutcome,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    save_checkpoint(&dir.join(BEST_DIR), &o.best, o.best_step)?;
    let p = dir.join(METRICS_FILE);
    fs::write(&p, metrics_csv(&o.metrics)).map_err(io(&p))?;
    for (name, json) in [
        (MODEL_CONFIG_FILE, serde_json::to_string_pretty(model_cfg)),
        (TRAIN_CONFIG_FILE, serde_json::to_string_pretty(cfg)),
    ] {
        let p = dir.join(name);
        let json = json.map_err(|source| TrainError::Json {
            path: p.clone(),
            source,
        })?;
        fs::write(&p, json + "\n").map_err(io(&p))?;
    }
    Ok(())
}

pub fn read_model_config(run_dir: &Path) -> Result<ModelConfig, TrainError> {
    let p = run_dir.join(MODEL_CONFIG_FILE);
    let text = fs::read_to_string(&p).map_err(|source| TrainError::Io {
        path: p.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| TrainError::Json { path: p, source })
}

/// Index of the largest value; ties go to the lowest index.
pub fn select_best(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: usize,
    pub dev_exact_match: Vec<f64>,
}

/// Trains one model per setting and picks the best dev exact match.
pub fn hyper_grid(
    settings: &[Settings],
    train_set: &[Example],
    dev_set: &[Example],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<GridOutcome, TrainError> {
    if settings.is_empty() {
        return Err(TrainError::Config("empty hyperparameter grid".into()));
    }
    let mut scores = Vec::with_capacity(settings.len());
    for s in settings {
        if model_cfg.variant.has_aux() && !(0.3..=0.7).contains(&s.aux_weight) {
            return Err(TrainError::Config(format!(
                "grid aux_weight {} outside [0.3, 0.7]",
                s.aux_weight
            )));
        }
        let (mut m, mut t) = (model_cfg.clone(), train_cfg.clone());
        s.apply(&mut m, &mut t);
        scores.push(train(train_set, dev_set, vocab, &m, &t, None)?.best_dev_exact_match);
    }
    Ok(GridOutcome {
        best: select_best(&scores).expect("non-empty"),
        dev_exact_match: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_split, DataConfig, SplitKind, SplitSizes};
    use crate::diffcore::Tensor;
    use crate::model::{Variant, Weighting};
    use rand::Rng;

    fn tiny_config(variant: Variant, weighting: Weighting) -> ModelConfig {
        let mut c = ModelConfig::micro(4, Vocabulary::commands().len(), variant, weighting);
        c.embedding_dim = 4;
        c.encoder_hidden = 6;
        c.decoder_hidden = 6;
        c.c_out = 3;
        c
    }

    fn tiny_data() -> crate::dataset::GeneratedSplit {
        let cfg = DataConfig {
            d: 4,
            min_objects: 2,
            max_objects: 5,
            sizes: SplitSizes {
                n_train: 64,
                n_dev: 16,
                n_test: 16,
            },
        };
        generate_split(SplitKind::Random, &cfg, 3, 1).unwrap()
    }

    fn tiny_train(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 5,
            eval_every: 10,
            eval_batch_size: 16,
            workers: 1,
        }
    }

    /// Independent log-softmax cross-entropy of one row.
    fn ce(row: &[f64], target: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - row[target]
    }

    fn random_logits(
        g: &mut Graph,
        rng: &mut ChaCha8Rng,
        b: usize,
        steps: usize,
        c: usize,
    ) -> Vec<Var> {
        (0..steps)
            .map(|_| {
                g.constant(
                    Tensor::new(
                        [b, c],
                        (0..b * c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    )
                    .unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_weight_is_sequence_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let logits = random_logits(&mut g, &mut rng, 2, 3, OUTPUT_CLASSES);
        let scores =
            g.constant(Tensor::new([2, 4], vec![0.1, 0.5, -0.3, 2.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let gold = vec![vec![0, 3], vec![1, 2, 3]];
        let l = total_loss(&mut g, &logits, &gold, Some(scores), &[1, 2], 0.0).unwrap();
        assert_eq!(g.value(l.total).item(), g.value(l.seq).item());
        let none = total_loss(&mut g, &logits, &gold, None, &[1, 2], 0.7).unwrap();
        assert_eq!(g.value(none.total).item(), g.value(l.seq).item());
    }

    #[test]
    fn perfect_logits_give_zero_loss() {
        let mut g = Graph::new();
        let gold = vec![vec![2, 3]];
        let onehot = |c: usize| {
            let mut v = vec![-1e4; OUTPUT_CLASSES];
            v[c] = 1e4;
            v
        };
        let logits: Vec<Var> = gold[0]
            .iter()
            .map(|&c| g.constant(Tensor::new([1, 4], onehot(c)).unwrap()))
            .collect();
        let mut s = vec![-1e4; 16];
        s[7] = 1e4;
        let scores = g.constant(Tensor::new([1, 16], s).unwrap());
        let l = total_loss(&mut g, &logits, &gold, Some(scores), &[7], 0.5).unwrap();
        assert_eq!(g.value(l.total).item(), 0.0);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let (b, steps) = (3, 4);
        let logits = random_logits(&mut g, &mut rng, b, steps, OUTPUT_CLASSES);
        let scores = random_logits(&mut g, &mut rng, b, 1, 9)[0];
        let gold = vec![vec![0, 1, 3], vec![3], vec![2, 2, 0, 3]];
        let targets = [4, 0, 8];
        let l = total_loss(&mut g, &logits, &gold, Some(scores), &targets, 0.5).unwrap();
        let mut seq = 0.0;
        for (bi, gs) in gold.iter().enumerate() {
            let per: f64 = gs
                .iter()
                .enumerate()
                .map(|(t, &c)| ce(g.value(logits[t]).row(bi), c))
                .sum();
            seq += per / gs.len() as f64;
        }
        seq /= b as f64;
        let aux: f64 = targets
            .iter()
            .enumerate()
            .map(|(bi, &t)| ce(g.value(scores).row(bi), t))
            .sum::<f64>()
            / b as f64;
        assert!((g.value(l.total).item() - (0.5 * seq + 0.5 * aux)).abs() < 1e-6);
    }

    #[test]
    fn too_few_steps_is_an_error() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_logits(&mut g, &mut rng, 1, 2, OUTPUT_CLASSES);
        assert!(matches!(
            total_loss(&mut g, &logits, &[vec![0, 0, 3]], None, &[0], 0.3),
            Err(TrainError::LengthMismatch(2, 3))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps
            .insert("x", Tensor::from_vec(vec![1.0, -2.0, 0.5]))
            .unwrap();
        ps.grad_mut(id).copy_from_slice(&[0.3, -4.0, 0.0]);
        let mut adam = Adam::new(&ps, 0.1);
        adam.step(&mut ps);
        let v = ps.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6 && v[2] == 0.5);
    }

    #[test]
    fn same_seed_is_bit_identical_and_lr_zero_is_frozen() {
        let data = tiny_data();
        let vocab = Vocabulary::commands();
        let cfg = tiny_config(Variant::World, Weighting::On);
        let a = train(&data.train, &data.dev, &vocab, &cfg, &tiny_train(12), None).unwrap();
        let b = train(&data.train, &data.dev, &vocab, &cfg, &tiny_train(12), None).unwrap();
        for id in a.last.ids() {
            let bits = |s: &ParamStore| {
                s.value(id)
                    .data()
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(&a.last), bits(&b.last));
        }
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));

        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..tiny_train(5)
        };
        let z = train(&data.train, &data.dev, &vocab, &cfg, &frozen, None).unwrap();
        let (_, init) = Network::new(cfg.clone(), &mut stream(frozen.seed, INIT_STREAM)).unwrap();
        for id in init.ids() {
            assert_eq!(z.last.value(id), init.value(id));
        }
    }

    #[test]
    fn metrics_log_and_checkpoint_are_written() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Variant::BaselineAux, Weighting::Ablated);
        let o = train(
            &data.train,
            &data.dev,
            &Vocabulary::commands(),
            &cfg,
            &tiny_train(20),
            Some(dir.path()),
        )
        .unwrap();
        let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 21);
        assert!(lines[10].split(',').nth(4).is_some_and(|f| !f.is_empty()));
        assert!(o.metrics.iter().all(|r| r.loss.is_finite()));
        let (loaded, manifest) =
            crate::diffcore::load_checkpoint(&dir.path().join(BEST_DIR)).unwrap();
        assert_eq!(manifest.global_step, o.best_step);
        assert_eq!(read_model_config(dir.path()).unwrap(), cfg);
        let net = Network::for_store(cfg, &loaded).unwrap();
        let r1 = evaluate(&net, &loaded, &data.dev, &Vocabulary::commands(), 7, 1).unwrap();
        let r2 = evaluate(
            &o.network,
            &o.best,
            &data.dev,
            &Vocabulary::commands(),
            16,
            3,
        )
        .unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn settings_json_uses_reported_key_names() {
        let s: Settings =
            serde_json::from_str(r#"{"encoder_dropout": 0.3, "aux_weight": 0.3}"#).unwrap();
        assert_eq!(s.encoder_dropout, 0.3);
        assert_eq!(s.cnn_dropout, 0.0);
        assert!(serde_json::from_str::<Settings>(r#"{"dropout": 0.1}"#).is_err());
        let mut m = tiny_config(Variant::World, Weighting::On);
        let mut t = tiny_train(1);
        s.apply(&mut m, &mut t);
        assert_eq!(m.dropout.encoder, 0.3);
        assert_eq!(m.aux_weight, 0.3);
    }

    #[test]
    fn select_best_prefers_lower_index_on_ties() {
        assert_eq!(select_best(&[0.2, 0.7, 0.7]), Some(1));
        assert_eq!(select_best(&[0.5]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn grid_prefers_the_trained_setting() {
        let data = tiny_data();
        let cfg = tiny_config(Variant::World, Weighting::On);
        let frozen = Settings {
            learning_rate: 0.0,
            ..Settings::default()
        };
        let trained = Settings {
            learning_rate: 1e-2,
            ..Settings::default()
        };
        let o = hyper_grid(
            &[frozen, trained],
            &data.train,
            &data.dev,
            &Vocabulary::commands(),
            &cfg,
            &tiny_train(60),
        )
        .unwrap();
        assert!(o.dev_exact_match[1] >= o.dev_exact_match[0]);
        let bad = Settings {
            aux_weight: 0.9,
            ..Settings::default()
        };
        assert!(hyper_grid(
            &[bad],
            &data.train,
            &data.dev,
            &Vocabulary::commands(),
            &cfg,
            &tiny_train(1)
        )
        .is_err());
    }
}
