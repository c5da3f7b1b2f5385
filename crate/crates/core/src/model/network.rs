use rand::Rng;

use crate::diffcore::{
    linear, lstm_cell, DiffError, Graph, Init, LstmParams, LstmState, LstmVars, ParamId,
    ParamStore, Tensor, Var,
};
use crate::gridworld::CELL_CHANNELS;

use super::attention::{additive_attention, dot_attention};
use super::batch::{Batch, DECODER_INPUTS, EOS_CLASS, OUTPUT_CLASSES, START_INPUT};
use super::config::{ModelConfig, Variant, Weighting};
use super::ModelError;

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
struct Lin<T> {
    w: T,
    b: T,
}

impl Lin<ParamId> {
    fn create<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            w: store.create(
                &format!("{name}.w"),
                &[input, output],
                Init::Uniform { fan_in: input },
                rng,
            )?,
            b: store.create(&format!("{name}.b"), &[output], Init::Zeros, rng)?,
        })
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Lin<Var> {
        Lin {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
        }
    }
}

impl Lin<Var> {
    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        linear(g, x, self.w, self.b)
    }
}

/// Parameters used only by the target-first heads.
#[derive(Debug, Clone, Copy)]
struct TargetHeadIds {
    cell_query: Lin<ParamId>,
    /// Present for `both`: pooled world features to a command query, and the
    /// attended command states down to the summary width.
    command_query: Option<Lin<ParamId>>,
    command_proj: Option<Lin<ParamId>>,
    aux: Lin<ParamId>,
}

#[derive(Debug, Clone)]
struct Ids {
    command_embedding: ParamId,
    encoder_fwd: LstmParams,
    encoder_bwd: LstmParams,
    summary: Lin<ParamId>,
    convs: [Lin<ParamId>; 3],
    head: Option<TargetHeadIds>,
    decoder_init: Lin<ParamId>,
    action_embedding: ParamId,
    command_key: ParamId,
    command_attn_query: Lin<ParamId>,
    command_score: ParamId,
    world_key: ParamId,
    world_attn_query: Lin<ParamId>,
    world_score: ParamId,
    decoder: LstmParams,
    output: Lin<ParamId>,
}

/// Parameters bound into one graph.
pub struct BoundParams {
    command_embedding: Var,
    encoder_fwd: LstmVars,
    encoder_bwd: LstmVars,
    summary: Lin<Var>,
    convs: [Lin<Var>; 3],
    cell_query: Option<Lin<Var>>,
    command_query: Option<Lin<Var>>,
    command_proj: Option<Lin<Var>>,
    aux: Option<Lin<Var>>,
    decoder_init: Lin<Var>,
    action_embedding: Var,
    command_key: Var,
    command_attn_query: Lin<Var>,
    command_score: Var,
    world_key: Var,
    world_attn_query: Lin<Var>,
    world_score: Var,
    decoder: LstmVars,
    output: Lin<Var>,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct EncodedInputs {
    /// `[B, n, 2·h_e]` per-token biLSTM states.
    pub command_states: Var,
    /// `[B, h_e]` projected final forward/backward states.
    pub command_summary: Var,
    /// `[B, d², 3·c_out]` per-cell features, row-major over cells.
    pub world_features: Var,
    /// `[B, n]` additive mask hiding padding tokens.
    pub command_mask: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TargetScores {
    /// `[B, d²]`
    pub scores: Var,
    pub log_probs: Var,
    /// `[B, d²·3·c_out + h_e]` input of the final layer (target-first heads only).
    pub aux_input: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decode {
    TeacherForced,
    Greedy,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: EncodedInputs,
    /// `[B, 4]` logits per decoder step.
    pub logits: Vec<Var>,
    /// `[B, d²]` decoder world-attention weights per step.
    pub world_attention: Vec<Var>,
    /// `[B, n]` decoder command-attention weights per step.
    pub command_attention: Vec<Var>,
    /// `active[t][b]`: step `t` is part of example `b`'s output.
    pub active: Vec<Vec<bool>>,
    pub target: Option<TargetScores>,
    /// Greedy decode only: predicted classes per example up to and
    /// including the first EOS, or up to the step cap.
    pub predictions: Vec<Vec<usize>>,
}

/// Keys shared by all decoder steps.
struct DecoderMemory {
    command_states: Var,
    command_keys: Var,
    command_mask: Var,
    world: Var,
    world_keys: Var,
}

pub struct StepOutput {
    pub logits: Var,
    pub state: LstmState,
    pub command_attention: Var,
    pub world_attention: Var,
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    ids: Ids,
}

/// Greedy-decode step cap for a gold output of `gold_len` classes.
pub fn step_cap(gold_len: usize) -> usize {
    2 * gold_len + 5
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<(Self, ParamStore), ModelError> {
        config.validate()?;
        let c = &config;
        let (e, he, hd, feat) = (
            c.embedding_dim,
            c.encoder_hidden,
            c.decoder_hidden,
            c.cell_features(),
        );
        let mut s = ParamStore::new();
        let command_embedding = s.create(
            "encoder.embedding",
            &[c.command_vocab, e],
            Init::Uniform { fan_in: e },
            rng,
        )?;
        let encoder_fwd = LstmParams::create(&mut s, "encoder.fwd", e, he, rng)?;
        let encoder_bwd = LstmParams::create(&mut s, "encoder.bwd", e, he, rng)?;
        let summary = Lin::create(&mut s, "encoder.summary", 2 * he, he, rng)?;
        let mut conv =
            |i: usize, k: usize, s: &mut ParamStore| -> Result<Lin<ParamId>, DiffError> {
                let fan_in = k * k * CELL_CHANNELS;
                Ok(Lin {
                    w: s.create(
                        &format!("world.conv{i}_k{k}.w"),
                        &[fan_in, c.c_out],
                        Init::Uniform { fan_in },
                        rng,
                    )?,
                    b: s.create(
                        &format!("world.conv{i}_k{k}.b"),
                        &[c.c_out],
                        Init::Zeros,
                        rng,
                    )?,
                })
            };
        let [k0, k1, k2] = c.kernel_sizes;
        let convs = [
            conv(0, k0, &mut s)?,
            conv(1, k1, &mut s)?,
            conv(2, k2, &mut s)?,
        ];
        let head = if c.variant.predicts_first() {
            let both = c.variant == Variant::Both;
            let command_query = if both {
                Some(Lin::create(
                    &mut s,
                    "target.command_query",
                    feat,
                    2 * he,
                    rng,
                )?)
            } else {
                None
            };
            let command_proj = if both {
                Some(Lin::create(&mut s, "target.command_proj", 2 * he, he, rng)?)
            } else {
                None
            };
            Some(TargetHeadIds {
                cell_query: Lin::create(&mut s, "target.cell_query", he, feat, rng)?,
                command_query,
                command_proj,
                aux: Lin::create(&mut s, "target.aux", c.aux_input_len(), c.cells(), rng)?,
            })
        } else {
            None
        };
        let decoder_init = Lin::create(&mut s, "decoder.init", he + feat, hd, rng)?;
        let action_embedding = s.create(
            "decoder.embedding",
            &[DECODER_INPUTS, e],
            Init::Uniform { fan_in: e },
            rng,
        )?;
        let command_key = s.create(
            "decoder.command_key",
            &[2 * he, hd],
            Init::Uniform { fan_in: 2 * he },
            rng,
        )?;
        let command_attn_query = Lin::create(&mut s, "decoder.command_query", hd, hd, rng)?;
        let command_score = s.create(
            "decoder.command_score",
            &[hd, 1],
            Init::Uniform { fan_in: hd },
            rng,
        )?;
        let world_key = s.create(
            "decoder.world_key",
            &[feat, hd],
            Init::Uniform { fan_in: feat },
            rng,
        )?;
        let world_attn_query = Lin::create(&mut s, "decoder.world_query", 2 * he + hd, hd, rng)?;
        let world_score = s.create(
            "decoder.world_score",
            &[hd, 1],
            Init::Uniform { fan_in: hd },
            rng,
        )?;
        let decoder = LstmParams::create(&mut s, "decoder.lstm", e + 2 * he + feat, hd, rng)?;
        let output = Lin::create(
            &mut s,
            "decoder.output",
            hd + 2 * he + feat,
            OUTPUT_CLASSES,
            rng,
        )?;
        let ids = Ids {
            command_embedding,
            encoder_fwd,
            encoder_bwd,
            summary,
            convs,
            head,
            decoder_init,
            action_embedding,
            command_key,
            command_attn_query,
            command_score,
            world_key,
            world_attn_query,
            world_score,
            decoder,
            output,
        };
        Ok((Self { config, ids }, s))
    }

    /// Rebuilds the layout for `config` and checks that `store` (e.g. a
    /// loaded checkpoint) has the same names and shapes in the same order.
    pub fn for_store(config: ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let (net, fresh) = Self::new(config, &mut rng)?;
        if fresh.len() != store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, config expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for id in fresh.ids() {
            if fresh.name(id) != store.name(id)
                || fresh.value(id).shape() != store.value(id).shape()
            {
                return Err(ModelError::Config(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    store.name(id),
                    store.value(id).shape(),
                    fresh.name(id),
                    fresh.value(id).shape()
                )));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Weight and bias of the final target-prediction layer, if the variant has one.
    pub fn aux_params(&self) -> Option<(ParamId, ParamId)> {
        self.ids.head.map(|h| (h.aux.w, h.aux.b))
    }

    pub fn bind(&self, g: &mut Graph, s: &ParamStore) -> BoundParams {
        let i = &self.ids;
        let head = i.head.as_ref();
        BoundParams {
            command_embedding: g.param(s, i.command_embedding),
            encoder_fwd: i.encoder_fwd.bind(g, s),
            encoder_bwd: i.encoder_bwd.bind(g, s),
            summary: i.summary.bind(g, s),
            convs: [
                i.convs[0].bind(g, s),
                i.convs[1].bind(g, s),
                i.convs[2].bind(g, s),
            ],
            cell_query: head.map(|h| h.cell_query.bind(g, s)),
            command_query: head.and_then(|h| h.command_query).map(|l| l.bind(g, s)),
            command_proj: head.and_then(|h| h.command_proj).map(|l| l.bind(g, s)),
            aux: head.map(|h| h.aux.bind(g, s)),
            decoder_init: i.decoder_init.bind(g, s),
            action_embedding: g.param(s, i.action_embedding),
            command_key: g.param(s, i.command_key),
            command_attn_query: i.command_attn_query.bind(g, s),
            command_score: g.param(s, i.command_score),
            world_key: g.param(s, i.world_key),
            world_attn_query: i.world_attn_query.bind(g, s),
            world_score: g.param(s, i.world_score),
            decoder: i.decoder.bind(g, s),
            output: i.output.bind(g, s),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.d != self.config.d {
            return Err(ModelError::Batch(format!(
                "batch grid size {} but model d = {}",
                batch.d, self.config.d
            )));
        }
        let vocab = self.config.command_vocab;
        if let Some(&bad) = batch.tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(ModelError::Batch(format!(
                "token index {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    fn lstm_pass(
        &self,
        g: &mut Graph,
        cell: &LstmVars,
        inputs: &[Var],
        batch: &Batch,
        reverse: bool,
    ) -> Result<(Vec<Var>, LstmState), DiffError> {
        let (b, h) = (batch.size, cell.hidden);
        let zero = g.constant(Tensor::zeros([b, h]));
        let mut state = LstmState { h: zero, c: zero };
        let mut outs = vec![zero; inputs.len()];
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for t in order {
            let next = lstm_cell(g, cell, inputs[t], state)?;
            state = if batch.command_lengths.iter().all(|&l| t < l) {
                next
            } else {
                // Padding steps leave the state unchanged.
                let mask: Vec<f64> = batch
                    .command_lengths
                    .iter()
                    .flat_map(|&l| std::iter::repeat_n(f64::from(u8::from(t < l)), h))
                    .collect();
                let m = g.constant(Tensor::new([b, h], mask)?);
                let mut blend = |new: Var, old: Var| -> Result<Var, DiffError> {
                    let delta = g.sub(new, old)?;
                    let delta = g.mul(delta, m)?;
                    g.add(old, delta)
                };
                LstmState {
                    h: blend(next.h, state.h)?,
                    c: blend(next.c, state.c)?,
                }
            };
            outs[t] = state.h;
        }
        Ok((outs, state))
    }

    fn encode_command(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
    ) -> Result<(Var, Var, Var), DiffError> {
        let (b, n, he) = (batch.size, batch.command_len(), self.config.encoder_hidden);
        let mut inputs = Vec::with_capacity(n);
        for column in &batch.tokens {
            let x = g.embedding(p.command_embedding, column)?;
            inputs.push(g.dropout(x, self.config.dropout.encoder)?);
        }
        let (fwd, fwd_last) = self.lstm_pass(g, &p.encoder_fwd, &inputs, batch, false)?;
        let (bwd, _) = self.lstm_pass(g, &p.encoder_bwd, &inputs, batch, true)?;
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            rows.push(g.concat(&[fwd[t], bwd[t]])?);
        }
        let states = g.concat(&rows)?;
        let states = g.reshape(states, &[b, n, 2 * he])?;
        let ends = g.concat(&[fwd_last.h, bwd[0]])?;
        let summary = p.summary.apply(g, ends)?;
        let mask: Vec<f64> = batch
            .command_lengths
            .iter()
            .flat_map(|&l| (0..n).map(move |t| if t < l { 0.0 } else { MASKED }))
            .collect();
        let mask = g.constant(Tensor::new([b, n], mask)?);
        Ok((states, summary, mask))
    }

    fn encode_state(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
    ) -> Result<Var, DiffError> {
        let (b, d) = (batch.size, batch.d);
        let grid = g.constant(Tensor::new([b, d, d, CELL_CHANNELS], batch.grids.clone())?);
        let mut maps = Vec::with_capacity(3);
        for (conv, &k) in p.convs.iter().zip(&self.config.kernel_sizes) {
            let y = g.conv2d_same(grid, conv.w, k)?;
            let y = g.add_bias(y, conv.b)?;
            maps.push(g.relu(y));
        }
        let features = g.concat(&maps)?;
        let features = g.reshape(features, &[b, d * d, self.config.cell_features()])?;
        g.dropout(features, self.config.dropout.cnn)
    }

    /// Runs both encoders.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<EncodedInputs, ModelError> {
        self.check_batch(batch)?;
        let p = self.bind(g, store);
        Ok(self.encode_bound(g, &p, batch)?)
    }

    pub fn encode_bound(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &Batch,
    ) -> Result<EncodedInputs, DiffError> {
        let (command_states, command_summary, command_mask) = self.encode_command(g, p, batch)?;
        let world_features = self.encode_state(g, p, batch)?;
        Ok(EncodedInputs {
            command_states,
            command_summary,
            world_features,
            command_mask,
        })
    }

    /// Scores cells from world features attended by `query[B, h_e]`,
    /// keeping every weighted cell row.
    pub fn score_cells(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        world: Var,
        query: Var,
    ) -> Result<TargetScores, DiffError> {
        let (cell_query, aux) = match (p.cell_query, p.aux) {
            (Some(q), Some(a)) => (q, a),
            _ => {
                return Err(DiffError::invalid(format!(
                    "variant {} has no target head",
                    self.config.variant
                )))
            }
        };
        let b = g.shape(world)[0];
        let q = cell_query.apply(g, query)?;
        let (weights, _) = dot_attention(g, q, world, None)?;
        let weighted = g.scale_rows(weights, world)?;
        let flat = g.reshape(
            weighted,
            &[b, self.config.cells() * self.config.cell_features()],
        )?;
        let v = g.concat(&[flat, query])?;
        let scores = aux.apply(g, v)?;
        let log_probs = g.log_softmax(scores, 1)?;
        Ok(TargetScores {
            scores,
            log_probs,
            aux_input: Some(v),
        })
    }

    pub fn predict_target_world(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        enc: &EncodedInputs,
    ) -> Result<TargetScores, DiffError> {
        self.score_cells(g, p, enc.world_features, enc.command_summary)
    }

    pub fn predict_target_both(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        enc: &EncodedInputs,
    ) -> Result<TargetScores, DiffError> {
        let (Some(cq), Some(cp)) = (p.command_query, p.command_proj) else {
            return Err(DiffError::invalid("variant has no command-attention head"));
        };
        let pooled = g.mean_axis1(enc.world_features)?;
        let q = cq.apply(g, pooled)?;
        let (_, attended) = dot_attention(g, q, enc.command_states, Some(enc.command_mask))?;
        let command = cp.apply(g, attended)?;
        self.score_cells(g, p, enc.world_features, command)
    }

    /// Per-cell decoder attention summed over each example's active steps.
    pub fn predict_target_baseline_aux(
        g: &mut Graph,
        world_attention: &[Var],
        active: &[Vec<bool>],
    ) -> Result<TargetScores, ModelError> {
        let first = *world_attention.first().ok_or(ModelError::NotDecoded)?;
        let shape = g.shape(first).to_vec();
        let cells = shape[1];
        let mut terms = Vec::with_capacity(world_attention.len());
        for (&w, flags) in world_attention.iter().zip(active) {
            if flags.iter().all(|&a| a) {
                terms.push(w);
            } else {
                let mask: Vec<f64> = flags
                    .iter()
                    .flat_map(|&a| std::iter::repeat_n(f64::from(u8::from(a)), cells))
                    .collect();
                let m = g.constant(Tensor::new(shape.clone(), mask)?);
                terms.push(g.mul(w, m)?);
            }
        }
        let scores = g.sum(&terms)?;
        let log_probs = g.log_softmax(scores, 1)?;
        Ok(TargetScores {
            scores,
            log_probs,
            aux_input: None,
        })
    }

    /// Scales row `i` of every example's world features by `log_probs[i]`.
    pub fn weight_world_encodings(
        g: &mut Graph,
        world: Var,
        log_probs: Var,
    ) -> Result<Var, DiffError> {
        g.scale_rows(log_probs, world)
    }

    fn decoder_memory(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        enc: &EncodedInputs,
        world: Var,
    ) -> Result<DecoderMemory, DiffError> {
        Ok(DecoderMemory {
            command_states: enc.command_states,
            command_keys: g.matmul(enc.command_states, p.command_key)?,
            command_mask: enc.command_mask,
            world,
            world_keys: g.matmul(world, p.world_key)?,
        })
    }

    fn decode_step(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        mem: &DecoderMemory,
        inputs: &[usize],
        state: LstmState,
    ) -> Result<StepOutput, DiffError> {
        let e = g.embedding(p.action_embedding, inputs)?;
        let e = g.dropout(e, self.config.dropout.decoder)?;
        let cq = p.command_attn_query.apply(g, state.h)?;
        let (command_attention, command_ctx) = additive_attention(
            g,
            mem.command_keys,
            cq,
            p.command_score,
            mem.command_states,
            Some(mem.command_mask),
        )?;
        let wq_in = g.concat(&[command_ctx, state.h])?;
        let wq = p.world_attn_query.apply(g, wq_in)?;
        let (world_attention, world_ctx) =
            additive_attention(g, mem.world_keys, wq, p.world_score, mem.world, None)?;
        let x = g.concat(&[e, command_ctx, world_ctx])?;
        let next = lstm_cell(g, &p.decoder, x, state)?;
        let out = g.concat(&[next.h, command_ctx, world_ctx])?;
        let out = g.dropout(out, self.config.dropout.decoder)?;
        let logits = p.output.apply(g, out)?;
        Ok(StepOutput {
            logits,
            state: next,
            command_attention,
            world_attention,
        })
    }

    /// Encodes, predicts the target where the variant does so up front,
    /// then decodes with teacher forcing or greedily.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        decode: Decode,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_batch(batch)?;
        let p = self.bind(g, store);
        let enc = self.encode_bound(g, &p, batch)?;
        let mut target = match self.config.variant {
            Variant::World => Some(self.predict_target_world(g, &p, &enc)?),
            Variant::Both => Some(self.predict_target_both(g, &p, &enc)?),
            Variant::BaselineAux | Variant::BaselineNoAux => None,
        };
        let world = match (&target, self.config.weighting) {
            (Some(t), Weighting::On) => {
                Self::weight_world_encodings(g, enc.world_features, t.log_probs)?
            }
            _ => enc.world_features,
        };
        let mem = self.decoder_memory(g, &p, &enc, world)?;

        let pooled = g.mean_axis1(enc.world_features)?;
        let init_in = g.concat(&[enc.command_summary, pooled])?;
        let h0 = p.decoder_init.apply(g, init_in)?;
        let c0 = g.constant(Tensor::zeros([batch.size, self.config.decoder_hidden]));
        let mut state = LstmState { h: h0, c: c0 };

        let caps: Vec<usize> = batch.gold.iter().map(|gold| step_cap(gold.len())).collect();
        let steps = match decode {
            Decode::TeacherForced => batch.max_gold_len(),
            Decode::Greedy => caps.iter().copied().max().unwrap_or(0),
        };
        let mut inputs = vec![START_INPUT; batch.size];
        let mut finished = vec![false; batch.size];
        let mut out = ForwardOutput {
            encoded: enc,
            logits: Vec::with_capacity(steps),
            world_attention: Vec::with_capacity(steps),
            command_attention: Vec::with_capacity(steps),
            active: Vec::with_capacity(steps),
            target: None,
            predictions: vec![
                Vec::new();
                if decode == Decode::Greedy {
                    batch.size
                } else {
                    0
                }
            ],
        };
        for t in 0..steps {
            let active: Vec<bool> = match decode {
                Decode::TeacherForced => batch.gold.iter().map(|gold| t < gold.len()).collect(),
                Decode::Greedy => (0..batch.size)
                    .map(|b| !finished[b] && t < caps[b])
                    .collect(),
            };
            if !active.iter().any(|&a| a) {
                break;
            }
            let step = self.decode_step(g, &p, &mem, &inputs, state)?;
            state = step.state;
            match decode {
                Decode::TeacherForced => {
                    for (b, gold) in batch.gold.iter().enumerate() {
                        // EOS is never fed back; padding steps reuse the start symbol.
                        inputs[b] = gold
                            .get(t)
                            .copied()
                            .filter(|&c| c != EOS_CLASS)
                            .unwrap_or(START_INPUT);
                    }
                }
                Decode::Greedy => {
                    let logits = g.value(step.logits);
                    for b in 0..batch.size {
                        let class = argmax(logits.row(b));
                        if active[b] {
                            out.predictions[b].push(class);
                            finished[b] |= class == EOS_CLASS;
                        }
                        inputs[b] = if class == EOS_CLASS {
                            START_INPUT
                        } else {
                            class
                        };
                    }
                }
            }
            out.logits.push(step.logits);
            out.world_attention.push(step.world_attention);
            out.command_attention.push(step.command_attention);
            out.active.push(active);
        }
        if self.config.variant == Variant::BaselineAux {
            target = Some(Self::predict_target_baseline_aux(
                g,
                &out.world_attention,
                &out.active,
            )?);
        }
        out.target = target;
        Ok(out)
    }
}
