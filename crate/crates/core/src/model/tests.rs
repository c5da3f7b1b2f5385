use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{Example, Phase, SplitConstraints, SplitKind};
use crate::diffcore::{grad_check, Graph, ParamStore, Tensor, Var};
use crate::gridworld::{
    sample_world, AgentPose, Color, GeneratorConfig, Heading, ObjectSpec, Shape, WorldState,
};
use crate::language::{sample_command, Command, Vocabulary};

fn examples(n: usize, d: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let constraints = SplitConstraints::new(SplitKind::Random, Phase::Train);
    let mut out = Vec::new();
    while out.len() < n {
        let k = rng.gen_range(2..=(d * d / 2).min(6));
        let world = sample_world(&mut rng, &GeneratorConfig { d, num_objects: k }).unwrap();
        if let Ok((cmd, _)) = sample_command(&mut rng, &world, &constraints) {
            out.push(Example::from_command(&cmd, world).unwrap());
        }
    }
    out
}

fn batch(exs: &[Example]) -> Batch {
    Batch::new(&exs.iter().collect::<Vec<_>>(), &Vocabulary::commands()).unwrap()
}

fn config(d: usize, variant: Variant, weighting: Weighting) -> ModelConfig {
    let mut c = ModelConfig::micro(d, Vocabulary::commands().len(), variant, weighting);
    c.embedding_dim = 4;
    c.encoder_hidden = 5;
    c.decoder_hidden = 6;
    c.c_out = 3;
    c
}

fn network(cfg: ModelConfig, seed: u64) -> (Network, ParamStore) {
    Network::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Moves every parameter (biases included) to a generic point.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

fn logits_of(net: &Network, store: &ParamStore, b: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let out = net
        .forward(&mut g, store, b, Decode::TeacherForced)
        .unwrap();
    out.logits
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect()
}

fn row_sums(g: &Graph, v: Var) -> Vec<f64> {
    let t = g.value(v);
    (0..t.rows()).map(|r| t.row(r).iter().sum()).collect()
}

fn simple_world(d: usize, objects: &[((usize, usize), ObjectSpec)]) -> WorldState {
    let agent = AgentPose {
        row: d - 1,
        col: d - 1,
        heading: Heading::East,
    };
    WorldState::with_objects(d, agent, objects.iter().copied()).unwrap()
}

fn one_token_batch(world: WorldState) -> Batch {
    let ex = Example {
        command: vec!["circle".into()],
        target: 0,
        actions: vec![],
        referent: "circle".into(),
        world,
    };
    batch(&[ex])
}

#[test]
fn single_token_command_has_one_row() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 1);
    let world = simple_world(
        4,
        &[(
            (0, 0),
            ObjectSpec::new(Shape::Circle, Color::Red, 2).unwrap(),
        )],
    );
    let b = one_token_batch(world);
    let mut g = Graph::new();
    let enc = net.encode(&mut g, &store, &b).unwrap();
    assert_eq!(g.shape(enc.command_states), &[1, 1, 10]);
    assert_eq!(g.shape(enc.command_summary), &[1, 5]);
}

#[test]
fn encoding_is_deterministic_without_dropout() {
    let (net, store) = network(config(4, Variant::Both, Weighting::On), 2);
    let b = batch(&examples(3, 4, 5));
    let run = || {
        let mut g = Graph::new();
        let enc = net.encode(&mut g, &store, &b).unwrap();
        (
            g.value(enc.command_states).clone(),
            g.value(enc.world_features).clone(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn swapping_middle_tokens_changes_their_rows() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 3);
    let vocab = Vocabulary::commands();
    let make = |words: &[&str]| Example {
        command: words.iter().map(|w| w.to_string()).collect(),
        target: 0,
        actions: vec![],
        referent: String::new(),
        world: simple_world(4, &[]),
    };
    let a = make(&["walk", "to", "the", "red", "small", "circle"]);
    let b = make(&["walk", "to", "the", "small", "red", "circle"]);
    let rows = |ex: &Example| {
        let mut g = Graph::new();
        let bt = Batch::new(&[ex], &vocab).unwrap();
        let enc = net.encode(&mut g, &store, &bt).unwrap();
        g.value(enc.command_states)
            .data()
            .chunks(10)
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>()
    };
    let (ra, rb) = (rows(&a), rows(&b));
    assert_ne!(ra[3], rb[3]);
    assert_ne!(ra[4], rb[4]);
}

#[test]
fn padding_does_not_change_encodings() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 4);
    let exs = examples(6, 4, 9);
    let vocab = Vocabulary::commands();
    let mut g = Graph::new();
    let all = net.encode(&mut g, &store, &batch(&exs)).unwrap();
    let n_all = g.shape(all.command_states)[1];
    for (i, ex) in exs.iter().enumerate() {
        let mut g1 = Graph::new();
        let one = net
            .encode(&mut g1, &store, &Batch::new(&[ex], &vocab).unwrap())
            .unwrap();
        let len = ex.command.len();
        let single = g1.value(one.command_states).data();
        let batched = &g.value(all.command_states).data()[i * n_all * 10..(i * n_all + len) * 10];
        for (x, y) in single.iter().zip(batched) {
            assert!((x - y).abs() < 1e-12);
        }
        let s1 = g1.value(one.command_summary).data();
        let sb = g.value(all.command_summary).row(i);
        for (x, y) in s1.iter().zip(sb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn world_features_shape_full_size() {
    let mut cfg = ModelConfig::full(
        6,
        Vocabulary::commands().len(),
        Variant::World,
        Weighting::On,
    );
    cfg.encoder_hidden = 4;
    cfg.decoder_hidden = 4;
    let (net, store) = network(cfg, 5);
    let world = simple_world(
        6,
        &[(
            (2, 3),
            ObjectSpec::new(Shape::Square, Color::Blue, 3).unwrap(),
        )],
    );
    let mut g = Graph::new();
    let enc = net.encode(&mut g, &store, &one_token_batch(world)).unwrap();
    assert_eq!(g.shape(enc.world_features), &[1, 36, 150]);
}

#[test]
fn empty_grid_with_zero_biases_gives_zero_features() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 6);
    let mut b = one_token_batch(simple_world(4, &[]));
    b.grids.fill(0.0);
    let mut g = Graph::new();
    let enc = net.encode(&mut g, &store, &b).unwrap();
    assert!(g.value(enc.world_features).data().iter().all(|v| *v == 0.0));
}

#[test]
fn translating_an_object_permutes_pointwise_features() {
    let mut cfg = config(4, Variant::World, Weighting::On);
    cfg.kernel_sizes = [1, 1, 1];
    let (net, store) = network(cfg, 7);
    let obj = ObjectSpec::new(Shape::Cylinder, Color::Green, 4).unwrap();
    let feats = |cell| {
        let mut b = one_token_batch(simple_world(4, &[(cell, obj)]));
        // Drop the agent so the object is the only content.
        b.grids.chunks_mut(16).for_each(|c| c[11..].fill(0.0));
        let mut g = Graph::new();
        let enc = net.encode(&mut g, &store, &b).unwrap();
        g.value(enc.world_features)
            .data()
            .chunks(9)
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>()
    };
    let (a, b) = (feats((1, 1)), feats((1, 2)));
    for (r, row) in a.iter().enumerate() {
        let moved = if r == 5 {
            6
        } else if r == 6 {
            5
        } else {
            r
        };
        assert_eq!(*row, b[moved], "row {r}");
    }
    assert_ne!(a[5], a[6]);
}

#[test]
fn world_head_vector_and_scores() {
    for (d, c_out, h_e) in [(6, 50, 100), (4, 3, 5), (5, 7, 2)] {
        let mut cfg = config(d, Variant::World, Weighting::On);
        cfg.c_out = c_out;
        cfg.encoder_hidden = h_e;
        let (net, store) = network(cfg, 8);
        let b = batch(&examples(2, d, 3));
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, &store, &b, Decode::TeacherForced)
            .unwrap();
        let t = out.target.unwrap();
        assert_eq!(g.shape(t.aux_input.unwrap()), &[2, d * d * 3 * c_out + h_e]);
        assert_eq!(g.shape(t.scores), &[2, d * d]);
        for s in row_sums(&g, t.log_probs).iter().zip(0..) {
            let lp = g.value(t.log_probs).row(s.1);
            assert!(lp.iter().all(|v| *v <= 0.0));
            assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_world_features_reduce_to_summary_response() {
    let (net, mut store) = network(config(4, Variant::World, Weighting::On), 9);
    randomize(&mut store, 1);
    let b = batch(&examples(1, 4, 1));
    let mut g = Graph::new();
    let p = net.bind(&mut g, &store);
    let enc = net.encode_bound(&mut g, &p, &b).unwrap();
    let zeros = g.constant(Tensor::zeros([1, 16, 9]));
    let t = net
        .score_cells(&mut g, &p, zeros, enc.command_summary)
        .unwrap();
    let (w, bias) = net.aux_params().unwrap();
    let (w, bias) = (store.value(w), store.value(bias));
    let summary = g.value(enc.command_summary).data();
    let offset = 16 * 9;
    for j in 0..16 {
        let want: f64 = bias.data()[j]
            + summary
                .iter()
                .enumerate()
                .map(|(i, s)| s * w.data()[(offset + i) * 16 + j])
                .sum::<f64>();
        assert!((g.value(t.scores).data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn both_head_single_token_uses_that_token() {
    let (net, mut store) = network(config(4, Variant::Both, Weighting::On), 10);
    randomize(&mut store, 2);
    let world = simple_world(
        4,
        &[(
            (0, 1),
            ObjectSpec::new(Shape::Circle, Color::Red, 1).unwrap(),
        )],
    );
    let b = one_token_batch(world);
    let mut g = Graph::new();
    let p = net.bind(&mut g, &store);
    let enc = net.encode_bound(&mut g, &p, &b).unwrap();
    let t = net.predict_target_both(&mut g, &p, &enc).unwrap();
    assert_eq!(g.shape(t.scores), &[1, 16]);
    // h̃_c is the last h_e entries of the aux input; with one token it must
    // equal the projection of that token's state.
    let cp_w = store.value(store.id("target.command_proj.w").unwrap());
    let cp_b = store.value(store.id("target.command_proj.b").unwrap());
    let state = g.value(enc.command_states).data();
    let v = g.value(t.aux_input.unwrap()).data();
    let tail = &v[v.len() - 5..];
    for (j, got) in tail.iter().enumerate() {
        let want = cp_b.data()[j]
            + (0..10)
                .map(|i| state[i] * cp_w.data()[i * 5 + j])
                .sum::<f64>();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn both_head_length_independent_of_command() {
    let (net, store) = network(config(5, Variant::Both, Weighting::On), 11);
    for ex in examples(5, 5, 4) {
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, &store, &batch(&[ex]), Decode::TeacherForced)
            .unwrap();
        assert_eq!(g.shape(out.target.unwrap().scores), &[1, 25]);
    }
}

#[test]
fn baseline_aux_scores_from_attention() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::full([1, 4], 0.25));
    let t = Network::predict_target_baseline_aux(&mut g, &[uniform], &[vec![true]]).unwrap();
    for v in g.value(t.log_probs).data() {
        assert!((v - 0.25f64.ln()).abs() < 1e-12);
    }
    let a = g.constant(Tensor::new([1, 3], vec![0.2, 0.3, 0.5]).unwrap());
    let b = g.constant(Tensor::new([1, 3], vec![0.6, 0.1, 0.3]).unwrap());
    let t =
        Network::predict_target_baseline_aux(&mut g, &[a, b], &[vec![true], vec![true]]).unwrap();
    assert!((g.value(t.scores).data().iter().sum::<f64>() - 2.0).abs() < 1e-12);
    let spike = |j: usize, g: &mut Graph| {
        let mut w = vec![0.05; 5];
        w[j] = 0.8;
        g.constant(Tensor::new([1, 5], w).unwrap())
    };
    let steps = [spike(3, &mut g), spike(3, &mut g), spike(3, &mut g)];
    let t = Network::predict_target_baseline_aux(&mut g, &steps, &vec![vec![true]; 3]).unwrap();
    let lp = g.value(t.log_probs).data();
    assert!(lp.iter().all(|v| *v <= lp[3]) && lp.iter().filter(|v| **v == lp[3]).count() == 1);
    assert!(matches!(
        Network::predict_target_baseline_aux(&mut g, &[], &[]),
        Err(ModelError::NotDecoded)
    ));
}

#[test]
fn inactive_steps_do_not_count() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new([2, 2], vec![0.9, 0.1, 0.5, 0.5]).unwrap());
    let b = g.constant(Tensor::new([2, 2], vec![0.2, 0.8, 0.7, 0.3]).unwrap());
    let t = Network::predict_target_baseline_aux(
        &mut g,
        &[a, b],
        &[vec![true, true], vec![false, true]],
    )
    .unwrap();
    assert_eq!(g.value(t.scores).data(), &[0.9, 0.1, 1.2, 0.8]);
}

#[test]
fn uniform_log_probs_scale_rows_by_log_inverse_cells() {
    let mut g = Graph::new();
    let world = g.constant(Tensor::new([1, 4, 2], (1..=8).map(f64::from).collect()).unwrap());
    let lp = g.constant(Tensor::full([1, 4], 0.25f64.ln()));
    let w = Network::weight_world_encodings(&mut g, world, lp).unwrap();
    for (i, v) in g.value(w).data().iter().enumerate() {
        assert_eq!(*v, (i + 1) as f64 * 0.25f64.ln());
    }
}

#[test]
fn ablation_ignores_aux_layer_and_weighting_does_not() {
    let b = batch(&examples(4, 4, 21));
    for variant in [Variant::World, Variant::Both] {
        for weighting in [Weighting::On, Weighting::Ablated] {
            let (net, mut store) = network(config(4, variant, weighting), 12);
            randomize(&mut store, 3);
            let before = logits_of(&net, &store, &b);
            let (w, bias) = net.aux_params().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for id in [w, bias] {
                store
                    .value_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
            let after = logits_of(&net, &store, &b);
            let delta: f64 = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).sum();
            match weighting {
                Weighting::Ablated => assert_eq!(delta, 0.0, "{variant}"),
                Weighting::On => assert!(delta > 0.0, "{variant}"),
            }
        }
    }
}

#[test]
fn ablated_path_matches_unweighted_world_features() {
    // Same parameters, weighting on vs ablated: the decoders see different
    // world features and so produce different logits.
    let b = batch(&examples(3, 4, 8));
    let (on, mut store) = network(config(4, Variant::World, Weighting::On), 13);
    randomize(&mut store, 4);
    let off = Network::for_store(config(4, Variant::World, Weighting::Ablated), &store).unwrap();
    assert_ne!(logits_of(&on, &store, &b), logits_of(&off, &store, &b));
}

#[test]
fn baseline_no_aux_has_no_scores_or_aux_params() {
    let (net, store) = network(config(4, Variant::BaselineNoAux, Weighting::Ablated), 14);
    assert!(net.aux_params().is_none());
    assert!(store.id("target.aux.w").is_err());
    let mut g = Graph::new();
    let out = net
        .forward(
            &mut g,
            &store,
            &batch(&examples(2, 4, 2)),
            Decode::TeacherForced,
        )
        .unwrap();
    assert!(out.target.is_none());
}

#[test]
fn teacher_forced_decode_shapes_and_normalisation() {
    for variant in Variant::ALL {
        let weighting = if variant.predicts_first() {
            Weighting::On
        } else {
            Weighting::Ablated
        };
        let (net, store) = network(config(4, variant, weighting), 15);
        let exs = examples(5, 4, 6);
        let b = batch(&exs);
        let mut g = Graph::new();
        let out = net
            .forward(&mut g, &store, &b, Decode::TeacherForced)
            .unwrap();
        assert_eq!(out.logits.len(), b.max_gold_len());
        for &l in &out.logits {
            assert_eq!(g.shape(l), &[5, OUTPUT_CLASSES]);
        }
        for &w in out.world_attention.iter().chain(&out.command_attention) {
            for s in row_sums(&g, w) {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(out.target.is_some(), variant.has_aux());
    }
}

#[test]
fn greedy_decode_respects_cap_and_eos() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 16);
    let exs = examples(6, 4, 12);
    let b = batch(&exs);
    let mut g = Graph::new();
    let out = net.forward(&mut g, &store, &b, Decode::Greedy).unwrap();
    for (pred, gold) in out.predictions.iter().zip(&b.gold) {
        assert!(pred.len() <= step_cap(gold.len()));
        if let Some(p) = pred.iter().position(|&c| c == EOS_CLASS) {
            assert_eq!(p, pred.len() - 1);
        } else {
            assert_eq!(pred.len(), step_cap(gold.len()));
        }
    }
}

#[test]
fn eval_forward_is_repeatable() {
    let mut cfg = config(4, Variant::Both, Weighting::On);
    cfg.dropout = Dropout {
        encoder: 0.3,
        decoder: 0.3,
        cnn: 0.3,
    };
    let (net, store) = network(cfg, 17);
    let b = batch(&examples(3, 4, 13));
    assert_eq!(logits_of(&net, &store, &b), logits_of(&net, &store, &b));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let b = batch(&examples(2, 4, 30));
    for variant in [Variant::World, Variant::Both, Variant::BaselineAux] {
        let weighting = if variant.predicts_first() {
            Weighting::On
        } else {
            Weighting::Ablated
        };
        let (net, mut store) = network(config(4, variant, weighting), 18);
        randomize(&mut store, 5);
        let build = |g: &mut Graph, s: &ParamStore| {
            let out = net
                .forward(g, s, &b, Decode::TeacherForced)
                .map_err(|e| crate::diffcore::DiffError::Invalid(e.to_string()))?;
            let steps = g.concat(&out.logits)?;
            let t = out.logits.len();
            let flat = g.reshape(steps, &[b.size * t, OUTPUT_CLASSES])?;
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for gold in &b.gold {
                for k in 0..t {
                    targets.push(gold.get(k).copied().unwrap_or(0));
                    weights.push(if k < gold.len() {
                        1.0 / gold.len() as f64
                    } else {
                        0.0
                    });
                }
            }
            let seq = g.cross_entropy(flat, &targets, &weights)?;
            let aux = g.cross_entropy(out.target.unwrap().scores, &b.targets, &[1.0; 2])?;
            let aux = g.scale(aux, 0.3)?;
            g.add(seq, aux)
        };
        let report = grad_check(
            &mut store,
            build,
            1e-5,
            120,
            &mut ChaCha8Rng::seed_from_u64(6),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{variant}: {report:?}");
    }
}

#[test]
fn checkpoint_layout_must_match_config() {
    let (_, store) = network(config(4, Variant::World, Weighting::On), 19);
    assert!(Network::for_store(config(4, Variant::World, Weighting::Ablated), &store).is_ok());
    assert!(Network::for_store(config(4, Variant::Both, Weighting::On), &store).is_err());
    assert!(Network::for_store(config(5, Variant::World, Weighting::On), &store).is_err());
}

#[test]
fn batch_rejects_mismatched_grid() {
    let (net, store) = network(config(4, Variant::World, Weighting::On), 20);
    let b = batch(&examples(1, 5, 1));
    let mut g = Graph::new();
    assert!(matches!(
        net.forward(&mut g, &store, &b, Decode::Greedy),
        Err(ModelError::Batch(_))
    ));
    let cmd = Command::parse(&["walk", "to", "a", "circle"]).unwrap();
    assert_eq!(cmd.words().len(), 4);
}
