//! Release gate. One test per shipping requirement; each prints a single
//! `PASS <requirement>: <measured numbers>` line so a full run doubles as a
//! checklist. Expected values marked "frozen" were produced by independent
//! recounts (scripted tallies, scalar re-implementations) and must not be
//! edited to match the code.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::time::Instant;

use kgrec::corpus::{
    build_vocab, load_raw_conversations, make_gen_examples, make_rec_examples, split_dataset,
    synth_corpus, SynthConfig,
};
use kgrec::encoder::{encode_graph, init_encoder_params, relation_indices, EncoderConfig};
use kgrec::evalkit::{
    avg_entity_number, rank_metrics, repetition_stats, verify_novelty, PredictionEvent,
};
use kgrec::generator::{
    boe_loss, decode_step, generate_response, generation_loss, infusion_loss,
    init_generator_params, DecoderState, GenConfig, PreparedGenExample,
};
use kgrec::kg::{
    build_domain_kg, load_domain_records, KgStats, KnowledgeGraph, NodeType, Thresholds, Triple,
};
use kgrec::math::{softmax_rows_value, stream_rng, Matrix, ParamSet, Tape};
use kgrec::recommender::{
    init_recommender_params, predict, recommend_topk, EntitySequence, Lexicon, RecTrainingExample,
};
use kgrec::trainer::{
    clip_and_step, finite_difference_check, prepare_gen_examples, rec_training_loss,
    train_generator, train_recommender, AdamState, TrainConfig, FD_STEP, KINK_MARGIN,
};
use rand::Rng;

fn pass(name: &str, detail: impl std::fmt::Display) {
    println!("PASS {name}: {detail}");
}

fn rec_example(history: &[usize], label: usize) -> RecTrainingExample {
    RecTrainingExample {
        history: EntitySequence {
            entity_ids: history.to_vec(),
            source_spans: history.iter().map(|_| (0, 0..0)).collect(),
        },
        label,
        is_new: true,
        is_liked: true,
    }
}

fn scale_params(params: &mut ParamSet, factor: f64) {
    for (_, m) in params.iter_mut() {
        *m = m.scale(factor);
    }
}

/// Three movies, three attribute nodes, two relations, every node connected.
fn six_node_graph() -> KnowledgeGraph {
    let t = |head, relation, tail| Triple {
        head,
        relation,
        tail,
    };
    KnowledgeGraph::new(
        ["film a", "film b", "film c", "tag x", "tag y", "studio z"]
            .map(String::from)
            .to_vec(),
        vec![
            NodeType::Movie,
            NodeType::Movie,
            NodeType::Movie,
            NodeType::Keyword,
            NodeType::Keyword,
            NodeType::Production,
        ],
        vec!["keyword".to_string(), "company".to_string()],
        vec![
            t(0, 0, 3),
            t(0, 0, 4),
            t(1, 0, 4),
            t(1, 0, 3),
            t(2, 0, 3),
            t(0, 1, 5),
            t(1, 1, 5),
            t(2, 1, 5),
        ],
    )
    .expect("toy graph is valid")
}

/// Run the central-difference audit for one loss and require full agreement:
/// every tensor the loss touches is sampled, nothing is skipped for kink
/// proximity, and the worst relative error stays under 1e-4.
fn audit_loss<F>(label: &str, f: F, params: &ParamSet) -> (f64, BTreeSet<String>)
where
    F: Fn(&ParamSet) -> kgrec::Result<(f64, kgrec::math::GradMap, f64)>,
{
    let (value, grads, margin) = f(params).expect("loss evaluates at the audit point");
    assert!(value.is_finite(), "{label}: loss is not finite");
    assert!(
        margin > 2.0 * KINK_MARGIN,
        "{label}: audit point sits too close to a ReLU kink (margin {margin:.2e})"
    );
    let touched: BTreeSet<String> = grads.keys().cloned().collect();
    let expected: usize = touched
        .iter()
        .map(|n| {
            let m = params.get(n);
            (m.rows() * m.cols()).min(20)
        })
        .sum();
    let report = finite_difference_check(&f, params, FD_STEP, 20, 97).expect("audit runs");
    assert_eq!(
        report.checked, expected,
        "{label}: not every coordinate was audited"
    );
    assert_eq!(
        report.skipped, 0,
        "{label}: kink-adjacent coordinates were sampled"
    );
    assert!(
        report.max_rel_err < 1e-4,
        "{label}: tensor {} disagrees with central differences (rel err {:.3e})",
        report.worst_tensor,
        report.max_rel_err
    );
    (report.max_rel_err, touched)
}

/// Analytic gradients of all four training losses agree with central finite
/// differences on toy models, and between them the losses exercise every
/// parameter tensor.
#[test]
fn analytic_gradients_match_finite_differences() {
    let t0 = Instant::now();

    // Recommendation loss: 6-node graph, two conv layers, width 8.
    let graph = six_node_graph();
    let enc_cfg = EncoderConfig {
        d_k: 8,
        d_f: 8,
        layers: 2,
    };
    let index = relation_indices(&graph);
    let batch = [
        rec_example(&[3, 4], 0),
        rec_example(&[5, 0], 1),
        rec_example(&[4, 5, 1], 2),
    ];
    let refs: Vec<&RecTrainingExample> = batch.iter().collect();
    let rec_loss = |p: &ParamSet| rec_training_loss(p, &graph, &index, &enc_cfg, &refs);
    // The small uniform init leaves some ReLU input near zero, where central
    // differences straddle the kink. Push the parameters away from the origin
    // and pick the first seed whose evaluation point clears the margin.
    let rec_params = (0..200)
        .find_map(|seed| {
            let mut p = ParamSet::new();
            init_encoder_params(&mut p, &graph, &enc_cfg, seed);
            init_recommender_params(&mut p, 8, 8, seed);
            scale_params(&mut p, 8.0);
            let (value, _, margin) = rec_loss(&p).ok()?;
            (value.is_finite() && margin > 2.0 * KINK_MARGIN).then_some(p)
        })
        .expect("some seed clears the kink margin");
    let (rec_err, rec_touched) = audit_loss("history-to-item loss", rec_loss, &rec_params);
    let all_rec: BTreeSet<String> = rec_params.names().cloned().collect();
    assert_eq!(rec_touched, all_rec, "recommendation loss misses tensors");

    // Generation losses: vocabulary of 12, width 8, one layer each way.
    let gen_cfg = GenConfig {
        d_t: 8,
        d_f: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        max_context: 16,
        max_response: 8,
    };
    let vocab_size = 12;
    let mut rng = stream_rng(101, "audit.gen");
    let table = Matrix::from_fn(graph.num_entities(), 8, |_, _| rng.random_range(-0.5..0.5));
    let mut indicator_a = Matrix::zeros(1, vocab_size);
    indicator_a.set(0, 4, 1.0);
    indicator_a.set(0, 8, 1.0);
    let mut indicator_b = Matrix::zeros(1, vocab_size);
    indicator_b.set(0, 10, 1.0);
    let batch = [
        PreparedGenExample {
            context_ids: vec![4, 5, 6, 7],
            response_ids: vec![8, 9, 4],
            pooled: Matrix::from_fn(1, 8, |_, _| rng.random_range(-0.5..0.5)),
            boe_target_entities: vec![0, 2, 3],
            infusion_indicator: indicator_a,
        },
        PreparedGenExample {
            context_ids: vec![9, 10],
            response_ids: vec![5, 11],
            pooled: Matrix::from_fn(1, 8, |_, _| rng.random_range(-0.5..0.5)),
            boe_target_entities: vec![1, 4],
            infusion_indicator: indicator_b,
        },
    ];
    let gen_loss = |p: &ParamSet| generation_loss(p, &gen_cfg, &batch);
    let entity_loss = |p: &ParamSet| boe_loss(p, &table, &gen_cfg, &batch);
    let align_loss = |p: &ParamSet| infusion_loss(p, &gen_cfg, &batch);
    let gen_params = (0..200)
        .find_map(|seed| {
            let mut p = ParamSet::new();
            init_generator_params(&mut p, &gen_cfg, vocab_size, graph.num_entities(), seed);
            scale_params(&mut p, 4.0);
            let clears = |r: kgrec::Result<(f64, kgrec::math::GradMap, f64)>| {
                r.is_ok_and(|(v, _, m)| v.is_finite() && m > 2.0 * KINK_MARGIN)
            };
            (clears(gen_loss(&p)) && clears(entity_loss(&p)) && clears(align_loss(&p))).then_some(p)
        })
        .expect("some seed clears the kink margin");
    let (gen_err, gen_touched) = audit_loss("response loss", gen_loss, &gen_params);
    let (boe_err, boe_touched) = audit_loss("entity-bag loss", entity_loss, &gen_params);
    let (inf_err, inf_touched) = audit_loss("alignment loss", align_loss, &gen_params);

    let mut union = gen_touched;
    union.extend(boe_touched);
    union.extend(inf_touched);
    let all_gen: BTreeSet<String> = gen_params.names().cloned().collect();
    let missed: Vec<&String> = all_gen.difference(&union).collect();
    assert!(missed.is_empty(), "no generation loss touches {missed:?}");

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "audit took {elapsed:?}");
    pass(
        "gradient audit",
        format!(
            "worst rel err {:.2e} across four losses, every tensor covered, {elapsed:?}",
            rec_err.max(gen_err).max(boe_err).max(inf_err)
        ),
    );
}

/// Scalar re-implementation of the graph encoder: per-relation neighbor sets
/// recomputed from the triple list, plain nested loops, no shared code paths
/// beyond the parameter values.
fn naive_encode(params: &ParamSet, graph: &KnowledgeGraph, cfg: &EncoderConfig) -> Vec<Vec<f64>> {
    let n = graph.num_entities();
    let nrel = graph.num_relations();
    let mut neighbors = vec![vec![BTreeSet::new(); n]; nrel];
    for t in graph.triples() {
        neighbors[t.relation][t.head].insert(t.tail);
        neighbors[t.relation][t.tail].insert(t.head);
    }
    let mat = |name: &str| -> Vec<Vec<f64>> {
        let m = params.get(name);
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    };
    let base = mat("enc.base");
    let mut h = base.clone();
    let mut per_layer = vec![base];
    for l in 0..cfg.layers {
        let w0 = mat(&format!("enc.l{l}.w0"));
        let wr: Vec<Vec<Vec<f64>>> = (0..nrel)
            .map(|r| mat(&format!("enc.l{l}.r{r}.w")))
            .collect();
        let mut next = vec![vec![0.0; cfg.d_k]; n];
        for i in 0..n {
            for c in 0..cfg.d_k {
                let mut acc = 0.0;
                for k in 0..cfg.d_k {
                    acc += h[i][k] * w0[k][c];
                }
                for (r, w) in wr.iter().enumerate() {
                    let neigh = &neighbors[r][i];
                    if neigh.is_empty() {
                        continue;
                    }
                    let mut avg = 0.0;
                    for k in 0..cfg.d_k {
                        let mut s = 0.0;
                        for &j in neigh {
                            s += h[j][k];
                        }
                        avg += s / neigh.len() as f64 * w[k][c];
                    }
                    acc += avg;
                }
                next[i][c] = acc.max(0.0);
            }
        }
        per_layer.push(next.clone());
        h = next;
    }
    let agg_w = mat("enc.agg.w");
    let agg_b = mat("enc.agg.b");
    let mut out = vec![vec![0.0; cfg.d_f]; n];
    for i in 0..n {
        let concat: Vec<f64> = per_layer
            .iter()
            .flat_map(|layer| layer[i].clone())
            .collect();
        for c in 0..cfg.d_f {
            let mut acc = agg_b[0][c];
            for (k, x) in concat.iter().enumerate() {
                acc += x * agg_w[k][c];
            }
            out[i][c] = acc;
        }
    }
    out
}

#[test]
fn graph_encoder_matches_a_naive_oracle() {
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let mut rng = stream_rng(23, &format!("oracle.graph{trial}"));
        let n = rng.random_range(3..10usize);
        let nrel = rng.random_range(1..4usize);
        let names: Vec<String> = (0..n).map(|i| format!("node {i}")).collect();
        let types: Vec<NodeType> = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    NodeType::Movie
                } else {
                    NodeType::Keyword
                }
            })
            .collect();
        let relations: Vec<String> = (0..nrel).map(|r| format!("relation {r}")).collect();
        let mut triples = Vec::new();
        for r in 0..nrel {
            for _ in 0..rng.random_range(0..2 * n) {
                let head = rng.random_range(0..n);
                let tail = rng.random_range(0..n);
                if head != tail {
                    triples.push(Triple {
                        head,
                        relation: r,
                        tail,
                    });
                }
            }
        }
        let graph = KnowledgeGraph::new(names, types, relations, triples).unwrap();
        let cfg = EncoderConfig {
            d_k: rng.random_range(2..5usize),
            d_f: rng.random_range(2..4usize),
            layers: rng.random_range(1..3usize),
        };
        let mut params = ParamSet::new();
        init_encoder_params(&mut params, &graph, &cfg, 1000 + trial);
        let table = encode_graph(&params, &graph, &cfg).unwrap();
        let oracle = naive_encode(&params, &graph, &cfg);
        for (i, row) in oracle.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                worst = worst.max((table.get(i, c) - want).abs());
            }
        }
    }
    assert!(
        worst < 1e-10,
        "encoder deviates from the oracle by {worst:.3e}"
    );
    pass(
        "encoder oracle",
        format!("100 random graphs, max abs diff {worst:.2e}"),
    );
}

#[test]
fn ranking_metrics_match_a_brute_force_oracle() {
    let ks = [1usize, 3, 10];
    let mut rng = stream_rng(29, "rank.events");
    let mut events = Vec::new();
    for i in 0..1000 {
        let universe = rng.random_range(12..40usize);
        let mut ranked: Vec<usize> = (0..universe).collect();
        for j in (1..ranked.len()).rev() {
            ranked.swap(j, rng.random_range(0..=j));
        }
        ranked.truncate(rng.random_range(10..=universe.min(25)));
        let gold_len = rng.random_range(1..6usize);
        let mut gold = Vec::new();
        while gold.len() < gold_len {
            let g = rng.random_range(0..universe);
            if !gold.contains(&g) {
                gold.push(g);
            }
        }
        events.push(PredictionEvent {
            conversation_id: format!("c{i}"),
            turn: 0,
            ranked_item_ids: ranked,
            mentioned_item_ids: Vec::new(),
            gold_liked_flags: gold.iter().map(|_| true).collect(),
            gold_item_ids: gold,
        });
    }
    let report = rank_metrics(&events, &ks).unwrap();

    // Brute force: set intersections and positional DCG, accumulated in the
    // same event order so equality is exact, not approximate.
    for &k in &ks {
        let (mut recall, mut precision, mut ndcg) = (0.0, 0.0, 0.0);
        for event in &events {
            let top = &event.ranked_item_ids[..k];
            let mut hits = 0;
            let mut dcg = 0.0;
            for (rank, id) in top.iter().enumerate() {
                if event.gold_item_ids.contains(id) {
                    hits += 1;
                    dcg += 1.0 / ((rank + 2) as f64).log2();
                }
            }
            let mut ideal = 0.0;
            for rank in 0..event.gold_item_ids.len().min(k) {
                ideal += 1.0 / ((rank + 2) as f64).log2();
            }
            recall += hits as f64 / event.gold_item_ids.len() as f64;
            precision += hits as f64 / k as f64;
            ndcg += dcg / ideal;
        }
        let n = events.len() as f64;
        assert_eq!(report.recall[&k], recall / n, "recall@{k}");
        assert_eq!(report.precision[&k], precision / n, "precision@{k}");
        assert_eq!(report.ndcg[&k], ndcg / n, "ndcg@{k}");
    }
    pass(
        "ranking oracle",
        format!(
            "1000 events exact at K = 1, 3, 10; recall@10 {:.4}",
            report.recall[&10]
        ),
    );
}

#[test]
fn optimizer_matches_a_scripted_reference() {
    let cfg = TrainConfig::default();
    let mut params = ParamSet::new();
    params.insert("a", Matrix::from_vec(1, 2, vec![0.5, -0.3]));
    params.insert("b", Matrix::from_vec(2, 1, vec![0.2, 0.1]));
    let mut state = AdamState::new();
    let lr = 0.01;

    // Hand-rolled mirror: decay added to raw gradients (zero for the tensor
    // that has none), global-norm clip, bias-corrected moment updates.
    let mut theta = [0.5, -0.3, 0.2, 0.1];
    let mut m = [0.0; 4];
    let mut v = [0.0; 4];
    for step in 1..=3u32 {
        let raw = [0.4 * step as f64, -0.2, 0.0, 0.0];
        let mut grads = kgrec::math::GradMap::new();
        grads.insert(
            "a".to_string(),
            Matrix::from_vec(1, 2, vec![raw[0], raw[1]]),
        );

        let eff: Vec<f64> = raw
            .iter()
            .zip(&theta)
            .map(|(g, t)| g + cfg.l2_coeff * t)
            .collect();
        let norm: f64 = eff.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > cfg.clip_threshold {
            cfg.clip_threshold / norm
        } else {
            1.0
        };
        for i in 0..4 {
            let g = eff[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / (1.0 - cfg.beta1.powi(step as i32));
            let vhat = v[i] / (1.0 - cfg.beta2.powi(step as i32));
            theta[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
        clip_and_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
    }
    let got = [
        params.get("a").get(0, 0),
        params.get("a").get(0, 1),
        params.get("b").get(0, 0),
        params.get("b").get(1, 0),
    ];
    let mut worst: f64 = 0.0;
    for (g, t) in got.iter().zip(&theta) {
        worst = worst.max((g - t).abs());
    }
    assert!(worst < 1e-12, "optimizer deviates by {worst:.3e}");
    pass(
        "optimizer reference",
        format!("3 clipped steps, max deviation {worst:.2e}"),
    );
}

#[test]
fn recommender_overfits_the_synthetic_corpus() {
    let t0 = Instant::now();
    let (convs, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let lexicon = Lexicon::from_graph(&graph);
    let mut examples = Vec::new();
    for conv in &convs {
        examples.extend(make_rec_examples(conv, &graph, &lexicon, false).unwrap());
    }
    let enc_cfg = EncoderConfig {
        d_k: 32,
        d_f: 32,
        layers: 1,
    };
    let cfg = TrainConfig {
        epochs: 100,
        batch_rec: 128,
        patience: 0,
        ..TrainConfig::default()
    };
    let run = train_recommender(&graph, &enc_cfg, 32, &examples, &[], &cfg).unwrap();
    assert!(!run.diverged, "training diverged");
    let table = encode_graph(&run.params, &graph, &enc_cfg).unwrap();
    let mut hits = 0;
    for ex in &examples {
        let pred = predict(&run.params, &table, &graph, &ex.history.entity_ids).unwrap();
        let mentioned = ex.history.mentioned_items(&graph);
        let (top, _) = recommend_topk(&pred.probs, &graph, 1, &mentioned);
        if top.first() == Some(&ex.label) {
            hits += 1;
        }
    }
    let recall = hits as f64 / examples.len() as f64;
    let elapsed = t0.elapsed();
    assert!(
        recall >= 0.95,
        "recall@1 {recall:.3} on the training set after {} epochs",
        cfg.epochs
    );
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
    pass(
        "recommender overfit",
        format!(
            "recall@1 {recall:.2} ({hits}/{}) after {} epochs in {elapsed:?}",
            examples.len(),
            cfg.epochs
        ),
    );
}

/// Shared setup for the generation tests: train the recommender briefly so
/// pooled histories are meaningful, then prepare generation examples.
struct GenFixture {
    graph: KnowledgeGraph,
    lexicon: Lexicon,
    rec_params: ParamSet,
    table: Matrix,
    vocab: kgrec::vocab::Vocabulary,
    gen_cfg: GenConfig,
}

fn gen_fixture(convs: &[kgrec::corpus::Conversation], graph: KnowledgeGraph) -> GenFixture {
    let lexicon = Lexicon::from_graph(&graph);
    let mut rec_examples = Vec::new();
    for conv in convs {
        rec_examples.extend(make_rec_examples(conv, &graph, &lexicon, false).unwrap());
    }
    let enc_cfg = EncoderConfig {
        d_k: 32,
        d_f: 32,
        layers: 1,
    };
    let rec_cfg = TrainConfig {
        lr_rec: 1e-2,
        epochs: 60,
        batch_rec: 128,
        patience: 0,
        ..TrainConfig::default()
    };
    let rec = train_recommender(&graph, &enc_cfg, 32, &rec_examples, &[], &rec_cfg).unwrap();
    let table = encode_graph(&rec.params, &graph, &enc_cfg).unwrap();
    let vocab = build_vocab(convs, &graph, 1);
    let gen_cfg = GenConfig {
        d_t: 32,
        d_f: 32,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        max_context: 64,
        max_response: 20,
    };
    GenFixture {
        graph,
        lexicon,
        rec_params: rec.params,
        table,
        vocab,
        gen_cfg,
    }
}

fn gen_examples_for(
    fx: &GenFixture,
    convs: &[kgrec::corpus::Conversation],
) -> Vec<kgrec::corpus::GenExample> {
    let mut out = Vec::new();
    for conv in convs {
        out.extend(
            make_gen_examples(
                conv,
                &fx.graph,
                &fx.vocab,
                &fx.lexicon,
                fx.gen_cfg.max_response,
            )
            .unwrap(),
        );
    }
    out
}

#[test]
fn generator_memorizes_its_training_responses() {
    let t0 = Instant::now();
    let (convs, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let fx = gen_fixture(&convs, graph);
    let raw = gen_examples_for(&fx, &convs);
    let prepared = prepare_gen_examples(
        &raw,
        &fx.graph,
        &fx.vocab,
        &fx.rec_params,
        &fx.table,
        &fx.gen_cfg,
    )
    .unwrap();
    let cfg = TrainConfig {
        lr_gen: 0.01,
        epochs: 300,
        batch_gen: 50,
        patience: 0,
        ..TrainConfig::default()
    };
    let run =
        train_generator(&fx.table, fx.vocab.len(), &fx.gen_cfg, &prepared, &[], &cfg).unwrap();
    assert!(!run.diverged, "training diverged");

    let (per_token, _, _) = generation_loss(&run.params, &fx.gen_cfg, &prepared).unwrap();
    let mut exact = 0;
    for ex in &raw {
        let pooled =
            kgrec::recommender::pooled_history(&fx.rec_params, &fx.table, &ex.history.entity_ids)
                .unwrap();
        let tokens = generate_response(
            &ex.context_texts,
            &Matrix::row_vector(&pooled),
            &run.params,
            &fx.vocab,
            &fx.table,
            &fx.gen_cfg,
            cfg.lambda3,
        )
        .unwrap();
        if tokens == ex.response_ids {
            exact += 1;
        }
    }
    let fraction = exact as f64 / raw.len() as f64;
    let elapsed = t0.elapsed();
    assert!(per_token < 0.1, "mean per-token loss {per_token:.4}");
    assert!(
        fraction >= 0.9,
        "only {exact}/{} responses regenerate exactly",
        raw.len()
    );
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    pass(
        "generator overfit",
        format!(
            "per-token loss {per_token:.4}, exact regeneration {exact}/{} in {elapsed:?}",
            raw.len()
        ),
    );
}

#[test]
fn entity_supervision_raises_entity_mentions() {
    let (convs, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let split = split_dataset(&convs, 0).unwrap();
    let fx = gen_fixture(&split.train, graph);
    let raw_train = gen_examples_for(&fx, &split.train);
    let raw_valid = gen_examples_for(&fx, &split.valid);
    let prepared = prepare_gen_examples(
        &raw_train,
        &fx.graph,
        &fx.vocab,
        &fx.rec_params,
        &fx.table,
        &fx.gen_cfg,
    )
    .unwrap();

    // Same seed, same epoch budget; only the entity-bag weight changes. The
    // budget is short on purpose: once the templates are fully memorized both
    // runs emit identical text and the contrast collapses to a tie.
    let aen_for = |lambda1: f64| -> f64 {
        let cfg = TrainConfig {
            lr_gen: 0.01,
            lambda1,
            epochs: 10,
            batch_gen: 64,
            patience: 0,
            ..TrainConfig::default()
        };
        let run =
            train_generator(&fx.table, fx.vocab.len(), &fx.gen_cfg, &prepared, &[], &cfg).unwrap();
        let mut texts = Vec::new();
        for ex in &raw_valid {
            let pooled = kgrec::recommender::pooled_history(
                &fx.rec_params,
                &fx.table,
                &ex.history.entity_ids,
            )
            .unwrap();
            let tokens = generate_response(
                &ex.context_texts,
                &Matrix::row_vector(&pooled),
                &run.params,
                &fx.vocab,
                &fx.table,
                &fx.gen_cfg,
                cfg.lambda3,
            )
            .unwrap();
            texts.push(fx.vocab.decode(&tokens));
        }
        avg_entity_number(&texts, &fx.lexicon).unwrap()
    };
    let with_supervision = aen_for(1.5);
    let without = aen_for(0.0);
    assert!(
        with_supervision >= without,
        "entity mentions fell: {with_supervision:.3} with supervision vs {without:.3} without"
    );
    pass(
        "entity-bag ablation",
        format!("held-out AEN {with_supervision:.2} with supervision vs {without:.2} without"),
    );
}

#[test]
fn alignment_training_contracts_the_indicator_distance() {
    let (convs, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let split = split_dataset(&convs, 0).unwrap();
    let fx = gen_fixture(&split.train, graph);
    let raw_train = gen_examples_for(&fx, &split.train);
    let prepared = prepare_gen_examples(
        &raw_train,
        &fx.graph,
        &fx.vocab,
        &fx.rec_params,
        &fx.table,
        &fx.gen_cfg,
    )
    .unwrap();
    let cfg = TrainConfig {
        lr_gen: 0.01,
        epochs: 80,
        batch_gen: 64,
        patience: 0,
        ..TrainConfig::default()
    };
    let mut init = ParamSet::new();
    init_generator_params(
        &mut init,
        &fx.gen_cfg,
        fx.vocab.len(),
        fx.graph.num_entities(),
        cfg.seed,
    );
    let at_init = infusion_loss(&init, &fx.gen_cfg, &prepared).unwrap().0;
    let run =
        train_generator(&fx.table, fx.vocab.len(), &fx.gen_cfg, &prepared, &[], &cfg).unwrap();
    let trained = infusion_loss(&run.params, &fx.gen_cfg, &prepared)
        .unwrap()
        .0;
    assert!(
        trained <= 0.5 * at_init,
        "alignment distance only moved {at_init:.5} -> {trained:.5}"
    );
    pass(
        "alignment contraction",
        format!(
            "mean squared distance {at_init:.5} -> {trained:.5} ({:.1}%)",
            100.0 * trained / at_init
        ),
    );
}

#[test]
fn recommendations_never_repeat_mentioned_items() {
    let (convs, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let lexicon = Lexicon::from_graph(&graph);

    // Randomized sweep: arbitrary scores, arbitrary mentioned sets, every K.
    let mut rng = stream_rng(31, "novelty.sweep");
    let items = graph.item_ids().to_vec();
    let mut trials = 0;
    for _ in 0..2000 {
        let probs: Vec<f64> = items.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let mentioned: BTreeSet<usize> = (0..graph.num_entities())
            .filter(|_| rng.random_range(0.0..1.0) < 0.4)
            .collect();
        let k = rng.random_range(1..=items.len() + 2);
        let (ranked, truncated) = recommend_topk(&probs, &graph, k, &mentioned);
        for id in &ranked {
            assert!(!mentioned.contains(id), "item {id} was already mentioned");
        }
        let eligible = items.iter().filter(|id| !mentioned.contains(id)).count();
        assert_eq!(ranked.len(), eligible.min(k));
        assert_eq!(truncated, eligible < k);
        trials += 1;
    }

    // Untrained end-to-end replay: scores are arbitrary, the filter alone
    // must guarantee novelty. Every ranked list is checked against the
    // mentions accumulated so far, including earlier gold recommendations.
    let enc_cfg = EncoderConfig {
        d_k: 8,
        d_f: 8,
        layers: 1,
    };
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, &graph, &enc_cfg, 7);
    init_recommender_params(&mut params, 8, 8, 7);
    let table = encode_graph(&params, &graph, &enc_cfg).unwrap();
    let mut events = Vec::new();
    for conv in &convs {
        for ex in make_rec_examples(conv, &graph, &lexicon, false).unwrap() {
            let pred = predict(&params, &table, &graph, &ex.history.entity_ids).unwrap();
            let mentioned = ex.history.mentioned_items(&graph);
            let (ranked, _) = recommend_topk(&pred.probs, &graph, 3, &mentioned);
            events.push(PredictionEvent {
                conversation_id: conv.id.clone(),
                turn: 0,
                ranked_item_ids: ranked,
                mentioned_item_ids: mentioned.into_iter().collect(),
                gold_item_ids: vec![ex.label],
                gold_liked_flags: vec![ex.is_liked],
            });
        }
    }
    assert!(!events.is_empty());
    verify_novelty(&events).unwrap();
    pass(
        "novelty",
        format!(
            "{trials} randomized rankings and {} replayed turns, zero repeats",
            events.len()
        ),
    );
}

#[test]
fn attention_and_softmax_rows_are_normalized() {
    let mut invocations = 0usize;
    let mut worst: f64 = 0.0;
    let mut check_rows = |m: &Matrix| {
        for i in 0..m.rows() {
            let sum: f64 = m.row(i).iter().sum();
            let dev = (sum - 1.0).abs();
            assert!(dev <= 1e-9, "row sums to {sum} (off by {dev:.2e})");
            if dev > worst {
                worst = dev;
            }
        }
    };

    // Raw softmax over random shapes and magnitudes, including rows shifted
    // far from zero where naive exponentiation would overflow.
    let mut rng = stream_rng(37, "normalization");
    for _ in 0..8000 {
        let rows = rng.random_range(1..5usize);
        let cols = rng.random_range(1..9usize);
        let scale = [1.0, 10.0, 50.0][rng.random_range(0..3usize)];
        let x = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale));
        check_rows(&softmax_rows_value(&x));
        invocations += 1;
    }
    for _ in 0..1000 {
        let rows = rng.random_range(1..4usize);
        let cols = rng.random_range(2..7usize);
        let x = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-20.0..20.0));
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax_rows(v);
        check_rows(&tape.value(s).clone());
        invocations += 1;
    }

    // Model-level distributions: item scores and attention from the
    // recommender, next-token distributions from the decoder.
    let (_, graph) = synth_corpus(&SynthConfig::default()).unwrap();
    let mut params = ParamSet::new();
    init_recommender_params(&mut params, 8, 8, 41);
    let table = Matrix::from_fn(graph.num_entities(), 8, |_, _| rng.random_range(-2.0..2.0));
    for _ in 0..500 {
        let len = rng.random_range(1..6usize);
        let history: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..graph.num_entities()))
            .collect();
        let pred = predict(&params, &table, &graph, &history).unwrap();
        check_rows(&Matrix::row_vector(&pred.probs));
        check_rows(&Matrix::row_vector(&pred.attention));
        invocations += 1;
    }

    let gen_cfg = GenConfig {
        d_t: 8,
        d_f: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        max_context: 16,
        max_response: 8,
    };
    let vocab_size = 12;
    let mut gen_params = ParamSet::new();
    init_generator_params(
        &mut gen_params,
        &gen_cfg,
        vocab_size,
        graph.num_entities(),
        43,
    );
    let entity_table = Matrix::from_fn(graph.num_entities(), 8, |_, _| rng.random_range(-1.0..1.0));
    let memory = kgrec::generator::encode_context(&gen_params, &gen_cfg, &[4, 5, 6]).unwrap();
    let pooled = Matrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
    for _ in 0..125 {
        let mut state = DecoderState::new(memory.clone(), entity_table.clone());
        for _ in 0..4 {
            let dist = decode_step(&mut state, &pooled, &gen_params, &gen_cfg).unwrap();
            let next = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(t, _)| t)
                .unwrap();
            check_rows(&Matrix::row_vector(&dist));
            invocations += 1;
            state.prefix.push(next);
        }
    }
    assert_eq!(invocations, 10_000);
    pass(
        "normalization",
        format!("{invocations} distributions, worst row deviation {worst:.2e}"),
    );
}

#[test]
fn domain_graph_construction_matches_frozen_tallies() {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/movie_records.jsonl"
    );
    let file = std::fs::File::open(path).unwrap();
    let records = load_domain_records(BufReader::new(file)).unwrap();
    assert_eq!(records.len(), 20);
    let graph = build_domain_kg(&records, Thresholds::default()).unwrap();

    // Frozen output of the independent recount script over the same fixture.
    let nodes: BTreeMap<String, usize> = [
        ("cast", 3),
        ("crew", 2),
        ("genre", 5),
        ("keyword", 4),
        ("movie", 20),
        ("production", 2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let edges: BTreeMap<String, usize> = [
        ("art", 1),
        ("camera", 1),
        ("cast", 15),
        ("company", 9),
        ("costume & make-up", 2),
        ("directing", 5),
        ("editing", 5),
        ("generic crew", 1),
        ("genre", 18),
        ("keyword", 19),
        ("lighting", 1),
        ("production", 1),
        ("sound", 1),
        ("visual effect", 2),
        ("writing", 3),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let expected = KgStats {
        node_counts: nodes,
        edge_counts: edges,
        total_nodes: 36,
        total_edges: 84,
    };
    assert_eq!(graph.stats(), expected);

    // Title disambiguation and first-appearance casing, same recount.
    assert_eq!(graph.entity_name(6), "Nebula (2009)");
    assert_eq!(graph.entity_name(14), "echo (2015)");
    assert_eq!(graph.entity_name(17), "Echo (2015) #2");
    let attr_names: Vec<&str> = (20..36).map(|i| graph.entity_name(i)).collect();
    assert_eq!(
        attr_names,
        [
            "Drama",
            "Comedy",
            "Sci-Fi",
            "War",
            "Horror",
            "Ana Brook",
            "Leo Marsh",
            "Kay Holt",
            "Jordan Vale",
            "Mia Torres",
            "love",
            "space",
            "heist",
            "war",
            "Bluegate",
            "Starforge"
        ]
    );

    // Raising any threshold can only remove nodes and edges. The grid totals
    // are also frozen from the recount.
    let frozen_grid: BTreeMap<(usize, usize), (usize, usize)> = [
        ((1, 1), (40, 93)),
        ((1, 4), (38, 88)),
        ((1, 7), (35, 73)),
        ((4, 1), (38, 89)),
        ((4, 4), (36, 84)),
        ((4, 7), (33, 69)),
        ((7, 1), (34, 70)),
        ((7, 4), (32, 65)),
        ((7, 7), (29, 50)),
    ]
    .into_iter()
    .collect();
    let mut grid = BTreeMap::new();
    for keyword in [1usize, 4, 7] {
        for cast in [1usize, 4, 7] {
            let stats = build_domain_kg(
                &records,
                Thresholds {
                    keyword,
                    cast,
                    ..Thresholds::default()
                },
            )
            .unwrap()
            .stats();
            grid.insert((keyword, cast), (stats.total_nodes, stats.total_edges));
        }
    }
    assert_eq!(grid, frozen_grid);
    for (&(kw, ca), &(n, e)) in &grid {
        for (other_kw, other_ca) in [(kw + 3, ca), (kw, ca + 3)] {
            if let Some(&(n2, e2)) = grid.get(&(other_kw, other_ca)) {
                assert!(n2 <= n && e2 <= e, "tightening ({kw},{ca}) grew the graph");
            }
        }
    }
    pass(
        "graph builder fixture",
        "36 nodes / 84 edges at default thresholds, 3x3 grid monotone",
    );
}

#[test]
fn identical_seeds_produce_identical_artifacts() {
    let (convs, graph) = synth_corpus(&SynthConfig {
        num_convs: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let lexicon = Lexicon::from_graph(&graph);
    let mut examples = Vec::new();
    for conv in &convs {
        examples.extend(make_rec_examples(conv, &graph, &lexicon, false).unwrap());
    }
    let enc_cfg = EncoderConfig {
        d_k: 8,
        d_f: 8,
        layers: 1,
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_rec: 16,
        patience: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || train_recommender(&graph, &enc_cfg, 8, &examples, &[], &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve, b.curve, "loss curves differ between runs");
    for ((name_a, m_a), (name_b, m_b)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(name_a, name_b);
        for (x, y) in m_a.data().iter().zip(m_b.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{name_a} differs between runs");
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let extra = serde_json::json!({"kind": "rec"});
    let save = |sub: &str, outcome: &kgrec::trainer::TrainOutcome| {
        let d = dir.path().join(sub);
        kgrec::checkpoint::save_checkpoint(&d, &outcome.params, &extra).unwrap();
        (
            std::fs::read(d.join("params.bin")).unwrap(),
            std::fs::read(d.join("manifest.json")).unwrap(),
        )
    };
    let (blob_a, manifest_a) = save("a", &a);
    let (blob_b, manifest_b) = save("b", &b);
    assert_eq!(blob_a, blob_b, "checkpoint blobs differ");
    assert_eq!(manifest_a, manifest_b, "checkpoint manifests differ");
    pass(
        "determinism",
        format!(
            "two seeded runs: identical curves ({} epochs) and byte-identical checkpoints",
            a.curve.len()
        ),
    );
}

/// Needs the real dialog corpus. Point REDIAL_PATH at the raw conversation
/// JSONL (train split) and run with --ignored.
#[test]
#[ignore = "needs the real dialog corpus; set REDIAL_PATH"]
fn real_corpus_repetition_rate_matches_reference() {
    let path = std::env::var("REDIAL_PATH")
        .expect("set REDIAL_PATH to the raw conversation JSONL before running");
    let file = std::fs::File::open(&path).unwrap_or_else(|e| panic!("open {path}: {e}"));
    let raws = load_raw_conversations(BufReader::new(file)).unwrap();
    let events = kgrec::corpus::human_recommendation_events(&raws);
    let report = repetition_stats(&events).unwrap();
    assert!(
        (report.repetitive_fraction - 0.085).abs() <= 0.005,
        "repetitive fraction {:.4} outside 8.5% +/- 0.5%",
        report.repetitive_fraction
    );
    pass(
        "human repetition rate",
        format!(
            "{:.2}% repetitive over {} turns",
            100.0 * report.repetitive_fraction,
            report.events
        ),
    );
}

/// Needs the real movie record dump. Point TMDB_RECORDS_PATH at the record
/// JSONL and run with --ignored.
#[test]
#[ignore = "needs the real movie record dump; set TMDB_RECORDS_PATH"]
fn real_movie_dump_reproduces_reference_graph_scale() {
    let path = std::env::var("TMDB_RECORDS_PATH")
        .expect("set TMDB_RECORDS_PATH to the movie record JSONL before running");
    let file = std::fs::File::open(&path).unwrap_or_else(|e| panic!("open {path}: {e}"));
    let records = load_domain_records(BufReader::new(file)).unwrap();
    let stats = build_domain_kg(&records, Thresholds::default())
        .unwrap()
        .stats();
    assert_eq!(stats.total_nodes, 15822, "node count");
    assert_eq!(stats.total_edges, 141564, "edge count");
    pass(
        "reference graph scale",
        format!("{} nodes / {} edges", stats.total_nodes, stats.total_edges),
    );
}
