//! One binary, eight subcommands: build and inspect knowledge graphs, train
//! both model halves, score prediction and response logs, export embedding
//! projections, generate the synthetic fixture corpus, and chat.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use kgrec::checkpoint::{load_checkpoint, save_checkpoint};
use kgrec::corpus::{
    build_vocab, load_conversations, make_gen_examples, make_rec_examples, save_conversations,
    split_dataset, Conversation, Speaker, SynthConfig,
};
use kgrec::encoder::{encode_graph, EncoderConfig};
use kgrec::evalkit::{
    avg_entity_number, distinct_n, rank_metrics, read_jsonl, repetition_stats, verify_novelty,
    write_jsonl, write_projection_csv, MetricReport, PredictionEvent, ResponseEvent,
};
use kgrec::generator::{generate_response, GenConfig};
use kgrec::kg::{
    build_domain_kg, load_domain_records, load_graph_files, KnowledgeGraph, Thresholds,
};
use kgrec::math::{Matrix, ParamSet};
use kgrec::recommender::{
    find_mention_markers, link_entities, link_text, pooled_history, predict, recommend_topk,
    Lexicon,
};
use kgrec::trainer::{
    prepare_gen_examples, train_generator, train_recommender, write_loss_curve, TrainConfig,
    TrainOutcome,
};
use kgrec::vocab::Vocabulary;
use kgrec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "kgrec",
    version,
    about = "Knowledge-grounded conversational recommender"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a knowledge graph from movie records.
    BuildKg(BuildKgArgs),
    /// Print node and edge tallies for a stored graph.
    Stats(StatsArgs),
    /// Train the recommender and log test-split predictions.
    TrainRec(TrainRecArgs),
    /// Train the generator against a trained recommender.
    TrainGen(TrainGenArgs),
    /// Score prediction and response logs into a metric report.
    Evaluate(EvaluateArgs),
    /// Export a 2-D projection of word and entity embeddings.
    Project(ProjectArgs),
    /// Interactive recommendation chat over stdin/stdout.
    Chat(ChatArgs),
    /// Generate the synthetic corpus and its graph.
    Synth(SynthArgs),
}

#[derive(Args)]
struct BuildKgArgs {
    /// Movie records, one JSON object per line.
    #[arg(long)]
    records: PathBuf,
    /// Output directory for entities.tsv and triples.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Keep keywords appearing in at least this many records.
    #[arg(long)]
    keyword: Option<usize>,
    /// Keep cast members appearing in at least this many records.
    #[arg(long)]
    cast: Option<usize>,
    /// Keep companies appearing in at least this many records.
    #[arg(long)]
    company: Option<usize>,
    /// Keep crew members appearing in at least this many records.
    #[arg(long)]
    crew: Option<usize>,
    /// Keep genres appearing in at least this many records.
    #[arg(long)]
    genre: Option<usize>,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory holding entities.tsv and triples.tsv.
    #[arg(long)]
    kg: PathBuf,
}

#[derive(Args)]
struct TrainRecArgs {
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kg: PathBuf,
    /// Conversation corpus: a JSONL file or a directory holding
    /// conversations.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trained recommender checkpoint directory.
    #[arg(long)]
    rec_ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction log (JSONL of ranking events).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Response log (JSONL of generated responses).
    #[arg(long)]
    resp: Option<PathBuf>,
    #[arg(long)]
    kg: PathBuf,
    /// Where to write the JSON metric report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    /// Generator checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV of x,y,label points.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    rec_ckpt: PathBuf,
    #[arg(long)]
    gen_ckpt: PathBuf,
    #[arg(long)]
    kg: PathBuf,
    /// Recommendations to show per turn.
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// Entity-bias weight for decoding; defaults to the trained value.
    #[arg(long)]
    lambda3: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    convs: usize,
    #[arg(long, default_value_t = 10)]
    items: usize,
    #[arg(long, default_value_t = 6)]
    attrs: usize,
    #[arg(long, default_value_t = 60)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Everything the training subcommands read from `--config`. Any subset of
/// fields may be present; the rest keep their defaults.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    encoder: EncoderConfig,
    generator: GenConfig,
    /// Attention query width; defaults to the encoder output width.
    d_q: Option<usize>,
    min_freq: usize,
    /// Treat the "did not say" liked flag as liked.
    two_is_liked: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            generator: GenConfig::default(),
            d_q: None,
            min_freq: 2,
            two_is_liked: true,
        }
    }
}

/// Restore default SIGPIPE handling so piping into `head` kills the process
/// quietly instead of panicking on a closed stdout.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numerical(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BuildKg(a) => cmd_build_kg(a),
        Cmd::Stats(a) => cmd_stats(a),
        Cmd::TrainRec(a) => cmd_train_rec(a),
        Cmd::TrainGen(a) => cmd_train_gen(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Project(a) => cmd_project(a),
        Cmd::Chat(a) => cmd_chat(a),
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn kg_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("entities.tsv"), dir.join("triples.tsv"))
}

fn load_kg(dir: &Path) -> Result<KnowledgeGraph> {
    let (entities, triples) = kg_paths(dir);
    load_graph_files(&triples, &entities)
}

fn load_corpus(data: &Path, graph: &KnowledgeGraph) -> Result<Vec<Conversation>> {
    let path = if data.is_dir() {
        data.join("conversations.jsonl")
    } else {
        data.to_path_buf()
    };
    let file = std::fs::File::open(&path)?;
    load_conversations(BufReader::new(file), graph)
}

fn cmd_build_kg(a: BuildKgArgs) -> Result<()> {
    let file = std::fs::File::open(&a.records)?;
    let records = load_domain_records(BufReader::new(file))?;
    let d = Thresholds::default();
    let thresholds = Thresholds {
        keyword: a.keyword.unwrap_or(d.keyword),
        cast: a.cast.unwrap_or(d.cast),
        company: a.company.unwrap_or(d.company),
        crew: a.crew.unwrap_or(d.crew),
        genre: a.genre.unwrap_or(d.genre),
    };
    let graph = build_domain_kg(&records, thresholds)?;
    std::fs::create_dir_all(&a.out)?;
    let (entities, triples) = kg_paths(&a.out);
    graph.save(&entities, &triples)?;
    println!("{}", serde_json::to_string_pretty(&graph.stats())?);
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let graph = load_kg(&a.kg)?;
    println!("{}", serde_json::to_string_pretty(&graph.stats())?);
    Ok(())
}

/// Replay a conversation and log one ranking event per recommender message
/// that introduces at least one new, liked item. The ranking covers every
/// item not yet mentioned, so downstream metrics may clamp their cutoffs.
fn prediction_events(
    params: &ParamSet,
    table: &Matrix,
    graph: &KnowledgeGraph,
    lexicon: &Lexicon,
    convs: &[Conversation],
    two_is_liked: bool,
) -> Result<Vec<PredictionEvent>> {
    let mut events = Vec::new();
    for conv in convs {
        let sources = conv.link_sources();
        let mut history: Vec<usize> = Vec::new();
        let mut seen_items: BTreeSet<usize> = BTreeSet::new();
        for (mi, msg) in conv.messages.iter().enumerate() {
            if msg.speaker == Speaker::Recommender {
                let mut gold = Vec::new();
                for (_, marker) in find_mention_markers(&msg.text) {
                    let Some(&entity) = conv.markers.get(&marker) else {
                        continue;
                    };
                    let Some(flags) = conv.flags.get(&marker) else {
                        continue;
                    };
                    if flags.suggested
                        && flags.is_liked(two_is_liked)
                        && !seen_items.contains(&entity)
                        && !gold.contains(&entity)
                    {
                        gold.push(entity);
                    }
                }
                if !gold.is_empty() {
                    let pred = predict(params, table, graph, &history)?;
                    let k = graph.item_ids().len();
                    let (ranked, _) = recommend_topk(&pred.probs, graph, k, &seen_items);
                    events.push(PredictionEvent {
                        conversation_id: conv.id.clone(),
                        turn: mi,
                        ranked_item_ids: ranked,
                        mentioned_item_ids: seen_items.iter().copied().collect(),
                        gold_liked_flags: vec![true; gold.len()],
                        gold_item_ids: gold,
                    });
                }
            }
            let linked = link_entities(&sources[mi..mi + 1], lexicon)?;
            for &e in &linked.entity_ids {
                if graph.is_item(e) {
                    seen_items.insert(e);
                }
            }
            history.extend(linked.entity_ids);
        }
    }
    Ok(events)
}

fn rec_examples_for(
    convs: &[Conversation],
    graph: &KnowledgeGraph,
    lexicon: &Lexicon,
    two_is_liked: bool,
) -> Result<Vec<kgrec::recommender::RecTrainingExample>> {
    let mut out = Vec::new();
    for conv in convs {
        out.extend(make_rec_examples(conv, graph, lexicon, two_is_liked)?);
    }
    Ok(out)
}

fn report_outcome(kind: &str, outcome: &TrainOutcome, out: &Path) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "kind": kind,
            "epochs_run": outcome.curve.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val,
            "diverged": outcome.diverged,
            "out": out.display().to_string(),
        }))?
    );
    if outcome.diverged {
        return Err(Error::numerical(
            "training diverged; the last finite checkpoint was saved",
        ));
    }
    Ok(())
}

fn cmd_train_rec(a: TrainRecArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let graph = load_kg(&a.kg)?;
    let convs = load_corpus(&a.data, &graph)?;
    let split = split_dataset(&convs, cfg.train.seed)?;
    let lexicon = Lexicon::from_graph(&graph);
    let d_q = cfg.d_q.unwrap_or(cfg.encoder.d_f);

    let train = rec_examples_for(&split.train, &graph, &lexicon, cfg.two_is_liked)?;
    let valid = rec_examples_for(&split.valid, &graph, &lexicon, cfg.two_is_liked)?;
    let outcome = train_recommender(&graph, &cfg.encoder, d_q, &train, &valid, &cfg.train)?;

    std::fs::create_dir_all(&a.out)?;
    let extra = json!({
        "kind": "rec",
        "encoder": cfg.encoder,
        "d_q": d_q,
        "train": cfg.train,
        "two_is_liked": cfg.two_is_liked,
    });
    save_checkpoint(&a.out, &outcome.params, &extra)?;
    write_loss_curve(&a.out.join("curve.csv"), &outcome.curve)?;

    let table = encode_graph(&outcome.params, &graph, &cfg.encoder)?;
    let events = prediction_events(
        &outcome.params,
        &table,
        &graph,
        &lexicon,
        &split.test,
        cfg.two_is_liked,
    )?;
    write_jsonl(&a.out.join("predictions.jsonl"), &events)?;
    report_outcome("rec", &outcome, &a.out)
}

fn load_rec_checkpoint(dir: &Path) -> Result<(ParamSet, EncoderConfig, bool)> {
    let (params, extra) = load_checkpoint(dir)?;
    if extra["kind"] != "rec" {
        return Err(Error::data(format!(
            "{} is not a recommender checkpoint",
            dir.display()
        )));
    }
    let enc_cfg: EncoderConfig = serde_json::from_value(extra["encoder"].clone())?;
    let two_is_liked = extra["two_is_liked"].as_bool().unwrap_or(true);
    Ok((params, enc_cfg, two_is_liked))
}

fn load_gen_checkpoint(dir: &Path) -> Result<(ParamSet, GenConfig, f64, Vocabulary)> {
    let (params, extra) = load_checkpoint(dir)?;
    if extra["kind"] != "gen" {
        return Err(Error::data(format!(
            "{} is not a generator checkpoint",
            dir.display()
        )));
    }
    let gen_cfg: GenConfig = serde_json::from_value(extra["generator"].clone())?;
    let lambda3 = extra["lambda3"].as_f64().unwrap_or(0.1);
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    Ok((params, gen_cfg, lambda3, vocab))
}

fn cmd_train_gen(a: TrainGenArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let graph = load_kg(&a.kg)?;
    let (rec_params, enc_cfg, _) = load_rec_checkpoint(&a.rec_ckpt)?;
    let table = encode_graph(&rec_params, &graph, &enc_cfg)?;
    let gen_cfg = cfg.generator;
    if gen_cfg.d_f != table.cols() {
        return Err(Error::data(format!(
            "generator expects pooled width {} but the recommender produces {}",
            gen_cfg.d_f,
            table.cols()
        )));
    }

    let convs = load_corpus(&a.data, &graph)?;
    let split = split_dataset(&convs, cfg.train.seed)?;
    let lexicon = Lexicon::from_graph(&graph);
    let vocab = build_vocab(&split.train, &graph, cfg.min_freq);

    let mut raw_train = Vec::new();
    for conv in &split.train {
        raw_train.extend(make_gen_examples(
            conv,
            &graph,
            &vocab,
            &lexicon,
            gen_cfg.max_response,
        )?);
    }
    let mut raw_valid = Vec::new();
    for conv in &split.valid {
        raw_valid.extend(make_gen_examples(
            conv,
            &graph,
            &vocab,
            &lexicon,
            gen_cfg.max_response,
        )?);
    }
    let prepared_train =
        prepare_gen_examples(&raw_train, &graph, &vocab, &rec_params, &table, &gen_cfg)?;
    let prepared_valid =
        prepare_gen_examples(&raw_valid, &graph, &vocab, &rec_params, &table, &gen_cfg)?;

    let outcome = train_generator(
        &table,
        vocab.len(),
        &gen_cfg,
        &prepared_train,
        &prepared_valid,
        &cfg.train,
    )?;

    std::fs::create_dir_all(&a.out)?;
    let mut saved = outcome.params.clone();
    saved.insert("frozen.entity_table", table.clone());
    let extra = json!({
        "kind": "gen",
        "generator": gen_cfg,
        "train": cfg.train,
        "lambda3": cfg.train.lambda3,
    });
    save_checkpoint(&a.out, &saved, &extra)?;
    vocab.save(&a.out.join("vocab.json"))?;
    write_loss_curve(&a.out.join("curve.csv"), &outcome.curve)?;

    let mut responses = Vec::new();
    for conv in &split.test {
        for ex in make_gen_examples(conv, &graph, &vocab, &lexicon, gen_cfg.max_response)? {
            let pooled = pooled_history(&rec_params, &table, &ex.history.entity_ids)?;
            let tokens = generate_response(
                &ex.context_texts,
                &Matrix::row_vector(&pooled),
                &outcome.params,
                &vocab,
                &table,
                &gen_cfg,
                cfg.train.lambda3,
            )?;
            let text = vocab.decode(&tokens);
            let entity_token_ids = tokens
                .iter()
                .copied()
                .filter(|t| vocab.entity_token_map().contains_key(t))
                .collect();
            responses.push(ResponseEvent {
                conversation_id: ex.conversation_id.clone(),
                turn: ex.turn,
                tokens,
                text,
                entity_token_ids,
            });
        }
    }
    write_jsonl(&a.out.join("responses.jsonl"), &responses)?;
    report_outcome("gen", &outcome, &a.out)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pred.is_none() && a.resp.is_none() {
        return Err(Error::data("pass --pred and/or --resp; nothing to score"));
    }
    let graph = load_kg(&a.kg)?;
    let lexicon = Lexicon::from_graph(&graph);
    let mut report = MetricReport {
        rank: None,
        generation: None,
        repetition: None,
        novelty_ok: true,
    };
    if let Some(pred) = &a.pred {
        let events: Vec<PredictionEvent> = read_jsonl(pred)?;
        report.novelty_ok = verify_novelty(&events).is_ok();
        let shortest = events
            .iter()
            .map(|e| e.ranked_item_ids.len())
            .min()
            .unwrap_or(0);
        let ks: Vec<usize> = [1, 5, 10, 50]
            .into_iter()
            .filter(|&k| k <= shortest)
            .collect();
        if ks.is_empty() {
            return Err(Error::data(
                "prediction log has a ranking too short for any cutoff",
            ));
        }
        if ks.len() < 4 {
            eprintln!("note: rankings hold {shortest} items; cutoffs limited to {ks:?}");
        }
        report.rank = Some(rank_metrics(&events, &ks)?);
        report.repetition = Some(repetition_stats(&events)?);
    }
    if let Some(resp) = &a.resp {
        let events: Vec<ResponseEvent> = read_jsonl(resp)?;
        let token_lists: Vec<Vec<usize>> = events.iter().map(|e| e.tokens.clone()).collect();
        let texts: Vec<String> = events.iter().map(|e| e.text.clone()).collect();
        let mut dn = std::collections::BTreeMap::new();
        for n in [2usize, 3, 4] {
            dn.insert(n, distinct_n(&token_lists, n)?);
        }
        report.generation = Some(kgrec::evalkit::GenReport {
            distinct_n: dn,
            aen: avg_entity_number(&texts, &lexicon)?,
            responses: events.len(),
        });
    }
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.out, format!("{text}\n"))?;
    println!("{text}");
    if !report.novelty_ok {
        return Err(Error::data(
            "novelty violation: a ranked item appears in its mentioned set",
        ));
    }
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let (params, extra) = load_checkpoint(&a.checkpoint)?;
    if extra["kind"] != "gen" {
        return Err(Error::data(
            "projection needs a generator checkpoint (word embeddings plus the frozen entity table)",
        ));
    }
    for required in ["gen.embed", "gen.phi_prime", "frozen.entity_table"] {
        if !params.contains(required) {
            return Err(Error::data(format!("checkpoint lacks tensor {required:?}")));
        }
    }
    let words = params.get("gen.embed");
    let entities = params
        .get("frozen.entity_table")
        .matmul(params.get("gen.phi_prime"));
    let mut stacked = Vec::with_capacity((words.rows() + entities.rows()) * words.cols());
    stacked.extend_from_slice(words.data());
    stacked.extend_from_slice(entities.data());
    let all = Matrix::from_vec(words.rows() + entities.rows(), words.cols(), stacked);
    let points = kgrec::evalkit::pca_project(&all)?;
    let mut labels = vec!["word".to_string(); words.rows()];
    labels.extend(vec!["entity".to_string(); entities.rows()]);
    write_projection_csv(&a.out, &points, &labels)?;
    println!(
        "{}",
        json!({"points": points.len(), "out": a.out.display().to_string()})
    );
    Ok(())
}

fn cmd_chat(a: ChatArgs) -> Result<()> {
    let graph = load_kg(&a.kg)?;
    let (rec_params, enc_cfg, _) = load_rec_checkpoint(&a.rec_ckpt)?;
    let (gen_params, gen_cfg, trained_lambda3, vocab) = load_gen_checkpoint(&a.gen_ckpt)?;
    let lambda3 = a.lambda3.unwrap_or(trained_lambda3);
    if a.topk == 0 {
        return Err(Error::data("topk must be at least 1"));
    }
    let table = encode_graph(&rec_params, &graph, &enc_cfg)?;
    let lexicon = Lexicon::from_graph(&graph);

    let mut transcript: Vec<String> = Vec::new();
    let mut history: Vec<usize> = Vec::new();
    let mut mentioned: BTreeSet<usize> = BTreeSet::new();

    eprintln!("chat ready; empty line or :quit to leave");
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text == ":quit" {
            break;
        }
        absorb(text, &lexicon, &graph, &mut history, &mut mentioned);
        transcript.push(text.to_string());

        let pred = predict(&rec_params, &table, &graph, &history)?;
        let (ranked, _) = recommend_topk(&pred.probs, &graph, a.topk, &mentioned);
        let tokens = generate_response(
            &transcript,
            &Matrix::row_vector(&pred.pooled),
            &gen_params,
            &vocab,
            &table,
            &gen_cfg,
            lambda3,
        )?;
        let reply = vocab.decode(&tokens);
        println!("bot> {reply}");
        let names: Vec<String> = ranked
            .iter()
            .enumerate()
            .map(|(i, &id)| format!("{}. {}", i + 1, graph.entity_name(id)))
            .collect();
        println!("rec> {}", names.join("  "));

        absorb(&reply, &lexicon, &graph, &mut history, &mut mentioned);
        transcript.push(reply);
        // Shown recommendations count as mentioned and are never repeated.
        mentioned.extend(ranked);
    }
    Ok(())
}

fn absorb(
    text: &str,
    lexicon: &Lexicon,
    graph: &KnowledgeGraph,
    history: &mut Vec<usize>,
    mentioned: &mut BTreeSet<usize>,
) {
    let linked = link_text(text, lexicon);
    for &e in &linked {
        if graph.is_item(e) {
            mentioned.insert(e);
        }
    }
    history.extend(linked);
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_convs: a.convs,
        num_items: a.items,
        num_attrs: a.attrs,
        vocab_size: a.vocab,
        seed: a.seed,
    };
    let (convs, graph) = kgrec::corpus::synth_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let (entities, triples) = kg_paths(&a.out);
    graph.save(&entities, &triples)?;
    save_conversations(&a.out.join("conversations.jsonl"), &convs, &graph)?;
    println!(
        "{}",
        json!({
            "conversations": convs.len(),
            "entities": graph.num_entities(),
            "items": graph.item_ids().len(),
            "out": a.out.display().to_string(),
        })
    );
    Ok(())
}
