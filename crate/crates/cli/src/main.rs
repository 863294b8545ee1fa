use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use retro_core::engine::{evaluate_query, predict_single_step, Beam, Candidate};
use retro_core::explain::{apex_contributions, attention_heatmaps, reaction_type_trace, ApexConfig, ExplainTask};
use retro_core::model::{Checkpoint, Model, ModelConfig};
use retro_core::molgraph::parse_smiles;
use retro_core::planner::{BuildingBlocks, PlanLimits, PlanSession};
use retro_core::reaction::{
    build_vocab, extract_labels, load_corpus, parse_reaction, LeavingGroupVocab, Split, DEFAULT_MAX_H_CHANGE,
};
use retro_core::trainer::{evaluate_topk, Ablations, TrainConfig, Trainer};
use retro_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "retro", version, about = "Template-free retrosynthesis: train, predict, plan, explain, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the leaving-group vocabulary of a corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model, or continue from a checkpoint.
    Train(TrainArgs),
    /// Ranked single-step reactant predictions for a product.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: String,
        #[arg(long)]
        class: Option<u8>,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Energy of a proposed reactant set for a product.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        product: String,
        /// Dot-separated reactants.
        #[arg(long)]
        reactants: String,
        #[arg(long)]
        class: Option<u8>,
    },
    /// Multi-step route search down to building blocks.
    Plan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_expansions: usize,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 1)]
        routes: usize,
        #[arg(long)]
        class: Option<u8>,
        /// Write the routes as JSON here instead of after the text tree.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Atom contributions and attention-bias heatmaps.
    #[command(subcommand)]
    Explain(ExplainCommand),
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "RETRO_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "RETRO_BLOCKS")]
        blocks: PathBuf,
        #[arg(long, env = "RETRO_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "RETRO_HOST", default_value = "127.0.0.1")]
        host: String,
        /// Idle seconds before a planning session is dropped.
        #[arg(long, env = "RETRO_SESSION_TTL", default_value_t = 1800)]
        session_ttl: u64,
        /// Seconds before a request is answered with 503.
        #[arg(long, env = "RETRO_TIMEOUT", default_value_t = 120)]
        timeout: u64,
        /// Directory of static files (the route explorer build).
        #[arg(long, env = "RETRO_STATIC_DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BeamArgs {
    #[arg(long, default_value_t = 10)]
    beam_lg: usize,
    #[arg(long, default_value_t = 4)]
    beam_conn: usize,
    #[arg(long, default_value_t = 4)]
    beam_bond: usize,
    /// One choice per action instead of a joint beam.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Atom-mapped corpus CSV (`id,class,reaction`).
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (model and optimizer state).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Leaving-group vocabulary; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Temperature of the task-weight softmax.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    /// Weight bond and hydrogen losses separately (four tasks).
    #[arg(long)]
    four_tasks: bool,
    /// Supervise only changed bonds and atoms.
    #[arg(long)]
    positive_only: bool,
    #[arg(long)]
    no_cl: bool,
    #[arg(long)]
    no_sa: bool,
    #[arg(long)]
    no_jl: bool,
    #[arg(long)]
    mask_local: bool,
    #[arg(long)]
    mask_global: bool,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    d_k: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    max_hop: usize,
    /// Learn reaction-type embeddings from the corpus classes.
    #[arg(long)]
    reaction_types: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics log (one tab-separated line per step); stderr when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Report top-1/3/5/10 accuracy on the training records at the end.
    #[arg(long)]
    eval: bool,
}

#[derive(Subcommand)]
enum ExplainCommand {
    /// Per-atom loss change when each atom is masked.
    Apex(ExplainArgs),
    /// Per-atom contributions under each reaction type.
    Trace(ExplainArgs),
    /// Attention-bias heatmaps and their RV against the global item.
    Heads {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: String,
        /// Write the full report, with matrices, as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Atom-mapped `reactants>>product`.
    #[arg(long)]
    reaction: String,
    #[arg(long)]
    class: Option<u8>,
    /// rcp, lgm, lgc or overall.
    #[arg(long, default_value = "overall")]
    task: String,
    /// Task-weight temperature used to freeze the overall weights.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Vocab { corpus, out } => vocab(&corpus, out.as_deref()),
        Command::Train(args) => train(args),
        Command::Predict {
            checkpoint,
            smiles,
            class,
            topk,
            beam,
        } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let product = parse_smiles(&smiles).with_context(|| format!("parsing '{smiles}'"))?;
            let beam = Beam {
                n_lg: beam.beam_lg,
                n_conn: beam.beam_conn,
                n_bond: beam.beam_bond,
                k_out: topk,
                greedy: beam.greedy,
            };
            let out = predict_single_step(&model, &product, class, &beam)?;
            let mut w = io::stdout().lock();
            for (i, c) in out.iter().enumerate() {
                writeln!(w, "{}", candidate_line(i + 1, c))?;
            }
            Ok(())
        }
        Command::Query {
            checkpoint,
            product,
            reactants,
            class,
        } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let p = parse_smiles(&product).with_context(|| format!("parsing '{product}'"))?;
            let r = parse_smiles(&reactants).with_context(|| format!("parsing '{reactants}'"))?;
            let c = evaluate_query(&model, &p, &r.split_components(), class)?;
            println!("{}", candidate_line(1, &c));
            Ok(())
        }
        Command::Plan {
            checkpoint,
            target,
            blocks,
            max_expansions,
            depth,
            topk,
            routes,
            class,
            json,
        } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let blocks = Arc::new(BuildingBlocks::load(&blocks)?);
            let limits = PlanLimits {
                max_expansions,
                max_depth: depth,
                topk_per_expand: topk,
                max_routes: routes,
            };
            let mut session = PlanSession::new(&target, blocks, limits)?;
            session.reaction_type = class;
            let found = session.run(&model)?;
            let mut w = io::stdout().lock();
            for r in &found {
                write!(w, "{}", r.to_text())?;
            }
            let dump = serde_json::to_string_pretty(&found)?;
            match json {
                Some(path) => std::fs::write(&path, dump).with_context(|| format!("writing {}", path.display()))?,
                None => writeln!(w, "{dump}")?,
            }
            Ok(())
        }
        Command::Explain(cmd) => explain(cmd),
        Command::Serve {
            checkpoint,
            blocks,
            port,
            host,
            session_ttl,
            timeout,
            static_dir,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let blocks = BuildingBlocks::load(&blocks)?;
            let config = ServiceConfig {
                session_ttl: Duration::from_secs(session_ttl),
                request_timeout: Duration::from_secs(timeout),
                static_dir,
                apex: ApexConfig::from_train_state(ck.train.as_ref(), 1.0),
                ..ServiceConfig::default()
            };
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
            let state = AppState::new(ck.model, blocks, config);
            eprintln!("listening on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(retro_service::serve(addr, state))?;
            Ok(())
        }
    }
}

/// `rank, total, ΔE1..ΔE4, reactants`, tab separated.
fn candidate_line(rank: usize, c: &Candidate) -> String {
    let d = c.trace.deltas();
    format!("{rank}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}", c.energy(), d[0], d[1], d[2], d[3], c.key())
}

fn vocab(corpus: &Path, out: Option<&Path>) -> Result<()> {
    let load = load_corpus(corpus, Split::Train)?;
    for e in &load.errors {
        eprintln!("skipped row: {e}");
    }
    let (vocab, stats) = build_vocab(&load.records, DEFAULT_MAX_H_CHANGE);
    if let Some(out) = out {
        vocab.save(out)?;
    }
    println!("records\t{}", stats.records);
    println!("labelled\t{}", stats.labelled);
    println!("skipped\t{}", stats.skipped);
    println!("leaving_groups\t{}", stats.distinct);
    println!("lg_ratio\t{:.6}", stats.lg_ratio());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let load = load_corpus(&a.corpus, Split::Train)?;
    for e in &load.errors {
        eprintln!("skipped row: {e}");
    }
    let ablations = Ablations {
        no_cl: a.no_cl,
        no_sa: a.no_sa,
        no_jl: a.no_jl,
        mask_local: a.mask_local,
        mask_global: a.mask_global,
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        tau_weights: a.tau,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        fuse_rcp: !a.four_tasks,
        positive_only: a.positive_only,
        ablations,
        seed: a.seed,
    };
    config.validate().map_err(anyhow::Error::msg)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::from_checkpoint(load_checkpoint(path)?, config),
        None => {
            let vocab = match &a.vocab {
                Some(p) => LeavingGroupVocab::load(p)?,
                None => build_vocab(&load.records, DEFAULT_MAX_H_CHANGE).0,
            };
            let mut mc = ModelConfig {
                d: a.d,
                d_k: a.d_k,
                n_head: a.heads,
                layers: a.layers,
                max_hop: a.max_hop,
                reaction_types: a.reaction_types,
                seed: a.seed,
                ..ModelConfig::default()
            };
            ablations.apply(&mut mc);
            Trainer::new(Model::new(mc, vocab)?, config)
        }
    };
    let mut pairs = Vec::new();
    let mut samples = Vec::new();
    for r in &load.records {
        let labels = match extract_labels(r, DEFAULT_MAX_H_CHANGE) {
            Ok(l) => l,
            Err(e) => {
                eprintln!("{}: no labels: {e}", r.id);
                continue;
            }
        };
        match trainer.sample(r, &labels) {
            Ok(s) => samples.push(s),
            Err(e) => {
                eprintln!("{}: {e}", r.id);
                continue;
            }
        }
        pairs.push((r.clone(), labels));
    }
    if samples.is_empty() {
        bail!("no trainable records in {}", a.corpus.display());
    }
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stderr()),
    };
    let records = trainer.fit(&samples, a.steps, Some(sink.as_mut()), |_, _| false)?;
    sink.flush()?;
    trainer.checkpoint().save(&a.out)?;
    eprintln!("{} steps, {} records, saved {}", records.len(), samples.len(), a.out.display());
    if a.eval {
        let table = evaluate_topk(&trainer.model, &pairs, &[1, 3, 5, 10], &Beam::default());
        println!("k\toverall\treaction_center\tlg_matching\tlg_connecting");
        for (i, k) in table.ks.iter().enumerate() {
            println!(
                "{k}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                table.overall[i], table.reaction_center[i], table.lg_matching[i], table.lg_connecting[i]
            );
        }
    }
    Ok(())
}

fn explain(cmd: ExplainCommand) -> Result<()> {
    match cmd {
        ExplainCommand::Apex(a) => {
            let (ck, record, labels, task, cfg) = explain_inputs(&a)?;
            let c = apex_contributions(&ck.model, &record, &labels, task, &cfg)?;
            print!("{}", c.to_text());
            Ok(())
        }
        ExplainCommand::Trace(a) => {
            let (ck, record, labels, task, cfg) = explain_inputs(&a)?;
            let t = reaction_type_trace(&ck.model, &record, &labels, task, &cfg)?;
            let mut w = io::stdout().lock();
            for (i, v) in t.vectors.iter().enumerate() {
                let scores: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                writeln!(w, "{i}\t{}\t{}", t.hard[i], scores.join("\t"))?;
            }
            Ok(())
        }
        ExplainCommand::Heads {
            checkpoint,
            smiles,
            json,
        } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let g = parse_smiles(&smiles).with_context(|| format!("parsing '{smiles}'"))?;
            let report = attention_heatmaps(&model, &g);
            for h in &report.heads {
                println!("{}\t{:.6}\t{}", h.head, h.rv, serde_json::to_value(h.class)?.as_str().unwrap_or(""));
            }
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            Ok(())
        }
    }
}

type ExplainInputs = (
    Checkpoint,
    retro_core::reaction::ReactionRecord,
    retro_core::reaction::RetroLabels,
    ExplainTask,
    ApexConfig,
);

fn explain_inputs(a: &ExplainArgs) -> Result<ExplainInputs> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let task: ExplainTask = a.task.parse().map_err(anyhow::Error::msg)?;
    let record = parse_reaction("query", a.class, &a.reaction)?;
    let labels = extract_labels(&record, DEFAULT_MAX_H_CHANGE)?;
    let cfg = ApexConfig::from_train_state(ck.train.as_ref(), a.tau);
    Ok((ck, record, labels, task, cfg))
}
