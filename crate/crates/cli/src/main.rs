//! Command-line pipeline around the core library.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use snps3_core::defaults;
use snps3_core::encoder::{count_params, reduction_fraction, EncoderConfig, Variant, R50_VISUAL_PARAMS};
use snps3_core::error::Error;
use snps3_core::featfile;
use snps3_core::harness;
use snps3_core::hashing::{record_seed, sha256_hex};
use snps3_core::jsonl;
use snps3_core::losses;
use snps3_core::miner::{
    build_chosen_list, count_significant_parallel, threshold_topk, CaptionRecord, PosCorpus,
    SignificantVocab,
};
use snps3_core::planner::{plan_mlm, plan_mssm, sample_lvwm, PlanRecord};
use snps3_core::tokenizer::{load_vocab, wordpiece_tokenize};

#[derive(Parser)]
#[command(
    name = "snps3",
    version,
    about = "Significant-semantic mining, masking plans, matching losses, and parameter accounting for shared-network video-text pre-training",
    after_help = "Exit codes: 2 missing input file, 3 format/argument error, 4 vocabulary-hash mismatch.\n\
        Seeds: --seed flag, else the SNPS3_SEED environment variable, else 0.\n\
        Formats: pos.jsonl lines {\"id\",\"words\",\"tags\"}; corpus.jsonl lines {\"id\",\"caption\"};\n\
        sigvocab.json {\"k_ss\",\"threshold\",\"vocab_hash\",\"ids\"}; plan.jsonl lines\n\
        {\"id\",\"token_ids\",\"actions\",\"labels\",\"seed_trace\"} with actions coded K/M/R/S;\n\
        feature files carry a JSON header line then little-endian f32 values."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed; falls back to SNPS3_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> u64 {
        self.seed
            .or_else(|| {
                std::env::var("SNPS3_SEED")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(0)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mine the significant vocabulary from a POS-tagged corpus.
    Mine {
        /// POS-tagged corpus (pos.jsonl).
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Significant-vocabulary size.
        #[arg(long, short, default_value_t = defaults::K_SS)]
        k: usize,
        /// Drop duplicate (words, tags) records before counting.
        #[arg(long)]
        dedup: bool,
        /// Worker threads for the counting pass.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit per-caption chosen lists of significant token positions.
    Chosen {
        /// Caption corpus (corpus.jsonl).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Significant vocabulary (sigvocab.json).
        #[arg(long)]
        sig: PathBuf,
        #[arg(long, default_value_t = defaults::TOKEN_LEN)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit masking plans for a caption corpus.
    Plan {
        /// Masking mode: conventional or significant-only.
        #[arg(long, value_parser = ["mlm", "mssm"])]
        mode: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Significant vocabulary; required for mssm.
        #[arg(long)]
        sig: Option<PathBuf>,
        #[arg(long, default_value_t = defaults::MASK_RATE)]
        rate: f64,
        #[arg(long, default_value_t = defaults::TOKEN_LEN)]
        max_len: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample significant-token indices per caption for local matching.
    Lvwm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        sig: PathBuf,
        #[arg(long, default_value_t = defaults::N_L)]
        n_l: usize,
        #[arg(long, default_value_t = defaults::TOKEN_LEN)]
        max_len: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one loss kernel on feature files.
    Loss {
        #[command(subcommand)]
        kernel: LossKernel,
    },
    /// Itemized parameter counts for one architecture variant.
    CountParams {
        #[arg(long, value_parser = ["snp", "p3e"])]
        variant: String,
        /// Encoder config JSON; defaults to the 12-layer base setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fixed parameter count of the visual backbone.
        #[arg(long, default_value_t = R50_VISUAL_PARAMS)]
        visual_constant: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus, train the toy encoders, report retrieval.
    Demo {
        #[arg(long, default_value_t = 320)]
        size: usize,
        /// Held-out pairs for evaluation.
        #[arg(long, default_value_t = 64)]
        test_size: usize,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[command(flatten)]
        seed: SeedArg,
        /// Output directory for corpus.jsonl, sigvocab.json, and metrics.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LossKernel {
    /// Mean cross-entropy of masked-token logits.
    MaskedCe {
        /// Logits matrix, |Q| x V.
        #[arg(long)]
        logits: PathBuf,
        /// JSON file {"labels":[...]}.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter-free global matching of paired feature rows.
    GvtmFree {
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        txt: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scored global matching over a full square score matrix.
    GvtmScored {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local matching against a sampled token block.
    Lvwm {
        #[arg(long)]
        vis: PathBuf,
        /// Token block file (header carries n_l).
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 2,
        Error::Consistency(_) => 4,
        _ => 3,
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Io { .. } => "io",
        Error::Format(_) => "format",
        Error::Config(_) => "config",
        Error::Argument(_) => "argument",
        Error::Consistency(_) => "consistency",
        Error::EmptyMask => "empty-mask",
        Error::NonFinite { .. } => "non-finite",
        Error::Divergence { .. } => "divergence",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!(
            "{}",
            serde_json::json!({"error": err.to_string(), "kind": kind(&err)})
        );
        std::process::exit(exit_code(&err));
    }
}

fn write_text(path: &PathBuf, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_hash(path: &PathBuf) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn grad_norm(matrix: &losses::FeatureMatrix) -> f64 {
    matrix
        .data()
        .iter()
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt()
}

fn emit(out: Option<&PathBuf>, value: serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(&value).expect("report serializes") + "\n";
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_captions(path: &PathBuf) -> Result<Vec<CaptionRecord>, Error> {
    jsonl::read_records(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Mine {
            pos,
            vocab,
            k,
            dedup,
            workers,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let mut corpus = PosCorpus::load(&pos)?;
            if dedup {
                corpus = corpus.dedup();
            }
            let table = count_significant_parallel(&corpus, &vocab, workers);
            let sig = threshold_topk(&table, k)?;
            sig.save(&out)?;
            eprintln!(
                "mined {} significant tokens (threshold {}) from {} records",
                sig.ids().len(),
                sig.threshold,
                corpus.records.len()
            );
            Ok(())
        }

        Command::Chosen {
            corpus,
            vocab,
            sig,
            max_len,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let sig = SignificantVocab::load(&sig, &vocab)?;
            let records = load_captions(&corpus)?;
            let mut lines = vec![serde_json::json!({
                "artifact": "chosen",
                "vocab_hash": vocab.content_hash(),
                "k_ss": sig.k_ss,
                "max_len": max_len,
            })
            .to_string()];
            for rec in &records {
                let seq = wordpiece_tokenize(&rec.caption, &vocab, max_len)?;
                let chosen = build_chosen_list(&seq, &sig, &vocab)?;
                lines.push(
                    serde_json::json!({"id": rec.id, "positions": chosen.positions}).to_string(),
                );
            }
            write_text(&out, &(lines.join("\n") + "\n"))
        }

        Command::Plan {
            mode,
            corpus,
            vocab,
            sig,
            rate,
            max_len,
            seed,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let sig = match (mode.as_str(), sig) {
                ("mssm", Some(path)) => Some(SignificantVocab::load(&path, &vocab)?),
                ("mssm", None) => {
                    return Err(Error::Argument(
                        "--sig is required for mssm plans".to_string(),
                    ))
                }
                _ => None,
            };
            let records = load_captions(&corpus)?;
            let global_seed = seed.resolve();
            let mut lines = vec![serde_json::json!({
                "artifact": "plan",
                "mode": mode,
                "vocab_hash": vocab.content_hash(),
                "rate": rate,
                "seed": global_seed,
                "max_len": max_len,
            })
            .to_string()];
            for rec in &records {
                let seq = wordpiece_tokenize(&rec.caption, &vocab, max_len)?;
                let rec_seed = record_seed(global_seed, &rec.id);
                let plan = match &sig {
                    Some(sig) => {
                        let chosen = build_chosen_list(&seq, sig, &vocab)?;
                        plan_mssm(&seq, &chosen, rate, rec_seed)?
                    }
                    None => plan_mlm(&seq, rate, rec_seed)?,
                };
                lines.push(
                    serde_json::to_string(&PlanRecord::new(&rec.id, &seq, &plan))
                        .expect("plan serializes"),
                );
            }
            write_text(&out, &(lines.join("\n") + "\n"))
        }

        Command::Lvwm {
            corpus,
            vocab,
            sig,
            n_l,
            max_len,
            seed,
            out,
        } => {
            let vocab = load_vocab(&vocab)?;
            let sig = SignificantVocab::load(&sig, &vocab)?;
            let records = load_captions(&corpus)?;
            let global_seed = seed.resolve();
            let mut lines = vec![serde_json::json!({
                "artifact": "lvwm",
                "vocab_hash": vocab.content_hash(),
                "n_l": n_l,
                "seed": global_seed,
                "max_len": max_len,
            })
            .to_string()];
            let mut skipped = 0usize;
            for rec in &records {
                let seq = wordpiece_tokenize(&rec.caption, &vocab, max_len)?;
                let chosen = build_chosen_list(&seq, &sig, &vocab)?;
                let sample = sample_lvwm(&chosen, n_l, record_seed(global_seed, &rec.id))?;
                let indices = match sample {
                    Some(s) => serde_json::json!(s.indices),
                    None => {
                        skipped += 1;
                        serde_json::Value::Null
                    }
                };
                lines.push(serde_json::json!({"id": rec.id, "indices": indices}).to_string());
            }
            if skipped > 0 {
                eprintln!("{skipped} records had no significant tokens; indices set to null");
            }
            write_text(&out, &(lines.join("\n") + "\n"))
        }

        Command::Loss { kernel } => run_loss(kernel),

        Command::CountParams {
            variant,
            config,
            visual_constant,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => EncoderConfig::from_file(&path)?,
                None => EncoderConfig::default(),
            };
            cfg.variant = match variant.as_str() {
                "snp" => Variant::Snp,
                _ => Variant::P3e,
            };
            let report = count_params(&cfg, visual_constant);
            let mut value = serde_json::to_value(&report).expect("report serializes");
            if cfg.variant == Variant::P3e {
                let mut snp_cfg = cfg;
                snp_cfg.variant = Variant::Snp;
                let snp_report = count_params(&snp_cfg, visual_constant);
                value["reduction_vs_shared"] =
                    serde_json::json!(reduction_fraction(&report, &snp_report));
            }
            emit(out.as_ref(), value)
        }

        Command::Demo {
            size,
            test_size,
            steps,
            lr,
            seed,
            out,
        } => run_demo(size, test_size, steps, lr, seed.resolve(), out),
    }
}

fn run_loss(kernel: LossKernel) -> Result<(), Error> {
    match kernel {
        LossKernel::MaskedCe { logits, labels, out } => {
            let matrix = featfile::read_matrix(&logits)?;
            let text = std::fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
            let parsed: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", labels.display())))?;
            let label_ids: Vec<u32> = serde_json::from_value(
                parsed
                    .get("labels")
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("{}: missing \"labels\"", labels.display())))?,
            )
            .map_err(|e| Error::Format(format!("{}: {e}", labels.display())))?;
            let result = losses::masked_ce(&matrix, &label_ids)?;
            emit(
                out.as_ref(),
                serde_json::json!({
                    "kernel": "masked_ce",
                    "value": result.value,
                    "grad_norms": {"logits": grad_norm(&result.grads[0])},
                    "inputs_hash": {"logits": file_hash(&logits)?},
                }),
            )
        }
        LossKernel::GvtmFree { vis, txt, scale, out } => {
            let v = featfile::read_matrix(&vis)?;
            let t = featfile::read_matrix(&txt)?;
            let result = losses::gvtm_free(&v, &t, scale)?;
            emit(
                out.as_ref(),
                serde_json::json!({
                    "kernel": "gvtm_free",
                    "value": result.value,
                    "grad_norms": {
                        "vis": grad_norm(&result.grads[0]),
                        "txt": grad_norm(&result.grads[1]),
                    },
                    "inputs_hash": {"vis": file_hash(&vis)?, "txt": file_hash(&txt)?},
                }),
            )
        }
        LossKernel::GvtmScored { scores, out } => {
            let s = featfile::read_matrix(&scores)?;
            let result = losses::gvtm_scored(&s)?;
            emit(
                out.as_ref(),
                serde_json::json!({
                    "kernel": "gvtm_scored",
                    "value": result.value,
                    "grad_norms": {"scores": grad_norm(&result.grads[0])},
                    "inputs_hash": {"scores": file_hash(&scores)?},
                }),
            )
        }
        LossKernel::Lvwm { vis, tokens, scale, out } => {
            let v = featfile::read_matrix(&vis)?;
            let block = featfile::read_token_block(&tokens)?;
            let result = losses::lvwm(&v, &block, scale)?;
            emit(
                out.as_ref(),
                serde_json::json!({
                    "kernel": "lvwm",
                    "value": result.value,
                    "grad_norms": {
                        "vis": grad_norm(&result.grads[0]),
                        "tokens": grad_norm(&result.grads[1]),
                    },
                    "inputs_hash": {"vis": file_hash(&vis)?, "tokens": file_hash(&tokens)?},
                }),
            )
        }
    }
}

fn run_demo(
    size: usize,
    test_size: usize,
    steps: usize,
    lr: f64,
    seed: u64,
    out: PathBuf,
) -> Result<(), Error> {
    if test_size + 2 > size {
        return Err(Error::Argument(format!(
            "test split {test_size} leaves fewer than 2 of {size} records for training"
        )));
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let vocab = harness::toy_vocab();
    let records = harness::gen_corpus(seed, size, &vocab)?;
    let (train, test) = records.split_at(size - test_size);

    let mut corpus_lines = vec![serde_json::json!({
        "artifact": "corpus",
        "vocab_hash": vocab.content_hash(),
        "seed": seed,
    })
    .to_string()];
    for rec in &records {
        corpus_lines
            .push(serde_json::json!({"id": rec.id, "caption": rec.caption}).to_string());
    }
    write_text(&out.join("corpus.jsonl"), &(corpus_lines.join("\n") + "\n"))?;

    let dim = harness::visual_dim();
    let mut vis_raw = Vec::with_capacity(records.len() * dim);
    for rec in &records {
        vis_raw.extend_from_slice(&rec.visual);
    }
    featfile::write_matrix(
        out.join("visual.bin"),
        &losses::FeatureMatrix::new(records.len(), dim, vis_raw)
            .expect("generator emits finite vectors"),
    )?;

    let mut cfg = harness::TrainConfig {
        steps,
        lr,
        seed,
        ..Default::default()
    };
    cfg.batch_size = cfg.batch_size.min(train.len());
    let seqs: Vec<_> = test
        .iter()
        .map(|r| wordpiece_tokenize(&r.caption, &vocab, cfg.max_len))
        .collect::<Result<_, _>>()?;

    let mut summary = serde_json::Map::new();
    let mut sig_saved = false;
    for (label, objectives) in [
        (
            "global_only",
            harness::ObjectiveSet {
                global_match: true,
                local_match: false,
            },
        ),
        (
            "global_plus_local",
            harness::ObjectiveSet {
                global_match: true,
                local_match: true,
            },
        ),
    ] {
        let outcome = harness::train_toy(train, &vocab, objectives, &cfg)?;
        if !sig_saved {
            outcome.significant.save(out.join("sigvocab.json"))?;
            sig_saved = true;
        }
        let (vis, txt) = harness::encode_pairs(test, &seqs, &outcome.encoders);
        let metrics = harness::eval_retrieval(&vis, &txt)?;
        let mut entry: serde_json::Value =
            serde_json::from_str(&metrics.to_json()).expect("metrics serialize");
        let first = outcome.loss_curve.first().copied().unwrap_or(0.0);
        let last = outcome.loss_curve.last().copied().unwrap_or(0.0);
        entry["first_loss"] = serde_json::json!(first);
        entry["final_loss"] = serde_json::json!(last);
        summary.insert(label.to_string(), entry);
    }
    let report = serde_json::json!({
        "seed": seed,
        "train_pairs": train.len(),
        "test_pairs": test.len(),
        "steps": steps,
        "lr": lr,
        "vocab_hash": vocab.content_hash(),
        "retrieval": summary,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&out.join("metrics.json"), &text)?;
    print!("{text}");
    Ok(())
}
