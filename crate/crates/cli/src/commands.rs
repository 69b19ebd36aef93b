use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::json;

use vlpert_core::data::{generate_corpus, load_corpus, save_corpus, SyntheticPair, FINDING_NAMES};
use vlpert_core::encoders::DualEncoder;
use vlpert_core::eval::{probe_model, random_structure_baseline, retrieval_eval, structure_eval, ProbeConfig};
use vlpert_core::gradcheck::run_suite;
use vlpert_core::perturbation::{TextPipeline, Vocabulary};
use vlpert_core::rng::derive_seed;
use vlpert_core::train::{epoch_means, CheckpointState, MetricsRow, TrainConfig, Trainer};

use crate::config::{to_flat, Layered};
use crate::manifest::RunManifest;
use crate::{
    Command, EvalRetrievalArgs, EvalStructureArgs, Failure, GenDataArgs, GradcheckArgs, ModelArgs, PerturbArgs,
    ProbeArgs, TrainArgs, DATA_DIR_ENV,
};

pub const MODEL_FILE: &str = "model.json";

pub fn run(command: Command, argv: &[String]) -> Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Perturb(a) => perturb(a, argv),
        Command::Train(a) => train(a, argv),
        Command::EvalStructure(a) => eval_structure(a, argv),
        Command::EvalRetrieval(a) => eval_retrieval(a, argv),
        Command::Probe(a) => probe(a, argv),
        Command::Gradcheck(a) => gradcheck(a, argv),
    }
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Maps configuration errors from the core crate to usage errors.
fn usage_on_config(e: vlpert_core::Error) -> Failure {
    match e {
        vlpert_core::Error::Config(msg) => Failure::Usage(msg),
        other => Failure::Runtime(other.into()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: GenDataArgs, argv: &[String]) -> Result<(), Failure> {
    let out = args.out.unwrap_or_else(default_data_dir);
    let pairs = generate_corpus(args.n, args.side, args.seed).map_err(|e| match e {
        vlpert_core::Error::InvalidArgument(msg) => Failure::Usage(msg),
        other => Failure::Runtime(other.into()),
    })?;
    save_corpus(&out, &pairs)?;
    let mut manifest = RunManifest::new("gen-data", argv)
        .seed("corpus", args.seed)
        .output("corpus", &out.join(vlpert_core::data::CORPUS_FILE));
    manifest.config = json!({"n": args.n, "side": args.side});
    manifest.write(&out)?;
    log::info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn perturb(args: PerturbArgs, argv: &[String]) -> Result<(), Failure> {
    let reader: Box<dyn BufRead> = if args.input.as_os_str() == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        let file = File::open(&args.input)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.input.display())))?;
        Box::new(std::io::BufReader::new(file))
    };
    let pipeline = TextPipeline::default();
    let mut sink: Box<dyn Write> = match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Box::new(BufWriter::new(File::create(dir.join("perturbations.jsonl"))?))
        }
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let report = pipeline.process(&line).with_context(|| format!("line {}", i + 1))?;
        let set = pipeline.perturbations(&report, derive_seed(args.seed, i as u64))?;
        let variants: Vec<_> = set
            .variants
            .iter()
            .map(|v| json!({"rule": v.rule.name(), "text": v.text(), "degenerate": v.degenerate}))
            .collect();
        serde_json::to_writer(&mut sink, &json!({"original": report.text(), "variants": variants}))
            .map_err(anyhow::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    if let Some(dir) = &args.out {
        RunManifest::new("perturb", argv)
            .seed("base", args.seed)
            .input("reports", &args.input)
            .output("perturbations", &dir.join("perturbations.jsonl"))
            .write(dir)?;
    }
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut layered = Layered::<TrainConfig>::new().file(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        layered = layered
            .set("seeds.data", derive_seed(seed, 0))?
            .set("seeds.init", derive_seed(seed, 1))?
            .set("seeds.perturbation", derive_seed(seed, 2))?;
    }
    let config = layered
        .set_opt("epochs", args.epochs)?
        .set_opt("weights.alpha", args.alpha)?
        .set_opt("weights.beta", args.beta)?
        .set_opt("weights.tau", args.tau)?
        .set_opt("weights.tau_local", args.tau_local)?
        .set_opt("batch_size", args.batch_size)?
        .set_opt("lr", args.lr)?
        .set_opt("momentum", args.momentum)?
        .set_opt("weight_decay", args.weight_decay)?
        .set_opt("checkpoint_every", args.checkpoint_every)?
        .set_opt("corpus", args.corpus.as_ref().map(|p| p.display().to_string()))?
        .build()?;
    Ok(config)
}

fn write_metrics(sink: &mut impl Write, rows: &[MetricsRow]) -> anyhow::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut *sink, row)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

fn train(args: TrainArgs, argv: &[String]) -> Result<(), Failure> {
    let resumed = match &args.resume {
        Some(path) => {
            let overridden = args.config.is_some()
                || args.seed.is_some()
                || args.alpha.is_some()
                || args.beta.is_some()
                || args.tau.is_some()
                || args.tau_local.is_some()
                || args.batch_size.is_some()
                || args.lr.is_some()
                || args.momentum.is_some()
                || args.weight_decay.is_some();
            if overridden {
                return Err(Failure::Usage(
                    "--resume takes its config from the checkpoint; only --epochs, --corpus and --checkpoint-every may be given".into(),
                ));
            }
            let mut state = CheckpointState::load(path).map_err(|e| Failure::Usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
            if let Some(e) = args.epochs {
                state.config.epochs = e;
            }
            if let Some(c) = args.checkpoint_every {
                state.config.checkpoint_every = c;
            }
            if let Some(c) = &args.corpus {
                state.config.corpus = Some(c.clone());
            }
            Some(state)
        }
        None => None,
    };
    let mut config = match &resumed {
        Some(state) => state.config.clone(),
        None => resolve_train_config(&args)?,
    };
    config.validate().map_err(usage_on_config)?;
    let corpus_path = config.corpus.clone().unwrap_or_else(default_data_dir);
    config.corpus = Some(corpus_path.clone());
    let corpus = load_corpus(&corpus_path)?;

    let mut trainer = match resumed {
        Some(mut state) => {
            state.config = config.clone();
            Trainer::resume(state, &corpus).map_err(usage_on_config)?
        }
        None => Trainer::new(config.clone(), &corpus).map_err(usage_on_config)?,
    };

    let out = &args.out;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    write_json(&out.join("config.json"), &to_flat(&config))?;
    let mut manifest = RunManifest::new("train", argv)
        .seed("data", config.seeds.data)
        .seed("init", config.seeds.init)
        .seed("perturbation", config.seeds.perturbation)
        .input("corpus", &corpus_path)
        .output("metrics", &out.join("metrics.jsonl"))
        .output("model", &out.join(MODEL_FILE))
        .output("checkpoints", &ckpt_dir)
        .output("results", &out.join("results.json"));
    if let Some(p) = &args.resume {
        manifest = manifest.input("resume", p);
    }
    manifest.config = to_flat(&config);
    manifest.write(out)?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    let mut history = Vec::new();
    while !trainer.finished() {
        let rows = trainer.run_epoch()?;
        write_metrics(&mut metrics, &rows)?;
        let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        log::info!("epoch {}/{}: mean total loss {mean:.6}", trainer.epoch(), config.epochs);
        history.extend(rows);
        if trainer.checkpoint_due() {
            let path = ckpt_dir.join(format!("epoch_{:04}.json", trainer.epoch()));
            trainer.checkpoint().save(&path)?;
        }
    }
    trainer.model.save(&out.join(MODEL_FILE))?;

    let means = epoch_means(&history);
    let mut csv = String::from("epoch,mean_total\n");
    for (e, m) in &means {
        csv.push_str(&format!("{e},{m}\n"));
    }
    std::fs::write(out.join("results.csv"), csv)?;
    write_json(
        &out.join("results.json"),
        &json!({
            "epochs_completed": trainer.epoch(),
            "perturbation_sets": trainer.perturbation_sets(),
            "epoch_mean_total": means.iter().map(|(e, m)| json!({"epoch": e, "mean_total": m})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn resolve_model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_model_and_pairs(args: &ModelArgs) -> Result<(DualEncoder, Vec<SyntheticPair>, PathBuf, PathBuf), Failure> {
    let model_path = resolve_model_path(&args.model);
    if !model_path.exists() {
        return Err(Failure::Usage(format!("model {} not found", model_path.display())));
    }
    let model = DualEncoder::load(&model_path, Vocabulary::shipped())?;
    let corpus_path = args.corpus.clone().unwrap_or_else(default_data_dir);
    let mut pairs = load_corpus(&corpus_path)?;
    if let Some(n) = args.limit {
        if n == 0 {
            return Err(Failure::Usage("--limit must be positive".into()));
        }
        pairs.truncate(n);
    }
    Ok((model, pairs, model_path, corpus_path))
}

fn eval_structure(args: EvalStructureArgs, argv: &[String]) -> Result<(), Failure> {
    let (model, pairs, model_path, corpus_path) = load_model_and_pairs(&args.model)?;
    let pipeline = TextPipeline::default();
    let result = structure_eval(&pairs, &model, &pipeline, args.seed)?;
    let baseline = random_structure_baseline(&pairs, &pipeline, args.seed)?;
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let summary = json!({"result": result, "random_baseline": baseline});
    write_json(&out.join("results.json"), &summary)?;
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!(
        "n_samples,{}\nn_correct,{}\naccuracy,{}\nrandom_baseline,{}\nskipped,{}\n",
        result.n_samples, result.n_correct, result.accuracy, baseline, result.skipped
    ));
    for (rule, count) in &result.per_rule {
        csv.push_str(&format!("outranked_by_{rule},{count}\n"));
    }
    std::fs::write(out.join("results.csv"), csv)?;
    let mut manifest = RunManifest::new("eval-structure", argv)
        .seed("perturbation", args.seed)
        .input("model", &model_path)
        .input("corpus", &corpus_path)
        .output("results", &out.join("results.json"));
    manifest.config = json!({"limit": args.model.limit});
    manifest.write(out)?;
    println!("{}", serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

fn eval_retrieval(args: EvalRetrievalArgs, argv: &[String]) -> Result<(), Failure> {
    let (model, pairs, model_path, corpus_path) = load_model_and_pairs(&args.model)?;
    let max_k = args.k.iter().copied().max().unwrap_or(0);
    if args.k.contains(&0) || max_k > pairs.len() {
        return Err(Failure::Usage(format!(
            "k values must be in 1..={} for {} pairs",
            pairs.len(),
            pairs.len()
        )));
    }
    let result = retrieval_eval(&pairs, &model, &TextPipeline::default(), &args.k)?;
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let n = result.n as f64;
    let random: Vec<f64> = result.k_values.iter().map(|&k| k as f64 / n).collect();
    let summary = json!({"result": result, "random_baseline": random});
    write_json(&out.join("results.json"), &summary)?;
    let mut csv = String::from("k,image_to_text,text_to_image,random_baseline\n");
    for (i, k) in result.k_values.iter().enumerate() {
        csv.push_str(&format!("{k},{},{},{}\n", result.image_to_text[i], result.text_to_image[i], random[i]));
    }
    std::fs::write(out.join("results.csv"), csv)?;
    let mut manifest = RunManifest::new("eval-retrieval", argv)
        .input("model", &model_path)
        .input("corpus", &corpus_path)
        .output("results", &out.join("results.json"));
    manifest.config = json!({"k": args.k, "limit": args.model.limit});
    manifest.write(out)?;
    println!("{}", serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

fn probe(args: ProbeArgs, argv: &[String]) -> Result<(), Failure> {
    let (model, pairs, model_path, corpus_path) = load_model_and_pairs(&args.model)?;
    let config = ProbeConfig {
        test_size: args.test_size,
        seed: args.seed,
        epochs: args.epochs,
        ..ProbeConfig::default()
    };
    let result = probe_model(&pairs, &model, &config).map_err(|e| match e {
        vlpert_core::Error::InvalidArgument(msg) => Failure::Usage(msg),
        other => Failure::Runtime(other.into()),
    })?;
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let per_finding: Vec<_> = result
        .accuracy
        .iter()
        .enumerate()
        .map(|(f, a)| json!({"finding": FINDING_NAMES.get(f).copied().unwrap_or("?"), "accuracy": a}))
        .collect();
    let summary = json!({"n_train": result.n_train, "n_test": result.n_test, "findings": per_finding});
    write_json(&out.join("results.json"), &summary)?;
    let mut csv = String::from("finding,accuracy\n");
    for (f, a) in result.accuracy.iter().enumerate() {
        csv.push_str(&format!("{},{a}\n", FINDING_NAMES.get(f).copied().unwrap_or("?")));
    }
    std::fs::write(out.join("results.csv"), csv)?;
    let mut manifest = RunManifest::new("probe", argv)
        .seed("split", args.seed)
        .input("model", &model_path)
        .input("corpus", &corpus_path)
        .output("results", &out.join("results.json"));
    manifest.config = serde_json::to_value(&config).map_err(anyhow::Error::from)?;
    manifest.write(out)?;
    println!("{}", serde_json::to_string(&summary).map_err(anyhow::Error::from)?);
    Ok(())
}

fn gradcheck(args: GradcheckArgs, argv: &[String]) -> Result<(), Failure> {
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let report = run_suite(args.seeds, args.seed)?;
    println!("{:<32} {:>9} {:>14}  status", "function", "instances", "max rel error");
    for c in &report.cases {
        println!(
            "{:<32} {:>9} {:>14.3e}  {}",
            c.name,
            c.instances,
            c.max_relative_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("results.json"), &report)?;
        let mut csv = String::from("function,instances,max_relative_error,passed\n");
        for c in &report.cases {
            csv.push_str(&format!("{},{},{},{}\n", c.name, c.instances, c.max_relative_error, c.passed));
        }
        std::fs::write(out.join("results.csv"), csv)?;
        let mut manifest = RunManifest::new("gradcheck", argv)
            .seed("base", args.seed)
            .output("results", &out.join("results.json"));
        manifest.config = json!({"seeds": args.seeds, "step": report.step, "tolerance": report.tolerance});
        manifest.write(out)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "gradient check failed: max relative error at or above {}",
            report.tolerance
        )))
    }
}
