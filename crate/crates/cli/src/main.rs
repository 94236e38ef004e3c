use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use protosolo::checkpoint::{check_compatible, Checkpoint, TrainingMeta};
use protosolo::config::RunConfig;
use protosolo::data::{generate, load_image, load_split, write_dataset, Sample};
use protosolo::explainer::{explain_decision, top_classes, FeatureBank};
use protosolo::losses::SeparationSign;
use protosolo::metrics::{accuracy, fidelity_in, precision_table_in, prototype_compactness};
use protosolo::model::Model;
use protosolo::study::{ablation_variants, accuracy_table, run_variants};
use protosolo::trainer::{log_to_tsv, train};
use protosolo::{gradcheck, Tensor};

#[derive(Parser)]
#[command(name = "protosolo", version, about = "Single-prototype interpretable image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image-folder dataset with masks.
    GenData(GenData),
    /// Train a model and write a checkpoint plus epoch log.
    Train(TrainCmd),
    /// Top-1 test accuracy of a checkpoint.
    Eval(EvalCmd),
    /// Overlays and a JSON sidecar for one image's top classes.
    Explain(ExplainCmd),
    /// Prototype fidelity, Pr table and compactness.
    Metrics(MetricsCmd),
    /// Finite-difference gradient check on a seeded toy model.
    Gradcheck(GradcheckCmd),
    /// Train the four ablation variants and print an accuracy table.
    Ablate(AblateCmd),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            rc.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            rc.set(k.trim(), v.trim())?;
        }
        Ok(rc)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// fmc or vec.
    #[arg(long)]
    mode: Option<String>,
    /// sa or dense.
    #[arg(long)]
    agg: Option<String>,
    #[arg(long, conflicts_with = "no_projection")]
    projection: bool,
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExplainCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset the checkpoint was trained on; prototypes are drawn from its training split.
    #[arg(long)]
    data: PathBuf,
    /// Sample id from the dataset, e.g. `class_00-0005`.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    sample: Option<String>,
    /// Any image file, resized to the model input size.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MetricsCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    kappa: Option<f64>,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AblateCmd {
    /// Image-folder dataset; the synthetic desk dataset is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Directory for the table and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let run = match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn manifest(command: &str, rc: &RunConfig) -> String {
    format!(
        "# protosolo {}\ncommand = {command}\n{}",
        env!("CARGO_PKG_VERSION"),
        rc.to_text()
    )
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn sibling_temp(out: &Path) -> PathBuf {
    let name = out.file_name().map_or("out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Build `out` in a sibling temporary directory and rename it into place.
fn publish_dir(out: &Path, force: bool, manifest: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if out.exists() && !out.is_dir() {
        bail!("{} exists and is not a directory", out.display());
    }
    if is_nonempty_dir(out) && !force {
        bail!("{} is not empty (pass --force to replace it)", out.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = sibling_temp(out);
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let filled = fill(&tmp).and_then(|_| Ok(fs::write(tmp.join("run.txt"), manifest)?));
    if let Err(e) = filled {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))?;
    }
    fs::rename(&tmp, out).with_context(|| format!("moving output into {}", out.display()))?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling_temp(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn class_count(samples: &[Sample]) -> usize {
    samples.iter().map(|s| s.label).max().map_or(0, |m| m + 1)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut rc = RunConfig::default();
    rc.dataset.num_classes = a.classes;
    rc.dataset.per_class = a.per_class;
    rc.dataset.image_size = a.size;
    rc.dataset.seed = a.seed;
    rc.dataset.train_fraction = a.train_fraction;
    rc.dataset.validate()?;
    rc.model.num_classes = a.classes;
    rc.model.image_size = a.size;
    let spec = rc.dataset.clone();
    publish_dir(&a.out, a.force, &manifest("gen-data", &rc), |dir| Ok(write_dataset(&spec, dir)?))?;
    println!(
        "wrote {} classes x {} images at {} px to {}",
        spec.num_classes,
        spec.per_class,
        spec.image_size,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let mut rc = a.config.load()?;
    if let Some(m) = &a.mode {
        rc.set("mode", m)?;
    }
    if let Some(g) = &a.agg {
        rc.set("agg", g)?;
    }
    if a.projection {
        rc.set("projection", "true")?;
    }
    if a.no_projection {
        rc.set("projection", "false")?;
    }
    if let Some(s) = a.seed {
        rc.set("seed", &s.to_string())?;
    }
    let (train_set, test_set) = load_split(&a.data, rc.model.image_size, rc.dataset.train_fraction)?;
    rc.set("classes", &class_count(&train_set).to_string())?;
    rc.validate()?;

    let start = Instant::now();
    let mut model = Model::new(rc.model.clone(), rc.train.seed)?;
    let outcome = train(&train_set, &mut model, &rc.train)?;
    let acc = accuracy(&model, &test_set)?;
    let meta = TrainingMeta {
        seed: rc.train.seed,
        epochs_completed: rc.train.total_epochs(),
        final_losses: outcome.final_losses(),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, &Checkpoint::new(model, meta).to_bytes())?;
    write_atomic(&with_suffix(&a.out, ".log.tsv"), log_to_tsv(&outcome.log).as_bytes())?;
    write_atomic(&with_suffix(&a.out, ".run.txt"), manifest("train", &rc).as_bytes())?;
    println!("test_accuracy\t{acc:.2}");
    println!("seconds\t{:.1}", start.elapsed().as_secs_f64());
    println!("checkpoint\t{}", a.out.display());
    Ok(())
}

/// Load a checkpoint and its dataset, checking both agree with the model.
fn load_run(ckpt: &Path, data: &Path, config: &ConfigArgs) -> Result<(RunConfig, Checkpoint, Vec<Sample>, Vec<Sample>)> {
    let mut rc = config.load()?;
    let ck = Checkpoint::load(ckpt)?;
    let (train_set, test_set) = load_split(data, ck.model.config.image_size, rc.dataset.train_fraction)?;
    let k = class_count(&train_set);
    if k != ck.model.config.num_classes {
        bail!(
            "field 'classes' is {} in the checkpoint but the dataset has {k} classes",
            ck.model.config.num_classes
        );
    }
    rc.set("classes", &k.to_string())?;
    if config.given() {
        check_compatible(&ck.model.config, &rc.model)?;
    }
    Ok((rc, ck, train_set, test_set))
}

fn eval_cmd(a: EvalCmd) -> Result<()> {
    let (_, ck, _, test_set) = load_run(&a.ckpt, &a.data, &a.config)?;
    println!("test_accuracy\t{:.2}", accuracy(&ck.model, &test_set)?);
    println!("test_samples\t{}", test_set.len());
    Ok(())
}

fn explain_cmd(a: ExplainCmd) -> Result<()> {
    let (mut rc, ck, train_set, test_set) = load_run(&a.ckpt, &a.data, &a.config)?;
    if let Some(k) = a.kappa {
        rc.kappa = k;
    }
    let model = &ck.model;
    let input = match (&a.sample, &a.image) {
        (Some(id), _) => test_set
            .iter()
            .chain(&train_set)
            .find(|s| &s.id == id)
            .cloned()
            .with_context(|| format!("no sample with id '{id}' in {}", a.data.display()))?,
        (None, Some(path)) => {
            let size = model.config.image_size;
            let id = path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            Sample {
                image: load_image(path, size)?,
                label: 0,
                mask: Tensor::new(vec![size, size], vec![1.0; size * size])?,
                id,
                mask_missing: true,
                part_mask: None,
            }
        }
        (None, None) => bail!("one of --sample or --image is required"),
    };
    if a.top == 0 || a.top > model.config.num_classes {
        bail!("--top must lie in 1..={}", model.config.num_classes);
    }
    let logits = model.forward(&input.image)?.logits;
    let classes = top_classes(&logits, a.top);
    let bank = FeatureBank::build(model, &train_set)?;
    let record = explain_decision(&input, model, &classes, &bank, &train_set, rc.kappa)?;
    publish_dir(&a.out, a.force, &manifest("explain", &rc), |dir| {
        record.export(dir, &input, &train_set)?;
        Ok(())
    })?;
    println!("input\t{}", record.input_id);
    println!("predicted\t{}", record.predicted);
    println!("class\tprototype\tchannel\tsimilarity\tweight\tlogit");
    for e in &record.entries {
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            e.class, e.key_prototype, e.key_target, e.similarity, e.weight, e.logit
        );
    }
    Ok(())
}

fn metrics_cmd(a: MetricsCmd) -> Result<()> {
    let (mut rc, ck, train_set, _) = load_run(&a.ckpt, &a.data, &a.config)?;
    if let Some(k) = a.kappa {
        rc.kappa = k;
    }
    let model = &ck.model;
    let bank = FeatureBank::build(model, &train_set)?;
    let fid = fidelity_in(model, &bank)?;
    let pr = precision_table_in(model, &bank, &train_set, &rc.thresholds, rc.kappa)?;
    let pc = prototype_compactness(&model.config);
    println!(
        "mean\tCOS {:.4}\tED {:.4}\tPCC {:.4}\tJS {:.4}",
        fid.mean_cos, fid.mean_ed, fid.mean_pcc, fid.mean_js
    );
    println!("undefined\tCOS {}\tPCC {}\tJS {}", fid.undefined_cos, fid.undefined_pcc, fid.undefined_js);
    print!("{}", pr.to_tsv());
    println!("PC\t{}", pc.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
    if let Some(path) = &a.json {
        let protos: Vec<_> = fid
            .prototypes
            .iter()
            .zip(&pr.precision)
            .map(|(p, precision)| {
                json!({
                    "class": p.class, "index": p.index, "cos": p.cos, "ed": p.ed,
                    "pcc": p.pcc, "js": p.js, "precision": precision,
                })
            })
            .collect();
        let report = json!({
            "kappa": rc.kappa,
            "mean": { "cos": fid.mean_cos, "ed": fid.mean_ed, "pcc": fid.mean_pcc, "js": fid.mean_js },
            "pr_table": pr.thresholds.iter().zip(&pr.percentages)
                .map(|(t, p)| json!({ "threshold": t, "percentage": p })).collect::<Vec<_>>(),
            "compactness": pc,
            "prototypes": protos,
        });
        write_atomic(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckCmd) -> Result<()> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for sign in [SeparationSign::Repel, SeparationSign::Paper] {
        let r = gradcheck::run(a.seed, sign)?;
        println!("separation_sign = {sign}");
        println!("param\tchecked\tskipped\tmax_rel_error");
        for p in &r.params {
            println!("{}\t{}\t{}\t{:.3e}", p.name, p.checked, p.skipped, p.max_rel_error);
        }
        let (before, after) = gradcheck::separation_step(a.seed, sign, -0.08, 0.5)?;
        let dir = if after > before { "apart" } else { "together" };
        println!("separation step moves heterogeneous prototypes {dir}: {before:.6} -> {after:.6}");
        worst = worst.max(r.max_rel_error());
    }
    println!("max_rel_error\t{worst:.3e}");
    println!("seconds\t{:.2}", start.elapsed().as_secs_f64());
    if worst >= 1e-4 {
        bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
    }
    Ok(())
}

fn ablate_cmd(a: AblateCmd) -> Result<()> {
    let base = a.config.load()?;
    let mut results = Vec::new();
    for &seed in &a.seeds {
        let mut rc = base.clone();
        rc.set("seed", &seed.to_string())?;
        let (train_set, test_set) = match &a.data {
            Some(dir) => load_split(dir, rc.model.image_size, rc.dataset.train_fraction)?,
            None => generate(&rc.dataset)?,
        };
        rc.set("classes", &class_count(&train_set).to_string())?;
        let variants = ablation_variants(rc.model.prototypes_per_class);
        for r in run_variants(&rc, &variants, &train_set, &test_set)? {
            eprintln!("seed {seed}\t{}\t{:.2}\t{:.1}s", r.variant.label, r.test_accuracy, r.seconds);
            results.push(r);
        }
    }
    let table = accuracy_table(&results);
    print!("{table}");
    if let Some(out) = &a.out {
        publish_dir(out, a.force, &manifest("ablate", &base), |dir| {
            fs::write(dir.join("ablation.tsv"), &table)?;
            Ok(())
        })?;
    }
    Ok(())
}
