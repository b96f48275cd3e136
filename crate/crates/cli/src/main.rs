use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pavad_core::checkpoint::{load_checkpoint, save_checkpoint};
use pavad_core::config::{ProfileName, RunProfile};
use pavad_core::curate::{
    emit_generation_manifest, read_class_specs, refine_selection, resolve, select_topk, BalanceConfig, ClassSpec,
    EmbeddingIndex, GenerationDefaults, RefinedPrompt, Selection, VlmClient,
};
use pavad_core::eval::{evaluate, write_report};
use pavad_core::gradcheck::{run_suite, GradCheckShape};
use pavad_core::io::{read_manifest, read_masks, write_generation_manifest};
use pavad_core::sim::{self, generate, run_ablation, variant_median, write_sim, AblationSetup, Variant};
use pavad_core::train::{train, write_loss_log, Dataset};

#[derive(Parser)]
#[command(name = "pavad", version, about = "Pseudo-anomaly curation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank init images per class and write selections.json.
    SelectInits(SelectArgs),
    /// Turn selected inits into generation prompts, via a VLM endpoint when configured.
    RefinePrompts(RefineArgs),
    /// Combine selections and prompts into generation_manifest.json.
    GenManifest(GenArgs),
    /// Write a synthetic dataset with magnitude-biased pseudo videos.
    Simulate(SimulateArgs),
    /// Train a detector on a dataset manifest and write a checkpoint.
    Train(TrainArgs),
    /// Score a test manifest with a checkpoint and report frame-level AUC.
    Eval(EvalArgs),
    /// Compare the baseline and full loss on simulated data over several seeds.
    Ablate(AblateArgs),
    /// Check analytic loss gradients against finite differences.
    GradCheck(GradCheckArgs),
}

/// Profile selection and the overrides shared by training-related commands.
#[derive(Args)]
struct ProfileArgs {
    /// sht, ucf or sim.
    #[arg(long, default_value = "sim")]
    profile: String,
    /// TOML file with [train], [loss], [model] and [sim] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda_da: Option<f64>,
    #[arg(long)]
    lambda_dist: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
}

impl ProfileArgs {
    fn resolve(&self) -> Result<RunProfile> {
        let name: ProfileName = self.profile.parse()?;
        let mut p = RunProfile::named(name);
        if let Some(path) = &self.config {
            p.merge_file(path)?;
        }
        let w = &mut p.train.loss_weights;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut w.lambda1, self.lambda1);
        set(&mut w.lambda2, self.lambda2);
        set(&mut w.lambda_da, self.lambda_da);
        set(&mut w.lambda_dist, self.lambda_dist);
        set(&mut w.beta, self.beta);
        set(&mut p.model.tau, self.tau);
        if let Some(k) = self.topk {
            w.topk = k;
        }
        if let Some(s) = self.steps {
            p.train.steps = s;
        }
        if let Some(s) = self.seed {
            p.train.seed = s;
            p.sim.seed = s;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct SelectArgs {
    /// Embedding index JSON listing image and text records.
    #[arg(long)]
    index: PathBuf,
    /// JSON array of class specs.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene sub-sampling exponent.
    #[arg(long, default_value_t = 0.5, conflicts_with = "no_balance")]
    alpha: f64,
    /// Inits reserved for every scene before global ranking.
    #[arg(long, default_value_t = 1, conflicts_with = "no_balance")]
    min_quota: usize,
    /// Multiplier on count^alpha; defaults to the smallest count^(1-alpha).
    #[arg(long, conflicts_with = "no_balance")]
    balance_scale: Option<f64>,
    /// Rank all images globally without scene balancing.
    #[arg(long)]
    no_balance: bool,
}

#[derive(Args)]
struct RefineArgs {
    /// selections.json written by select-inits.
    #[arg(long)]
    selections: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    vlm_timeout_s: u64,
    #[arg(long, default_value = "Qwen3-VL-30B-A3B-Instruct")]
    vlm_model: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Use the template fallback even if PAVAD_VLM_URL is set.
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    selections: PathBuf,
    /// prompts.json written by refine-prompts.
    #[arg(long)]
    prompts: PathBuf,
    /// Selects the guidance defaults (sht or ucf).
    #[arg(long, default_value = "sht")]
    profile: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long)]
    out: PathBuf,
    /// Pseudo/real mean-norm ratio; 1 disables the bias.
    #[arg(long)]
    pseudo_norm_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    /// Training manifest (real normal, pseudo normal and pseudo abnormal videos).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Frame-interval annotations for the test videos.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Simulate without the pseudo-domain norm bias.
    #[arg(long)]
    control: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Accepted for symmetry with the other commands; problem sizes are fixed.
    #[arg(long, default_value = "sim")]
    profile: String,
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional directory for grad_check.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn spec_for<'a>(specs: &'a [ClassSpec], class: &str) -> Result<&'a ClassSpec> {
    specs
        .iter()
        .find(|s| s.class_name == class)
        .with_context(|| format!("no class spec for {class:?}"))
}

fn select_inits(a: SelectArgs) -> Result<()> {
    let index = EmbeddingIndex::load(&a.index)?;
    let specs = read_class_specs(&a.classes)?;
    let bal = if a.no_balance {
        BalanceConfig::disabled()
    } else {
        BalanceConfig {
            alpha: a.alpha,
            min_quota_per_scene: a.min_quota,
            enabled: true,
            scale: a.balance_scale,
        }
    };
    let base = a.index.parent().unwrap_or(Path::new(""));
    let mut selections = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut inits = select_topk(&index, spec, &bal)?;
        for s in &mut inits {
            s.source_path = resolve(base, &s.source_path).to_string_lossy().into_owned();
        }
        println!("{}: {} inits", spec.class_name, inits.len());
        selections.push(Selection {
            class_name: spec.class_name.clone(),
            inits,
        });
    }
    create_out(&a.out)?;
    write_json(&a.out.join("selections.json"), &selections)
}

fn refine_prompts(a: RefineArgs) -> Result<()> {
    let selections: Vec<Selection> = read_json(&a.selections)?;
    let specs = read_class_specs(&a.classes)?;
    let client = if a.offline {
        None
    } else {
        pavad_core::curate::HttpVlmClient::from_env(&a.vlm_model, Duration::from_secs(a.vlm_timeout_s))
    };
    if client.is_none() {
        eprintln!("note: no VLM endpoint configured, using template prompts");
    }
    let client_ref = client.as_ref().map(|c| c as &dyn VlmClient);
    let mut prompts: Vec<RefinedPrompt> = Vec::new();
    for sel in &selections {
        let spec = spec_for(&specs, &sel.class_name)?;
        for r in refine_selection(sel, spec, client_ref, a.max_in_flight) {
            if let Some(w) = r.warning {
                eprintln!("warning: {w}");
            }
            prompts.push(r.prompt);
        }
    }
    create_out(&a.out)?;
    write_json(&a.out.join("prompts.json"), &prompts)
}

fn gen_manifest(a: GenArgs) -> Result<()> {
    let profile: ProfileName = a.profile.parse()?;
    let selections: Vec<Selection> = read_json(&a.selections)?;
    let prompts: Vec<RefinedPrompt> = read_json(&a.prompts)?;
    let jobs = emit_generation_manifest(&selections, &prompts, &GenerationDefaults::for_profile(profile))?;
    create_out(&a.out)?;
    write_generation_manifest(&jobs, a.out.join("generation_manifest.json"))?;
    println!("{} generation jobs", jobs.len());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut p = a.profile.resolve()?;
    if let Some(s) = a.pseudo_norm_scale {
        p.sim.pseudo_norm_scale = s;
        p.sim.validate()?;
    }
    let data = generate(&p.sim)?;
    create_out(&a.out)?;
    write_sim(&data, &p.sim, &a.out)?;
    println!(
        "{} training and {} test videos, pseudo/real norm ratio {:.4}",
        data.train.len(),
        data.test.len(),
        sim::mean_row_norm(&data, pavad_core::train::Stream::PseudoNormal)
            / sim::mean_row_norm(&data, pavad_core::train::Stream::RealNormal)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let p = a.profile.resolve()?;
    let manifest = read_manifest(&a.manifest)?;
    manifest.validate_training()?;
    let ds = Dataset::load(&manifest)?;
    let outcome = train(&p.train, &p.model, &ds)?;
    create_out(&a.out)?;
    save_checkpoint(a.out.join("checkpoint"), &p.model, &outcome.params)?;
    write_loss_log(&outcome.log, a.out.join("loss_log.jsonl"))?;
    write_json(&a.out.join("run_profile.json"), &p)?;
    let last = outcome.log.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!("{} steps, final total loss {last:.6}", outcome.log.len());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, params) = load_checkpoint(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let ds = Dataset::load(&manifest)?;
    if let Some(d) = ds.feature_dim() {
        if d != model.input_dim {
            bail!(
                "checkpoint expects {}-dimensional features, manifest has {d}",
                model.input_dim
            );
        }
    }
    let masks = read_masks(&a.masks, &manifest)?;
    let report = evaluate(&params, &ds, &masks)?;
    create_out(&a.out)?;
    write_report(&report, &a.out)?;
    println!(
        "frame-level AUC {:.6} over {} videos",
        report.metrics.auc_micro, report.metrics.n_videos
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary {
    seeds: Vec<u64>,
    pseudo_norm_scale: f64,
    baseline_median_auc: f64,
    full_median_auc: f64,
    auc_gap: f64,
    baseline_median_entropy: f64,
    full_median_entropy: f64,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut p = a.profile.resolve()?;
    if a.control {
        p.sim.pseudo_norm_scale = 1.0;
    }
    let setup = AblationSetup {
        sim: p.sim.clone(),
        model: p.model.clone(),
        train: p.train.clone(),
    };
    let rows = run_ablation(&setup, &[Variant::baseline(), Variant::full()], &a.seeds)?;
    let summary = AblationSummary {
        seeds: a.seeds.clone(),
        pseudo_norm_scale: p.sim.pseudo_norm_scale,
        baseline_median_auc: variant_median(&rows, "baseline", |r| r.auc_micro),
        full_median_auc: variant_median(&rows, "full", |r| r.auc_micro),
        auc_gap: variant_median(&rows, "full", |r| r.auc_micro) - variant_median(&rows, "baseline", |r| r.auc_micro),
        baseline_median_entropy: variant_median(&rows, "baseline", |r| r.usage_entropy),
        full_median_entropy: variant_median(&rows, "full", |r| r.usage_entropy),
    };
    create_out(&a.out)?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    for r in &rows {
        println!(
            "{:<8} seed {:<3} auc {:.4} entropy {:.4}",
            r.variant, r.seed, r.auc_micro, r.usage_entropy
        );
    }
    println!(
        "median auc baseline {:.4} full {:.4} (gap {:+.4}); median entropy baseline {:.4} full {:.4}",
        summary.baseline_median_auc,
        summary.full_median_auc,
        summary.auc_gap,
        summary.baseline_median_entropy,
        summary.full_median_entropy
    );
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    a.profile.parse::<ProfileName>()?;
    if a.configs == 0 {
        bail!("--configs must be at least 1");
    }
    let report = run_suite(&GradCheckShape::default(), a.configs, a.seed)?;
    for t in &report.terms {
        println!(
            "{:<17} max relative error {:.3e} (worst: {} in config {})",
            t.term.name(),
            t.max_rel_error,
            t.worst_param,
            t.worst_config
        );
    }
    println!(
        "{} configurations in {:.1} s, tolerance {:.0e}: {}",
        report.configs,
        report.elapsed_s,
        report.tolerance,
        if report.passed() { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("grad_check.json"), &report)?;
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::SelectInits(a) => select_inits(a)?,
        Command::RefinePrompts(a) => refine_prompts(a)?,
        Command::GenManifest(a) => gen_manifest(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::GradCheck(a) => return grad_check(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(ToString::to_string) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
