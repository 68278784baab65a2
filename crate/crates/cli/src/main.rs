use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stealth_lab::attacks::{build_attack, TriggerDistribution, DEFAULT_CANDIDATE_BUDGET};
use stealth_lab::bias::compute_bias_direction;
use stealth_lab::detector::{DetectorParams, DEFAULT_DELTA_GAIN, DEFAULT_THETA};
use stealth_lab::dimension::{dimension_profile, PairMode};
use stealth_lab::editor::{apply_edit, EditRequest, SolverConfig};
use stealth_lab::eval::{
    extract_feature_cloud, run_pipeline, synthetic_corpus, Corpus, EvalReport, ExtractMode, PipelineConfig, PipelineKind,
    SyntheticCorpusConfig,
};
use stealth_lab::jetpack::{build_jetpack, cross_talk_check, insert_into_model};
use stealth_lab::theory::{empirical_fpr, guaranteed_fpr_for_edit, write_bound_csv, BoundRow};
use stealth_lab::{init_model, Family, LabError, ModelConfig, Prompt, ToyModel};

#[derive(Parser)]
#[command(name = "stealth-lab", version, about = "Stealth edits, jet-packs and intrinsic-dimension bounds on toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model snapshot; a fresh model is initialised from the --family flags when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// 1-based block index.
    #[arg(long, default_value_t = 2)]
    layer: usize,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA_GAIN)]
    delta_gain: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// UTF-8 text, one prompt per line. A seeded synthetic corpus is used when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    init: InitArgs,
}

#[derive(Args, Clone)]
struct InitArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Llama)]
    family: FamilyArg,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 128)]
    n_hidden: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 128)]
    context_window: usize,
    /// Initialisation seed; defaults to --seed.
    #[arg(long)]
    model_seed: Option<u64>,
    /// Prompts in the synthetic corpus.
    #[arg(long, default_value_t = 2000)]
    synthetic_prompts: usize,
    /// Prompts used for the bias direction and the jet-pack centroid.
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gpt,
    Llama,
    Mamba,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gpt => Family::GptStyle,
            FamilyArg::Llama => Family::LlamaStyle,
            FamilyArg::Mamba => Family::MambaStyle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    InPlace,
    Jetpack,
    AttackCorrupt,
    AttackContext,
}

impl From<KindArg> for PipelineKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::InPlace => PipelineKind::InPlace,
            KindArg::Jetpack => PipelineKind::Jetpack,
            KindArg::AttackCorrupt => PipelineKind::AttackCorrupt,
            KindArg::AttackContext => PipelineKind::AttackContext,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    CorruptedPrompt,
    ContextWiki,
    CorruptedContext,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialised model snapshot to <out>/model.slab.
    Init {
        #[command(flatten)]
        common: Common,
    },
    /// Implant one in-place edit.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trigger: String,
        #[arg(long)]
        target: String,
    },
    /// Build a jet-pack from a file of `trigger<TAB>target` lines.
    Jetpack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        edits: PathBuf,
    },
    /// Sample a viable randomised trigger and implant it.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        target: String,
        #[arg(long, value_enum, default_value_t = ModeArg::CorruptedPrompt)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.1)]
        corruption_rate: f64,
        #[arg(long, default_value_t = DEFAULT_CANDIDATE_BUDGET)]
        budget: usize,
    },
    /// Intrinsic-dimension profile of the layer's feature cloud.
    Dims {
        #[command(flatten)]
        common: Common,
        /// Comma-separated separation thresholds.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1.5,-1,-0.5,-0.1,-0.05,-0.02,-0.01,0")]
        deltas: Vec<f64>,
        /// Pair budget above which pairs are subsampled.
        #[arg(long, default_value_t = 1_000_000)]
        pairs: u64,
    },
    /// Worst-case and empirical FPR for detectors built on corpus prompts.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        n_triggers: usize,
    },
    /// Run an evaluation pipeline and write report.json and bounds.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = KindArg::InPlace)]
        kind: KindArg,
        /// Layers to evaluate; defaults to --layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        n_edits: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 50)]
        n_ppl_prompts: usize,
    },
    /// Validate a report and print its summary.
    Report {
        input: PathBuf,
    },
}

fn load_model(c: &Common) -> anyhow::Result<ToyModel> {
    if let Some(p) = &c.model {
        return ToyModel::load(p).with_context(|| format!("loading model {}", p.display()));
    }
    let i = &c.init;
    let mut cfg = ModelConfig::new(i.family.into(), i.d, i.n_hidden, i.n_layers, i.model_seed.unwrap_or(c.seed));
    cfg.context_window = i.context_window;
    Ok(init_model(&cfg)?)
}

fn load_corpus(c: &Common) -> anyhow::Result<Corpus> {
    match &c.corpus {
        Some(p) => Corpus::load(p).with_context(|| format!("loading corpus {}", p.display())),
        None => Ok(synthetic_corpus(&SyntheticCorpusConfig {
            n_prompts: c.init.synthetic_prompts,
            seed: c.seed,
            ..Default::default()
        })?),
    }
}

fn out_path(c: &Common, name: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(c.out.join(name))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn train_split(c: &Common, corpus: &Corpus) -> anyhow::Result<Corpus> {
    Ok(corpus.slice(0..c.init.n_train.min(corpus.len()))?)
}

fn base_request(c: &Common, model: &ToyModel, corpus: &Corpus, trigger: &str, target: &str) -> anyhow::Result<EditRequest> {
    let mut r = EditRequest::new(Prompt::from_text(trigger)?, Prompt::from_text(target)?, c.layer)?
        .with_detector(c.theta, c.delta_gain);
    if !model.family().has_bias() {
        let cloud = extract_feature_cloud(model, &train_split(c, corpus)?, c.layer, ExtractMode::RandomPosition, c.seed)?;
        r = r.with_bias_direction(compute_bias_direction(&cloud)?.v);
    }
    Ok(r)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Init { common } => {
            let model = load_model(&common)?;
            let path = out_path(&common, "model.slab")?;
            model.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Edit { common, trigger, target } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let req = base_request(&common, &model, &corpus, &trigger, &target)?;
            let (edited, rec) = apply_edit(&model, &req, &SolverConfig { seed: common.seed, ..Default::default() })?;
            edited.save(&out_path(&common, "edited_model.slab")?)?;
            write_json(&out_path(&common, "edit_record.json")?, &rec)?;
            println!("success={} pruned_row={} iterations={}", rec.success, rec.pruned_row, rec.iterations);
        }
        Command::Jetpack { common, edits } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let text = fs::read_to_string(&edits).with_context(|| format!("reading {}", edits.display()))?;
            let mut requests = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let Some((t, r)) = line.split_once('\t') else {
                    return Err(LabError::Format(format!("line {} lacks a tab separator", n + 1)).into());
                };
                let req = EditRequest::new(Prompt::from_text(t)?, Prompt::from_text(r)?, common.layer)?;
                requests.push(req.with_detector(common.theta, common.delta_gain));
            }
            let general = stealth_lab::eval::block_output_cloud(
                &model,
                &train_split(&common, &corpus)?,
                common.layer,
                ExtractMode::RandomPosition,
                common.seed,
            )?;
            let cfg = SolverConfig { seed: common.seed, ..Default::default() };
            let build = build_jetpack(&model, common.layer, &requests, &general, common.theta, common.delta_gain, &cfg)?;
            let audit = cross_talk_check(&build.block);
            build.block.save(&out_path(&common, "jetpack.slab")?)?;
            insert_into_model(&model, common.layer, build.block.clone())?.save(&out_path(&common, "edited_model.slab")?)?;
            write_json(
                &out_path(&common, "jetpack_build.json")?,
                &serde_json::json!({ "outcomes": build.outcomes, "excluded": build.excluded, "cross_talk": audit }),
            )?;
            println!(
                "included={} excluded={} cross_talk_pairs={}",
                build.block.n_edits(),
                build.excluded.len(),
                audit.direct.flagged_pairs.len()
            );
        }
        Command::Attack { common, prompt, target, mode, corruption_rate, budget } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let template = base_request(&common, &model, &corpus, &prompt, &target)?;
            let base = template.trigger.clone();
            let dist = match mode {
                ModeArg::CorruptedPrompt => TriggerDistribution::corrupted_prompt(base, corruption_rate)?,
                ModeArg::ContextWiki => TriggerDistribution::context_wiki(base, &corpus)?,
                ModeArg::CorruptedContext => TriggerDistribution::corrupted_context(base, None, corruption_rate)?,
            };
            let cfg = SolverConfig { seed: common.seed, ..Default::default() };
            let (edited, rec) = build_attack(&model, &dist, &template, &cfg, budget, common.seed)?;
            edited.save(&out_path(&common, "edited_model.slab")?)?;
            write_json(&out_path(&common, "attack_record.json")?, &rec)?;
            println!(
                "trigger={:?} rejected={} success={}",
                rec.sampled_trigger.to_string(),
                rec.rejected_candidates,
                rec.edit_record.success
            );
        }
        Command::Dims { common, deltas, pairs } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let cloud = extract_feature_cloud(&model, &corpus, common.layer, ExtractMode::RandomPosition, common.seed)?;
            let n = cloud.len() as u64;
            let mode = PairMode::auto(cloud.len(), pairs, common.seed);
            let profile = dimension_profile(&cloud, &deltas, mode)?;
            let path = out_path(&common, "dims.csv")?;
            let mut csv = String::from("layer,delta,n_hat,n_lower_bound,p_hat,pairs\n");
            for (d, e) in deltas.iter().zip(&profile) {
                csv += &format!("{},{},{},{},{},{}\n", common.layer, d, e.n_hat, e.n_lower_bound, e.p_hat, e.pairs_evaluated);
                println!("delta={d:>8} n_hat={:>10.4} n_lower={:>10.4}", e.n_hat, e.n_lower_bound);
            }
            fs::write(&path, csv)?;
            println!("{n} vectors; wrote {}", path.display());
        }
        Command::Bounds { common, n_triggers } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let cloud = extract_feature_cloud(&model, &corpus, common.layer, ExtractMode::RandomPosition, common.seed)?;
            if n_triggers == 0 || n_triggers > cloud.len() {
                bail!(LabError::InvalidArgument(format!("n_triggers must be in 1..={}", cloud.len())));
            }
            let c = vec![0.0; model.d()];
            let mut rows = Vec::new();
            for i in 0..n_triggers {
                let others = cloud.without_row(i)?;
                let params = DetectorParams::new(cloud.row(i).to_vec(), common.theta, common.delta_gain, None)?;
                let b = guaranteed_fpr_for_edit(&others, common.theta, params.tau(), &c, PairMode::Exact)?;
                rows.push(BoundRow {
                    layer: common.layer,
                    delta: b.delta,
                    n_hat: b.n_at_delta.n_hat,
                    n_lower_bound: b.n_at_delta.n_lower_bound,
                    fpr_bound: b.fpr_bound,
                    empirical_fpr: empirical_fpr(&params, &others),
                });
            }
            let path = out_path(&common, "bounds.csv")?;
            write_bound_csv(&rows, &mut fs::File::create(&path)?)?;
            let mean = |f: fn(&BoundRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
            println!(
                "mean fpr_bound={:.6} mean empirical_fpr={:.6}; wrote {}",
                mean(|r| r.fpr_bound),
                mean(|r| r.empirical_fpr),
                path.display()
            );
        }
        Command::Eval { common, kind, layers, n_edits, n_test, n_ppl_prompts } => {
            let model = load_model(&common)?;
            let corpus = load_corpus(&common)?;
            let layers = if layers.is_empty() { vec![common.layer] } else { layers };
            let mut cfg = PipelineConfig::new(kind.into(), layers);
            cfg.n_edits = n_edits;
            cfg.n_train = common.init.n_train;
            cfg.n_test = n_test;
            cfg.n_ppl_prompts = n_ppl_prompts;
            cfg.theta = common.theta;
            cfg.delta_gain = common.delta_gain;
            cfg.seed = common.seed;
            cfg.solver.seed = common.seed;
            let report = run_pipeline(&model, &corpus, &cfg)?;
            report.save(&out_path(&common, "report.json")?)?;
            report.write_bounds_csv(&mut fs::File::create(out_path(&common, "bounds.csv")?)?)?;
            print!("{}", report.summary());
        }
        Command::Report { input } => {
            let report = EvalReport::load(&input).with_context(|| format!("reading report {}", input.display()))?;
            print!("{}", report.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<LabError>() {
                Some(le) if le.is_validation() => ExitCode::from(2),
                Some(LabError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
