use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bagsplit_core::data::{
    derive_preferences, generate_synthetic, load_dataset, load_preferences, validate_consistency,
    write_dataset, write_preferences, SynthConfig,
};
use bagsplit_core::metrics::{evaluate_model, evaluate_scores, EvalReport};
use bagsplit_core::priors::cosine_context_prior;
use bagsplit_core::pseudolabel::{
    pslab_applicability, pslab_dataset, Applicability, AuditRecord, Supervision,
};
use bagsplit_core::training::{train as train_model, TrainConfig, TrainMode, TrainOutcome};
use bagsplit_core::{AggConfig, Dataset, ScorerModel};
use serde::Serialize;

use crate::{Baseline, EvalArgs, PslabArgs, SynthArgs, TrainArgs, ValidateArgs};

/// Offset separating the preference-sampling stream from the dataset stream.
const PAIR_SEED_OFFSET: u64 = 0x7061_6972;

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn read_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing training config {}", path.display()))
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    command: &'static str,
    generator: &'a SynthConfig,
    train_bags: usize,
    test_bags: usize,
    pairs_per_split: usize,
    files: Vec<String>,
}

/// Files written by [`write_synthetic`], relative to the output directory.
pub struct SynthFiles {
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub train_pairs: Option<PathBuf>,
    pub test_pairs: Option<PathBuf>,
}

pub fn write_synthetic(cfg: &SynthConfig, test_bags: usize, pairs: usize, out: &Path) -> Result<SynthFiles> {
    create_dir(out)?;
    let total = SynthConfig {
        n_bags: cfg.n_bags + test_bags,
        ..cfg.clone()
    };
    let full = generate_synthetic(&total)?;
    let (train, test) = if test_bags > 0 {
        let (a, b) = full.split_tail(test_bags)?;
        (a, Some(b))
    } else {
        (full, None)
    };

    let mut files = SynthFiles {
        train: out.join("train.jsonl"),
        test: None,
        train_pairs: None,
        test_pairs: None,
    };
    write_dataset(&train, &files.train)?;
    if pairs > 0 {
        let p = out.join("train_pairs.jsonl");
        write_preferences(
            &derive_preferences(&train, pairs, cfg.seed ^ PAIR_SEED_OFFSET)?,
            &p,
        )?;
        files.train_pairs = Some(p);
    }
    if let Some(test) = test {
        let path = out.join("test.jsonl");
        write_dataset(&test, &path)?;
        files.test = Some(path);
        if pairs > 0 {
            let p = out.join("test_pairs.jsonl");
            let seed = cfg.seed ^ PAIR_SEED_OFFSET ^ 1;
            write_preferences(&derive_preferences(&test, pairs, seed)?, &p)?;
            files.test_pairs = Some(p);
        }
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        n_bags: args.bags,
        bag_size_min: args.size_min,
        bag_size_max: args.size_max,
        d: args.dim,
        agg: args.agg,
        label_kind: args.labels,
        noise: args.noise,
        prior_quality: args.prior_quality,
    };
    let files = write_synthetic(&cfg, args.test_bags, args.pairs, &args.out)?;
    let written = [
        Some(&files.train),
        files.test.as_ref(),
        files.train_pairs.as_ref(),
        files.test_pairs.as_ref(),
    ];
    let manifest = SynthManifest {
        command: "synth",
        generator: &cfg,
        train_bags: args.bags,
        test_bags: args.test_bags,
        pairs_per_split: args.pairs,
        files: written.into_iter().flatten().map(|p| file_name(p)).collect(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("wrote {} training bags to {}", args.bags, files.train.display());
    Ok(())
}

#[derive(Serialize)]
struct ValidationSummary {
    bags: usize,
    instances: usize,
    d: usize,
    label_kind: String,
    agg: String,
    pairs: Option<usize>,
    bags_checked: usize,
    violations: Vec<bagsplit_core::data::Violation>,
}

pub fn validate(args: &ValidateArgs) -> Result<()> {
    let mut ds = load_dataset(&args.data, args.labels)?;
    let mut pairs = None;
    if let Some(p) = &args.pairs {
        let prefs = load_preferences(p)?;
        pairs = Some(prefs.len());
        ds = ds.with_preferences(prefs)?;
    }
    let has_gold = ds.instances().all(|i| i.gold_label.is_some());
    let (bags_checked, violations) = if has_gold {
        let r = validate_consistency(&ds)?;
        (r.bags_checked, r.violations)
    } else {
        (0, Vec::new())
    };
    let summary = ValidationSummary {
        bags: ds.bags.len(),
        instances: ds.num_instances(),
        d: ds.d,
        label_kind: ds.label_kind.to_string(),
        agg: ds.agg().to_string(),
        pairs,
        bags_checked,
        violations,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if args.strict && !summary.violations.is_empty() {
        bail!(
            "{} bags disagree with their instance labels",
            summary.violations.len()
        );
    }
    Ok(())
}

/// Loads a dataset and attaches preference pairs when given.
pub fn load_with_pairs(data: &Path, pairs: Option<&Path>) -> Result<Dataset> {
    let ds = load_dataset(data, None)?;
    match pairs {
        Some(p) => Ok(ds.with_preferences(load_preferences(p)?)?),
        None => Ok(ds),
    }
}

pub fn fit(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode == TrainMode::Preference && ds.preferences.is_empty() {
        bail!("preference mode needs a non-empty pairs file");
    }
    let priors = cfg.needed_priors(ds)?;
    Ok(train_model(ds, cfg, &priors)?)
}

/// Writes `<stem>.ckpt` and `<stem>_log.jsonl` into `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: &Path, stem: &str) -> Result<()> {
    outcome.model.save(dir.join(format!("{stem}.ckpt")))?;
    fs::write(dir.join(format!("{stem}_log.jsonl")), outcome.log.to_jsonl()?)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    command: &'static str,
    data: &'a Path,
    pairs: Option<&'a Path>,
    config: &'a TrainConfig,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = read_train_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = load_with_pairs(&args.data, args.pairs.as_deref())?;
    let outcome = fit(&ds, &cfg)?;
    create_dir(&args.out)?;
    save_outcome(&outcome, &args.out, "model")?;
    let manifest = TrainManifest {
        command: "train",
        data: &args.data,
        pairs: args.pairs.as_deref(),
        config: &cfg,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    if let Some(last) = outcome.log.steps.last() {
        println!("trained {} steps, final loss {:.6}", last.step + 1, last.loss);
    } else {
        println!("trained 0 steps");
    }
    Ok(())
}

/// Only the instances whose pseudo-label was flipped away from the threshold rule.
#[derive(Serialize)]
struct FlipRecord<'a> {
    bag_id: &'a str,
    instance_id: &'a str,
    likelihood: f64,
}

pub fn write_audit(audit: &[AuditRecord], path: &Path) -> Result<usize> {
    let mut text = String::new();
    let mut flips = 0;
    for rec in audit {
        if let Some(id) = &rec.flipped_instance_id {
            let line = FlipRecord {
                bag_id: &rec.bag_id,
                instance_id: id,
                likelihood: rec.likelihood,
            };
            text.push_str(&serde_json::to_string(&line)?);
            text.push('\n');
            flips += 1;
        }
    }
    fs::write(path, text)?;
    Ok(flips)
}

/// Refuses early when only preference supervision is present.
pub fn check_pslab(ds: &Dataset) -> Result<()> {
    let supervision = if ds.bags.iter().all(|b| b.label.is_some()) {
        Supervision::BagLabels
    } else {
        Supervision::PreferenceOnly
    };
    if let Applicability::NotApplicable(reason) = pslab_applicability(ds.label_kind, ds.agg(), supervision) {
        return Err(bagsplit_core::Error::NotApplicable(reason).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct PslabManifest<'a> {
    command: &'static str,
    data: &'a Path,
    model: &'a Path,
    flipped: usize,
}

pub fn pslab(args: &PslabArgs) -> Result<()> {
    let ds = load_dataset(&args.data, None)?;
    check_pslab(&ds)?;
    let model = ScorerModel::load(&args.model)?;
    let (labeled, audit) = pslab_dataset(&ds, &model)?;
    create_dir(&args.out)?;
    write_dataset(&labeled, args.out.join("pslab.jsonl"))?;
    let flipped = write_audit(&audit, &args.out.join("audit.jsonl"))?;
    let manifest = PslabManifest {
        command: "pslab",
        data: &args.data,
        model: &args.model,
        flipped,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("pseudo-labeled {} bags, {flipped} flipped", labeled.bags.len());
    Ok(())
}

pub enum Scorer<'a> {
    Model(&'a ScorerModel),
    Cosine,
}

/// Scores `ds` and builds the report; the instance report is mandatory.
pub fn evaluate(ds: &Dataset, scorer: Scorer<'_>, agg: &AggConfig) -> Result<EvalReport> {
    if let Some(i) = ds.instances().find(|i| i.gold_label.is_none()) {
        return Err(bagsplit_core::Error::MissingGoldLabel(i.id.clone()).into());
    }
    let report = match scorer {
        Scorer::Model(m) => evaluate_model(m, ds, agg, &ds.preferences)?,
        Scorer::Cosine => evaluate_scores(ds, &cosine_context_prior(ds)?.per_bag, agg, &ds.preferences)?,
    };
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    let table = format!("{}\n{}\n", EvalReport::table_header(), report.table_row());
    fs::write(dir.join(format!("{stem}.tsv")), table)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ds = load_with_pairs(&args.data, args.pairs.as_deref())?;
    let agg = AggConfig::new(ds.agg(), args.approx, args.sharpness)?;
    agg.check_for(ds.label_kind)?;
    let model;
    let scorer = match (&args.model, args.baseline) {
        (_, Some(Baseline::Cosine)) => Scorer::Cosine,
        (Some(path), None) => {
            model = ScorerModel::load(path)?;
            Scorer::Model(&model)
        }
        (None, None) => bail!("either --model or --baseline is required"),
    };
    let report = evaluate(&ds, scorer, &agg)?;
    create_dir(&args.out)?;
    write_report(&report, &args.out, "report")?;
    println!("{}", EvalReport::table_header());
    println!("{}", report.table_row());
    Ok(())
}
