//! Multi-seed experiment runs driven by a TOML manifest.
//!
//! ```toml
//! output_dir = "runs/min"
//! seeds = [0, 1, 2]
//! stages = ["synth", "train", "pslab", "retrain", "eval"]
//!
//! [synth]
//! n_bags = 500
//! test_bags = 100
//! d = 32
//! noise = 0.1
//! prior_quality = 0.8
//!
//! [train]
//! epochs = 30
//! weights = { bag = 0.5, cosine = 0.5, correlation = 0.0 }
//! ```
//!
//! Without a `synth` stage, `train_data` (and `test_data` for `eval`) point at
//! existing files. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use bagsplit_core::data::SynthConfig;
use bagsplit_core::losses::LossWeights;
use bagsplit_core::metrics::EvalReport;
use bagsplit_core::pseudolabel::pslab_dataset;
use bagsplit_core::training::{TrainConfig, TrainMode};
use bagsplit_core::{AggConfig, Approx, ScorerModel};
use serde::{Deserialize, Serialize};

use crate::commands::{
    check_pslab, evaluate, fit, load_with_pairs, read_train_config, save_outcome, write_audit, write_json,
    write_report, write_synthetic, Scorer,
};
use crate::PipelineArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Train,
    Pslab,
    Retrain,
    Eval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub generator: SynthConfig,
    pub test_bags: usize,
    pub pairs: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            generator: SynthConfig::default(),
            test_bags: 100,
            pairs: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub approx: Approx,
    pub sharpness: f64,
    /// Also report the cosine-prior baseline.
    pub cosine_baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            approx: Approx::Hard,
            sharpness: 8.0,
            cosine_baseline: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub stages: Vec<Stage>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub train_pairs: Option<PathBuf>,
    pub test_pairs: Option<PathBuf>,
    /// Path to a training config; `[train]` is used when absent.
    pub config: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub train: Option<TrainConfig>,
    /// Defaults to `[train]` switched to supervised mode on bag weight only.
    pub retrain: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentManifest {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train_data,
            &mut self.test_data,
            &mut self.train_pairs,
            &mut self.test_pairs,
            &mut self.config,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn has(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    fn check(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "manifest needs at least one seed");
        ensure!(!self.stages.is_empty(), "manifest needs at least one stage");
        ensure!(
            self.stages.windows(2).all(|w| w[0] < w[1]),
            "stages must be unique and in pipeline order: synth, train, pslab, retrain, eval"
        );
        let requires = [
            (Stage::Pslab, Stage::Train),
            (Stage::Retrain, Stage::Pslab),
            (Stage::Eval, Stage::Train),
        ];
        for (stage, needs) in requires {
            ensure!(
                !self.has(stage) || self.has(needs),
                "stage {stage:?} requires stage {needs:?}"
            );
        }
        if self.has(Stage::Synth) {
            ensure!(self.synth.is_some(), "the synth stage needs a [synth] section");
            ensure!(
                self.train_data.is_none() && self.test_data.is_none(),
                "train_data/test_data conflict with the synth stage"
            );
            if self.has(Stage::Eval) {
                ensure!(
                    self.synth.as_ref().is_some_and(|s| s.test_bags > 0),
                    "eval needs synth.test_bags > 0"
                );
            }
        } else {
            ensure!(
                self.train_data.is_some(),
                "train_data is required without a synth stage"
            );
            ensure!(
                !self.has(Stage::Eval) || self.test_data.is_some(),
                "eval needs test_data"
            );
        }
        ensure!(
            self.config.is_none() || self.train.is_none(),
            "give either config or [train], not both"
        );
        for p in [
            &self.train_data,
            &self.test_data,
            &self.train_pairs,
            &self.test_pairs,
            &self.config,
        ]
        .into_iter()
        .flatten()
        {
            ensure!(p.exists(), "referenced path {} does not exist", p.display());
        }
        Ok(())
    }

    fn train_config(&self) -> Result<TrainConfig> {
        match &self.train {
            Some(cfg) => Ok(cfg.clone()),
            None => read_train_config(self.config.as_deref()),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<ExperimentManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut m: ExperimentManifest =
        toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    m.resolve(path.parent().unwrap_or(Path::new(".")));
    Ok(m)
}

/// Writes into `<out>.partial` and renames on success, so `out` either holds a
/// complete run or does not exist.
pub fn run(args: &PipelineArgs) -> Result<()> {
    let mut manifest = read_manifest(&args.manifest)?;
    if let Some(out) = &args.out {
        manifest.output_dir = Some(out.clone());
    }
    manifest.check()?;
    let Some(out) = manifest.output_dir.clone() else {
        bail!("no output directory: set output_dir or pass --out");
    };
    let train_cfg = manifest.train_config()?;
    let retrain_cfg = manifest.retrain.clone().unwrap_or_else(|| TrainConfig {
        mode: TrainMode::Supervised,
        weights: LossWeights::bag_only(),
        ..train_cfg.clone()
    });

    if out.exists() {
        ensure!(
            args.force,
            "output directory {} exists (use --force to replace it)",
            out.display()
        );
    }
    let mut staging = out.clone().into_os_string();
    staging.push(".partial");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let mut resolved = manifest.clone();
    resolved.train = Some(train_cfg.clone());
    resolved.retrain = Some(retrain_cfg.clone());
    resolved.config = None;
    resolved.output_dir = None;
    write_json(&staging.join("manifest.json"), &resolved)?;

    let mut summary = format!("seed\tmodel\t{}\n", EvalReport::table_header());
    for &seed in &manifest.seeds {
        let dir = staging.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let rows = run_seed(&manifest, &train_cfg, &retrain_cfg, seed, &dir)
            .with_context(|| format!("seed {seed}"))?;
        for (name, report) in rows {
            summary.push_str(&format!("{seed}\t{name}\t{}\n", report.table_row()));
        }
    }
    fs::write(staging.join("summary.tsv"), &summary)?;

    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    fs::rename(&staging, &out)?;
    print!("{summary}");
    Ok(())
}

fn run_seed(
    m: &ExperimentManifest,
    train_cfg: &TrainConfig,
    retrain_cfg: &TrainConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<(&'static str, EvalReport)>> {
    let (train_path, test_path, train_pairs, test_pairs) = if m.has(Stage::Synth) {
        let section = m.synth.as_ref().expect("checked");
        let cfg = SynthConfig {
            seed,
            ..section.generator.clone()
        };
        let files = write_synthetic(&cfg, section.test_bags, section.pairs, dir)?;
        (files.train, files.test, files.train_pairs, files.test_pairs)
    } else {
        (
            m.train_data.clone().expect("checked"),
            m.test_data.clone(),
            m.train_pairs.clone(),
            m.test_pairs.clone(),
        )
    };

    let train_ds = load_with_pairs(&train_path, train_pairs.as_deref())?;
    let mut models: Vec<(&'static str, ScorerModel)> = Vec::new();

    if m.has(Stage::Train) {
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let outcome = fit(&train_ds, &cfg)?;
        save_outcome(&outcome, dir, "model")?;
        models.push(("trained", outcome.model));
    }
    if m.has(Stage::Pslab) {
        check_pslab(&train_ds)?;
        let (labeled, audit) = pslab_dataset(&train_ds, &models[0].1)?;
        bagsplit_core::data::write_dataset(&labeled, dir.join("pslab.jsonl"))?;
        write_audit(&audit, &dir.join("audit.jsonl"))?;
        if m.has(Stage::Retrain) {
            let cfg = TrainConfig {
                seed,
                ..retrain_cfg.clone()
            };
            let outcome = fit(&labeled, &cfg)?;
            save_outcome(&outcome, dir, "retrained")?;
            models.push(("retrained", outcome.model));
        }
    }

    let mut rows = Vec::new();
    if m.has(Stage::Eval) {
        let test_ds = load_with_pairs(test_path.as_deref().expect("checked"), test_pairs.as_deref())?;
        let agg = AggConfig::new(test_ds.agg(), m.eval.approx, m.eval.sharpness)?;
        agg.check_for(test_ds.label_kind)?;
        for (name, model) in &models {
            let report = evaluate(&test_ds, Scorer::Model(model), &agg)?;
            write_report(&report, dir, &format!("report-{name}"))?;
            rows.push((*name, report));
        }
        if m.eval.cosine_baseline {
            let report = evaluate(&test_ds, Scorer::Cosine, &agg)?;
            write_report(&report, dir, "report-cosine")?;
            rows.push(("cosine", report));
        }
    }
    Ok(rows)
}
