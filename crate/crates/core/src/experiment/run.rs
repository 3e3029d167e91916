use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{hash_file, Manifest, StageIo};
use super::ExperimentConfig;
use crate::dataset::Regime;
use crate::error::{Error, Result};
use crate::eval::{
    calibration, calibration_csv, curve_pair_csv, mse, mse_csv, mse_raw_csv, population_average, treatment_effect,
    write_csv, ChannelScale, Curve, Source,
};
use crate::gcomp::{g_compute_dataset, read_mc_outputs, write_mc_outputs, GcompOptions, StrategySpec};
use crate::gnet::{fit, load_checkpoint, save_checkpoint, GNet, GNetConfig, TrainReport};
use crate::io::{read_dataset, read_json, write_dataset, write_json};
use crate::rng::{derive_seed, Purpose};
use crate::sim::{generate_dataset, SimPolicy};

const OBSERVATIONAL: &str = "data/observational.ndjson";
const STRATEGIES: [(&str, Regime, SimPolicy); 2] = [("c1", Regime::C1, SimPolicy::C1), ("c2", Regime::C2, SimPolicy::C2)];

fn cohort_file(strategy: &str) -> String {
    format!("data/{strategy}.ndjson")
}

fn checkpoint_file(model: &str) -> String {
    format!("models/{model}.json")
}

fn report_file(model: &str) -> String {
    format!("models/{model}_train.json")
}

fn mc_file(model: &str, strategy: &str) -> String {
    format!("mc/{model}/{strategy}.ndjson")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub start_t: usize,
    pub pooled_mse: f64,
    pub per_time_mse: Vec<f64>,
    pub pooled_coverage: f64,
    pub per_time_coverage: Vec<f64>,
    pub nominal_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurves {
    pub estimated: Curve,
    pub truth: Curve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub strategies: Vec<StrategySummary>,
    /// `c1 - c2` per curve channel.
    pub effects: BTreeMap<String, EffectCurves>,
}

impl ModelSummary {
    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == name)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summaries: Vec<ModelSummary>,
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl Runner<'_> {
    fn stage<T>(
        &mut self,
        name: &str,
        declared: &[String],
        body: impl FnOnce(&mut StageIo<'_>) -> Result<T>,
    ) -> Result<T> {
        log::info!("stage {name}");
        let mut io = StageIo::new(self.dir, name, declared);
        let result = body(&mut io);
        let mut record = io.record;
        for out in &record.outputs {
            let path = self.dir.join(out);
            if path.is_file() {
                self.manifest.files.insert(out.clone(), hash_file(&path)?);
            }
        }
        match &result {
            Ok(_) => record.complete = true,
            Err(e) => record.error = Some(e.to_string()),
        }
        self.manifest.stages.push(record);
        self.manifest.save(self.dir)?;
        result.map_err(|e| Error::Stage {
            stage: name.into(),
            source: Box::new(e),
        })
    }
}

fn seeds(config: &ExperimentConfig, models: &[GNetConfig]) -> BTreeMap<String, u64> {
    let mut s = BTreeMap::new();
    s.insert("master".into(), config.master_seed());
    s.insert("observational_cohort".into(), config.observational_sim().master_seed);
    s.insert("counterfactual_cohort".into(), config.counterfactual_sim().master_seed);
    s.insert("split".into(), derive_seed(config.master_seed(), 0, Purpose::Split));
    s.insert("gcomp".into(), config.gcomp_seed());
    for m in models {
        s.insert(format!("init_{}", m.name), m.seed);
    }
    s
}

/// Runs the whole protocol into `config.output_dir`. On failure the
/// manifest is still written, marked incomplete, listing what was produced.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let models = config.model_configs();
    let mut runner = Runner {
        dir,
        manifest: Manifest::new(config, seeds(config, &models)),
    };
    runner.manifest.save(dir)?;
    let summaries = pipeline(&mut runner, config, &models)?;
    runner.manifest.complete = true;
    runner.manifest.save(dir)?;
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        manifest: runner.manifest,
        summaries,
    })
}

fn pipeline(runner: &mut Runner<'_>, config: &ExperimentConfig, models: &[GNetConfig]) -> Result<Vec<ModelSummary>> {
    let (m, schema) = (config.sim.m, config.schema());
    runner.stage("simulate", &[], |io| {
        write_dataset(&generate_dataset(&config.observational_sim(), Regime::Observational)?, io.output(OBSERVATIONAL))?;
        let cf = config.counterfactual_sim();
        for (name, regime, _) in STRATEGIES {
            write_dataset(&generate_dataset(&cf, regime)?, io.output(&cohort_file(name)))?;
        }
        Ok(())
    })?;

    for cfg in models {
        let name = cfg.name.as_str();
        runner.stage(&format!("train:{name}"), &[OBSERVATIONAL.into()], |io| {
            let ds = read_dataset(io.input(OBSERVATIONAL)?)?;
            let fitted = fit(GNet::build(cfg.clone(), schema.clone())?, &ds, config.train_fraction)?;
            log::info!(
                "{name}: best epoch {} validation loss {:.5}",
                fitted.report.best_epoch,
                fitted.report.best_val_loss
            );
            save_checkpoint(&fitted.model, Some(&fitted.bank), io.output(&checkpoint_file(name)))?;
            write_json(&fitted.report, io.output(&report_file(name)))
        })?;

        for (strategy, _, policy) in STRATEGIES {
            let declared = [checkpoint_file(name), cohort_file(strategy)];
            runner.stage(&format!("gcomp:{name}:{strategy}"), &declared, |io| {
                let (model, bank) = load_checkpoint(io.input(&declared[0])?)?;
                let bank = bank.ok_or_else(|| Error::StateCorruption("checkpoint has no residual bank".into()))?;
                let ds = read_dataset(io.input(&declared[1])?)?;
                let opts = GcompOptions {
                    draws: config.draws,
                    dropout: config.mc_dropout,
                    alphas: config.alphas,
                    seed: config.gcomp_seed(),
                    keep_draws: false,
                };
                let out = g_compute_dataset(&model, &bank, &ds, m, &StrategySpec::builtin(policy), &opts)?;
                write_mc_outputs(&out, io.output(&mc_file(name, strategy)))
            })?;
        }
    }

    let mut summaries = Vec::new();
    for cfg in models {
        let name = cfg.name.as_str();
        let mut declared = vec![OBSERVATIONAL.to_string(), report_file(name)];
        for (s, _, _) in STRATEGIES {
            declared.push(cohort_file(s));
            declared.push(mc_file(name, s));
        }
        let summary = runner.stage(&format!("evaluate:{name}"), &declared, |io| evaluate(io, config, name))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn evaluate(io: &mut StageIo<'_>, config: &ExperimentConfig, name: &str) -> Result<ModelSummary> {
    let m = config.sim.m;
    let observational = read_dataset(io.input(OBSERVATIONAL)?)?;
    let report: TrainReport = read_json(io.input(&report_file(name))?)?;
    let scale = ChannelScale::from_training(&observational, &report.train_indices)?;
    let [lo, hi] = config.alphas;
    let mut strategies = Vec::new();
    let mut arms = Vec::new();
    for (s, _, _) in STRATEGIES {
        let truth = read_dataset(io.input(&cohort_file(s))?)?;
        let mc = read_mc_outputs(io.input(&mc_file(name, s))?)?;
        let table = mse(&mc, &truth, m, &scale)?;
        let cal = calibration(&mc, &truth, m, &scale, lo, hi)?;
        let base = format!("metrics/{name}/{s}");
        write_csv(&mse_csv(&table)?, io.output(&format!("{base}/mse.csv")))?;
        write_csv(&mse_raw_csv(&table)?, io.output(&format!("{base}/mse_raw.csv")))?;
        write_csv(&calibration_csv(&cal)?, io.output(&format!("{base}/calibration.csv")))?;
        for ch in &config.curve_channels {
            let est = population_average(Source::Mc(&mc), ch)?;
            let tru = population_average(Source::Data(&truth), ch)?;
            write_csv(&curve_pair_csv(&est, &tru)?, io.output(&format!("{base}/pop_avg_{ch}.csv")))?;
        }
        strategies.push(StrategySummary {
            strategy: s.into(),
            start_t: table.start_t,
            pooled_mse: table.pooled,
            per_time_mse: table.per_time,
            pooled_coverage: cal.pooled,
            per_time_coverage: cal.per_time.clone(),
            nominal_coverage: cal.nominal(),
        });
        arms.push((truth, mc));
    }
    let mut effects = BTreeMap::new();
    let [(truth1, mc1), (truth2, mc2)] = <[_; 2]>::try_from(arms).expect("two strategies");
    for ch in &config.curve_channels {
        let estimated = treatment_effect(Source::Mc(&mc1), Source::Mc(&mc2), ch)?;
        let truth = treatment_effect(Source::Data(&truth1), Source::Data(&truth2), ch)?.from_step(m);
        write_csv(
            &curve_pair_csv(&estimated, &truth)?,
            io.output(&format!("metrics/{name}/effect_{ch}.csv")),
        )?;
        effects.insert(ch.clone(), EffectCurves { estimated, truth });
    }
    let summary = ModelSummary {
        model: name.into(),
        best_epoch: report.best_epoch,
        best_val_loss: report.best_val_loss,
        strategies,
        effects,
    };
    write_json(&summary, io.output(&format!("metrics/{name}/summary.json")))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{verify_manifest, ModelSpec};
    use crate::gnet::Preset;
    use crate::sim::SimConfig;

    fn tiny(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            sim: SimConfig {
                n: 40,
                k: 6,
                m: 3,
                ..SimConfig::default()
            },
            n_counterfactual: 8,
            models: vec![ModelSpec::Preset(Preset::M1), ModelSpec::Preset(Preset::M2)],
            draws: 5,
            epochs: Some(2),
            output_dir: dir.to_path_buf(),
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn produces_a_verifiable_artifact_set() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny(tmp.path())).unwrap();
        assert!(out.manifest.complete);
        assert_eq!(out.summaries.len(), 2);
        let v = verify_manifest(tmp.path()).unwrap();
        assert!(v.is_ok(), "{v:?}");
        for stage in &out.manifest.stages {
            assert!(stage.reads.iter().all(|r| stage.declared_inputs.contains(r)), "{}", stage.name);
        }
        for model in ["M1", "M2"] {
            assert!(tmp.path().join(checkpoint_file(model)).is_file());
            for s in ["c1", "c2"] {
                let text = std::fs::read_to_string(tmp.path().join(format!("metrics/{model}/{s}/mse.csv"))).unwrap();
                assert_eq!(text.lines().count(), 1 + 3);
            }
        }
        assert!(tmp.path().join("metrics/M1/effect_map.csv").is_file());
        let summary = &out.summaries[0];
        assert_eq!(summary.strategy("c2").unwrap().per_time_mse.len(), 3);
        assert_eq!(summary.effects["cvp"].estimated.start_t, 3);
    }

    #[test]
    fn failure_keeps_partial_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = tiny(tmp.path());
        let mut bad = GNetConfig::preset(Preset::M1, &config.schema());
        bad.learning_rate = 1e300;
        bad.name = "broken".into();
        config.models = vec![ModelSpec::Custom(bad)];
        let err = run_experiment(&config).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "train:broken"), "{err}");
        assert!(!err.is_config());
        let manifest = Manifest::load(tmp.path()).unwrap();
        assert!(!manifest.complete);
        assert!(manifest.files.contains_key(OBSERVATIONAL));
        assert!(manifest.stages.last().unwrap().error.is_some());
        let v = verify_manifest(tmp.path()).unwrap();
        assert!(!v.is_ok());
        assert!(v.mismatched.is_empty() && v.missing.is_empty());
    }
}
