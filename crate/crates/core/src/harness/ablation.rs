use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::train::{run_train, TrainOptions};
use super::RunConfig;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Frontend,
    Backend,
    Data,
    Tweaks,
    Schedulers,
    Final,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Frontend, Suite::Backend, Suite::Data, Suite::Tweaks, Suite::Schedulers, Suite::Final];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Frontend => "frontend",
            Suite::Backend => "backend",
            Suite::Data => "data",
            Suite::Tweaks => "tweaks",
            Suite::Schedulers => "schedulers",
            Suite::Final => "final",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

/// A named change to the base config, stored as JSON merge patches per section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    #[serde(default)]
    pub model: Value,
    #[serde(default)]
    pub recipe: Value,
    #[serde(default)]
    pub data: Value,
}

fn merge(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                merge(t.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (t, p) if !p.is_null() => *t = p.clone(),
        _ => {}
    }
}

impl ExperimentPreset {
    fn new(name: &str, model: Value, recipe: Value, data: Value) -> Self {
        ExperimentPreset { name: name.into(), model, recipe, data }
    }

    /// The base config with this preset's deltas applied; invalid deltas are config errors.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, &json!({ "model": self.model, "recipe": self.recipe, "data": self.data }));
        RunConfig::from_json(&v.to_string())
    }
}

/// The preset grid of a suite. The first preset is the suite's reference row.
pub fn presets(suite: Suite) -> Vec<ExperimentPreset> {
    let none = Value::Null;
    let p = |name: &str, model: Value, recipe: Value, data: Value| ExperimentPreset::new(name, model, recipe, data);
    match suite {
        Suite::Frontend => vec![
            p("baseline", none.clone(), none.clone(), none.clone()),
            p("se", json!({"frontend": {"se_enabled": true}}), none.clone(), none),
        ],
        Suite::Backend => vec![
            p("gru3_dropout", json!({"backend": {"layers": 3, "inter_layer_dropout": 0.2}}), none.clone(), none.clone()),
            p("gru3_no_dropout", json!({"backend": {"layers": 3, "inter_layer_dropout": 0.0}}), none.clone(), none),
        ],
        Suite::Data => vec![
            p("baseline", none.clone(), none.clone(), none.clone()),
            p("word_boundary", json!({"use_word_boundary": true}), none.clone(), none.clone()),
            p("alignment", none.clone(), none, json!({"align": true})),
        ],
        Suite::Tweaks => vec![
            p("baseline", none.clone(), none.clone(), none.clone()),
            p("mixup", none.clone(), json!({"mixup": true}), none.clone()),
            p("label_smoothing", none.clone(), json!({"label_smoothing": true}), none),
        ],
        Suite::Schedulers => ["plateau", "cosine", "exponential"]
            .into_iter()
            .map(|k| p(k, none.clone(), json!({ "scheduler": k }), none.clone()))
            .collect(),
        Suite::Final => vec![
            p("basic", none.clone(), none.clone(), none.clone()),
            p(
                "refined",
                json!({"frontend": {"se_enabled": true}, "use_word_boundary": true}),
                json!({"mixup": true, "label_smoothing": true, "scheduler": "cosine"}),
                none,
            ),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    /// Config the presets modify; `model.num_classes` is taken from the dataset.
    pub base: RunConfig,
    /// Restrict the grid to these preset names; empty runs them all.
    pub only: Vec<String>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions { seeds: vec![0, 1, 2], base: RunConfig::desk_basic(), only: Vec::new() }
    }
}

/// One training run of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    pub preset: String,
    pub seed: u64,
    /// Best validation accuracy of the run; `None` when it failed.
    pub val_acc: Option<f64>,
    pub config_hash: String,
    pub run_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

impl AblationReport {
    pub fn preset_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.preset.as_str()) {
                names.push(&r.preset);
            }
        }
        names
    }

    /// Accuracies of the successful runs of `preset`.
    pub fn accuracies(&self, preset: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.preset == preset).filter_map(|r| r.val_acc).collect()
    }

    /// Mean accuracy of `preset`, or `None` if no run of it succeeded.
    pub fn mean(&self, preset: &str) -> Option<f64> {
        let a = self.accuracies(preset);
        (!a.is_empty()).then(|| mean_std(&a).0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,preset,seed,val_acc\n");
        for r in &self.rows {
            let acc = r.val_acc.map_or_else(|| "NaN".to_string(), |a| format!("{a:?}"));
            let _ = writeln!(out, "{},{},{},{acc}", r.suite, r.preset, r.seed);
        }
        out
    }

    /// Mean ± sample standard deviation per preset, in percent.
    pub fn table(&self) -> String {
        let mut out = format!("suite: {}\n{:<18} {:>5}  {:>16}  runs\n", self.suite.name(), "preset", "ok", "val acc (%)");
        for name in self.preset_names() {
            let acc = self.accuracies(name);
            let total = self.rows.iter().filter(|r| r.preset == name).count();
            let cell = if acc.is_empty() {
                "failed".to_string()
            } else {
                let (m, s) = mean_std(&acc);
                format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)
            };
            let runs: Vec<String> = acc.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
            let _ = writeln!(out, "{name:<18} {:>2}/{:<2}  {cell:>16}  {}", acc.len(), total, runs.join(" "));
        }
        out
    }
}

/// Trains every preset of `suite` once per seed. Each run writes into
/// `out_dir/<preset>/seed<seed>/`; a failing run is recorded and the suite
/// continues. Writes `ablation.csv`, `ablation.json` (with config hashes) and
/// `table.txt` into `out_dir`.
pub fn run_ablation(suite: Suite, data_dir: &Path, out_dir: &Path, opts: &AblationOptions) -> Result<AblationReport> {
    if opts.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let grid = presets(suite);
    if let Some(bad) = opts.only.iter().find(|n| !grid.iter().any(|p| &p.name == *n)) {
        return Err(Error::config("only", format!("suite `{}` has no preset `{bad}`", suite.name())));
    }
    let manifest = DatasetManifest::load(&data_dir.join("manifest.json"))?;
    let mut base = opts.base.clone();
    base.model.num_classes = manifest.class_names.len();
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for preset in grid.into_iter().filter(|p| opts.only.is_empty() || opts.only.contains(&p.name)) {
        let cfg = preset.apply(&base)?;
        for &seed in &opts.seeds {
            let mut cfg = cfg.clone();
            cfg.recipe.seed = seed;
            let run_dir = out_dir.join(&preset.name).join(format!("seed{seed}"));
            info!("{} / {} / seed {seed}", suite.name(), preset.name);
            let outcome = run_train(&cfg, data_dir, &run_dir, &TrainOptions::default());
            let (val_acc, error) = match outcome {
                Ok(s) => (Some(s.best_val_acc), None),
                Err(e) => {
                    warn!("{} / {} / seed {seed} failed: {e}", suite.name(), preset.name);
                    (None, Some(e.to_string()))
                }
            };
            rows.push(AblationRow {
                suite: suite.name().into(),
                preset: preset.name.clone(),
                seed,
                val_acc,
                config_hash: cfg.hash(),
                run_dir,
                error,
            });
        }
    }
    let report = AblationReport { suite, rows };
    fs::write(out_dir.join("ablation.csv"), report.to_csv())?;
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out_dir.join("table.txt"), report.table())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::SchedulerKind;

    #[test]
    fn every_suite_has_unique_names_and_valid_deltas() {
        let base = RunConfig::desk_basic();
        for suite in Suite::ALL {
            let ps = presets(suite);
            let mut names: Vec<&str> = ps.iter().map(|p| p.name.as_str()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), ps.len(), "{suite:?}");
            for p in &ps {
                p.apply(&base).unwrap();
            }
            assert_eq!(suite.name().parse::<Suite>().unwrap(), suite);
        }
        assert!(matches!("tables".parse::<Suite>(), Err(Error::Config { .. })));
    }

    #[test]
    fn refined_preset_is_the_refined_pipeline() {
        let base = RunConfig::desk_basic();
        let final_suite = presets(Suite::Final);
        assert_eq!(final_suite[0].apply(&base).unwrap(), base);
        assert_eq!(final_suite[1].apply(&base).unwrap(), RunConfig::desk_refined());
        let sched = presets(Suite::Schedulers);
        assert_eq!(sched[2].apply(&base).unwrap().recipe.scheduler, SchedulerKind::Exponential);
    }

    #[test]
    fn bad_deltas_are_config_errors() {
        let p = ExperimentPreset::new("x", json!({"frontend": {"depth": 3}}), Value::Null, Value::Null);
        let err = p.apply(&RunConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path.starts_with("model.frontend")), "{err}");
    }

    #[test]
    fn table_and_csv() {
        let row = |preset: &str, seed, acc| AblationRow {
            suite: "tweaks".into(),
            preset: preset.into(),
            seed,
            val_acc: acc,
            config_hash: "h".into(),
            run_dir: PathBuf::new(),
            error: acc.is_none().then(|| "boom".to_string()),
        };
        let report = AblationReport {
            suite: Suite::Tweaks,
            rows: vec![row("baseline", 0, Some(0.5)), row("baseline", 1, Some(0.7)), row("mixup", 0, None)],
        };
        assert!((report.mean("baseline").unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(report.mean("mixup"), None);
        assert_eq!(report.to_csv(), "suite,preset,seed,val_acc\ntweaks,baseline,0,0.5\ntweaks,baseline,1,0.7\ntweaks,mixup,0,NaN\n");
        let table = report.table();
        assert!(table.contains("60.00 ± 14.14"), "{table}");
        assert!(table.contains("failed"));
    }
}
