//! Run configuration, named attack pipelines and the command
//! implementations behind the CLI.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, FeatureMode};
use crate::desk::{prepare_desk, save_rgb, DeskConfig, DeskReport};
use crate::error::{Error, Result};
use crate::harness::{
    craft, evaluate_targets, load_dataset, run_ablation, AblationGrid, AblationKind, AblationTable, EvalDataset,
    HarnessOptions, Timing, TransferReport,
};
use crate::model::{hex, ModelHandle, Registry};
use crate::plot::{render, write_svg, Series, Style};
use crate::tensor::{ImageBatch, Tensor};
use crate::transforms::TransformKind;

/// Preset encoding the reference hyperparameters.
pub const PAPER_PRESET: &str = include_str!("../../../presets/paper.cfg");
/// Preset for the locally trained desk zoo.
pub const DESK_PRESET: &str = include_str!("../../../presets/desk.cfg");

/// Named attack pipelines. Every named pipeline includes momentum and
/// translation-invariant gradient smoothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackName {
    #[serde(rename = "MI")]
    Mi,
    #[serde(rename = "DI")]
    Di,
    #[serde(rename = "RDI")]
    Rdi,
    #[serde(rename = "RDI-SI")]
    RdiSi,
    #[serde(rename = "RDI-VT")]
    RdiVt,
    #[serde(rename = "RDI-Admix")]
    RdiAdmix,
    #[serde(rename = "RDI-CFM")]
    RdiCfm,
    #[serde(rename = "RDI-FTM")]
    RdiFtm,
    #[serde(rename = "RDI-FTM-E")]
    RdiFtmE,
    /// Transforms and feature mode taken verbatim from `params`.
    #[serde(rename = "custom")]
    Custom,
}

impl AttackName {
    pub const NAMED: [AttackName; 9] = [
        AttackName::Mi,
        AttackName::Di,
        AttackName::Rdi,
        AttackName::RdiSi,
        AttackName::RdiVt,
        AttackName::RdiAdmix,
        AttackName::RdiCfm,
        AttackName::RdiFtm,
        AttackName::RdiFtmE,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AttackName::Mi => "MI",
            AttackName::Di => "DI",
            AttackName::Rdi => "RDI",
            AttackName::RdiSi => "RDI-SI",
            AttackName::RdiVt => "RDI-VT",
            AttackName::RdiAdmix => "RDI-Admix",
            AttackName::RdiCfm => "RDI-CFM",
            AttackName::RdiFtm => "RDI-FTM",
            AttackName::RdiFtmE => "RDI-FTM-E",
            AttackName::Custom => "custom",
        }
    }

    /// Transform list and feature mode of a named pipeline.
    pub fn pipeline(self) -> Option<(Vec<TransformKind>, FeatureMode)> {
        use TransformKind::*;
        Some(match self {
            AttackName::Mi => (vec![TI], FeatureMode::Off),
            AttackName::Di => (vec![DI, TI], FeatureMode::Off),
            AttackName::Rdi => (vec![RDI, TI], FeatureMode::Off),
            AttackName::RdiSi => (vec![RDI, SI, TI], FeatureMode::Off),
            AttackName::RdiVt => (vec![RDI, VT, TI], FeatureMode::Off),
            AttackName::RdiAdmix => (vec![RDI, Admix, TI], FeatureMode::Off),
            AttackName::RdiCfm => (vec![RDI, TI], FeatureMode::Cfm),
            AttackName::RdiFtm | AttackName::RdiFtmE => (vec![RDI, TI], FeatureMode::Ftm),
            AttackName::Custom => return None,
        })
    }
}

impl std::str::FromStr for AttackName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AttackName::NAMED
            .iter()
            .chain([AttackName::Custom].iter())
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::config("attack", format!("unknown attack `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Desk,
    Full,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub attack: AttackName,
    pub mode: Mode,
    /// Dataset manifest CSV.
    pub dataset: PathBuf,
    /// Model registry JSON.
    pub registry: PathBuf,
    pub output_dir: PathBuf,
    pub surrogates: Vec<String>,
    #[serde(default)]
    pub targets: Vec<String>,
    /// Use only the first records of the dataset.
    #[serde(default)]
    pub max_images: Option<usize>,
    #[serde(default)]
    pub harness: HarnessOptions,
    /// Also write 8-bit PNGs of the adversarial images.
    #[serde(default)]
    pub export_png: bool,
    #[serde(default)]
    pub params: AttackConfig,
}

impl RunConfig {
    /// Parse TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        Self::from_toml_with(text, base, &[])
    }

    /// Parse TOML text after applying `key.path=value` overrides.
    pub fn from_toml_with(text: &str, base: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| schema_error(&e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| schema_error(&e))?;
        if let Some(base) = base {
            for p in [&mut cfg.dataset, &mut cfg.registry, &mut cfg.output_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, path.parent(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// The attack configuration the named pipeline expands to.
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let mut c = self.params.clone();
        if let Some((transforms, mode)) = self.attack.pipeline() {
            c.transforms = transforms;
            c.feature_mode = mode;
        }
        // The ensemble pipeline defaults to two copies.
        if self.attack == AttackName::RdiFtmE && c.ensemble_k == 1 {
            c.ensemble_k = 2;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack_config()?;
        if self.surrogates.is_empty() {
            return Err(Error::config("surrogates", "at least one surrogate is required"));
        }
        if self.harness.batch_size == 0 {
            return Err(Error::config("harness.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

fn schema_error(e: &toml::de::Error) -> Error {
    Error::config(
        "config",
        e.message().to_string() + &e.span().map(|s| format!(" (bytes {s:?})")).unwrap_or_default(),
    )
}

/// Set `a.b.c=value` in a TOML table. The value is parsed as TOML and taken
/// as a plain string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("`{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

const TENSOR_MAGIC: &[u8; 4] = b"FTMT";

/// Lossless little-endian f32 tensor file.
pub fn write_tensor(path: &Path, t: &ImageBatch) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + t.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    for d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ImageBatch> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = || Error::Evaluation(format!("{} is not a tensor file", path.display()));
    if buf.len() < 36 || &buf[..4] != TENSOR_MAGIC {
        return Err(bad());
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        *d = u64::from_le_bytes(buf[4 + 8 * i..12 + 8 * i].try_into().expect("8 bytes")) as usize;
    }
    let body = &buf[36..];
    if body.len() != shape.iter().product::<usize>() * 4 {
        return Err(bad());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(shape, data)
}

fn sha256_hex(path: &Path) -> Result<String> {
    crate::model::file_sha256(path)
}

/// Crafted set of one surrogate as recorded in `attack.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftedEntry {
    pub surrogate: String,
    /// Tensor file relative to the run directory.
    pub file: String,
    pub sha256: String,
    pub per_image_seconds: f64,
    /// Image-weighted mean loss per iteration.
    pub per_iter_loss: Vec<f64>,
}

/// Summary of a `attack` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub config: AttackConfig,
    pub dataset: String,
    pub images: usize,
    pub target_labels: Vec<usize>,
    pub crafted: Vec<CraftedEntry>,
}

/// Write `cfg` with absolute paths so the run directory can be evaluated
/// from anywhere.
fn write_snapshot(cfg: &RunConfig, snap: &Path) -> Result<()> {
    let mut c = cfg.clone();
    for p in [&mut c.dataset, &mut c.registry, &mut c.output_dir] {
        *p = std::path::absolute(&*p).map_err(|e| Error::io(p.clone(), e))?;
    }
    std::fs::write(snap, c.to_toml()?).map_err(|e| Error::io(snap, e))
}

fn load_subset(cfg: &RunConfig) -> Result<EvalDataset> {
    let d = load_dataset(&cfg.dataset)?;
    Ok(match cfg.max_images {
        Some(n) => d.take(n),
        None => d,
    })
}

fn load_models(reg: &Registry, names: &[String]) -> Result<Vec<ModelHandle<f32>>> {
    names.iter().map(|n| reg.load_model(n)).collect()
}

/// Craft adversarial examples for every surrogate and write them, a config
/// snapshot and the attack summary into the output directory.
pub fn cmd_attack(cfg: &RunConfig) -> Result<AttackSummary> {
    cfg.validate()?;
    let acfg = cfg.attack_config()?;
    let reg = Registry::load(&cfg.registry)?;
    let surrogates = load_models(&reg, &cfg.surrogates)?;
    let data = load_subset(cfg)?;
    let out = &cfg.output_dir;
    let adv_dir = out.join("adv");
    std::fs::create_dir_all(&adv_dir).map_err(|e| Error::io(&adv_dir, e))?;
    let snap = out.join("config.toml");
    write_snapshot(cfg, &snap)?;
    let mut crafted = Vec::new();
    let mut report = TransferReport {
        dataset: data.id.clone(),
        images: data.len(),
        options: Some(cfg.harness.clone()),
        config_snapshot: vec![crate::harness::NamedAttack {
            name: cfg.attack.label().to_string(),
            config: acfg.clone(),
        }],
        ..Default::default()
    };
    for s in &surrogates {
        log::info!("crafting {} on {} ({} images)", cfg.attack.label(), s.name, data.len());
        let c = craft(s, &data, &acfg, &cfg.harness)?;
        let file = format!("adv/{}.ftmt", s.name);
        let path = out.join(&file);
        write_tensor(&path, &c.x_adv)?;
        if cfg.export_png {
            log::warn!(
                "PNG export quantizes to 8 bits and may leave the epsilon ball; use the tensor file for evaluation"
            );
            let dir = out.join("png").join(&s.name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..c.x_adv.batch() {
                save_rgb(&dir.join(format!("{i:04}.png")), &c.x_adv, i)?;
            }
        }
        report.timing.push(Timing {
            attack: cfg.attack.label().to_string(),
            surrogate: s.name.clone(),
            images: data.len(),
            per_image_seconds: Some(c.per_image_seconds),
        });
        crafted.push(CraftedEntry {
            surrogate: s.name.clone(),
            sha256: sha256_hex(&path)?,
            file,
            per_image_seconds: c.per_image_seconds,
            per_iter_loss: c.loss,
        });
    }
    let summary = AttackSummary {
        attack: cfg.attack.label().to_string(),
        config: acfg,
        dataset: data.id.clone(),
        images: data.len(),
        target_labels: data.target_labels.clone(),
        crafted,
    };
    let p = out.join("attack.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    report.save(out)?;
    Ok(summary)
}

/// Evaluate stored adversarial sets of `run_dir` on `targets` (all
/// configured targets when empty) and update the run's report.
pub fn cmd_evaluate(run_dir: &Path, targets: &[String]) -> Result<TransferReport> {
    let snap = run_dir.join("config.toml");
    if !snap.is_file() {
        return Err(Error::Evaluation(format!(
            "{} has no config.toml; run `attack` first",
            run_dir.display()
        )));
    }
    let cfg = RunConfig::load(&snap, &[])?;
    let p = run_dir.join("attack.json");
    let text = std::fs::read_to_string(&p).map_err(|_| Error::Evaluation(format!("missing {}", p.display())))?;
    let summary: AttackSummary = serde_json::from_str(&text)?;
    let names = if targets.is_empty() {
        cfg.targets.clone()
    } else {
        targets.to_vec()
    };
    if names.is_empty() {
        return Err(Error::config("targets", "no evaluation targets given"));
    }
    let reg = Registry::load(&cfg.registry)?;
    let models = load_models(&reg, &names)?;
    let refs: Vec<&ModelHandle<f32>> = models.iter().collect();
    let mut report = TransferReport::load(run_dir).unwrap_or_default();
    for c in &summary.crafted {
        let path = run_dir.join(&c.file);
        if !path.is_file() {
            return Err(Error::Evaluation(format!(
                "missing adversarial tensor {}",
                path.display()
            )));
        }
        if sha256_hex(&path)? != c.sha256 {
            return Err(Error::Evaluation(format!("checksum mismatch for {}", path.display())));
        }
        let x = read_tensor(&path)?;
        let n = evaluate_targets(
            &mut report,
            &summary.attack,
            &c.surrogate,
            &x,
            &summary.target_labels,
            &refs,
        );
        if n > 0 {
            log::warn!("{n} existing cells for {} were overwritten", c.surrogate);
        }
    }
    report.save(run_dir)?;
    if report.failed() {
        return Err(Error::Evaluation(format!("{} has failed cells", run_dir.display())));
    }
    Ok(report)
}

/// Run one ablation for the first surrogate and write its table and plot
/// into the output directory.
pub fn cmd_ablate(cfg: &RunConfig, grid: &AblationGrid) -> Result<AblationTable> {
    cfg.validate()?;
    let acfg = cfg.attack_config()?;
    let reg = Registry::load(&cfg.registry)?;
    let s = reg.load_model(&cfg.surrogates[0])?;
    let names = if cfg.targets.is_empty() {
        reg.names().iter().map(|s| s.to_string()).collect()
    } else {
        cfg.targets.clone()
    };
    let targets = load_models(&reg, &names)?;
    let refs: Vec<&ModelHandle<f32>> = targets.iter().collect();
    let data = load_subset(cfg)?;
    let table = run_ablation(grid, &acfg, &s, &refs, &data, &cfg.harness)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let snap = cfg.output_dir.join("config.toml");
    write_snapshot(cfg, &snap)?;
    table.save(&cfg.output_dir)?;
    Ok(table)
}

/// Default sweep of an ablation kind for a run of `iterations` steps.
pub fn default_grid(kind: AblationKind, iterations: usize) -> AblationGrid {
    match kind {
        AblationKind::Iterations => AblationGrid::Iterations(
            [10, 20, 50, 100, 200, 300]
                .into_iter()
                .filter(|&t| t <= iterations)
                .collect(),
        ),
        AblationKind::BetaSweep => AblationGrid::Beta(vec![0.0, 0.005, 0.01, 0.02, 0.05]),
        AblationKind::PAlphaGrid => AblationGrid::PAlpha {
            p: vec![0.1, 0.2, 0.5, 1.0],
            alpha_max: vec![0.25, 0.5, 0.75, 1.0],
        },
        AblationKind::EnsembleSize => AblationGrid::Ensemble(vec![1, 2, 3, 4]),
    }
}

/// Train the desk zoo and write its registry and evaluation manifest.
pub fn cmd_prepare_desk(cfg: &DeskConfig, out_dir: &Path) -> Result<DeskReport> {
    prepare_desk(cfg, out_dir)
}

/// One point of the cost/success scatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub run: String,
    pub attack: String,
    pub surrogate: String,
    pub per_image_seconds: f64,
    /// Black-box mean, or white-box success when no black-box target exists.
    pub success: f64,
}

/// Collect completed runs into a scatter of success against per-image
/// time, a combined matrix and copies of their ablation plots.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<ScatterPoint>> {
    if run_dirs.is_empty() {
        return Err(Error::config("runs", "at least one run directory is required"));
    }
    std::fs::create_dir_all(out_dir.join("plots")).map_err(|e| Error::io(out_dir, e))?;
    let mut points = Vec::new();
    let mut combined = TransferReport::default();
    for dir in run_dirs {
        let run = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Ok(rep) = TransferReport::load(dir) {
            for t in &rep.timing {
                let Some(secs) = t.per_image_seconds else { continue };
                let success = rep
                    .black_box_mean(&t.attack, &t.surrogate)
                    .or_else(|| rep.success(&t.attack, &t.surrogate, &t.surrogate));
                if let Some(success) = success {
                    points.push(ScatterPoint {
                        run: run.clone(),
                        attack: t.attack.clone(),
                        surrogate: t.surrogate.clone(),
                        per_image_seconds: secs,
                        success,
                    });
                }
            }
            for c in rep.cells {
                combined.cells.push(crate::harness::Cell {
                    attack: format!("{run}/{}", c.attack),
                    ..c
                });
            }
        }
        if let Ok(entries) = std::fs::read_dir(dir) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if name.starts_with("ablation_") && name.ends_with(".json") {
                    let text = std::fs::read_to_string(e.path()).map_err(|err| Error::io(e.path(), err))?;
                    let table: AblationTable = serde_json::from_str(&text)?;
                    let stem = name.trim_end_matches(".json");
                    let svg = render(
                        &format!("{run}: {stem}"),
                        "value",
                        "targeted success rate",
                        &table.series(),
                        Style::Lines,
                    );
                    write_svg(&out_dir.join("plots").join(format!("{run}_{stem}.svg")), &svg)?;
                }
            }
        }
    }
    let mut by_attack: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &points {
        by_attack
            .entry(format!("{} ({})", p.attack, p.surrogate))
            .or_default()
            .push((p.per_image_seconds, p.success));
    }
    let series: Vec<Series> = by_attack
        .into_iter()
        .map(|(name, points)| Series { name, points })
        .collect();
    let svg = render(
        "success vs. cost",
        "seconds per image",
        "targeted success rate",
        &series,
        Style::Markers,
    );
    write_svg(&out_dir.join("plots").join("scatter.svg"), &svg)?;
    let p = out_dir.join("scatter.json");
    std::fs::write(&p, serde_json::to_string_pretty(&points)?).map_err(|e| Error::io(&p, e))?;
    combined.save(out_dir)?;
    Ok(points)
}

/// Hex digest of a byte string, used for config fingerprints.
pub fn fingerprint(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let paper = RunConfig::from_toml(PAPER_PRESET, None).unwrap();
        paper.validate().unwrap();
        assert_eq!(paper.attack, AttackName::RdiFtm);
        let c = paper.attack_config().unwrap();
        assert_eq!(c.beta, 0.01);
        assert_eq!(c.p, 0.1);
        assert_eq!(c.alpha_max, 0.75);
        assert_eq!(c.mu, 1.0);
        assert_eq!(c.epsilon, 16.0 / 255.0);
        assert_eq!(c.eta, 2.0 / 255.0);
        assert_eq!(c.iterations, 300);
        let desk = RunConfig::from_toml(DESK_PRESET, None).unwrap();
        desk.validate().unwrap();
        assert_eq!(desk.mode, Mode::Desk);
    }

    #[test]
    fn config_round_trips() {
        let mut c = RunConfig::from_toml(DESK_PRESET, None).unwrap();
        c.params.layers = Some(vec!["conv4".into()]);
        c.max_images = Some(7);
        let back = RunConfig::from_toml(&c.to_toml().unwrap(), None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_schema_errors() {
        let c = RunConfig::from_toml_with(
            DESK_PRESET,
            None,
            &[
                "params.beta=0.02".into(),
                "attack=\"RDI\"".into(),
                "params.seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.params.beta, 0.02);
        assert_eq!(c.params.seed, 9);
        assert_eq!(c.attack, AttackName::Rdi);
        let e = RunConfig::from_toml_with(DESK_PRESET, None, &["params.nonsense=1".into()]).unwrap_err();
        assert!(
            matches!(e, Error::Config { .. }) && e.to_string().contains("nonsense"),
            "{e}"
        );
        assert_eq!(e.exit_code(), 2);
        let c = RunConfig::from_toml_with(DESK_PRESET, None, &["attack=\"RDI-FTM-E\"".into()]).unwrap();
        assert_eq!(c.attack_config().unwrap().ensemble_k, 2);
        let c = RunConfig::from_toml_with(
            DESK_PRESET,
            None,
            &["attack=\"RDI-FTM-E\"".into(), "params.ensemble_k=3".into()],
        )
        .unwrap();
        assert_eq!(c.attack_config().unwrap().ensemble_k, 3);
    }

    #[test]
    fn relative_paths_resolve_against_the_config() {
        let c = RunConfig::from_toml(DESK_PRESET, Some(Path::new("/x/y"))).unwrap();
        assert!(c.registry.starts_with("/x/y"));
    }

    #[test]
    fn tensor_files_are_lossless() {
        let d = tempfile::tempdir().unwrap();
        let t = Tensor::from_vec([2, 1, 1, 3], vec![0.1f32, 1.0 / 3.0, f32::MIN_POSITIVE, 0.0, 1.0, 0.7]).unwrap();
        let p = d.path().join("a.ftmt");
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        std::fs::write(&p, b"nope").unwrap();
        assert!(read_tensor(&p).is_err());
    }

    #[test]
    fn attack_names_parse() {
        for a in AttackName::NAMED {
            assert_eq!(a.label().parse::<AttackName>().unwrap(), a);
        }
        assert!("XYZ".parse::<AttackName>().is_err());
    }
}
