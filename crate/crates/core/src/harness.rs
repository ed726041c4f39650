//! Evaluation harness: dataset ingestion, targeted success rates, transfer
//! matrices with craft timing, ablation sweeps and their persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_with, AttackConfig, RunOptions};
use crate::desk::load_rgb;
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::plot::{render, write_svg, Series, Style};
use crate::tensor::{ImageBatch, Real, Tensor};

/// Images with true and target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalDataset {
    pub id: String,
    pub paths: Vec<PathBuf>,
    pub images: ImageBatch,
    pub true_labels: Vec<usize>,
    pub target_labels: Vec<usize>,
}

impl EvalDataset {
    pub fn new(id: &str, images: ImageBatch, true_labels: Vec<usize>, target_labels: Vec<usize>) -> Result<Self> {
        let n = images.batch();
        if true_labels.len() != n || target_labels.len() != n {
            return Err(Error::Input(format!(
                "{n} images but {} true and {} target labels",
                true_labels.len(),
                target_labels.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| true_labels[i] == target_labels[i]) {
            return Err(Error::Dataset {
                row: Some(i + 1),
                msg: format!("target label equals true label {}", true_labels[i]),
            });
        }
        Ok(EvalDataset {
            id: id.to_string(),
            paths: Vec::new(),
            images,
            true_labels,
            target_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    /// The first `n` records.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        EvalDataset {
            id: self.id.clone(),
            paths: self.paths.iter().take(n).cloned().collect(),
            images: self.images.slice_batch(0, n),
            true_labels: self.true_labels[..n].to_vec(),
            target_labels: self.target_labels[..n].to_vec(),
        }
    }
}

#[derive(Deserialize)]
struct ManifestRow {
    image_path: String,
    true_label: String,
    target_label: String,
}

/// Load a CSV manifest with columns `image_path, true_label, target_label`.
/// Image paths are relative to the manifest. Row numbers in errors count
/// data rows from 1.
pub fn load_dataset(manifest_path: &Path) -> Result<EvalDataset> {
    let mut rdr = csv::Reader::from_path(manifest_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(manifest_path, io),
        k => Error::Dataset {
            row: None,
            msg: format!("{k:?}"),
        },
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut paths = Vec::new();
    let mut true_labels = Vec::new();
    let mut target_labels = Vec::new();
    let mut items: Vec<ImageBatch> = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Dataset {
            row: Some(row),
            msg: format!("malformed row: {e}"),
        })?;
        let label = |s: &str, what: &str| {
            s.trim().parse::<usize>().map_err(|_| Error::Dataset {
                row: Some(row),
                msg: format!("{what} `{s}` is not a non-negative integer"),
            })
        };
        let y = label(&rec.true_label, "true_label")?;
        let t = label(&rec.target_label, "target_label")?;
        if y == t {
            return Err(Error::Dataset {
                row: Some(row),
                msg: format!("target label equals true label {y}"),
            });
        }
        let path = root.join(rec.image_path.trim());
        if !path.is_file() {
            return Err(Error::Dataset {
                row: Some(row),
                msg: format!("missing image {}", path.display()),
            });
        }
        let img = load_rgb(&path).map_err(|e| Error::Dataset {
            row: Some(row),
            msg: e.to_string(),
        })?;
        if let Some(first) = items.first() {
            if first.shape() != img.shape() {
                return Err(Error::Dataset {
                    row: Some(row),
                    msg: format!("image shape {:?} differs from {:?}", img.shape(), first.shape()),
                });
            }
        }
        items.push(img);
        paths.push(path);
        true_labels.push(y);
        target_labels.push(t);
    }
    if items.is_empty() {
        return Err(Error::Dataset {
            row: None,
            msg: "manifest has no rows".into(),
        });
    }
    let images = Tensor::concat(&items)?;
    let id = manifest_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(EvalDataset {
        id,
        paths,
        images,
        true_labels,
        target_labels,
    })
}

/// Fraction of images whose top-1 prediction is the target label.
pub fn targeted_success_rate<T: Real>(x_adv: &Tensor<T>, target_model: &ModelHandle<T>, y_t: &[usize]) -> Result<f64> {
    if y_t.len() != x_adv.batch() {
        return Err(Error::Input(format!(
            "{} labels for {} images",
            y_t.len(),
            x_adv.batch()
        )));
    }
    if y_t.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in (0..x_adv.batch()).step_by(128) {
        let e = (s + 128).min(x_adv.batch());
        let pred = target_model.predict_logits(&x_adv.slice_batch(s, e))?.argmax_rows();
        hits += pred.iter().zip(&y_t[s..e]).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / y_t.len() as f64)
}

/// An attack under a display name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    pub config: AttackConfig,
}

/// Crafting options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessOptions {
    /// Images per attack batch; each batch has its own random streams.
    pub batch_size: usize,
    /// Also record adversarial images after these iteration counts.
    pub checkpoints: Vec<usize>,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions {
            batch_size: 32,
            checkpoints: Vec::new(),
        }
    }
}

/// Adversarial images of a whole dataset.
#[derive(Clone, Debug)]
pub struct Crafted {
    pub x_adv: ImageBatch,
    /// Craft wall time divided by the number of images.
    pub per_image_seconds: f64,
    /// Image-weighted mean loss per iteration.
    pub loss: Vec<f64>,
    /// `(iterations completed, images)` at each requested checkpoint.
    pub checkpoints: Vec<(usize, ImageBatch)>,
}

/// Craft adversarial examples for the dataset in batches.
pub fn craft(
    surrogate: &ModelHandle<f32>,
    data: &EvalDataset,
    cfg: &AttackConfig,
    opts: &HarnessOptions,
) -> Result<Crafted> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let n = data.len();
    let mut parts = Vec::new();
    let mut seconds = 0.0;
    let mut loss = vec![0.0; cfg.iterations];
    let mut marks: Vec<usize> = opts
        .checkpoints
        .iter()
        .copied()
        .filter(|&c| c >= 1 && c <= cfg.iterations)
        .collect();
    marks.sort_unstable();
    marks.dedup();
    let mut cps: Vec<Vec<ImageBatch>> = vec![Vec::new(); marks.len()];
    for (bi, s) in (0..n).step_by(opts.batch_size).enumerate() {
        let e = (s + opts.batch_size).min(n);
        let x = data.images.slice_batch(s, e);
        let y = &data.target_labels[s..e];
        let run = RunOptions {
            batch_index: bi as u64,
            trace_features: false,
        };
        let r = run_attack_with(surrogate, &x, y, cfg, &run, &mut |st| {
            if let Ok(k) = marks.binary_search(&st.iter) {
                cps[k].push(st.x_adv.clone());
            }
        })?;
        seconds += r.elapsed_seconds * (e - s) as f64;
        for (a, l) in loss.iter_mut().zip(&r.per_iter_loss) {
            *a += l * (e - s) as f64 / n as f64;
        }
        parts.push(r.x_adv_final);
    }
    let checkpoints = marks
        .iter()
        .zip(cps)
        .map(|(&m, v)| Ok((m, Tensor::concat(&v)?)))
        .collect::<Result<_>>()?;
    Ok(Crafted {
        x_adv: Tensor::concat(&parts)?,
        per_image_seconds: seconds / n as f64,
        loss,
        checkpoints,
    })
}

/// One matrix entry; `success` is absent when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub attack: String,
    pub surrogate: String,
    pub target: String,
    pub white_box: bool,
    pub success: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub attack: String,
    pub surrogate: String,
    pub images: usize,
    pub per_image_seconds: Option<f64>,
}

/// Success after a number of iterations, per target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub attack: String,
    pub surrogate: String,
    pub target: String,
    pub iterations: Vec<usize>,
    pub success: Vec<f64>,
}

/// Surrogate-to-target success matrix with craft timing and the
/// configuration of every attack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub dataset: String,
    pub images: usize,
    pub options: Option<HarnessOptions>,
    pub cells: Vec<Cell>,
    pub timing: Vec<Timing>,
    pub config_snapshot: Vec<NamedAttack>,
    pub per_iteration_curves: Vec<SuccessCurve>,
}

impl TransferReport {
    pub fn success(&self, attack: &str, surrogate: &str, target: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.attack == attack && c.surrogate == surrogate && c.target == target)
            .and_then(|c| c.success)
    }

    /// Mean success over black-box targets, when there is at least one.
    pub fn black_box_mean(&self, attack: &str, surrogate: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.attack == attack && c.surrogate == surrogate && !c.white_box)
            .filter_map(|c| c.success)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn per_image_seconds(&self, attack: &str, surrogate: &str) -> Option<f64> {
        self.timing
            .iter()
            .find(|t| t.attack == attack && t.surrogate == surrogate)
            .and_then(|t| t.per_image_seconds)
    }

    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some()) || self.timing.iter().any(|t| t.per_image_seconds.is_none())
    }

    /// Insert or replace a cell; returns whether an existing cell was
    /// overwritten.
    pub fn upsert(&mut self, cell: Cell) -> bool {
        match self
            .cells
            .iter_mut()
            .find(|c| c.attack == cell.attack && c.surrogate == cell.surrogate && c.target == cell.target)
        {
            Some(c) => {
                *c = cell;
                true
            }
            None => {
                self.cells.push(cell);
                false
            }
        }
    }

    /// Write `report.json` and `matrix.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("matrix.csv");
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["attack", "surrogate", "target", "white_box", "success", "error"])?;
        for c in &self.cells {
            w.write_record([
                c.attack.clone(),
                c.surrogate.clone(),
                c.target.clone(),
                c.white_box.to_string(),
                c.success.map(|s| format!("{s:.6}")).unwrap_or_default(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evaluate adversarial images on every target and record the cells.
pub fn evaluate_targets(
    report: &mut TransferReport,
    attack: &str,
    surrogate: &str,
    x_adv: &ImageBatch,
    y_t: &[usize],
    targets: &[&ModelHandle<f32>],
) -> usize {
    let mut overwritten = 0;
    for t in targets {
        let (success, error) = match targeted_success_rate(x_adv, t, y_t) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let replaced = report.upsert(Cell {
            attack: attack.to_string(),
            surrogate: surrogate.to_string(),
            target: t.name.clone(),
            white_box: t.name == surrogate,
            success,
            error,
        });
        if replaced {
            log::warn!("cell ({attack}, {surrogate}, {}) overwritten", t.name);
            overwritten += 1;
        }
    }
    overwritten
}

/// Craft once per `(attack, surrogate)` and evaluate on every target.
/// Failures are recorded in the report rather than aborting the run.
pub fn run_transfer_matrix(
    attacks: &[NamedAttack],
    surrogates: &[&ModelHandle<f32>],
    targets: &[&ModelHandle<f32>],
    dataset: &EvalDataset,
    opts: &HarnessOptions,
) -> TransferReport {
    run_transfer_matrix_with(attacks, surrogates, targets, dataset, opts, &mut |_, _, _| {})
}

/// [`run_transfer_matrix`] that hands every crafted set to `sink`.
pub fn run_transfer_matrix_with(
    attacks: &[NamedAttack],
    surrogates: &[&ModelHandle<f32>],
    targets: &[&ModelHandle<f32>],
    dataset: &EvalDataset,
    opts: &HarnessOptions,
    sink: &mut dyn FnMut(&NamedAttack, &str, &Crafted),
) -> TransferReport {
    let mut report = TransferReport {
        dataset: dataset.id.clone(),
        images: dataset.len(),
        options: Some(opts.clone()),
        config_snapshot: attacks.to_vec(),
        ..Default::default()
    };
    for a in attacks {
        for s in surrogates {
            log::info!("crafting {} on {}", a.name, s.name);
            match craft(s, dataset, &a.config, opts) {
                Ok(c) => {
                    report.timing.push(Timing {
                        attack: a.name.clone(),
                        surrogate: s.name.clone(),
                        images: dataset.len(),
                        per_image_seconds: Some(c.per_image_seconds),
                    });
                    evaluate_targets(&mut report, &a.name, &s.name, &c.x_adv, &dataset.target_labels, targets);
                    for t in targets {
                        if c.checkpoints.is_empty() {
                            break;
                        }
                        let rates: Result<Vec<f64>> = c
                            .checkpoints
                            .iter()
                            .map(|(_, x)| targeted_success_rate(x, t, &dataset.target_labels))
                            .collect();
                        if let Ok(success) = rates {
                            report.per_iteration_curves.push(SuccessCurve {
                                attack: a.name.clone(),
                                surrogate: s.name.clone(),
                                target: t.name.clone(),
                                iterations: c.checkpoints.iter().map(|p| p.0).collect(),
                                success,
                            });
                        }
                    }
                    sink(a, &s.name, &c);
                }
                Err(e) => {
                    log::error!("{} on {} failed: {e}", a.name, s.name);
                    report.timing.push(Timing {
                        attack: a.name.clone(),
                        surrogate: s.name.clone(),
                        images: dataset.len(),
                        per_image_seconds: None,
                    });
                    for t in targets {
                        report.upsert(Cell {
                            attack: a.name.clone(),
                            surrogate: s.name.clone(),
                            target: t.name.clone(),
                            white_box: t.name == s.name,
                            success: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Iterations,
    BetaSweep,
    PAlphaGrid,
    EnsembleSize,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "iterations" => AblationKind::Iterations,
            "beta_sweep" | "beta" => AblationKind::BetaSweep,
            "p_alpha_grid" | "p_alpha" => AblationKind::PAlphaGrid,
            "ensemble_size" | "ensemble" => AblationKind::EnsembleSize,
            o => return Err(Error::config("kind", format!("unknown ablation `{o}`"))),
        })
    }
}

/// Values swept by an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Checkpoints of a single run with as many iterations as the largest.
    Iterations(Vec<usize>),
    Beta(Vec<f64>),
    PAlpha {
        p: Vec<f64>,
        alpha_max: Vec<f64>,
    },
    Ensemble(Vec<usize>),
}

impl AblationGrid {
    pub fn kind(&self) -> AblationKind {
        match self {
            AblationGrid::Iterations(_) => AblationKind::Iterations,
            AblationGrid::Beta(_) => AblationKind::BetaSweep,
            AblationGrid::PAlpha { .. } => AblationKind::PAlphaGrid,
            AblationGrid::Ensemble(_) => AblationKind::EnsembleSize,
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            AblationGrid::Iterations(v) | AblationGrid::Ensemble(v) => v.is_empty(),
            AblationGrid::Beta(v) => v.is_empty(),
            AblationGrid::PAlpha { p, alpha_max } => p.is_empty() || alpha_max.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub params: BTreeMap<String, f64>,
    /// Success per target model.
    pub success: BTreeMap<String, f64>,
    pub white_box: Option<f64>,
    pub black_box_mean: Option<f64>,
    pub per_image_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub surrogate: String,
    pub base: AttackConfig,
    pub rows: Vec<AblationRow>,
    /// Running maximum of the black-box mean over rows (iterations only).
    pub cumulative_best: Vec<f64>,
}

fn row_for(
    params: BTreeMap<String, f64>,
    x: &ImageBatch,
    surrogate: &str,
    targets: &[&ModelHandle<f32>],
    y_t: &[usize],
    secs: f64,
) -> Result<AblationRow> {
    let mut success = BTreeMap::new();
    for t in targets {
        success.insert(t.name.clone(), targeted_success_rate(x, t, y_t)?);
    }
    let bb: Vec<f64> = success
        .iter()
        .filter(|(k, _)| *k != surrogate)
        .map(|(_, v)| *v)
        .collect();
    Ok(AblationRow {
        white_box: success.get(surrogate).copied(),
        black_box_mean: (!bb.is_empty()).then(|| bb.iter().sum::<f64>() / bb.len() as f64),
        params,
        success,
        per_image_seconds: secs,
    })
}

/// Sweep one knob (or the `p`/`alpha_max` pair), holding the rest of `base`.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &AttackConfig,
    surrogate: &ModelHandle<f32>,
    targets: &[&ModelHandle<f32>],
    dataset: &EvalDataset,
    opts: &HarnessOptions,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::config("grid", "ablation grid is empty"));
    }
    let y = &dataset.target_labels;
    let sname = surrogate.name.as_str();
    let mut rows = Vec::new();
    let one = |cfg: &AttackConfig, params: BTreeMap<String, f64>| -> Result<AblationRow> {
        let c = craft(surrogate, dataset, cfg, opts)?;
        row_for(params, &c.x_adv, sname, targets, y, c.per_image_seconds)
    };
    match grid {
        AblationGrid::Iterations(marks) => {
            let t = *marks.iter().max().expect("non-empty");
            if t == 0 {
                return Err(Error::config("grid", "iteration checkpoints must be positive"));
            }
            let cfg = AttackConfig {
                iterations: t,
                ..base.clone()
            };
            let o = HarnessOptions {
                checkpoints: marks.clone(),
                ..opts.clone()
            };
            let c = craft(surrogate, dataset, &cfg, &o)?;
            for (m, x) in &c.checkpoints {
                let params = BTreeMap::from([("iterations".to_string(), *m as f64)]);
                let secs = c.per_image_seconds * *m as f64 / t as f64;
                rows.push(row_for(params, x, sname, targets, y, secs)?);
            }
        }
        AblationGrid::Beta(v) => {
            for &beta in v {
                let cfg = AttackConfig { beta, ..base.clone() };
                rows.push(one(&cfg, BTreeMap::from([("beta".to_string(), beta)]))?);
            }
        }
        AblationGrid::PAlpha { p, alpha_max } => {
            for &pv in p {
                for &a in alpha_max {
                    let cfg = AttackConfig {
                        p: pv,
                        alpha_max: a,
                        ..base.clone()
                    };
                    rows.push(one(
                        &cfg,
                        BTreeMap::from([("p".to_string(), pv), ("alpha_max".to_string(), a)]),
                    )?);
                }
            }
        }
        AblationGrid::Ensemble(v) => {
            for &k in v {
                let cfg = AttackConfig {
                    ensemble_k: k,
                    ..base.clone()
                };
                rows.push(one(&cfg, BTreeMap::from([("ensemble_k".to_string(), k as f64)]))?);
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let cumulative_best = if grid.kind() == AblationKind::Iterations {
        rows.iter()
            .map(|r| {
                best = best.max(r.black_box_mean.or(r.white_box).unwrap_or(0.0));
                best
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(AblationTable {
        kind: grid.kind(),
        surrogate: sname.to_string(),
        base: base.clone(),
        rows,
        cumulative_best,
    })
}

impl AblationTable {
    fn stem(&self) -> &'static str {
        match self.kind {
            AblationKind::Iterations => "iterations",
            AblationKind::BetaSweep => "beta_sweep",
            AblationKind::PAlphaGrid => "p_alpha_grid",
            AblationKind::EnsembleSize => "ensemble_size",
        }
    }

    /// Success series for plotting: one per target plus the black-box mean,
    /// or one per `p` value over `alpha_max` for the grid.
    pub fn series(&self) -> Vec<Series> {
        if self.kind == AblationKind::PAlphaGrid {
            let mut by_p: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &self.rows {
                let y = r.black_box_mean.or(r.white_box).unwrap_or(0.0);
                by_p.entry(format!("p={}", r.params["p"]))
                    .or_default()
                    .push((r.params["alpha_max"], y));
            }
            return by_p.into_iter().map(|(name, points)| Series { name, points }).collect();
        }
        let key = self
            .rows
            .first()
            .and_then(|r| r.params.keys().next().cloned())
            .unwrap_or_default();
        let mut out: Vec<Series> = Vec::new();
        let targets: Vec<String> = self
            .rows
            .first()
            .map(|r| r.success.keys().cloned().collect())
            .unwrap_or_default();
        for t in targets {
            out.push(Series {
                name: t.clone(),
                points: self.rows.iter().map(|r| (r.params[&key], r.success[&t])).collect(),
            });
        }
        if self.rows.iter().all(|r| r.black_box_mean.is_some()) {
            out.push(Series {
                name: "black-box mean".into(),
                points: self
                    .rows
                    .iter()
                    .map(|r| (r.params[&key], r.black_box_mean.unwrap_or(0.0)))
                    .collect(),
            });
        }
        out
    }

    /// Write `ablation_<kind>.csv`, `ablation_<kind>.json` and
    /// `plots/ablation_<kind>.svg` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.stem();
        let p = dir.join(format!("ablation_{stem}.csv"));
        let mut w = csv::Writer::from_path(&p)?;
        let pkeys: Vec<String> = self
            .rows
            .first()
            .map(|r| r.params.keys().cloned().collect())
            .unwrap_or_default();
        let tkeys: Vec<String> = self
            .rows
            .first()
            .map(|r| r.success.keys().cloned().collect())
            .unwrap_or_default();
        let mut header = pkeys.clone();
        header.extend(tkeys.iter().cloned());
        header.extend(["white_box", "black_box_mean", "per_image_seconds"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec: Vec<String> = pkeys.iter().map(|k| r.params[k].to_string()).collect();
            rec.extend(tkeys.iter().map(|k| format!("{:.6}", r.success[k])));
            rec.push(opt(r.white_box));
            rec.push(opt(r.black_box_mean));
            rec.push(format!("{:.6}", r.per_image_seconds));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("ablation_{stem}.json"));
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        let x_label = match self.kind {
            AblationKind::Iterations => "iterations",
            AblationKind::BetaSweep => "beta",
            AblationKind::PAlphaGrid => "alpha_max",
            AblationKind::EnsembleSize => "ensemble size",
        };
        let svg = render(
            &format!("{stem} ({})", self.surrogate),
            x_label,
            "targeted success rate",
            &self.series(),
            Style::Lines,
        );
        write_svg(&dir.join("plots").join(format!("ablation_{stem}.svg")), &svg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Normalizer;
    use crate::nn::{Architecture, LayerSpec, Network};
    use crate::rng::{stream, Stream};

    /// Linear model whose logits are `bias`, independent of the input.
    fn constant(name: &str, classes: usize, bias: Vec<f32>) -> ModelHandle<f32> {
        let arch = Architecture::with_default_taps(
            3,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    din: 3 * 4 * 4,
                    dout: classes,
                },
            ],
        );
        let params = vec![vec![0.0; 3 * 16 * classes], bias];
        ModelHandle::new(
            name,
            Network::from_params(arch, params).unwrap(),
            4,
            Normalizer::identity(3),
        )
        .unwrap()
    }

    /// Predicts the class of the brightest channel.
    fn channel_argmax(name: &str) -> ModelHandle<f32> {
        let arch = Architecture::with_default_taps(
            3,
            vec![
                LayerSpec::GlobalAvgPool,
                LayerSpec::Flatten,
                LayerSpec::Linear { din: 3, dout: 3 },
            ],
        );
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        ModelHandle::new(
            name,
            Network::from_params(arch, vec![w, vec![0.0; 3]]).unwrap(),
            4,
            Normalizer::identity(3),
        )
        .unwrap()
    }

    fn write_png(dir: &Path, name: &str, rgb: [u8; 3]) {
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb(rgb));
        img.save(dir.join(name)).unwrap();
    }

    fn manifest(dir: &Path, rows: &str) -> PathBuf {
        write_png(dir, "a.png", [255, 0, 0]);
        write_png(dir, "b.png", [0, 255, 0]);
        write_png(dir, "c.png", [0, 0, 255]);
        let p = dir.join("manifest.csv");
        std::fs::write(&p, format!("image_path,true_label,target_label\n{rows}")).unwrap();
        p
    }

    #[test]
    fn loads_a_well_formed_manifest() {
        let d = tempfile::tempdir().unwrap();
        let p = manifest(d.path(), "a.png,0,1\nb.png,1,2\nc.png,2,0\n");
        let ds = load_dataset(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images.shape(), [3, 3, 4, 4]);
        assert_eq!(ds.true_labels, vec![0, 1, 2]);
        assert_eq!(ds.images.item(1)[16], 1.0);
    }

    #[test]
    fn manifest_errors_carry_row_numbers() {
        let d = tempfile::tempdir().unwrap();
        let cases = [
            ("a.png,0,1\nb.png,1,1\n", 2),
            ("a.png,0,1\nb.png,x,2\n", 2),
            ("a.png,0,1\nb.png,1,2\nmissing.png,0,1\n", 3),
            ("a.png,0\n", 1),
        ];
        for (rows, want) in cases {
            let p = manifest(d.path(), rows);
            match load_dataset(&p) {
                Err(Error::Dataset { row, .. }) => assert_eq!(row, Some(want), "{rows}"),
                other => panic!("{rows}: {other:?}"),
            }
        }
    }

    #[test]
    fn success_rate_examples() {
        let x = Tensor::<f32>::full([4, 3, 4, 4], 0.5);
        let always2 = constant("c", 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(targeted_success_rate(&x, &always2, &[2, 2, 2, 2]).unwrap(), 1.0);
        assert_eq!(targeted_success_rate(&x, &always2, &[2, 0, 2, 1]).unwrap(), 0.5);
        let mut data = vec![0.0f32; 4 * 48];
        for (b, ch) in [0usize, 1, 2, 1].iter().enumerate() {
            for v in &mut data[b * 48 + ch * 16..b * 48 + ch * 16 + 16] {
                *v = 1.0;
            }
        }
        let x = Tensor::from_vec([4, 3, 4, 4], data).unwrap();
        let m = channel_argmax("m");
        // predictions 0, 1, 2, 1
        assert_eq!(targeted_success_rate(&x, &m, &[0, 2, 2, 0]).unwrap(), 0.5);
        assert_eq!(targeted_success_rate(&x, &m, &[1, 0, 0, 1]).unwrap(), 0.25);
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let arch =
            Architecture::with_default_taps(3, vec![LayerSpec::Flatten, LayerSpec::Linear { din: 48, dout: 1000 }]);
        let net = Network::<f32>::init(arch, &mut stream(4, 0, 0, Stream::Init));
        let m = ModelHandle::new("r", net, 4, Normalizer::identity(3)).unwrap();
        let mut r = stream(5, 0, 0, Stream::Data);
        use rand::Rng as _;
        let n = 2000;
        let x = Tensor::from_vec([n, 3, 4, 4], (0..n * 48).map(|_| r.random::<f32>()).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..1000)).collect();
        assert!(targeted_success_rate(&x, &m, &y).unwrap() < 0.006);
    }

    fn tiny_setup() -> (ModelHandle<f32>, ModelHandle<f32>, EvalDataset) {
        let arch = |w: usize| {
            Architecture::with_default_taps(
                3,
                vec![
                    LayerSpec::Conv {
                        cin: 3,
                        cout: w,
                        k: 3,
                        stride: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv {
                        cin: w,
                        cout: w,
                        k: 3,
                        stride: 2,
                    },
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Flatten,
                    LayerSpec::LayerNorm { dim: w },
                    LayerSpec::Linear { din: w, dout: 4 },
                ],
            )
        };
        let a = ModelHandle::new(
            "a",
            Network::init(arch(6), &mut stream(1, 0, 0, Stream::Init)),
            16,
            Normalizer::identity(3),
        )
        .unwrap();
        let b = ModelHandle::new(
            "b",
            Network::init(arch(5), &mut stream(2, 0, 0, Stream::Init)),
            16,
            Normalizer::identity(3),
        )
        .unwrap();
        use rand::Rng as _;
        let mut r = stream(3, 0, 0, Stream::Data);
        let x = Tensor::from_vec([6, 3, 16, 16], (0..6 * 768).map(|_| r.random::<f32>()).collect()).unwrap();
        let ds = EvalDataset::new("toy", x, vec![0, 1, 2, 3, 0, 1], vec![1, 2, 3, 0, 2, 3]).unwrap();
        (a, b, ds)
    }

    #[test]
    fn transfer_matrix_is_reproducible_and_marks_failures() {
        let (a, b, ds) = tiny_setup();
        let base = AttackConfig {
            iterations: 5,
            ..Default::default()
        };
        let attacks = vec![
            NamedAttack {
                name: "ftm".into(),
                config: base.clone(),
            },
            NamedAttack {
                name: "broken".into(),
                config: AttackConfig {
                    layers: Some(vec!["nope".into()]),
                    ..base
                },
            },
        ];
        let opts = HarnessOptions {
            batch_size: 4,
            checkpoints: vec![2, 5],
        };
        let r1 = run_transfer_matrix(&attacks, &[&a], &[&a, &b], &ds, &opts);
        let r2 = run_transfer_matrix(&attacks, &[&a], &[&a, &b], &ds, &opts);
        assert_eq!(r1.cells, r2.cells);
        assert_eq!(r1.cells.len(), 4);
        assert!(r1.failed());
        assert!(r1.success("ftm", "a", "a").is_some());
        assert!(r1
            .cells
            .iter()
            .filter(|c| c.attack == "broken")
            .all(|c| c.error.is_some()));
        assert!(r1
            .cells
            .iter()
            .all(|c| c.success.is_none_or(|s| (0.0..=1.0).contains(&s))));
        assert_eq!(r1.per_iteration_curves.len(), 2);
        assert_eq!(r1.per_iteration_curves[0].iterations, vec![2, 5]);
        assert_eq!(
            r1.per_iteration_curves[0].success[1],
            r1.success("ftm", "a", "a").unwrap()
        );
        let d = tempfile::tempdir().unwrap();
        r1.save(d.path()).unwrap();
        assert_eq!(TransferReport::load(d.path()).unwrap(), r1);
        let csv = std::fs::read_to_string(d.path().join("matrix.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn evaluation_overwrites_idempotently() {
        let (a, b, ds) = tiny_setup();
        let mut rep = TransferReport::default();
        assert_eq!(
            evaluate_targets(&mut rep, "x", "a", &ds.images, &ds.target_labels, &[&a, &b]),
            0
        );
        let before = rep.clone();
        assert_eq!(
            evaluate_targets(&mut rep, "x", "a", &ds.images, &ds.target_labels, &[&a, &b]),
            2
        );
        assert_eq!(rep, before);
    }

    #[test]
    fn ablations_persist_tables_and_plots() {
        let (a, b, ds) = tiny_setup();
        let base = AttackConfig {
            iterations: 4,
            ..Default::default()
        };
        let opts = HarnessOptions::default();
        let d = tempfile::tempdir().unwrap();
        let it = run_ablation(
            &AblationGrid::Iterations(vec![2, 4, 6]),
            &base,
            &a,
            &[&a, &b],
            &ds,
            &opts,
        )
        .unwrap();
        assert_eq!(it.rows.len(), 3);
        assert!(it.cumulative_best.windows(2).all(|w| w[1] >= w[0]));
        it.save(d.path()).unwrap();
        let pa = run_ablation(
            &AblationGrid::PAlpha {
                p: vec![0.1, 1.0],
                alpha_max: vec![0.0, 0.75],
            },
            &base,
            &a,
            &[&a, &b],
            &ds,
            &opts,
        )
        .unwrap();
        assert_eq!(pa.rows.len(), 4);
        pa.save(d.path()).unwrap();
        for f in [
            "ablation_iterations.csv",
            "plots/ablation_iterations.svg",
            "ablation_p_alpha_grid.csv",
            "plots/ablation_p_alpha_grid.svg",
        ] {
            assert!(d.path().join(f).is_file(), "{f}");
        }
        let csv = std::fs::read_to_string(d.path().join("ablation_p_alpha_grid.csv")).unwrap();
        assert!(csv.starts_with("alpha_max,p,a,b,white_box,black_box_mean"));
        assert!(run_ablation(&AblationGrid::Beta(vec![]), &base, &a, &[&a], &ds, &opts).is_err());
    }
}
