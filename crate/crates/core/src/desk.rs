//! Desk-scale model zoo: a ten-class texture-patch dataset cut from bundled
//! photographs, three architecturally distinct convnets, training, and the
//! registry plus evaluation manifest consumed by the harness.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{file_sha256, write_weights, ModelHandle, Normalizer, Registry, RegistryEntry};
use crate::nn::train::{fit, Curve, TrainConfig};
use crate::nn::{Architecture, LayerSpec, Network};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::{ImageBatch, Tensor};
use crate::transforms::rdi_transform;

/// Source photographs, one class each, in class order.
pub const TEXTURE_SOURCES: [&str; 10] = [
    "astronaut",
    "chelsea",
    "coffee",
    "hubble_deep_field",
    "ihc",
    "motorcycle_left",
    "retina",
    "rocket",
    "brick",
    "grass",
];

/// Bundled texture directory of this source tree.
pub fn default_texture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/textures")
}

/// Patch appearance randomization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    /// Patch side in pixels.
    pub side: usize,
    /// Range of the contrast scale applied to the standardized patch.
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    /// Half-width of the per-channel brightness jitter around 0.5.
    pub brightness_jitter: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            side: 64,
            contrast_lo: 0.03,
            contrast_hi: 0.06,
            brightness_jitter: 0.06,
        }
    }
}

/// Decode an image file to a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<ImageBatch> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Encode one `[3, H, W]` item as an 8-bit PNG.
pub fn save_rgb(path: &Path, x: &ImageBatch, b: usize) -> Result<()> {
    let (h, w) = (x.height(), x.width());
    let item = x.item(b);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (xx, yy, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = item[c * h * w + yy as usize * w + xx as usize];
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Load the ten class sources from `dir`.
pub fn load_textures(dir: &Path) -> Result<Vec<ImageBatch>> {
    TEXTURE_SOURCES
        .iter()
        .map(|n| load_rgb(&dir.join(format!("{n}.png"))))
        .collect()
}

/// `n` labeled patches, classes balanced and shuffled. Each patch is a random
/// crop (optionally mirrored), partially desaturated, channel-permuted and
/// gain-jittered, then re-rendered as a low-contrast texture around gray.
/// Values are quantized to 8 bits so PNG export is lossless.
pub fn generate_patches(
    sources: &[ImageBatch],
    n: usize,
    params: &TextureParams,
    rng: &mut Rng,
) -> Result<(ImageBatch, Vec<usize>)> {
    let s = params.side;
    let k = sources.len();
    if k == 0 {
        return Err(Error::Input("no texture sources".into()));
    }
    if let Some(src) = sources
        .iter()
        .find(|t| t.height() < s || t.width() < s || t.channels() != 3)
    {
        return Err(Error::Input(format!(
            "texture {:?} is smaller than the {s}px patch",
            src.shape()
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let plane = s * s;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut patch = vec![0f64; 3 * plane];
    for &y in &labels {
        let src = &sources[y];
        let (h, w) = (src.height(), src.width());
        let top = rng.random_range(0..=h - s);
        let left = rng.random_range(0..=w - s);
        let mirror = rng.random::<f64>() < 0.5;
        let img = src.item(0);
        for c in 0..3 {
            for r in 0..s {
                for col in 0..s {
                    let sc = if mirror { s - 1 - col } else { col };
                    patch[c * plane + r * s + col] = img[c * h * w + (top + r) * w + left + sc] as f64;
                }
            }
        }
        let sat = rng.random::<f64>();
        for i in 0..plane {
            let g = (patch[i] + patch[plane + i] + patch[2 * plane + i]) / 3.0;
            for c in 0..3 {
                let v = &mut patch[c * plane + i];
                *v = g + sat * (*v - g);
            }
        }
        let mut perm = [0usize, 1, 2];
        perm.shuffle(rng);
        let gains: Vec<f64> = (0..3).map(|_| rng.random_range(0.8..1.2)).collect();
        let mut out = vec![0f64; 3 * plane];
        for c in 0..3 {
            for i in 0..plane {
                out[c * plane + i] = patch[perm[c] * plane + i] * gains[c];
            }
        }
        let m = out.iter().sum::<f64>() / out.len() as f64;
        let sd = (out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / out.len() as f64).sqrt();
        let bias: Vec<f64> = (0..3)
            .map(|_| rng.random_range(-params.brightness_jitter..=params.brightness_jitter))
            .collect();
        let contrast = rng.random_range(params.contrast_lo..=params.contrast_hi);
        for c in 0..3 {
            for i in 0..plane {
                let v = 0.5 + bias[c] + contrast * (out[c * plane + i] - m) / (sd + 1e-4);
                data.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
            }
        }
    }
    Ok((Tensor::from_vec([n, 3, s, s], data)?, labels))
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> [LayerSpec; 2] {
    [LayerSpec::Conv { cin, cout, k, stride }, LayerSpec::Relu]
}

fn head(din: usize, classes: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::LayerNorm { dim: din },
        LayerSpec::Linear { din, dout: classes },
    ]
}

/// The three desk architectures for 64px inputs: an all-strided net, a
/// max-pooling VGG-style net with global average pooling, and a
/// large-kernel stem with average pooling.
pub fn desk_architectures(classes: usize) -> Vec<(&'static str, Architecture)> {
    let strided = [
        conv(3, 16, 3, 2),
        conv(16, 32, 3, 2),
        conv(32, 64, 3, 2),
        conv(64, 64, 3, 2),
        conv(64, 64, 3, 1),
        conv(64, 64, 3, 2),
    ]
    .concat();
    let vgg = [
        &conv(3, 8, 3, 1)[..],
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(8, 16, 3, 1),
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(16, 32, 3, 1),
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(32, 64, 3, 1),
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(64, 64, 3, 1),
        &conv(64, 64, 3, 1),
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(64, 64, 3, 1),
        &[LayerSpec::GlobalAvgPool],
    ]
    .concat();
    let pool = [
        &conv(3, 16, 5, 2)[..],
        &[LayerSpec::MaxPool { k: 2 }],
        &conv(16, 48, 3, 1),
        &[LayerSpec::AvgPool { k: 4 }],
        &conv(48, 64, 3, 1),
        &conv(64, 96, 3, 1),
        &[LayerSpec::AvgPool { k: 2 }],
        &conv(96, 96, 3, 1),
    ]
    .concat();
    let finish = |mut l: Vec<LayerSpec>, din: usize| {
        l.push(LayerSpec::Flatten);
        l.extend(head(din, classes));
        Architecture::with_default_taps(3, l)
    };
    vec![
        ("desk-strided", finish(strided, 256)),
        ("desk-vgg", finish(vgg, 64)),
        ("desk-pool", finish(pool, 384)),
    ]
}

/// Desk preparation budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Test images written to the evaluation manifest.
    pub eval_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Required training-split accuracy of every model.
    pub min_accuracy: f64,
    pub texture: TextureParams,
    /// Texture source directory; the bundled one when absent.
    pub texture_dir: Option<PathBuf>,
    /// Restrict training to these architectures.
    pub models: Option<Vec<String>>,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            seed: 0,
            train_size: 4000,
            test_size: 600,
            eval_size: 256,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            min_accuracy: 0.9,
            texture: TextureParams::default(),
            texture_dir: None,
            models: None,
        }
    }
}

/// Outcome of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub name: String,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub curve: Curve,
    pub sha256: String,
}

/// Summary written to `desk.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskReport {
    pub config: DeskConfig,
    pub models: Vec<TrainedModel>,
    /// Pairwise test-split prediction disagreement, `(a, b, fraction)`.
    pub disagreement: Vec<(String, String, f64)>,
    pub registry: PathBuf,
    pub manifest: PathBuf,
}

/// Circular shift of every image by `(dy, dx)`.
pub fn roll(x: &ImageBatch, dy: isize, dx: isize) -> ImageBatch {
    let (h, w) = (x.height(), x.width());
    let mut out = x.zeros_like();
    let plane = h * w;
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for r in 0..h {
            let rr = (r as isize + dy).rem_euclid(h as isize) as usize;
            for c in 0..w {
                let cc = (c as isize + dx).rem_euclid(w as isize) as usize;
                dst[rr * w + cc] = src[r * w + c];
            }
        }
    }
    out
}

/// Training augmentation: RDI with probability 1/2, then a random circular
/// shift of up to two pixels per axis.
pub fn augment(x: ImageBatch, rng: &mut Rng, ratio: f64) -> ImageBatch {
    let x = if rng.random::<f64>() < 0.5 {
        rdi_transform(&x, ratio, rng).0
    } else {
        x
    };
    let dy = rng.random_range(-2i64..=2) as isize;
    let dx = rng.random_range(-2i64..=2) as isize;
    roll(&x, dy, dx)
}

/// Top-1 accuracy of a handle, batched.
pub fn handle_accuracy(model: &ModelHandle<f32>, x: &ImageBatch, labels: &[usize]) -> Result<f64> {
    let pred = predictions(model, x)?;
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
}

/// Argmax predictions of a handle, batched.
pub fn predictions(model: &ModelHandle<f32>, x: &ImageBatch) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(x.batch());
    for s in (0..x.batch()).step_by(256) {
        let e = (s + 256).min(x.batch());
        out.extend(model.predict_logits(&x.slice_batch(s, e))?.argmax_rows());
    }
    Ok(out)
}

/// Train one architecture on raw `[0, 1]` images; normalization statistics
/// are fitted on the training split and live in the returned handle.
pub fn train_model(
    name: &str,
    arch: Architecture,
    train_x: &ImageBatch,
    train_y: &[usize],
    cfg: &DeskConfig,
    model_index: u64,
) -> Result<(ModelHandle<f32>, Curve)> {
    let side = train_x.height();
    arch.validate(side)?;
    // Desk models see each image relative to its own channel means.
    let norm = Normalizer::fit(train_x, true);
    let mut net = Network::<f32>::init(arch, &mut stream(cfg.seed, 0, model_index, Stream::Init));
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
    };
    let mut rng = stream(cfg.seed, 0, model_index, Stream::Train);
    let curve = fit(&mut net, train_x, train_y, &tc, &mut rng, &mut |b, r| {
        let mut z = augment(b, r, 1.1);
        norm.apply(&mut z);
        z
    })?;
    Ok((ModelHandle::new(name, net, side, norm)?, curve))
}

/// Generated dataset: train and test splits.
pub struct DeskData {
    pub train_x: ImageBatch,
    pub train_y: Vec<usize>,
    pub test_x: ImageBatch,
    pub test_y: Vec<usize>,
}

pub fn generate_data(cfg: &DeskConfig) -> Result<DeskData> {
    let dir = cfg.texture_dir.clone().unwrap_or_else(default_texture_dir);
    let sources = load_textures(&dir)?;
    let mut rng = stream(cfg.seed, 0, 0, Stream::Data);
    let n = cfg.train_size + cfg.test_size;
    let (x, y) = generate_patches(&sources, n, &cfg.texture, &mut rng)?;
    Ok(DeskData {
        train_x: x.slice_batch(0, cfg.train_size),
        train_y: y[..cfg.train_size].to_vec(),
        test_x: x.slice_batch(cfg.train_size, n),
        test_y: y[cfg.train_size..].to_vec(),
    })
}

/// Target labels uniformly different from the true labels.
pub fn draw_targets(true_labels: &[usize], classes: usize, rng: &mut Rng) -> Vec<usize> {
    true_labels
        .iter()
        .map(|&y| (y + rng.random_range(1..classes)) % classes)
        .collect()
}

/// Train the zoo and write `registry.json`, `weights/`, `eval/` with
/// `manifest.csv`, and `desk.json` under `out_dir`.
pub fn prepare_desk(cfg: &DeskConfig, out_dir: &Path) -> Result<DeskReport> {
    if cfg.eval_size > cfg.test_size {
        return Err(Error::config("eval_size", "cannot exceed test_size"));
    }
    let data = generate_data(cfg)?;
    let classes = TEXTURE_SOURCES.len();
    let weights_dir = out_dir.join("weights");
    std::fs::create_dir_all(&weights_dir).map_err(|e| Error::io(&weights_dir, e))?;
    let mut registry = Registry::default();
    let mut trained = Vec::new();
    let mut handles = Vec::new();
    for (i, (name, arch)) in desk_architectures(classes).into_iter().enumerate() {
        if cfg.models.as_ref().is_some_and(|m| !m.iter().any(|n| n == name)) {
            continue;
        }
        log::info!("training {name}");
        let (handle, curve) = train_model(name, arch.clone(), &data.train_x, &data.train_y, cfg, i as u64)?;
        let test_accuracy = handle_accuracy(&handle, &data.test_x, &data.test_y)?;
        let train_accuracy = handle_accuracy(&handle, &data.train_x, &data.train_y)?;
        log::info!("{name}: train accuracy {train_accuracy:.4}, test accuracy {test_accuracy:.4}");
        if train_accuracy < cfg.min_accuracy {
            return Err(Error::Model(format!(
                "{name} reached train accuracy {train_accuracy:.4} < {}; training loss per epoch: {curve:?}",
                cfg.min_accuracy
            )));
        }
        let rel = format!("weights/{name}.bin");
        let path = out_dir.join(&rel);
        write_weights(&path, handle.network().params())?;
        let sha256 = file_sha256(&path)?;
        registry.models.push(RegistryEntry {
            name: name.to_string(),
            weights: rel,
            sha256: sha256.clone(),
            input_side: handle.input_side,
            normalizer: handle.normalizer.clone(),
            arch,
            test_accuracy: Some(test_accuracy),
        });
        trained.push(TrainedModel {
            name: name.to_string(),
            test_accuracy,
            train_accuracy,
            curve,
            sha256,
        });
        handles.push(handle);
    }
    let registry_path = out_dir.join("registry.json");
    registry.save(&registry_path)?;

    let preds: Vec<Vec<usize>> = handles
        .iter()
        .map(|h| predictions(h, &data.test_x))
        .collect::<Result<_>>()?;
    let mut disagreement = Vec::new();
    for a in 0..handles.len() {
        for b in a + 1..handles.len() {
            let d =
                preds[a].iter().zip(&preds[b]).filter(|(u, v)| u != v).count() as f64 / data.test_y.len().max(1) as f64;
            disagreement.push((handles[a].name.clone(), handles[b].name.clone(), d));
        }
    }

    let eval_dir = out_dir.join("eval");
    std::fs::create_dir_all(&eval_dir).map_err(|e| Error::io(&eval_dir, e))?;
    let targets = draw_targets(
        &data.test_y[..cfg.eval_size],
        classes,
        &mut stream(cfg.seed, 0, 0, Stream::Labels),
    );
    let manifest = eval_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::Io {
        path: manifest.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    w.write_record(["image_path", "true_label", "target_label"])?;
    for (i, &t) in targets.iter().enumerate() {
        let file = format!("{i:04}.png");
        save_rgb(&eval_dir.join(&file), &data.test_x, i)?;
        w.write_record([file, data.test_y[i].to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;

    let report = DeskReport {
        config: cfg.clone(),
        models: trained,
        disagreement,
        registry: registry_path,
        manifest,
    };
    let report_path = out_dir.join("desk.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architectures_have_expected_eligible_layers() {
        let archs = desk_architectures(10);
        let expect = [
            vec!["conv4", "conv5", "head"],
            vec!["conv4", "conv5", "conv6", "head"],
            vec!["conv2", "conv3", "conv4", "head"],
        ];
        for ((name, arch), want) in archs.into_iter().zip(expect) {
            let net = Network::<f32>::init(arch, &mut stream(0, 0, 0, Stream::Init));
            let m = ModelHandle::new(name, net, 64, Normalizer::identity(3)).unwrap();
            assert_eq!(m.num_classes(), 10);
            let ids: Vec<String> = crate::mixup::enumerate_eligible_layers(&m)
                .into_iter()
                .map(|l| l.layer_id)
                .collect();
            assert_eq!(ids, want, "{name}");
        }
    }

    #[test]
    fn patches_are_balanced_quantized_and_reproducible() {
        let sources = load_textures(&default_texture_dir()).unwrap();
        let p = TextureParams::default();
        let (x, y) = generate_patches(&sources, 40, &p, &mut stream(1, 0, 0, Stream::Data)).unwrap();
        let (x2, y2) = generate_patches(&sources, 40, &p, &mut stream(1, 0, 0, Stream::Data)).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
        for c in 0..10 {
            assert_eq!(y.iter().filter(|&&v| v == c).count(), 4);
        }
        assert!(x
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v) && ((v * 255.0).round() - v * 255.0).abs() < 1e-3));
    }

    #[test]
    fn png_round_trip_is_lossless_for_quantized_images() {
        let sources = load_textures(&default_texture_dir()).unwrap();
        let (x, _) = generate_patches(
            &sources,
            2,
            &TextureParams::default(),
            &mut stream(2, 0, 0, Stream::Data),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_rgb(&path, &x, 1).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back.data(), x.item(1));
    }

    #[test]
    fn roll_is_circular() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(roll(&x, 0, 1).data(), &[3., 1., 2., 6., 4., 5.]);
        assert_eq!(roll(&x, 1, 0).data(), &[4., 5., 6., 1., 2., 3.]);
        assert_eq!(roll(&roll(&x, -1, 2), 1, -2), x);
    }

    #[test]
    fn targets_differ_from_truth() {
        let y: Vec<usize> = (0..500).map(|i| i % 10).collect();
        let t = draw_targets(&y, 10, &mut stream(0, 0, 0, Stream::Labels));
        assert!(y.iter().zip(&t).all(|(a, b)| a != b && *b < 10));
    }
}
