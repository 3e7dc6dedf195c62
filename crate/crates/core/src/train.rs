//! Training engine: alternating discriminator/generator optimization with
//! checkpointing, resume, tiled inference, and the ablation matrix.
//!
//! Every run is a pure function of (manifest bytes, run configuration): all
//! randomness flows from the configured seed, arithmetic is sequential f64,
//! and log lines carry no timestamps, so repeating a run reproduces its logs
//! and checkpoints byte for byte. A checkpoint stores both parameter sets,
//! optimizer moments, the step counter, and the batch-sampler stream
//! position; resuming replays the exact remaining steps of an uninterrupted
//! run.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfa::{degrade, CfaPattern, MosaicImage, NoiseSpec};
use crate::checkpoint::{self, Archive};
use crate::data::{load_pair, DatasetManifest, EVAL_SIGMAS};
use crate::error::{Error, Result};
use crate::extractor::{cache_dir, FeatureExtractor, DEFAULT_FEATURE_STAGE};
use crate::metrics::{evaluate_dataset, MetricReport};
use crate::net::{Discriminator, DiscriminatorConfig, Generator, NetworkConfig};
use crate::nn::{Adam, AdamConfig, ParamSet, Tape, TapeCtx, Tensor, Var};
use crate::objectives::{
    compose_total, discriminator_loss, generator_adversarial_loss, mean_vars,
    perceptual_colour_loss, reconstruction_loss, regularized_feature_loss, LossReport, LossWeights,
    TermVars, TvOperand,
};
use crate::raster::RgbImage;
use crate::util::{derive_seed, rng_from_seed, sha256_hex};

/// Overlap between neighbouring tiles during large-image inference.
pub const TILE_OVERLAP: usize = 16;

/// What the discriminator sees next to the candidate image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Pair the candidate with the clean reference.
    #[default]
    Reference,
    /// Pair the candidate with the packed network input.
    Input,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    /// Optimization steps to run; exactly one of `steps`/`epochs` is set.
    pub steps: Option<usize>,
    /// Alternative step budget: passes over the dataset.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Extra checkpoint cadence; the final step is always checkpointed.
    pub checkpoint_every: usize,
    pub use_attention: bool,
    pub use_pcl: bool,
    pub use_rfl: bool,
    pub use_gan: bool,
    pub lambda_g: f64,
    pub tv_operand: TvOperand,
    pub conditioning: Conditioning,
    /// Extractor stage feeding the feature loss.
    pub feature_stage: usize,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch: 12,
            steps: None,
            epochs: None,
            seed: 0,
            checkpoint_every: 0,
            use_attention: true,
            use_pcl: true,
            use_rfl: true,
            use_gan: true,
            lambda_g: 1e-4,
            tv_operand: TvOperand::default(),
            conditioning: Conditioning::default(),
            feature_stage: DEFAULT_FEATURE_STAGE,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lambda_g < 0.0 {
            return Err(Error::Config("lambda_g must be non-negative".into()));
        }
        if !(1..=3).contains(&self.feature_stage) {
            return Err(Error::Config(format!(
                "feature stage {} outside 1..=3",
                self.feature_stage
            )));
        }
        match (self.steps, self.epochs) {
            (Some(s), None) if s > 0 => Ok(()),
            (None, Some(e)) if e > 0 => Ok(()),
            (Some(_), Some(_)) => Err(Error::Config("set either steps or epochs, not both".into())),
            _ => Err(Error::Config("set a positive step or epoch budget".into())),
        }
    }

    /// Step budget after resolving epochs against the dataset size.
    pub fn resolved_steps(&self, records: usize) -> usize {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * records.div_ceil(self.batch),
            (None, None) => 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Training manifest (`manifest.jsonl` written by prepare/split).
    pub manifest: PathBuf,
    /// Held-out manifest for evaluation; falls back to `manifest`.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    /// Explicit extractor weights; defaults to the cache-dir archive.
    #[serde(default)]
    pub extractor_weights: Option<PathBuf>,
}

/// One training run: architecture, optimization, data, output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let run: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_network().validate()?;
        self.train.validate()
    }

    /// Network structure with the attention ablation switch applied.
    pub fn effective_network(&self) -> NetworkConfig {
        let mut net = self.network.clone();
        net.attention = net.attention && self.train.use_attention;
        net
    }

    /// Hash of everything that shapes the optimization trajectory except the
    /// step budget; resuming validates against it.
    pub fn fingerprint(&self) -> String {
        let mut train = self.train.clone();
        train.steps = None;
        train.epochs = None;
        let doc = serde_json::json!({
            "network": self.effective_network(),
            "train": train,
        });
        sha256_hex(doc.to_string().as_bytes())
    }
}

/// Divergence guard: training aborts on the first non-finite total loss.
fn ensure_finite(step: usize, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step: step as u64,
            value,
        })
    }
}

struct CachedPair {
    packed: Tensor,
    clean_t: Tensor,
    clean: RgbImage,
}

struct PairCache {
    base: PathBuf,
    pairs: HashMap<usize, CachedPair>,
}

impl PairCache {
    fn get(&mut self, manifest: &DatasetManifest, index: usize) -> Result<&CachedPair> {
        if !self.pairs.contains_key(&index) {
            let pair = load_pair(&self.base, &manifest.records[index])?;
            self.pairs.insert(
                index,
                CachedPair {
                    packed: pair.mosaic.pack_input(),
                    clean_t: pair.clean.to_tensor(),
                    clean: pair.clean,
                },
            );
        }
        Ok(&self.pairs[&index])
    }
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    fingerprint: &'a str,
    records: usize,
    steps: usize,
    extractor_sha256: Option<&'a str>,
    resumed_from_step: Option<usize>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a LossReport,
    d_loss: Option<f64>,
}

/// Result of a completed training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_report: Option<LossReport>,
    pub checkpoint: PathBuf,
}

/// A checkpoint read back from disk, ready for inference or resume.
pub struct LoadedCheckpoint {
    pub step: usize,
    pub fingerprint: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// CFA pattern of the training data; inference inputs must match.
    pub pattern: CfaPattern,
    /// Training patch size; doubles as the inference tile size.
    pub patch_size: usize,
    pub generator: Generator,
    pub gen_params: ParamSet,
    pub discriminator: Option<(Discriminator, ParamSet)>,
    sampler_word_pos: u128,
    adam_g_state: Vec<(String, Tensor)>,
    adam_d_state: Vec<(String, Tensor)>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut archive: Archive = checkpoint::load(path)?;
    if archive.meta["kind"] != "train-checkpoint" {
        return Err(Error::bad_file(path, "not a training checkpoint"));
    }
    let meta = archive.meta.clone();
    let field = |name: &str| -> Result<serde_json::Value> {
        meta.get(name)
            .cloned()
            .ok_or_else(|| Error::bad_file(path, format!("checkpoint meta lacks {name:?}")))
    };
    let network: NetworkConfig = serde_json::from_value(field("network")?)
        .map_err(|e| Error::bad_file(path, format!("network config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(field("train")?)
        .map_err(|e| Error::bad_file(path, format!("train config: {e}")))?;
    let step = field("step")?
        .as_u64()
        .ok_or_else(|| Error::bad_file(path, "step is not an integer"))? as usize;
    let fingerprint = field("fingerprint")?
        .as_str()
        .ok_or_else(|| Error::bad_file(path, "fingerprint is not a string"))?
        .to_string();
    let sampler_word_pos: u128 = field("sampler_word_pos")?
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::bad_file(path, "bad sampler position"))?;
    let pattern: CfaPattern = serde_json::from_value(field("pattern")?)
        .map_err(|e| Error::bad_file(path, format!("pattern: {e}")))?;
    let patch_size = field("patch_size")?
        .as_u64()
        .ok_or_else(|| Error::bad_file(path, "patch_size is not an integer"))?
        as usize;

    let mut rng = rng_from_seed(derive_seed(train.seed, "generator-init"));
    let mut gen_params = ParamSet::new();
    let generator = Generator::build(&network, &mut gen_params, &mut rng);
    gen_params.load_named(&archive.take_prefixed("gen."))?;

    let discriminator = if train.use_gan {
        let mut rng = rng_from_seed(derive_seed(train.seed, "discriminator-init"));
        let mut disc_params = ParamSet::new();
        let disc = Discriminator::build(&train.discriminator, &mut disc_params, &mut rng);
        disc_params.load_named(&archive.take_prefixed("disc."))?;
        Some((disc, disc_params))
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        step,
        fingerprint,
        network,
        train,
        pattern,
        patch_size,
        generator,
        gen_params,
        discriminator,
        sampler_word_pos,
        adam_g_state: archive.take_prefixed("adam_g."),
        adam_d_state: archive.take_prefixed("adam_d."),
    })
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    path: &Path,
    run: &RunConfig,
    data_shape: (CfaPattern, usize),
    step: usize,
    sampler_word_pos: u128,
    gen_params: &ParamSet,
    adam_g: &Adam,
    disc: Option<(&ParamSet, &Adam)>,
    extractor_sha256: Option<&str>,
) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "train-checkpoint",
        "step": step,
        "fingerprint": run.fingerprint(),
        "network": run.effective_network(),
        "train": run.train,
        "pattern": data_shape.0,
        "patch_size": data_shape.1,
        "sampler_word_pos": sampler_word_pos.to_string(),
        "extractor_sha256": extractor_sha256,
    });
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in gen_params.iter() {
        named.push((format!("gen.{name}"), tensor.clone()));
    }
    for (name, tensor) in adam_g.export_state(gen_params) {
        named.push((format!("adam_g.{name}"), tensor));
    }
    if let Some((disc_params, adam_d)) = disc {
        for (name, tensor) in disc_params.iter() {
            named.push((format!("disc.{name}"), tensor.clone()));
        }
        for (name, tensor) in adam_d.export_state(disc_params) {
            named.push((format!("adam_d.{name}"), tensor));
        }
    }
    checkpoint::save(path, &meta, named.iter().map(|(n, t)| (n.as_str(), t)))
}

fn collect_grads(grads: &crate::nn::Gradients, leaves: &[Var], params: &ParamSet) -> Vec<Tensor> {
    leaves
        .iter()
        .enumerate()
        .map(|(i, leaf)| match grads.get(*leaf) {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.tensor(crate::nn::ParamId(i)).shape().to_vec()),
        })
        .collect()
}

/// Trains per the run configuration, optionally resuming from a checkpoint.
/// Logs JSON lines to `out/train_log.jsonl` and writes checkpoints under
/// `out/checkpoints/`.
pub fn train(run: &RunConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    run.validate()?;
    let manifest = DatasetManifest::load(&run.data.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::InvalidArgument("manifest holds no records".into()));
    }
    let network = run.effective_network();
    let cfg = &run.train;
    let total_steps = cfg.resolved_steps(manifest.records.len());

    // Geometry checks: patches must survive the network's downsampling
    // ladder and, when the feature loss is on, the extractor's pooling.
    let patch = manifest.header.patch_size;
    let mut required = network.alignment();
    if cfg.use_rfl {
        required = required.max(1 << cfg.feature_stage);
    }
    if patch % required != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} is not a multiple of {required}"
        )));
    }

    let extractor = if cfg.use_rfl {
        Some(match &run.data.extractor_weights {
            Some(path) => FeatureExtractor::from_file(path)?,
            None => FeatureExtractor::load_or_create(&cache_dir())?,
        })
    } else {
        None
    };

    // Build fresh networks, then overwrite from the checkpoint when resuming.
    let mut gen_params = ParamSet::new();
    let generator = {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "generator-init"));
        Generator::build(&network, &mut gen_params, &mut rng)
    };
    let mut adam_g = Adam::new(cfg.adam, &gen_params);
    let mut disc_state: Option<(Discriminator, ParamSet, Adam)> = if cfg.use_gan {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "discriminator-init"));
        let mut disc_params = ParamSet::new();
        let disc = Discriminator::build(&cfg.discriminator, &mut disc_params, &mut rng);
        let adam_d = Adam::new(cfg.adam, &disc_params);
        Some((disc, disc_params, adam_d))
    } else {
        None
    };

    let mut sampler = rng_from_seed(derive_seed(cfg.seed, "batch-sampling"));
    let mut start_step = 0usize;
    if let Some(ckpt_path) = resume_from {
        let loaded = load_checkpoint(ckpt_path)?;
        if loaded.fingerprint != run.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained under a different configuration ({} vs {})",
                loaded.fingerprint,
                run.fingerprint()
            )));
        }
        if loaded.pattern != manifest.header.pattern {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} data, manifest holds {}",
                loaded.pattern.name(),
                manifest.header.pattern.name()
            )));
        }
        start_step = loaded.step;
        if start_step >= total_steps {
            return Err(Error::Config(format!(
                "checkpoint already at step {start_step}, budget is {total_steps}"
            )));
        }
        gen_params = loaded.gen_params;
        adam_g.import_state(&gen_params, start_step as u64, &loaded.adam_g_state)?;
        if let (Some(state), Some((_, disc_params, adam_d))) =
            (loaded.discriminator, disc_state.as_mut())
        {
            *disc_params = state.1;
            adam_d.import_state(disc_params, start_step as u64, &loaded.adam_d_state)?;
        }
        sampler.set_word_pos(loaded.sampler_word_pos);
    }

    std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    let ckpt_dir = run.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = run.out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    let fingerprint = run.fingerprint();
    let header = HeaderLine {
        fingerprint: &fingerprint,
        records: manifest.records.len(),
        steps: total_steps,
        extractor_sha256: extractor.as_ref().map(|e| e.weights_sha256()),
        resumed_from_step: (start_step > 0).then_some(start_step),
    };
    writeln!(log, "{}", serde_json::to_string(&header).unwrap())
        .map_err(|e| Error::io(&log_path, e))?;

    let manifest_dir = run
        .data
        .manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let mut cache = PairCache {
        base: manifest_dir,
        pairs: HashMap::new(),
    };
    let weights = LossWeights {
        lambda_g: cfg.lambda_g,
    };

    let mut last_report = None;
    let mut checkpoint_path = ckpt_dir.join("latest.ckpt");
    for step in start_step + 1..=total_steps {
        // Draw the batch first so the sampler stream position is the only
        // RNG state a resume needs to restore.
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| sampler.random_range(0..manifest.records.len()))
            .collect();
        for &i in &batch {
            cache.get(&manifest, i)?;
        }
        let condition_of = |cache: &PairCache, i: usize| -> Tensor {
            match cfg.conditioning {
                Conditioning::Reference => cache.pairs[&i].clean_t.clone(),
                Conditioning::Input => cache.pairs[&i].packed.clone(),
            }
        };

        // Discriminator update on detached reconstructions.
        let mut d_loss = None;
        if let Some((disc, disc_params, adam_d)) = disc_state.as_mut() {
            let fakes: Vec<Tensor> = batch
                .iter()
                .map(|&i| generator.infer(&gen_params, &cache.pairs[&i].packed))
                .collect();
            let mut tape = Tape::new();
            let d_leaves = disc_params.spawn_leaves(&mut tape, true);
            let mut d_real = Vec::with_capacity(batch.len());
            let mut d_fake = Vec::with_capacity(batch.len());
            for (k, &i) in batch.iter().enumerate() {
                let cond = tape.constant(condition_of(&cache, i));
                let real = tape.constant(cache.pairs[&i].clean_t.clone());
                let fake = tape.constant(fakes[k].clone());
                let mut ctx = TapeCtx {
                    tape: &mut tape,
                    leaves: &d_leaves,
                };
                d_real.push(disc.forward(&mut ctx, &cond, &real));
                d_fake.push(disc.forward(&mut ctx, &cond, &fake));
            }
            let loss_d = discriminator_loss(&mut tape, &d_real, &d_fake);
            let value = tape.value(loss_d).scalar_value();
            ensure_finite(step, value)?;
            d_loss = Some(value);
            let grads = tape.backward(loss_d);
            let grad_vec = collect_grads(&grads, &d_leaves, disc_params);
            adam_d.step(disc_params, &grad_vec);
        }

        // Generator update through the full objective; discriminator
        // parameters join the tape frozen so the adversarial gradient flows
        // into the reconstruction without moving the discriminator.
        let mut tape = Tape::new();
        let g_leaves = gen_params.spawn_leaves(&mut tape, true);
        let ext_leaves = extractor
            .as_ref()
            .map(|e| e.params().spawn_leaves(&mut tape, false))
            .unwrap_or_default();
        let d_leaves = disc_state
            .as_ref()
            .map(|(_, p, _)| p.spawn_leaves(&mut tape, false))
            .unwrap_or_default();

        let mut l_r_terms = Vec::with_capacity(batch.len());
        let mut l_rfl_terms = Vec::new();
        let mut l_pcl_terms = Vec::new();
        let mut fake_probs = Vec::new();
        let mut lambda_sum = 0.0;
        for &i in &batch {
            let packed = tape.constant(cache.pairs[&i].packed.clone());
            let reference = tape.constant(cache.pairs[&i].clean_t.clone());
            let out = {
                let mut ctx = TapeCtx {
                    tape: &mut tape,
                    leaves: &g_leaves,
                };
                generator.forward(&mut ctx, &packed)
            };
            l_r_terms.push(reconstruction_loss(&mut tape, out, reference));
            if let Some(ext) = extractor.as_ref() {
                let (term, lambda_r) = regularized_feature_loss(
                    &mut tape,
                    ext,
                    &ext_leaves,
                    out,
                    &cache.pairs[&i].clean_t,
                    cfg.feature_stage,
                    cfg.tv_operand,
                );
                l_rfl_terms.push(term);
                lambda_sum += lambda_r;
            }
            if cfg.use_pcl {
                l_pcl_terms.push(perceptual_colour_loss(
                    &mut tape,
                    out,
                    &cache.pairs[&i].clean,
                ));
            }
            if let Some((disc, _, _)) = disc_state.as_ref() {
                let cond = tape.constant(condition_of(&cache, i));
                let mut ctx = TapeCtx {
                    tape: &mut tape,
                    leaves: &d_leaves,
                };
                fake_probs.push(disc.forward(&mut ctx, &cond, &out));
            }
        }
        let terms = TermVars {
            l_r: mean_vars(&mut tape, &l_r_terms),
            l_rfl: (!l_rfl_terms.is_empty()).then(|| mean_vars(&mut tape, &l_rfl_terms)),
            l_pcl: (!l_pcl_terms.is_empty()).then(|| mean_vars(&mut tape, &l_pcl_terms)),
            l_g: (!fake_probs.is_empty())
                .then(|| generator_adversarial_loss(&mut tape, &fake_probs)),
            lambda_r: if l_rfl_terms.is_empty() {
                0.0
            } else {
                lambda_sum / batch.len() as f64
            },
        };
        let (total, report) = compose_total(&mut tape, &terms, &weights);
        ensure_finite(step, report.l_t)?;
        let grads = tape.backward(total);
        let grad_vec = collect_grads(&grads, &g_leaves, &gen_params);
        adam_g.step(&mut gen_params, &grad_vec);

        let line = StepLine {
            step,
            report: &report,
            d_loss,
        };
        writeln!(log, "{}", serde_json::to_string(&line).unwrap())
            .map_err(|e| Error::io(&log_path, e))?;
        last_report = Some(report);

        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if due || step == total_steps {
            let snapshot = ckpt_dir.join(format!("step_{step:06}.ckpt"));
            save_checkpoint(
                &snapshot,
                run,
                (manifest.header.pattern, manifest.header.patch_size),
                step,
                sampler.get_word_pos(),
                &gen_params,
                &adam_g,
                disc_state.as_ref().map(|(_, p, a)| (p, a)),
                extractor.as_ref().map(|e| e.weights_sha256()),
            )?;
            checkpoint_path = ckpt_dir.join("latest.ckpt");
            std::fs::copy(&snapshot, &checkpoint_path)
                .map_err(|e| Error::io(&checkpoint_path, e))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainOutcome {
        steps_run: total_steps - start_step,
        final_report: last_report,
        checkpoint: checkpoint_path,
    })
}

/// Reconstructs one mosaic with the generator, tiling with blended overlaps
/// when the image exceeds the tile size.
pub fn reconstruct_mosaic(
    generator: &Generator,
    params: &ParamSet,
    mosaic: &MosaicImage,
    tile: usize,
) -> Result<RgbImage> {
    let (w, h) = (mosaic.width(), mosaic.height());
    let align = generator.config().alignment();
    if w % align != 0 || h % align != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is not aligned to the network's factor {align}"
        )));
    }
    let packed = mosaic.pack_input();
    if w <= tile && h <= tile {
        let out = generator.infer(params, &packed);
        return RgbImage::from_tensor_clamped(&out);
    }
    if tile % align != 0 || tile <= TILE_OVERLAP {
        return Err(Error::InvalidArgument(format!(
            "tile size {tile} incompatible with overlap {TILE_OVERLAP} and alignment {align}"
        )));
    }

    let tensor = blend_tiles(&packed, tile, &mut |sub| generator.infer(params, sub));
    RgbImage::from_tensor_clamped(&tensor)
}

/// Runs `forward` over overlapping tiles and blends the results with linear
/// ramps across interior tile borders (full weight at image edges). The
/// forward map must preserve spatial dimensions and return 3 channels.
fn blend_tiles(packed: &Tensor, tile: usize, forward: &mut dyn FnMut(&Tensor) -> Tensor) -> Tensor {
    let (_, h, w) = packed.chw();
    let positions = |extent: usize| -> Vec<usize> {
        if extent <= tile {
            return vec![0];
        }
        let stride = tile - TILE_OVERLAP;
        let mut at = 0;
        let mut out = Vec::new();
        loop {
            if at + tile >= extent {
                out.push(extent - tile);
                break;
            }
            out.push(at);
            at += stride;
        }
        out
    };
    let ramp = |idx: usize, len: usize, at_start_edge: bool, at_end_edge: bool| -> f64 {
        let mut weight = 1.0;
        if !at_start_edge && idx < TILE_OVERLAP {
            weight *= (idx + 1) as f64 / (TILE_OVERLAP + 1) as f64;
        }
        if !at_end_edge && idx >= len - TILE_OVERLAP {
            weight *= (len - idx) as f64 / (TILE_OVERLAP + 1) as f64;
        }
        weight
    };

    let tile_h = tile.min(h);
    let tile_w = tile.min(w);
    let mut acc = vec![0.0; 3 * h * w];
    let mut norm = vec![0.0; h * w];
    for &ty in &positions(h) {
        for &tx in &positions(w) {
            let sub = crop_tensor(packed, ty, tx, tile_h, tile_w);
            let out = forward(&sub);
            let data = out.data();
            for y in 0..tile_h {
                let wy = ramp(y, tile_h, ty == 0, ty + tile_h == h);
                for x in 0..tile_w {
                    let wx = ramp(x, tile_w, tx == 0, tx + tile_w == w);
                    let weight = wy * wx;
                    let dst = (ty + y) * w + (tx + x);
                    norm[dst] += weight;
                    for c in 0..3 {
                        acc[c * h * w + dst] += weight * data[c * tile_h * tile_w + y * tile_w + x];
                    }
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            for c in 0..3 {
                acc[c * h * w + idx] /= norm[idx];
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], acc)
}

fn crop_tensor(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Tensor {
    let (c, _, w) = t.chw();
    let (_, full_h, full_w) = t.chw();
    assert!(top + height <= full_h && left + width <= full_w);
    let mut out = vec![0.0; c * height * width];
    for ch in 0..c {
        for y in 0..height {
            let src = ch * full_h * full_w + (top + y) * w + left;
            let dst = ch * height * width + y * width;
            out[dst..dst + width].copy_from_slice(&t.data()[src..src + width]);
        }
    }
    Tensor::from_vec(vec![c, height, width], out)
}

/// Evaluates a generator over a manifest's clean patches at fixed noise
/// levels, reporting metrics per level.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_at_sigmas(
    generator: &Generator,
    params: &ParamSet,
    manifest_dir: &Path,
    manifest: &DatasetManifest,
    sigmas: &[f64],
    seed: u64,
    quantize_8bit: bool,
) -> Result<Vec<(f64, MetricReport)>> {
    if manifest.records.is_empty() {
        return Err(Error::InvalidArgument("manifest holds no records".into()));
    }
    let tile = manifest.header.patch_size;
    let mut out = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut outputs = Vec::with_capacity(manifest.records.len());
        let mut references = Vec::with_capacity(manifest.records.len());
        for record in &manifest.records {
            let clean = RgbImage::load_png(&manifest_dir.join(&record.clean))?;
            let noise = NoiseSpec {
                sigma,
                seed: derive_seed(seed, &format!("{}#{}", record.id, sigma)),
            };
            let mosaic = degrade(&clean, manifest.header.pattern, &noise)?;
            let recon = reconstruct_mosaic(generator, params, &mosaic, tile)?;
            outputs.push((record.id.clone(), recon));
            references.push((record.id.clone(), clean));
        }
        out.push((
            sigma,
            evaluate_dataset(&outputs, &references, quantize_8bit)?,
        ));
    }
    Ok(out)
}

/// Default evaluation noise levels.
pub fn default_eval_sigmas() -> Vec<f64> {
    EVAL_SIGMAS.to_vec()
}

/// One cell of the ablation matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub group_density: usize,
    pub parameter_count: usize,
    pub final_loss: LossReport,
    pub metrics: MetricReport,
}

/// Objective-term combinations mirroring the incremental ablation study.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 4] = [
    // (label, attention, pcl, rfl)
    ("base", false, false, false),
    ("am", true, false, false),
    ("am_pcl", true, true, false),
    ("am_pcl_rfl", true, true, true),
];

/// Trains and scores every (variant, group density) cell at desk scale.
/// Each cell gets its own output directory under `out/ablation/`.
pub fn ablation_matrix(
    base: &RunConfig,
    densities: &[usize],
    eval_sigma: f64,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &density in densities {
        for (label, attention, pcl, rfl) in ABLATION_VARIANTS {
            let mut run = base.clone();
            run.network.blocks_per_group = density;
            run.train.use_attention = attention;
            run.train.use_pcl = pcl;
            run.train.use_rfl = rfl;
            run.out = base
                .out
                .join("ablation")
                .join(format!("{label}_m{density}"));
            let outcome = train(&run, None)?;

            let loaded = load_checkpoint(&outcome.checkpoint)?;
            let manifest_path = run.data.val_manifest.as_ref().unwrap_or(&run.data.manifest);
            let manifest = DatasetManifest::load(manifest_path)?;
            let manifest_dir = manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf();
            let scored = evaluate_at_sigmas(
                &loaded.generator,
                &loaded.gen_params,
                &manifest_dir,
                &manifest,
                &[eval_sigma],
                run.train.seed,
                false,
            )?;
            cells.push(AblationCell {
                label: label.to_string(),
                group_density: density,
                parameter_count: loaded.gen_params.total_values(),
                final_loss: outcome.final_report.expect("ran at least one step"),
                metrics: scored.into_iter().next().expect("one sigma").1,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfa::CfaPattern;
    use crate::data::{prepare, PrepareConfig};

    fn tiny_sources(dir: &Path, count: usize, size: usize) {
        for i in 0..count {
            RgbImage::from_fn(size, size, |x, y| {
                let fx = x as f64 / size as f64;
                let fy = y as f64 / size as f64;
                [
                    (fx + i as f64 * 0.21).fract(),
                    (fy * 0.8 + 0.1).fract(),
                    ((fx + fy) * 0.5 + i as f64 * 0.13).fract(),
                ]
            })
            .save_png16(&dir.join(format!("img{i}.png")))
            .unwrap();
        }
    }

    fn tiny_run(root: &Path, steps: usize, use_gan: bool) -> RunConfig {
        let src = root.join("src");
        let data = root.join("data");
        std::fs::create_dir_all(&src).unwrap();
        tiny_sources(&src, 2, 16);
        prepare(
            &src,
            &data,
            &PrepareConfig {
                patch_size: 16,
                seed: 77,
                ..Default::default()
            },
        )
        .unwrap();
        RunConfig {
            network: NetworkConfig {
                depths: vec![8, 16, 32],
                blocks_per_group: 1,
                reduction: 8,
                expansion: 2,
                attention: true,
            },
            train: TrainConfig {
                batch: 2,
                steps: Some(steps),
                seed: 99,
                use_gan,
                feature_stage: 2,
                ..Default::default()
            },
            data: DataPaths {
                manifest: data.join("manifest.jsonl"),
                val_manifest: None,
                extractor_weights: None,
            },
            out: root.join("out"),
        }
    }

    fn with_cache_env<T>(root: &Path, f: impl FnOnce() -> T) -> T {
        // The extractor cache defaults to an env-var path; unit tests pin it
        // inside the test sandbox.
        std::env::set_var("JDD_CACHE", root.join("cache"));
        let out = f();
        std::env::remove_var("JDD_CACHE");
        out
    }

    #[test]
    fn config_validation_rejects_bad_budgets() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_err());
        cfg.steps = Some(10);
        assert!(cfg.validate().is_ok());
        cfg.epochs = Some(2);
        assert!(cfg.validate().is_err());
        cfg.steps = None;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.resolved_steps(25), 2 * 25usize.div_ceil(12));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let json = r#"{
            "network": {},
            "train": {"steps": 5},
            "data": {"manifest": "m.jsonl"},
            "out": "o",
            "extra": 1
        }"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
    }

    #[test]
    fn fingerprint_ignores_step_budget_only() {
        let root = tempfile::tempdir().unwrap();
        let mut a = tiny_run(root.path(), 5, false);
        let mut b = a.clone();
        b.train.steps = Some(50);
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.train.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        a.train.use_pcl = false;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn divergence_guard_trips_on_non_finite() {
        assert!(ensure_finite(3, 1.5).is_ok());
        let err = ensure_finite(3, f64::NAN).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 3, .. }));
        assert!(ensure_finite(4, f64::INFINITY).is_err());
    }

    #[test]
    fn single_step_is_reproducible() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let mut run = tiny_run(root.path(), 1, true);
            run.out = root.path().join("run_a");
            train(&run, None).unwrap();
            let mut run_b = run.clone();
            run_b.out = root.path().join("run_b");
            train(&run_b, None).unwrap();

            let log_a = std::fs::read(run.out.join("train_log.jsonl")).unwrap();
            let log_b = std::fs::read(run_b.out.join("train_log.jsonl")).unwrap();
            assert_eq!(log_a, log_b);
            let ck_a = std::fs::read(run.out.join("checkpoints/latest.ckpt")).unwrap();
            let ck_b = std::fs::read(run_b.out.join("checkpoints/latest.ckpt")).unwrap();
            assert_eq!(ck_a, ck_b);
        });
    }

    #[test]
    fn gan_off_checkpoint_has_no_discriminator() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let run = tiny_run(root.path(), 1, false);
            let outcome = train(&run, None).unwrap();
            let archive = checkpoint::load(&outcome.checkpoint).unwrap();
            assert!(archive.tensors.iter().all(|(n, _)| !n.starts_with("disc.")));
            let loaded = load_checkpoint(&outcome.checkpoint).unwrap();
            assert!(loaded.discriminator.is_none());
        });
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            // 4 straight steps.
            let mut direct = tiny_run(root.path(), 4, true);
            direct.out = root.path().join("direct");
            let direct_out = train(&direct, None).unwrap();

            // 2 steps, checkpoint, then 2 more.
            let mut first = direct.clone();
            first.train.steps = Some(2);
            first.out = root.path().join("resumed");
            let first_out = train(&first, None).unwrap();
            let mut second = direct.clone();
            second.out = first.out.clone();
            let second_out = train(&second, Some(&first_out.checkpoint)).unwrap();
            assert_eq!(second_out.steps_run, 2);

            let a = load_checkpoint(&direct_out.checkpoint).unwrap();
            let b = load_checkpoint(&second_out.checkpoint).unwrap();
            assert_eq!(a.step, b.step);
            for ((na, ta), (nb, tb)) in a.gen_params.iter().zip(b.gen_params.iter()) {
                assert_eq!(na, nb);
                let bits_equal = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(bits_equal, "parameter {na} differs after resume");
            }
        });
    }

    #[test]
    fn resume_rejects_foreign_configuration() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let mut run = tiny_run(root.path(), 2, false);
            run.train.steps = Some(1);
            let outcome = train(&run, None).unwrap();
            let mut other = run.clone();
            other.train.steps = Some(2);
            other.train.seed += 1;
            let err = train(&other, Some(&outcome.checkpoint)).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)));
        });
    }

    #[test]
    fn training_reduces_reconstruction_loss() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let mut run = tiny_run(root.path(), 30, false);
            run.train.use_pcl = false;
            run.train.use_rfl = false;
            run.train.adam.lr = 1e-3;
            let _ = train(&run, None).unwrap();
            let log = std::fs::read_to_string(run.out.join("train_log.jsonl")).unwrap();
            let losses: Vec<f64> = log
                .lines()
                .skip(1)
                .map(|l| {
                    serde_json::from_str::<serde_json::Value>(l).unwrap()["l_r"]
                        .as_f64()
                        .unwrap()
                })
                .collect();
            assert_eq!(losses.len(), 30);
            let first = losses[..3].iter().sum::<f64>() / 3.0;
            let last = losses[27..].iter().sum::<f64>() / 3.0;
            assert!(last < first, "no improvement: {first} -> {last}");
        });
    }

    #[test]
    fn blending_preserves_pointwise_maps_exactly() {
        // A forward map with zero receptive field commutes with tiling, so
        // any discrepancy would expose a coverage/normalization bug.
        let packed = Tensor::from_vec(
            vec![3, 48, 40],
            (0..3 * 48 * 40)
                .map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5)
                .collect(),
        );
        let identity = blend_tiles(&packed, 32, &mut |t| t.clone());
        for (a, b) in packed.data().iter().zip(identity.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted = blend_tiles(&packed, 32, &mut |t| {
            Tensor::from_vec(
                t.shape().to_vec(),
                t.data().iter().map(|v| v + 0.25).collect(),
            )
        });
        for (a, b) in packed.data().iter().zip(shifted.data()) {
            assert!((a + 0.25 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiled_forward_matches_whole_image_oracle_where_computation_is_local() {
        // Without channel attention the network is purely convolutional, so
        // a pixel whose receptive cone never crosses a tile border must get
        // the same value from a tile forward as from the whole image. Tiles
        // share the image's outer border (identical padding there); only
        // interior tile borders pollute, within the receptive field. The
        // check runs on single-contributor zones at a safe margin from those
        // borders, against the whole-image forward as oracle.
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let mut run = tiny_run(root.path(), 1, false);
            run.network.attention = false;
            let outcome = train(&run, None).unwrap();
            let loaded = load_checkpoint(&outcome.checkpoint).unwrap();

            let img = RgbImage::from_fn(160, 160, |x, y| {
                let fx = x as f64 / 160.0;
                let fy = y as f64 / 160.0;
                [
                    (fx * 9.0).sin() * 0.4 + 0.5,
                    0.5 * (fx + fy),
                    (fy * 7.0).cos() * 0.4 + 0.5,
                ]
            });
            let mosaic = crate::cfa::mosaic(&img, CfaPattern::Quad).unwrap();
            let whole =
                reconstruct_mosaic(&loaded.generator, &loaded.gen_params, &mosaic, 160).unwrap();
            let tiled =
                reconstruct_mosaic(&loaded.generator, &loaded.gen_params, &mosaic, 96).unwrap();

            // Tiles start at 0 and 64; interior borders sit at 64 and 96.
            // Margin 40 exceeds the receptive radius of this configuration.
            let clean = |i: usize| i < 56 || i >= 104;
            let mut max_diff: f64 = 0.0;
            let mut checked = 0usize;
            for c in 0..3 {
                for y in 0..160 {
                    for x in 0..160 {
                        if clean(y) && clean(x) {
                            max_diff =
                                max_diff.max((whole.get(c, y, x) - tiled.get(c, y, x)).abs());
                            checked += 1;
                        }
                    }
                }
            }
            assert!(checked > 30_000);
            assert!(max_diff < 2.0 / 255.0, "local-zone mismatch {max_diff}");

            // Same checkpoint, same input: identical bytes out.
            let again =
                reconstruct_mosaic(&loaded.generator, &loaded.gen_params, &mosaic, 96).unwrap();
            assert_eq!(tiled.as_slice(), again.as_slice());
        });
    }

    #[test]
    fn evaluation_reports_per_sigma() {
        let root = tempfile::tempdir().unwrap();
        with_cache_env(root.path(), || {
            let run = tiny_run(root.path(), 1, false);
            let outcome = train(&run, None).unwrap();
            let loaded = load_checkpoint(&outcome.checkpoint).unwrap();
            let manifest = DatasetManifest::load(&run.data.manifest).unwrap();
            let dir = run.data.manifest.parent().unwrap();
            let scored = evaluate_at_sigmas(
                &loaded.generator,
                &loaded.gen_params,
                dir,
                &manifest,
                &[5.0, 25.0],
                1,
                false,
            )
            .unwrap();
            assert_eq!(scored.len(), 2);
            for (_, report) in &scored {
                assert_eq!(report.per_image.len(), manifest.records.len());
                assert!(report.mean_delta_e.is_finite());
            }
        });
    }
}
