//! Frozen convolutional feature extractor backing the perceptual feature
//! loss.
//!
//! Three stages of two 3×3 convolutions (16, 32, then 64 channels), each
//! followed by ReLU and a 2×2 max-pool. Weights are synthesized once from a
//! fixed seed, written to a cache file, and never trained; the file's SHA-256
//! is recorded in run logs so any two runs can prove they scored features
//! against identical weights. Inputs are RGB tensors in [0,1] with height and
//! width divisible by `2^stage`.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::net::blocks::Conv;
use crate::nn::{Builder, Ctx, EvalCtx, ParamSet, Tensor};
use crate::util::{rng_from_seed, sha256_hex};

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const WEIGHT_SEED: u64 = 0x6a64645f65787431; // "jdd_ext1"
const CACHE_FILE: &str = "feature-extractor-v1.ckpt";

/// Feature maps are taken after the third pooling stage unless configured
/// otherwise.
pub const DEFAULT_FEATURE_STAGE: usize = 3;

/// Resolves the weight cache directory: `$JDD_CACHE`, or `.jdd_cache`.
pub fn cache_dir() -> PathBuf {
    match std::env::var_os("JDD_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(".jdd_cache"),
    }
}

pub struct FeatureExtractor {
    params: ParamSet,
    stages: Vec<Vec<Conv>>,
    sha256: String,
}

impl FeatureExtractor {
    fn build_structure(params: &mut ParamSet) -> Vec<Vec<Conv>> {
        let mut rng = rng_from_seed(WEIGHT_SEED);
        let mut b = Builder::new(params, &mut rng);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let mut scope = b.scope(&format!("stage{}", i + 1));
            let convs = vec![
                Conv::build(&mut scope, "conv0", cin, cout, 3, 1, 1, 1),
                Conv::build(&mut scope, "conv1", cout, cout, 3, 1, 1, 1),
            ];
            stages.push(convs);
            cin = cout;
        }
        stages
    }

    /// Loads the cached weights, synthesizing and caching them first if the
    /// file does not exist yet.
    pub fn load_or_create(cache: &Path) -> Result<Self> {
        let path = cache.join(CACHE_FILE);
        if !path.exists() {
            std::fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
            let mut params = ParamSet::new();
            Self::build_structure(&mut params);
            checkpoint::save(
                &path,
                &json!({"kind": "feature-extractor", "version": 1}),
                params.iter(),
            )?;
        }
        Self::from_file(&path)
    }

    /// Loads extractor weights from an explicit archive path.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sha256 = sha256_hex(&bytes);
        let archive = checkpoint::load(path)?;
        if archive.meta["kind"] != "feature-extractor" {
            return Err(Error::bad_file(
                path,
                "archive does not hold feature-extractor weights",
            ));
        }
        let mut params = ParamSet::new();
        let stages = Self::build_structure(&mut params);
        params.load_named(&archive.tensors)?;
        Ok(FeatureExtractor {
            params,
            stages,
            sha256,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Hex SHA-256 of the weights file this extractor was loaded from.
    pub fn weights_sha256(&self) -> &str {
        &self.sha256
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// `[channels, height, width]` of the stage-`stage` feature map for an
    /// input of the given size.
    pub fn feature_shape(&self, height: usize, width: usize, stage: usize) -> [usize; 3] {
        self.check_geometry(height, width, stage);
        let s = 1 << stage;
        [STAGE_CHANNELS[stage - 1], height / s, width / s]
    }

    fn check_geometry(&self, height: usize, width: usize, stage: usize) {
        assert!(
            stage >= 1 && stage <= self.stages.len(),
            "feature stage {stage} out of range 1..={}",
            self.stages.len()
        );
        let s = 1 << stage;
        assert!(
            height % s == 0 && width % s == 0,
            "input {height}x{width} not divisible by {s} for feature stage {stage}"
        );
    }

    /// Runs the extractor up to and including the `stage`-th pooling step.
    pub fn features<C: Ctx>(&self, ctx: &mut C, x: &C::V, stage: usize) -> C::V {
        assert!(stage >= 1 && stage <= self.stages.len());
        let mut h = x.clone();
        for convs in &self.stages[..stage] {
            for conv in convs {
                h = conv.apply(ctx, &h);
                h = ctx.relu(&h);
            }
            h = ctx.maxpool2(&h);
        }
        h
    }

    /// Convenience wrapper: feature maps as plain tensors, no gradients.
    pub fn features_eval(&self, x: &Tensor, stage: usize) -> Tensor {
        let (_, h, w) = x.chw();
        self.check_geometry(h, w, stage);
        let mut ctx = EvalCtx::new(&self.params);
        self.features(&mut ctx, x, stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tape, TapeCtx};
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn random_rgb(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_vec(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn synthesis_is_deterministic_across_cache_dirs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = FeatureExtractor::load_or_create(a.path()).unwrap();
        let eb = FeatureExtractor::load_or_create(b.path()).unwrap();
        assert_eq!(ea.weights_sha256(), eb.weights_sha256());
        for ((na, ta), (nb, tb)) in ea.params.iter().zip(eb.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn second_load_reuses_cached_file() {
        let dir = tempfile::tempdir().unwrap();
        let first = FeatureExtractor::load_or_create(dir.path()).unwrap();
        // Re-loading must consume the existing archive, not resynthesize.
        let path = dir.path().join(CACHE_FILE);
        let before = std::fs::metadata(&path).unwrap().modified().unwrap();
        let second = FeatureExtractor::load_or_create(dir.path()).unwrap();
        let after = std::fs::metadata(&path).unwrap().modified().unwrap();
        assert_eq!(before, after);
        assert_eq!(first.weights_sha256(), second.weights_sha256());
    }

    #[test]
    fn feature_shapes_follow_pooling_ladder() {
        let dir = tempfile::tempdir().unwrap();
        let ext = FeatureExtractor::load_or_create(dir.path()).unwrap();
        let x = random_rgb(16, 24, 3);
        for (stage, expect) in [(1, [16, 8, 12]), (2, [32, 4, 6]), (3, [64, 2, 3])] {
            assert_eq!(ext.feature_shape(16, 24, stage), expect);
            assert_eq!(ext.features_eval(&x, stage).shape(), &expect);
        }
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn rejects_misaligned_input() {
        let dir = tempfile::tempdir().unwrap();
        let ext = FeatureExtractor::load_or_create(dir.path()).unwrap();
        ext.features_eval(&random_rgb(12, 12, 4), 3);
    }

    #[test]
    fn tape_and_eval_features_agree_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ext = FeatureExtractor::load_or_create(dir.path()).unwrap();
        let x = random_rgb(8, 8, 5);

        let eval = ext.features_eval(&x, 2);

        let mut tape = Tape::new();
        let leaves = ext.params.spawn_leaves(&mut tape, false);
        let xv = tape.constant(x);
        let mut ctx = TapeCtx {
            tape: &mut tape,
            leaves: &leaves,
        };
        let fv = ext.features(&mut ctx, &xv, 2);
        assert_eq!(tape.value(fv).data(), eval.data());
    }

    #[test]
    fn weights_stay_frozen_under_backprop() {
        let dir = tempfile::tempdir().unwrap();
        let ext = FeatureExtractor::load_or_create(dir.path()).unwrap();

        let mut tape = Tape::new();
        let leaves = ext.params.spawn_leaves(&mut tape, false);
        let input = tape.leaf(random_rgb(8, 8, 6));
        let features = {
            let mut ctx = TapeCtx {
                tape: &mut tape,
                leaves: &leaves,
            };
            ext.features(&mut ctx, &input, 1)
        };
        let zero = tape.constant(Tensor::zeros(vec![16, 4, 4]));
        let loss = tape.mean_abs_diff(features, zero);
        let grads = tape.backward(loss);

        // Gradient reaches the image but never the extractor weights.
        assert!(grads.get(input).is_some());
        assert!(leaves.iter().all(|l| grads.get(*l).is_none()));
    }

    #[test]
    fn rejects_foreign_archives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.ckpt");
        let t = Tensor::scalar(1.0);
        checkpoint::save(&path, &json!({"kind": "something-else"}), [("w", &t)]).unwrap();
        assert!(FeatureExtractor::from_file(&path).is_err());
    }
}
