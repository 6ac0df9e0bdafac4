//! The pose model: two convolutional branch encoders (full image and person
//! crop), patch tokenization with keypoint queries, a pre-norm transformer
//! encoder over the joint token sequence, and a linear heatmap head read off
//! the keypoint rows.

pub mod backbone;
pub mod encoder;
pub mod heatmap;
pub mod tokenizer;

pub use backbone::BackboneConfig;
pub use heatmap::{decode, DecodedKeypoint, HeadGeometry};
pub use tokenizer::Branch;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Keypoint count of the skeleton this model predicts.
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    /// Output channels of both branch encoders.
    pub c: usize,
    pub bu_input: (usize, usize),
    pub td_input: (usize, usize),
    pub bu_widths: Vec<usize>,
    pub td_widths: Vec<usize>,
    pub bu_patch: (usize, usize),
    pub td_patch: (usize, usize),
    /// Heatmap grid (rows, cols).
    pub head_grid: (usize, usize),
    /// Target Gaussian spread in heatmap cells.
    pub sigma: f64,
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let base = ModelConfig {
            name: "dpit-b".to_string(),
            k: 17,
            d: 192,
            heads: 8,
            depth: 12,
            ffn_mult: 3,
            c: 32,
            bu_input: (512, 512),
            td_input: (256, 192),
            bu_widths: vec![16, 32, 32],
            td_widths: vec![16, 32],
            bu_patch: (8, 8),
            td_patch: (4, 3),
            head_grid: (64, 48),
            sigma: 2.0,
        };
        let cfg = match name {
            "dpit-b" => base,
            "dpit-d6" => ModelConfig { name: name.to_string(), depth: 6, ..base },
            "dpit-d16" => ModelConfig { name: name.to_string(), depth: 16, ..base },
            "dpit-tiny" => ModelConfig {
                name: name.to_string(),
                d: 64,
                heads: 4,
                depth: 2,
                c: 16,
                bu_input: (96, 96),
                td_input: (64, 48),
                bu_widths: vec![8, 12, 16],
                td_widths: vec![8, 16],
                bu_patch: (4, 4),
                td_patch: (4, 3),
                head_grid: (16, 12),
                ..base
            },
            other => return Err(Error::config(format!("unknown preset {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bu_backbone(&self) -> BackboneConfig {
        BackboneConfig { widths: self.bu_widths.clone(), c: self.c }
    }

    pub fn td_backbone(&self) -> BackboneConfig {
        BackboneConfig { widths: self.td_widths.clone(), c: self.c }
    }

    /// Branch token grid (rows, cols): feature extents over patch extents.
    pub fn token_grid(&self, branch: Branch) -> (usize, usize) {
        let (input, stride, patch) = match branch {
            Branch::Bu => (self.bu_input, self.bu_backbone().stride(), self.bu_patch),
            Branch::Td => (self.td_input, self.td_backbone().stride(), self.td_patch),
        };
        (input.0 / stride / patch.0, input.1 / stride / patch.1)
    }

    pub fn n_tokens(&self, branch: Branch) -> usize {
        let g = self.token_grid(branch);
        g.0 * g.1
    }

    pub fn seq_len(&self) -> usize {
        self.k + self.n_tokens(Branch::Bu) + self.n_tokens(Branch::Td)
    }

    pub fn head_geometry(&self) -> HeadGeometry {
        HeadGeometry { grid: self.head_grid, crop: self.td_input }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be positive".to_string()));
        }
        if self.d % self.heads != 0 || self.heads == 0 {
            return Err(Error::config(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d % 4 != 0 {
            // Positional codes split D into row/col sine and cosine quarters.
            return Err(Error::config(format!("hidden dim {} must be divisible by 4", self.d)));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive".to_string()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.head_grid.0 == 0 || self.head_grid.1 == 0 {
            return Err(Error::config("head grid must be positive".to_string()));
        }
        self.bu_backbone().validate()?;
        self.td_backbone().validate()?;
        for (branch, input, patch, label) in [
            (Branch::Bu, self.bu_input, self.bu_patch, "bu"),
            (Branch::Td, self.td_input, self.td_patch, "td"),
        ] {
            let stride = match branch {
                Branch::Bu => self.bu_backbone().stride(),
                Branch::Td => self.td_backbone().stride(),
            };
            if input.0 % stride != 0 || input.1 % stride != 0 {
                return Err(Error::config(format!(
                    "{label} input {input:?} not divisible by backbone stride {stride}"
                )));
            }
            let feat = (input.0 / stride, input.1 / stride);
            if patch.0 == 0 || patch.1 == 0 || feat.0 % patch.0 != 0 || feat.1 % patch.1 != 0 {
                return Err(Error::config(format!(
                    "{label} patch {patch:?} does not tile feature {feat:?}"
                )));
            }
        }
        Ok(())
    }
}

/// How the bottom-up branch participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuMode {
    Full,
    /// BU token rows forced to zero vectors (branch-effect probe).
    Zeroed,
    /// BU tokens left out of the sequence entirely.
    Omitted,
}

/// Parameter values bound onto a tape, looked up by store name.
pub struct Bound<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    ids: &'a [ValueId],
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>, ids: &'a [ValueId]) -> Self {
        assert_eq!(store.len(), ids.len(), "bound ids misaligned with store");
        Bound { store, ids }
    }

    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.store
            .find(name)
            .map(|id| self.ids[id.0])
            .ok_or_else(|| Error::config(format!("parameter {name} missing from store")))
    }
}

/// Draws all model parameters in a fixed order from one seeded stream, so a
/// given (config, seed) yields identical weights regardless of scalar type.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init(&mut store, "bu", 3, &cfg.bu_backbone(), &mut rng);
    backbone::init(&mut store, "td", 3, &cfg.td_backbone(), &mut rng);
    tokenizer::init(&mut store, cfg, &mut rng);
    encoder::init(&mut store, cfg, &mut rng);
    heatmap::init(&mut store, cfg, &mut rng);
    Ok(store)
}

/// Everything a forward pass over one scene produces: per-crop heatmap rows
/// [K, grid cells] and the attention matrices of every (crop, layer, head).
pub struct SceneForward {
    pub heatmaps: Vec<ValueId>,
    pub attn: Vec<ValueId>,
}

/// Runs the full model over one scene: the BU branch once, the TD branch per
/// person crop, the encoder over [keypoint queries ‖ BU ‖ TD], and the head
/// over the keypoint rows. All crops share the BU token subgraph.
pub fn forward_scene<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    bu_image: &Tensor<T>,
    crops: &[Tensor<T>],
    bu_mode: BuMode,
) -> Result<SceneForward> {
    let bu_tokens = match bu_mode {
        BuMode::Omitted => None,
        mode => {
            let img = tape.leaf(bu_image.clone(), false);
            let feat = backbone::forward(tape, bound, "bu", &cfg.bu_backbone(), img)?;
            let tokens = tokenizer::visual_tokens(tape, bound, cfg, Branch::Bu, feat)?;
            Some(match mode {
                BuMode::Zeroed => tape.scale(tokens, lit::<T>(0.0))?,
                _ => tokens,
            })
        }
    };
    let kpt = bound.get("tok.kpt")?;
    let mut out = SceneForward { heatmaps: Vec::with_capacity(crops.len()), attn: Vec::new() };
    for crop in crops {
        let img = tape.leaf(crop.clone(), false);
        let feat = backbone::forward(tape, bound, "td", &cfg.td_backbone(), img)?;
        let td_tokens = tokenizer::visual_tokens(tape, bound, cfg, Branch::Td, feat)?;
        let seq = match bu_tokens {
            Some(bu) => tape.concat_rows(&[kpt, bu, td_tokens])?,
            None => tape.concat_rows(&[kpt, td_tokens])?,
        };
        let encoded = encoder::forward(tape, bound, cfg, seq, &mut out.attn)?;
        out.heatmaps.push(heatmap::project(tape, bound, cfg, encoded)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_the_documented_geometry() {
        for (name, depth) in [("dpit-b", 12), ("dpit-d6", 6), ("dpit-d16", 16)] {
            let cfg = ModelConfig::preset(name).unwrap();
            assert_eq!((cfg.depth, cfg.heads, cfg.d), (depth, 8, 192));
            // 512/8 = 64x64 feature in 8x8 patches: 64 tokens; 256x192/4 =
            // 64x48 in 4x3 patches: 256 tokens; plus 17 queries = 337.
            assert_eq!(cfg.n_tokens(Branch::Bu), 64);
            assert_eq!(cfg.n_tokens(Branch::Td), 256);
            assert_eq!(cfg.seq_len(), 337);
        }
        let tiny = ModelConfig::preset("dpit-tiny").unwrap();
        assert_eq!((tiny.depth, tiny.heads, tiny.d, tiny.c), (2, 4, 64, 16));
        // 96/8 = 12x12 feature in 4x4 patches: 9 tokens; 64x48/4 = 16x12 in
        // 4x3 patches: 16 tokens; sequence 17 + 9 + 16 = 42.
        assert_eq!(tiny.seq_len(), 42);
        assert!(ModelConfig::preset("dpit-xl").is_err());
    }

    #[test]
    fn parameter_count_grows_with_depth() {
        let counts: Vec<usize> = ["dpit-d6", "dpit-b", "dpit-d16"]
            .iter()
            .map(|n| {
                let cfg = ModelConfig::preset(n).unwrap();
                init_params::<f32>(&cfg, 1).unwrap().total_len()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn same_seed_same_weights_across_precisions() {
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f64>(&cfg, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for ((name_a, ta), (name_b, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(name_a, name_b);
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x, y as f32, "{name_a} diverged between precisions");
            }
        }
    }

    #[test]
    fn forward_produces_per_crop_heatmaps_and_shares_bu() {
        use rand::SeedableRng;
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let store = init_params::<f32>(&cfg, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let bu = Tensor::randn(vec![96, 96, 3], 0.3, &mut rng);
        let crops = vec![
            Tensor::randn(vec![64, 48, 3], 0.3, &mut rng),
            Tensor::randn(vec![64, 48, 3], 0.3, &mut rng),
        ];
        let count_nodes = |crops: &[Tensor<f32>]| {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape, true);
            let bound = Bound::new(&store, &ids);
            let out = forward_scene(&mut tape, &bound, &cfg, &bu, crops, BuMode::Full).unwrap();
            for &hm in &out.heatmaps {
                assert_eq!(tape.shape(hm), &[17, 16 * 12]);
            }
            assert_eq!(out.attn.len(), crops.len() * cfg.depth * cfg.heads);
            tape.len()
        };
        let one = count_nodes(&crops[..1]);
        let two = count_nodes(&crops);
        // The second crop reuses the scene's BU subgraph, so it costs fewer
        // nodes than the first crop did.
        assert!(two - one < one - store.len());
    }

    #[test]
    fn bu_modes_change_the_sequence_as_documented() {
        use rand::SeedableRng;
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let store = init_params::<f64>(&cfg, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let bu = Tensor::randn(vec![96, 96, 3], 0.3, &mut rng);
        let crop = vec![Tensor::randn(vec![64, 48, 3], 0.3, &mut rng)];

        let run = |mode: BuMode| {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape, false);
            let bound = Bound::new(&store, &ids);
            let out = forward_scene(&mut tape, &bound, &cfg, &bu, &crop, mode).unwrap();
            tape.value(out.heatmaps[0]).to_vec()
        };
        let full = run(BuMode::Full);
        let zeroed = run(BuMode::Zeroed);
        let omitted = run(BuMode::Omitted);
        // Zeroing and omitting both differ from the full pass; zeroed still
        // keeps the sequence slots so it differs from omitted too.
        assert_ne!(full, zeroed);
        assert_ne!(full, omitted);
        assert_ne!(zeroed, omitted);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        use rand::SeedableRng;
        let cfg = ModelConfig::preset("dpit-tiny").unwrap();
        let store = init_params::<f64>(&cfg, 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let bu = Tensor::randn(vec![96, 96, 3], 0.3, &mut rng);
        let crops = vec![Tensor::randn(vec![64, 48, 3], 0.3, &mut rng)];
        let mut tape = Tape::new();
        let ids = store.bind(&mut tape, true);
        let bound = Bound::new(&store, &ids);
        let out = forward_scene(&mut tape, &bound, &cfg, &bu, &crops, BuMode::Full).unwrap();
        let kps = vec![(20.0, 30.0, 2u8); cfg.k];
        let (gt, vis) =
            heatmap::render_targets::<f64>(&kps, cfg.head_geometry(), cfg.sigma).unwrap();
        let loss = heatmap::mse_loss(&mut tape, out.heatmaps[0], &gt, &vis).unwrap();
        tape.backward(loss).unwrap();
        let grads = store.collect_grads(&tape, &ids).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let norm: f64 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "no gradient reached {}", store.name(crate::params::ParamId(i)));
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut cfg = ModelConfig::preset("dpit-tiny").unwrap();
        cfg.d = 66; // not divisible by 4 heads
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("dpit-tiny").unwrap();
        cfg.bu_input = (100, 96); // 100/8 = 12.5
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("dpit-tiny").unwrap();
        cfg.td_patch = (5, 3); // 16 % 5 != 0
        assert!(cfg.validate().is_err());
    }
}
