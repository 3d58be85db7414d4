//! The full per-frame model: grid network plus the spatio-temporal modules,
//! shared by training (on a gradient tape) and online inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    project_values, reweight_factor_var, reweight_var, temporal_aggregate_var, Aggregator,
};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::memory::{GridFeatureSet, ProjectedFeatures};
use crate::network::{EncoderVars, GridNetwork, NetworkConfig};
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub network: NetworkConfig,
    #[serde(default = "yes")]
    pub temporal_aggregation: bool,
    #[serde(default = "yes")]
    pub score_reweighting: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(network: NetworkConfig) -> Self {
        Self {
            network,
            temporal_aggregation: true,
            score_reweighting: true,
        }
    }

    /// Both spatio-temporal modules switched off.
    pub fn ablated(mut self) -> Self {
        self.temporal_aggregation = false;
        self.score_reweighting = false;
        self
    }
}

/// Tape handles for one memory frame's projected features.
#[derive(Clone, Copy, Debug)]
pub struct MemoryReadout {
    pub frame_index: usize,
    pub key_embed: Var,
    pub category_value: Var,
    pub mask_value: Var,
}

/// Tape handles produced by one frame's forward pass.
#[derive(Clone, Debug)]
pub struct FrameOutputs {
    pub encoder: EncoderVars,
    /// Raw `K`, `C`, `M` as stored to memory.
    pub key: Var,
    pub category: Var,
    pub mask: Var,
    pub query_embed: Var,
    /// One per memory readout, in the order given.
    pub sim_logits: Vec<Var>,
    pub sim_probs: Vec<Var>,
    pub category_logits: Var,
    pub category_probs: Var,
    /// `P`; equal to `category_probs` when reweighting is skipped.
    pub scores: Var,
    pub reweight_factor: Option<Var>,
    pub kernels: Var,
    pub mask_features: Var,
}

#[derive(Clone, Debug)]
pub struct VisoloModel {
    config: ModelConfig,
    pub network: GridNetwork,
    pub aggregator: Aggregator,
}

impl VisoloModel {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let network = GridNetwork::new(&config.network, store, rng)?;
        let aggregator = Aggregator::new(store, rng, config.network.feature_dim);
        Ok(Self {
            config: config.clone(),
            network,
            aggregator,
        })
    }

    /// A freshly initialised model and its parameters, seeded by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::default();
        let model = Self::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network_config(&self) -> &NetworkConfig {
        &self.config.network
    }

    /// Projects a frame's raw features for later use as memory.
    pub fn readout(&self, tape: &mut Tape, frame_index: usize, key: Var, category: Var, mask: Var) -> MemoryReadout {
        let agg = &self.aggregator;
        MemoryReadout {
            frame_index,
            key_embed: agg.matcher.embed_memory(tape, key),
            category_value: project_values(tape, &agg.category_value, category),
            mask_value: project_values(tape, &agg.mask_value, mask),
        }
    }

    /// Places cached projections on the tape as constants.
    pub fn readout_cached(&self, tape: &mut Tape, frame_index: usize, p: &ProjectedFeatures) -> MemoryReadout {
        MemoryReadout {
            frame_index,
            key_embed: tape.constant(p.key_embed.clone()),
            category_value: tape.constant(p.category_value.clone()),
            mask_value: tape.constant(p.mask_value.clone()),
        }
    }

    /// Memory projections of a stored frame, evaluated without gradients.
    pub fn project(&self, store: &ParamStore, fs: &GridFeatureSet) -> ProjectedFeatures {
        let mut tape = Tape::inference(store);
        let k = tape.constant(fs.key.clone());
        let c = tape.constant(fs.category.clone());
        let m = tape.constant(fs.mask.clone());
        let r = self.readout(&mut tape, fs.frame_index, k, c, m);
        ProjectedFeatures {
            key_embed: tape.value(r.key_embed).clone(),
            category_value: tape.value(r.category_value).clone(),
            mask_value: tape.value(r.mask_value).clone(),
        }
    }

    /// One frame given its memory readouts in ascending frame order. With
    /// an empty memory both spatio-temporal modules are skipped; with one
    /// memory frame the reweighting uses that frame alone.
    pub fn forward_frame(&self, tape: &mut Tape, image: Var, memory: &[MemoryReadout]) -> FrameOutputs {
        let net = &self.network;
        let encoder = net.encode(tape, image);
        let grid = net.grid_features(tape, &encoder);
        let key = net.key_features(tape, grid);
        let category = net.category_features(tape, key);
        let mask = net.mask_grid_features(tape, grid);
        self.heads(tape, encoder, key, category, mask, memory)
    }

    fn heads(&self, tape: &mut Tape, encoder: EncoderVars, key: Var, category: Var, mask: Var, memory: &[MemoryReadout]) -> FrameOutputs {
        let net = &self.network;
        let grid_shape = self.config.network.grid_shape;
        let matcher = &self.aggregator.matcher;
        let query_embed = matcher.embed_query(tape, key);
        let sim_logits: Vec<Var> = memory
            .iter()
            .map(|r| matcher.logits(tape, query_embed, r.key_embed))
            .collect();
        let sim_probs: Vec<Var> = sim_logits.iter().map(|&s| tape.sigmoid(s)).collect();

        let (mut fused_c, mut fused_m) = (category, mask);
        if self.config.temporal_aggregation && !memory.is_empty() {
            let cv: Vec<Var> = memory.iter().map(|r| r.category_value).collect();
            let mv: Vec<Var> = memory.iter().map(|r| r.mask_value).collect();
            let ca = temporal_aggregate_var(tape, &sim_logits, &cv, grid_shape);
            let ma = temporal_aggregate_var(tape, &sim_logits, &mv, grid_shape);
            fused_c = tape.add(category, ca);
            fused_m = tape.add(mask, ma);
        }

        let category_logits = net.category_logits(tape, fused_c);
        let category_probs = tape.sigmoid(category_logits);
        let (scores, reweight_factor) = if self.config.score_reweighting && !memory.is_empty() {
            let recent = &sim_probs[sim_probs.len().saturating_sub(2)..];
            let factor = reweight_factor_var(tape, recent);
            (reweight_var(tape, category_probs, factor), Some(factor))
        } else {
            (category_probs, None)
        };
        let kernels = net.kernel_head(tape, fused_m);
        let mask_features = net.mask_feature_map(tape, &encoder);
        FrameOutputs {
            encoder,
            key,
            category,
            mask,
            query_embed,
            sim_logits,
            sim_probs,
            category_logits,
            category_probs,
            scores,
            reweight_factor,
            kernels,
            mask_features,
        }
    }
}
