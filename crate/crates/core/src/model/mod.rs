//! The probabilistic predictor: audio, participant and visual extractors,
//! the feature augmentation block, attention, the output block and the
//! late-fusion output adapter.

mod checkpoint;
mod config;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMetadata};
pub use config::{Fusion, ModelConfig, Variant};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNormStats, ConvBlock, ConvBlockSpec, DenseLayer, DenseSpec, ForwardContext,
    BATCH_NORM_MOMENTUM,
};
use crate::numerics::{Graph, NodeId, ParamSet, Tensor};

/// Gaussian `N(μ̂, exp(log σ̂)²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedDistribution {
    pub mu: f64,
    pub log_sigma: f64,
}

impl PredictedDistribution {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

/// Output of the audio trunk, plus the adapter output under late fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPrediction {
    pub trunk: PredictedDistribution,
    pub adapted: Option<PredictedDistribution>,
}

impl ModelPrediction {
    /// The distribution the model reports for this fusion mode.
    pub fn distribution(&self, fusion: Fusion) -> Result<PredictedDistribution> {
        match fusion {
            Fusion::Late => self
                .adapted
                .ok_or_else(|| Error::dim("late fusion prediction lacks adapter output")),
            Fusion::Early | Fusion::Mid => Ok(self.trunk),
        }
    }

    pub fn point_estimate(&self, fusion: Fusion) -> Result<f64> {
        Ok(self.distribution(fusion)?.mu)
    }
}

/// Batched model inputs.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub soundscape: Tensor,
    pub masker: Tensor,
    pub gamma: Vec<f64>,
    pub participant: Tensor,
    pub image: Tensor,
}

fn stack(tensors: &[&Tensor], what: &str) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| Error::dim("empty batch"))?;
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * tensors.len());
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} in one batch",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_parts(shape, data)
}

impl BatchInputs {
    /// Stacks samples, using `gammas` in place of each sample's stored gain.
    pub fn from_samples(samples: &[&Sample], gammas: &[f64]) -> Result<Self> {
        if samples.len() != gammas.len() {
            return Err(Error::dim("one gain per sample is required"));
        }
        Ok(Self {
            soundscape: stack(&samples.iter().map(|s| &s.soundscape).collect::<Vec<_>>(), "soundscape")?,
            masker: stack(&samples.iter().map(|s| &s.masker).collect::<Vec<_>>(), "masker")?,
            gamma: gammas.to_vec(),
            participant: stack(&samples.iter().map(|s| &s.participant).collect::<Vec<_>>(), "participant")?,
            image: stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), "image")?,
        })
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Handles to the intermediate nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub k: NodeId,
    pub q: NodeId,
    pub h: NodeId,
    pub r: NodeId,
    pub v: NodeId,
    pub z: NodeId,
    pub trunk: NodeId,
    pub adapted: Option<NodeId>,
}

impl ForwardNodes {
    /// `[B, 2]` node the loss is computed on.
    pub fn output(&self) -> NodeId {
        self.adapted.unwrap_or(self.trunk)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    buffers: Vec<BatchNormStats>,
    soundscape_blocks: Vec<ConvBlock>,
    masker_blocks: Vec<ConvBlock>,
    visual_blocks: Vec<ConvBlock>,
    participant_dense: DenseLayer,
    augment_conv: DenseLayer,
    augment_dense: DenseLayer,
    output_block: Vec<DenseLayer>,
    adapter: Option<Vec<DenseLayer>>,
    pub metadata: CheckpointMetadata,
}

fn conv_stack(
    prefix: &str,
    in_channels: usize,
    filters: &[usize],
    pools: &[[usize; 2]],
    dropout_rate: f64,
    params: &mut ParamSet,
    buffers: &mut Vec<BatchNormStats>,
    rng: &mut dyn RngCore,
) -> Result<Vec<ConvBlock>> {
    let mut cin = in_channels;
    let mut blocks = Vec::with_capacity(filters.len());
    for (i, (&f, &[ph, pw])) in filters.iter().zip(pools).enumerate() {
        let spec = ConvBlockSpec {
            filters: f,
            pool: (ph, pw),
            dropout_rate,
        };
        blocks.push(ConvBlock::new(&format!("{prefix}.block{i}"), cin, spec, params, buffers, rng)?);
        cin = f;
    }
    Ok(blocks)
}

fn dense_chain(
    prefix: &str,
    in_units: usize,
    hidden: usize,
    params: &mut ParamSet,
    rng: &mut dyn RngCore,
) -> Result<Vec<DenseLayer>> {
    let specs = [
        DenseSpec { units: hidden, activation: Activation::Swish },
        DenseSpec { units: hidden, activation: Activation::Swish },
        DenseSpec { units: 2, activation: Activation::Linear },
    ];
    let mut din = in_units;
    let mut out = Vec::with_capacity(3);
    for (i, spec) in specs.into_iter().enumerate() {
        out.push(DenseLayer::new(&format!("{prefix}.dense{}", i + 1), din, spec, params, rng)?);
        din = spec.units;
    }
    Ok(out)
}

fn distributions(t: &Tensor) -> Vec<PredictedDistribution> {
    t.data()
        .chunks(2)
        .map(|c| PredictedDistribution { mu: c[0], log_sigma: c[1] })
        .collect()
}

impl Model {
    /// Builds a model with Glorot-uniform kernels, zero biases and unit
    /// batch-norm scales, deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = Vec::new();
        let d = config.embed_dim;
        let rate = config.dropout_rate;

        let soundscape_blocks = conv_stack(
            "f_s",
            config.audio_shape[2],
            &config.audio_filters,
            &config.audio_pools,
            rate,
            &mut params,
            &mut buffers,
            &mut rng,
        )?;
        let masker_blocks = conv_stack(
            "f_m",
            config.masker_channels,
            &config.audio_filters,
            &config.audio_pools,
            rate,
            &mut params,
            &mut buffers,
            &mut rng,
        )?;
        let visual_blocks = conv_stack(
            "f_v",
            config.image_shape[2],
            &config.visual_filters,
            &config.visual_pools,
            rate,
            &mut params,
            &mut buffers,
            &mut rng,
        )?;
        let participant_dense = DenseLayer::new(
            "f_p.dense",
            config.participant_dim,
            DenseSpec { units: d, activation: Activation::Swish },
            &mut params,
            &mut rng,
        )?;
        let channels = match config.fusion {
            Fusion::Early => 5,
            Fusion::Mid | Fusion::Late => 3,
        };
        let augment_conv = DenseLayer::new(
            "f_g.conv",
            channels,
            DenseSpec { units: 1, activation: Activation::Linear },
            &mut params,
            &mut rng,
        )?;
        let augment_dense = DenseLayer::new(
            "f_g.dense",
            d,
            DenseSpec { units: d, activation: Activation::Linear },
            &mut params,
            &mut rng,
        )?;
        let output_block =
            dense_chain("f_o", config.output_input_dim(), config.output_hidden, &mut params, &mut rng)?;
        let adapter = match config.fusion {
            Fusion::Late => Some(dense_chain(
                "a_o",
                2 + 2 * d,
                config.adapter_hidden(),
                &mut params,
                &mut rng,
            )?),
            Fusion::Early | Fusion::Mid => None,
        };
        Ok(Self {
            config,
            params,
            buffers,
            soundscape_blocks,
            masker_blocks,
            visual_blocks,
            participant_dense,
            augment_conv,
            augment_dense,
            output_block,
            adapter,
            metadata: CheckpointMetadata::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BatchNormStats] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.buffers
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, ctx: &ForwardContext<'_>) {
        for (idx, stats) in &ctx.bn_updates {
            self.buffers[*idx].update(stats, BATCH_NORM_MOMENTUM);
        }
    }

    fn check_inputs(&self, x: &BatchInputs) -> Result<()> {
        let b = x.len();
        let c = &self.config;
        let [t, f, cs] = c.audio_shape;
        let [h, w, cv] = c.image_shape;
        let expect = [
            ("soundscape", &x.soundscape, vec![b, t, f, cs]),
            ("masker", &x.masker, vec![b, t, f, c.masker_channels]),
            ("participant", &x.participant, vec![b, c.participant_dim]),
            ("image", &x.image, vec![b, h, w, cv]),
        ];
        for (name, tensor, shape) in expect {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "{name} has shape {:?}, model expects {shape:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }

    fn audio_embeddings(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        blocks: &[ConvBlock],
        x: Tensor,
        ctx: &mut ForwardContext<'_>,
    ) -> Result<NodeId> {
        let b = x.shape()[0];
        let mut node = g.input(x)?;
        for block in blocks {
            node = block.forward(g, params, &self.buffers, node, ctx)?;
        }
        let (n, d) = self.config.audio_embedding_shape()?;
        g.reshape(node, &[b, n, d])
    }

    fn visual_embeddings(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Tensor,
        ctx: &mut ForwardContext<'_>,
    ) -> Result<NodeId> {
        let b = x.shape()[0];
        let mut node = g.input(x)?;
        for block in &self.visual_blocks {
            node = block.forward(g, params, &self.buffers, node, ctx)?;
        }
        g.reshape(node, &[b, self.config.embed_dim])
    }

    /// Channel-wise stack of `[B,N,D]` planes followed by the compressing
    /// convolution and the dense layer.
    fn augment(&self, g: &mut Graph, params: &ParamSet, planes: &[NodeId]) -> Result<NodeId> {
        let shape = g.value(planes[0]).shape().to_vec();
        let mut cols = Vec::with_capacity(planes.len());
        for &p in planes {
            let mut s = shape.clone();
            s.push(1);
            cols.push(g.reshape(p, &s)?);
        }
        let stacked = g.concat(&cols)?;
        let compressed = self.augment_conv.forward(g, params, stacked)?;
        let compressed = g.reshape(compressed, &shape)?;
        self.augment_dense.forward(g, params, compressed)
    }

    /// Records a full forward pass on `g` using `params` (which must have
    /// this model's layout, e.g. a perturbed copy of [`Model::params`]).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: &BatchInputs,
        ctx: &mut ForwardContext<'_>,
    ) -> Result<ForwardNodes> {
        self.check_inputs(x)?;
        let c = &self.config;
        let b = x.len();
        let d = c.embed_dim;
        let (n, _) = c.audio_embedding_shape()?;

        let k = self.audio_embeddings(g, params, &self.soundscape_blocks, x.soundscape.clone(), ctx)?;
        let q = self.audio_embeddings(g, params, &self.masker_blocks, x.masker.clone(), ctx)?;
        let h = if c.include_participant {
            let p = g.input(x.participant.clone())?;
            self.participant_dense.forward(g, params, p)?
        } else {
            g.input(Tensor::zeros(&[b, d]))?
        };
        let r = if c.include_visual {
            self.visual_embeddings(g, params, x.image.clone(), ctx)?
        } else {
            g.input(Tensor::zeros(&[b, d]))?
        };

        let gamma = g.input(Tensor::new(vec![b, 1, 1], x.gamma.clone())?)?;
        let gamma_plane = g.expand(gamma, &[b, n, d])?;
        let v = match c.fusion {
            Fusion::Early => {
                let h3 = g.reshape(h, &[b, 1, d])?;
                let h_plane = g.expand(h3, &[b, n, d])?;
                let r3 = g.reshape(r, &[b, 1, d])?;
                let r_plane = g.expand(r3, &[b, n, d])?;
                self.augment(g, params, &[k, q, gamma_plane, h_plane, r_plane])?
            }
            Fusion::Mid | Fusion::Late => self.augment(g, params, &[k, q, gamma_plane])?,
        };
        let z = g.attention(q, k, v)?;

        let head_in = match c.fusion {
            Fusion::Mid => g.concat(&[z, h, r])?,
            Fusion::Early | Fusion::Late => z,
        };
        let mut trunk = head_in;
        for layer in &self.output_block {
            trunk = layer.forward(g, params, trunk)?;
        }
        let adapted = match &self.adapter {
            Some(layers) => {
                let mut a = g.concat(&[trunk, h, r])?;
                for layer in layers {
                    a = layer.forward(g, params, a)?;
                }
                Some(a)
            }
            None => None,
        };
        Ok(ForwardNodes { k, q, h, r, v, z, trunk, adapted })
    }

    /// Forward pass plus the probabilistic loss on the reported output.
    pub fn objective(
        &self,
        params: &ParamSet,
        x: &BatchInputs,
        labels: &[f64],
        ctx: &mut ForwardContext<'_>,
    ) -> Result<(Graph, NodeId)> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, params, x, ctx)?;
        let j = g.gaussian_nll(nodes.output(), labels)?;
        Ok((g, j))
    }

    /// Eval-mode predictions for a batch.
    pub fn predict_batch(&self, x: &BatchInputs) -> Result<Vec<ModelPrediction>> {
        let mut g = Graph::new();
        let mut ctx = ForwardContext::eval();
        let nodes = self.forward_graph(&mut g, &self.params, x, &mut ctx)?;
        let trunk = distributions(g.value(nodes.trunk));
        let adapted = nodes.adapted.map(|a| distributions(g.value(a)));
        Ok(trunk
            .into_iter()
            .enumerate()
            .map(|(i, t)| ModelPrediction {
                trunk: t,
                adapted: adapted.as_ref().map(|a| a[i]),
            })
            .collect())
    }

    /// Eval-mode prediction for one sample with the given gain.
    pub fn forward(&self, sample: &Sample, gamma: f64) -> Result<ModelPrediction> {
        let x = BatchInputs::from_samples(&[sample], &[gamma])?;
        Ok(self.predict_batch(&x)?[0])
    }

    /// Eval-mode embeddings `(k, q, h, r)` for one sample.
    pub fn embeddings(&self, sample: &Sample) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let x = BatchInputs::from_samples(&[sample], &[sample.gamma])?;
        let mut g = Graph::new();
        let mut ctx = ForwardContext::eval();
        let nodes = self.forward_graph(&mut g, &self.params, &x, &mut ctx)?;
        let strip = |t: &Tensor| t.reshape(&t.shape()[1..]);
        Ok((
            strip(g.value(nodes.k))?,
            strip(g.value(nodes.q))?,
            strip(g.value(nodes.h))?,
            strip(g.value(nodes.r))?,
        ))
    }

    /// Runs only the audio extractor `f_s` (or `f_m` when `masker`) on one
    /// `[T,F,C]` spectrogram in eval mode, giving `[N,D]`.
    pub fn extract_audio_embeddings(&self, x: &Tensor, masker: bool) -> Result<Tensor> {
        let blocks = if masker { &self.masker_blocks } else { &self.soundscape_blocks };
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let mut g = Graph::new();
        let mut ctx = ForwardContext::eval();
        let node = self.audio_embeddings(&mut g, &self.params, blocks, x.reshape(&shape)?, &mut ctx)?;
        let v = g.value(node);
        v.reshape(&v.shape()[1..])
    }

    /// Runs `f_v` on one `[H,W,C_v]` image in eval mode, giving `[D]`.
    pub fn extract_visual_embeddings(&self, image: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::new();
        let mut ctx = ForwardContext::eval();
        let node = self.visual_embeddings(&mut g, &self.params, image.reshape(&shape)?, &mut ctx)?;
        g.value(node).reshape(&[self.config.embed_dim])
    }

    /// Runs `f_p` on one `[M]` participant vector, giving `[D]`.
    pub fn extract_participant_embeddings(&self, p: &Tensor) -> Result<Tensor> {
        if p.shape() != [self.config.participant_dim] {
            return Err(Error::dim(format!(
                "participant vector has shape {:?}, expected [{}]",
                p.shape(),
                self.config.participant_dim
            )));
        }
        let mut g = Graph::new();
        let x = g.input(p.reshape(&[1, p.len()])?)?;
        let h = self.participant_dense.forward(&mut g, &self.params, x)?;
        g.value(h).reshape(&[self.config.embed_dim])
    }

    /// Feature augmentation on one sample's `[N,D]` embeddings. `h` and `r`
    /// are used only under early fusion.
    pub fn feature_augment(
        &self,
        k: &Tensor,
        q: &Tensor,
        gamma: f64,
        h: Option<&Tensor>,
        r: Option<&Tensor>,
    ) -> Result<Tensor> {
        if k.ndim() != 2 || k.shape() != q.shape() {
            return Err(Error::dim(format!(
                "feature augmentation expects matching [N,D], got {:?} and {:?}",
                k.shape(),
                q.shape()
            )));
        }
        let (n, d) = (k.shape()[0], k.shape()[1]);
        let mut g = Graph::new();
        let kn = g.input(k.reshape(&[1, n, d])?)?;
        let qn = g.input(q.reshape(&[1, n, d])?)?;
        let gn = g.input(Tensor::new(vec![1, 1, 1], vec![gamma])?)?;
        let gp = g.expand(gn, &[1, n, d])?;
        let mut planes = vec![kn, qn, gp];
        if self.config.fusion == Fusion::Early {
            for e in [h, r] {
                let e = e.cloned().unwrap_or_else(|| Tensor::zeros(&[d]));
                if e.shape() != [d] {
                    return Err(Error::dim(format!("embedding shape {:?}, expected [{d}]", e.shape())));
                }
                let en = g.input(e.reshape(&[1, 1, d])?)?;
                planes.push(g.expand(en, &[1, n, d])?);
            }
        }
        let v = self.augment(&mut g, &self.params, &planes)?;
        g.value(v).reshape(&[n, d])
    }

    /// Applies the output block to a single input vector.
    pub fn output_block(&self, z_in: &Tensor) -> Result<PredictedDistribution> {
        if z_in.shape() != [self.config.output_input_dim()] {
            return Err(Error::dim(format!(
                "output block input has shape {:?}, {} fusion expects [{}]",
                z_in.shape(),
                self.config.fusion,
                self.config.output_input_dim()
            )));
        }
        let mut g = Graph::new();
        let mut x = g.input(z_in.reshape(&[1, z_in.len()])?)?;
        for layer in &self.output_block {
            x = layer.forward(&mut g, &self.params, x)?;
        }
        Ok(distributions(g.value(x))[0])
    }

    /// Applies the late-fusion adapter to `(μ̂, log σ̂, h, r)`.
    pub fn output_adapter(
        &self,
        trunk: PredictedDistribution,
        h: &Tensor,
        r: &Tensor,
    ) -> Result<PredictedDistribution> {
        let layers = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::Config("output adapter exists only under late fusion".into()))?;
        let d = self.config.embed_dim;
        if h.shape() != [d] || r.shape() != [d] {
            return Err(Error::dim(format!(
                "adapter expects [{d}] embeddings, got {:?} and {:?}",
                h.shape(),
                r.shape()
            )));
        }
        let mut data = vec![trunk.mu, trunk.log_sigma];
        data.extend_from_slice(h.data());
        data.extend_from_slice(r.data());
        let mut g = Graph::new();
        let mut x = g.input(Tensor::new(vec![1, 2 + 2 * d], data)?)?;
        for layer in layers {
            x = layer.forward(&mut g, &self.params, x)?;
        }
        Ok(distributions(g.value(x))[0])
    }

    /// Overwrites a parameter by name; shapes must agree.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name} has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
