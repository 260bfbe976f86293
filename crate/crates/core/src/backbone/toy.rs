use serde::{Deserialize, Serialize};

use super::{strided_taps, HeadKind, LayerTappedPolicy, Observation};
use crate::error::{ensure_len, Error, Result};
use crate::flowcore::ActionChunk;
use crate::numkernel::{Activation, DenseCache, DenseNet, Parameterized, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyPolicyConfig {
    pub layers: usize,
    pub width: usize,
    pub embed_hidden: usize,
    pub block_hidden: usize,
    pub head_hidden: usize,
    pub fm_width: usize,
    pub fm_hidden: usize,
    /// Sinusoidal τ features; must be even.
    pub time_features: usize,
    pub visual_dim: usize,
    pub state_dim: usize,
    pub instructions: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub activation: Activation,
    pub heads: Vec<HeadKind>,
    pub tap_stride: usize,
    /// Also allow exiting straight after the input embedder (layer 0).
    pub include_embedding_tap: bool,
    /// Output scale of freshly initialised residual blocks.
    pub block_gain: f64,
}

impl Default for ToyPolicyConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 32,
            embed_hidden: 32,
            block_hidden: 32,
            head_hidden: 64,
            fm_width: 32,
            fm_hidden: 32,
            time_features: 8,
            visual_dim: 4,
            state_dim: 3,
            instructions: 2,
            horizon: 8,
            action_dim: 2,
            activation: Activation::Tanh,
            heads: vec![HeadKind::Mlp],
            tap_stride: 2,
            include_embedding_tap: false,
            block_gain: 0.5,
        }
    }
}

impl ToyPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("toy policy: {msg}")));
        if self.layers < 2 {
            return bad("needs at least 2 layers");
        }
        if self.width == 0
            || self.fm_width == 0
            || self.horizon == 0
            || self.action_dim == 0
            || self.instructions == 0
        {
            return bad("widths, horizon, action_dim and instructions must be positive");
        }
        if self.embed_hidden == 0
            || self.block_hidden == 0
            || self.head_hidden == 0
            || self.fm_hidden == 0
        {
            return bad("hidden widths must be positive");
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return bad("time_features must be a positive even number");
        }
        if self.heads.is_empty() {
            return bad("at least one head is required");
        }
        if self.tap_stride == 0 {
            return bad("tap_stride must be positive");
        }
        if !self.block_gain.is_finite() {
            return bad("block_gain must be finite");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_dim + self.state_dim + self.instructions
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn taps(&self) -> Vec<usize> {
        let mut taps = strided_taps(self.layers, self.tap_stride);
        if self.include_embedding_tap {
            taps.insert(0, 0);
        }
        taps
    }
}

/// Input embedder followed by `L` residual blocks `h_j = h_{j-1} + block_j(h_{j-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    embed: DenseNet,
    blocks: Vec<DenseNet>,
}

pub(crate) struct BackboneCache {
    embed: DenseCache,
    blocks: Vec<DenseCache>,
    /// `h_0 ..= h_i`.
    pub(crate) hidden: Vec<Vec<f64>>,
}

impl ToyBackbone {
    pub fn new(config: &ToyPolicyConfig, rng: &mut RngStream) -> Result<Self> {
        let embed = DenseNet::random(
            &[config.feature_dim(), config.embed_hidden, config.width],
            config.activation,
            1.0,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut b = DenseNet::random(
                &[config.width, config.block_hidden, config.width],
                config.activation,
                1.0,
                rng,
            )?;
            b.scale_output_layer(config.block_gain);
            blocks.push(b);
        }
        Ok(Self { embed, blocks })
    }

    pub fn from_parts(embed: DenseNet, blocks: Vec<DenseNet>) -> Result<Self> {
        let w = embed.output_width();
        if blocks.len() < 2 {
            return Err(Error::InvalidArgument(
                "toy backbone needs at least 2 layers".into(),
            ));
        }
        for b in &blocks {
            ensure_len("residual block input", w, b.input_width())?;
            ensure_len("residual block output", w, b.output_width())?;
        }
        Ok(Self { embed, blocks })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.embed.output_width()
    }

    pub fn embedder(&self) -> &DenseNet {
        &self.embed
    }

    pub fn blocks(&self) -> &[DenseNet] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DenseNet] {
        &mut self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.zeros_like(),
            blocks: self.blocks.iter().map(DenseNet::zeros_like).collect(),
        }
    }

    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.embed.apply(features)
    }

    /// Applies residual block `layer` (1-based) to `h`.
    pub fn step(&self, layer: usize, h: &[f64]) -> Result<Vec<f64>> {
        let block = self.block(layer)?;
        let delta = block.apply(h)?;
        Ok(h.iter().zip(&delta).map(|(a, b)| a + b).collect())
    }

    fn block(&self, layer: usize) -> Result<&DenseNet> {
        if layer == 0 || layer > self.blocks.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.blocks.len(),
            });
        }
        Ok(&self.blocks[layer - 1])
    }

    /// Hidden states `h_1 ..= h_i`.
    pub fn forward_to_layer(&self, features: &[f64], i: usize) -> Result<Vec<Vec<f64>>> {
        self.block(i)?;
        let mut h = self.embed(features)?;
        let mut out = Vec::with_capacity(i);
        for layer in 1..=i {
            h = self.step(layer, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Upper bound on `‖h_i‖₂` for inputs with `‖features‖₂ ≤ input_norm`.
    pub fn hidden_norm_bound(&self, input_norm: f64, i: usize) -> f64 {
        let mut bound = self.embed.output_norm_bound(input_norm);
        for block in &self.blocks[..i.min(self.blocks.len())] {
            bound += block.output_norm_bound(bound);
        }
        bound
    }

    pub(crate) fn forward_cached(&self, features: &[f64], i: usize) -> Result<BackboneCache> {
        if i > self.blocks.len() {
            return Err(Error::LayerOutOfRange {
                layer: i,
                max: self.blocks.len(),
            });
        }
        let (h0, embed) = self.embed.forward(features)?;
        let mut hidden = Vec::with_capacity(i + 1);
        let mut caches = Vec::with_capacity(i);
        hidden.push(h0);
        for block in &self.blocks[..i] {
            let prev = hidden.last().unwrap();
            let (delta, cache) = block.forward(prev)?;
            let next = prev.iter().zip(&delta).map(|(a, b)| a + b).collect();
            hidden.push(next);
            caches.push(cache);
        }
        Ok(BackboneCache {
            embed,
            blocks: caches,
            hidden,
        })
    }

    /// `dh[j]` is the loss gradient flowing directly into `h_j`.
    pub(crate) fn backward(
        &self,
        cache: &BackboneCache,
        dh: &[Vec<f64>],
        grads: &mut ToyBackbone,
    ) -> Result<()> {
        ensure_len("backbone hidden gradients", cache.hidden.len(), dh.len())?;
        let depth = cache.blocks.len();
        let mut g = dh[depth].clone();
        for j in (0..depth).rev() {
            let through =
                self.blocks[j].backward_into(&cache.blocks[j], &g, &mut grads.blocks[j])?;
            for ((gi, ti), di) in g.iter_mut().zip(&through).zip(&dh[j]) {
                *gi += ti + di;
            }
        }
        self.embed
            .backward_into(&cache.embed, &g, &mut grads.embed)?;
        Ok(())
    }
}

impl Parameterized for ToyBackbone {
    fn for_each_block(&self, f: &mut dyn FnMut(&[f64])) {
        self.embed.for_each_block(f);
        for b in &self.blocks {
            b.for_each_block(f);
        }
    }

    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.embed.for_each_block_mut(f);
        for b in &mut self.blocks {
            b.for_each_block_mut(f);
        }
    }
}

/// Regression head reading the tapped hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub net: DenseNet,
}

impl MlpHead {
    pub fn predict(&self, h: &[f64], horizon: usize, dim: usize) -> Result<ActionChunk> {
        ensure_len("mlp head output", horizon * dim, self.net.output_width())?;
        ActionChunk::new(horizon, dim, self.net.apply(h)?)
    }
}

/// Flow-matching head with one residual block per backbone layer.
///
/// Block `j` reads `[z_{j-1}, h_i, x, temb(τ)]` and updates `z_j = z_{j-1} + block_j(...)`
/// from `z_0 = 0`; the velocity is `out(z_m)` with `m = min(i, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FmHead {
    blocks: Vec<DenseNet>,
    out: DenseNet,
    width: usize,
    cond_width: usize,
    chunk_len: usize,
    time_features: usize,
}

pub(crate) struct FmCache {
    blocks: Vec<DenseCache>,
    out: DenseCache,
}

/// `[sin(πτ), sin(2πτ), …, cos(πτ), cos(2πτ), …]` with `n / 2` frequencies.
pub fn time_embedding(tau: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let w = std::f64::consts::PI * (1u64 << k) as f64 * tau;
        out[k] = libm::sin(w);
        out[half + k] = libm::cos(w);
    }
    out
}

impl FmHead {
    pub fn new(config: &ToyPolicyConfig, rng: &mut RngStream) -> Result<Self> {
        let input = config.fm_width + config.width + config.chunk_len() + config.time_features;
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let mut b = DenseNet::random(
                &[input, config.fm_hidden, config.fm_width],
                config.activation,
                1.0,
                rng,
            )?;
            b.scale_output_layer(config.block_gain);
            blocks.push(b);
        }
        let out = DenseNet::random(
            &[config.fm_width, config.chunk_len()],
            config.activation,
            1.0,
            rng,
        )?;
        Ok(Self {
            blocks,
            out,
            width: config.fm_width,
            cond_width: config.width,
            chunk_len: config.chunk_len(),
            time_features: config.time_features,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks_executed(&self, depth: usize) -> usize {
        depth.min(self.blocks.len())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(DenseNet::zeros_like).collect(),
            out: self.out.zeros_like(),
            ..self.clone()
        }
    }

    fn block_input(&self, z: &[f64], h: &[f64], x: &[f64], tau: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(z.len() + h.len() + x.len() + self.time_features);
        input.extend_from_slice(z);
        input.extend_from_slice(h);
        input.extend_from_slice(x);
        input.extend(time_embedding(tau, self.time_features));
        input
    }

    fn check_inputs(&self, h: &[f64], x: &[f64]) -> Result<()> {
        ensure_len("fm head conditioning", self.cond_width, h.len())?;
        ensure_len("fm head chunk", self.chunk_len, x.len())
    }

    /// Velocity at depth `depth` (the tapped backbone layer).
    pub fn velocity(&self, h: &[f64], x: &[f64], tau: f64, depth: usize) -> Result<Vec<f64>> {
        self.check_inputs(h, x)?;
        let mut z = vec![0.0; self.width];
        for block in &self.blocks[..self.blocks_executed(depth)] {
            let delta = block.apply(&self.block_input(&z, h, x, tau))?;
            z.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
        }
        self.out.apply(&z)
    }

    pub(crate) fn forward(
        &self,
        h: &[f64],
        x: &[f64],
        tau: f64,
        depth: usize,
    ) -> Result<(Vec<f64>, FmCache)> {
        self.check_inputs(h, x)?;
        let mut z = vec![0.0; self.width];
        let mut caches = Vec::with_capacity(self.blocks_executed(depth));
        for block in &self.blocks[..self.blocks_executed(depth)] {
            let (delta, cache) = block.forward(&self.block_input(&z, h, x, tau))?;
            z.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            caches.push(cache);
        }
        let (v, out) = self.out.forward(&z)?;
        Ok((
            v,
            FmCache {
                blocks: caches,
                out,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `h`.
    pub(crate) fn backward(
        &self,
        cache: &FmCache,
        dv: &[f64],
        grads: &mut FmHead,
    ) -> Result<Vec<f64>> {
        let mut dz = self.out.backward_into(&cache.out, dv, &mut grads.out)?;
        let mut dh = vec![0.0; self.cond_width];
        for j in (0..cache.blocks.len()).rev() {
            let din = self.blocks[j].backward_into(&cache.blocks[j], &dz, &mut grads.blocks[j])?;
            dz.iter_mut()
                .zip(&din[..self.width])
                .for_each(|(a, b)| *a += b);
            dh.iter_mut()
                .zip(&din[self.width..self.width + self.cond_width])
                .for_each(|(a, b)| *a += b);
        }
        Ok(dh)
    }

    #[cfg(test)]
    pub(crate) fn blocks_run(cache: &FmCache) -> usize {
        cache.blocks.len()
    }
}

impl Parameterized for FmHead {
    fn for_each_block(&self, f: &mut dyn FnMut(&[f64])) {
        for b in &self.blocks {
            b.for_each_block(f);
        }
        self.out.for_each_block(f);
    }

    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for b in &mut self.blocks {
            b.for_each_block_mut(f);
        }
        self.out.for_each_block_mut(f);
    }
}

/// Head selector for code that works with either head.
#[derive(Debug, Clone, Copy)]
pub enum ActionHead<'a> {
    Mlp(&'a MlpHead),
    Fm(&'a FmHead),
}

/// Trainable multi-exit policy: a [`ToyBackbone`] plus one shared head per head kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    config: ToyPolicyConfig,
    taps: Vec<usize>,
    pub backbone: ToyBackbone,
    pub mlp: Option<MlpHead>,
    pub fm: Option<FmHead>,
}

#[derive(Debug, Clone)]
pub struct ToyCursor {
    layer: usize,
    hidden: Vec<f64>,
}

impl ToyCursor {
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

impl ToyPolicy {
    /// Randomly initialised policy; the same config and seed give the same parameters.
    pub fn new(config: ToyPolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let backbone = ToyBackbone::new(&config, &mut root.fork(0))?;
        let mlp = if config.heads.contains(&HeadKind::Mlp) {
            let widths = [config.width, config.head_hidden, config.chunk_len()];
            Some(MlpHead {
                net: DenseNet::random(&widths, config.activation, 1.0, &mut root.fork(1))?,
            })
        } else {
            None
        };
        let fm = if config.heads.contains(&HeadKind::Fm) {
            Some(FmHead::new(&config, &mut root.fork(2))?)
        } else {
            None
        };
        Ok(Self {
            taps: config.taps(),
            config,
            backbone,
            mlp,
            fm,
        })
    }

    pub fn config(&self) -> &ToyPolicyConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            taps: self.taps.clone(),
            backbone: self.backbone.zeros_like(),
            mlp: self.mlp.as_ref().map(|m| MlpHead {
                net: m.net.zeros_like(),
            }),
            fm: self.fm.as_ref().map(FmHead::zeros_like),
        }
    }

    pub fn head(&self, kind: HeadKind) -> Result<ActionHead<'_>> {
        match kind {
            HeadKind::Mlp => self.mlp.as_ref().map(ActionHead::Mlp),
            HeadKind::Fm => self.fm.as_ref().map(ActionHead::Fm),
        }
        .ok_or(Error::UnsupportedHead(kind.name()))
    }

    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>> {
        ensure_len(
            "observation visual features",
            self.config.visual_dim,
            obs.visual.len(),
        )?;
        ensure_len("observation state", self.config.state_dim, obs.state.len())?;
        let f = obs.features(self.config.instructions)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "observation".into(),
            });
        }
        Ok(f)
    }

    /// Hidden states `h_1 ..= h_i` for `obs`.
    pub fn forward_to_layer(&self, obs: &Observation, i: usize) -> Result<Vec<Vec<f64>>> {
        self.backbone.forward_to_layer(&self.features(obs)?, i)
    }

    pub fn mlp_predict(&self, h: &[f64]) -> Result<ActionChunk> {
        let head = self.mlp.as_ref().ok_or(Error::UnsupportedHead("mlp"))?;
        head.predict(h, self.config.horizon, self.config.action_dim)
    }
}

impl Parameterized for ToyPolicy {
    fn for_each_block(&self, f: &mut dyn FnMut(&[f64])) {
        self.backbone.for_each_block(f);
        if let Some(m) = &self.mlp {
            m.net.for_each_block(f);
        }
        if let Some(h) = &self.fm {
            h.for_each_block(f);
        }
    }

    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.backbone.for_each_block_mut(f);
        if let Some(m) = &mut self.mlp {
            m.net.for_each_block_mut(f);
        }
        if let Some(h) = &mut self.fm {
            h.for_each_block_mut(f);
        }
    }
}

impl LayerTappedPolicy for ToyPolicy {
    type Cursor = ToyCursor;

    fn num_layers(&self) -> usize {
        self.config.layers
    }

    fn eligible_taps(&self) -> &[usize] {
        &self.taps
    }

    fn chunk_shape(&self) -> (usize, usize) {
        (self.config.horizon, self.config.action_dim)
    }

    fn supports(&self, head: HeadKind) -> bool {
        self.head(head).is_ok()
    }

    fn begin(&self, obs: &Observation) -> Result<ToyCursor> {
        Ok(ToyCursor {
            layer: 0,
            hidden: self.backbone.embed(&self.features(obs)?)?,
        })
    }

    fn cursor_layer(&self, cursor: &ToyCursor) -> usize {
        cursor.layer
    }

    fn advance(&self, cursor: &mut ToyCursor, layer: usize) -> Result<()> {
        if layer < cursor.layer {
            return Err(Error::CursorRewind {
                current: cursor.layer,
                requested: layer,
            });
        }
        if layer > self.config.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.config.layers,
            });
        }
        for j in cursor.layer + 1..=layer {
            cursor.hidden = self.backbone.step(j, &cursor.hidden)?;
        }
        cursor.layer = layer;
        Ok(())
    }

    fn regress(&self, cursor: &ToyCursor) -> Result<ActionChunk> {
        self.mlp_predict(&cursor.hidden)
    }

    fn velocity(&self, cursor: &ToyCursor, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let head = self.fm.as_ref().ok_or(Error::UnsupportedHead("fm"))?;
        head.velocity(&cursor.hidden, x, tau, cursor.layer)
    }
}
