//! Plain- and residual-encoder U-Nets built from a [`TopologyDescriptor`].
//!
//! Encoder stage `s`:
//! * plain: `blocks_per_stage_encoder[s]` conv units (conv -> instance norm ->
//!   leaky ReLU); the first carries the stage stride.
//! * residual: a strided entry block (conv -> norm -> act -> conv, plus a 1^3
//!   projection skip when channels or stride change) followed by
//!   `blocks_per_stage_encoder[s]` pre-activation residual blocks
//!   (norm -> act -> conv -> norm -> act -> conv, identity skip).
//!
//! Decoder stage `s` upsamples stage `s + 1` with a transposed conv, concatenates
//! the encoder skip and applies conv units. Segmentation heads are 1^3 convs on
//! every decoder output and on the bottleneck (deep supervision), or only on the
//! full-resolution decoder output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::ops::{leaky_relu, leaky_relu_backward, Conv3d, ConvTranspose3d, InstanceNorm, NormCache, LEAKY_SLOPE};
use super::params::{Grads, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::topology::{EncoderType, PlanningError, TopologyDescriptor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Topology(#[from] PlanningError),
    #[error("input has {got} channels, network expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error("expected {expected} gradient maps, got {got}")]
    GradientArity { expected: usize, got: usize },
}

/// `Linear` drops normalisation and uses the identity instead of the leaky
/// rectifier, so the whole network is a linear map. Only used for probes
/// (impulse responses, mirror-equivariance checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkMode {
    Standard,
    Linear,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv3d,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
struct UnitCache<T> {
    input: Tensor<T>,
    norm: Option<(NormCache<T>, Tensor<T>)>,
}

impl ConvUnit {
    fn forward<T: Real>(&self, p: &ParamStore<T>, mode: NetworkMode, x: &Tensor<T>) -> (Tensor<T>, UnitCache<T>) {
        let c = self.conv.forward(p, x);
        match mode {
            NetworkMode::Linear => (
                c,
                UnitCache {
                    input: x.clone(),
                    norm: None,
                },
            ),
            NetworkMode::Standard => {
                let (n, nc) = self.norm.forward(p, &c);
                (
                    leaky_relu(&n),
                    UnitCache {
                        input: x.clone(),
                        norm: Some((nc, n)),
                    },
                )
            }
        }
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &UnitCache<T>,
        dy: &Tensor<T>,
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dc = match &cache.norm {
            None => dy.clone(),
            Some((nc, pre)) => self.norm.backward(p, nc, &leaky_relu_backward(pre, dy), g),
        };
        self.conv.backward(p, &cache.input, &dc, g, need_dx)
    }
}

/// Norm cache and pre-activation input.
type NormActCache<T> = (NormCache<T>, Tensor<T>);

/// norm -> act, as a pre-activation step.
fn pre_activate<T: Real>(
    norm: &InstanceNorm,
    p: &ParamStore<T>,
    mode: NetworkMode,
    x: &Tensor<T>,
) -> (Tensor<T>, Option<NormActCache<T>>) {
    match mode {
        NetworkMode::Linear => (x.clone(), None),
        NetworkMode::Standard => {
            let (n, nc) = norm.forward(p, x);
            (leaky_relu(&n), Some((nc, n)))
        }
    }
}

fn pre_activate_backward<T: Real>(
    norm: &InstanceNorm,
    p: &ParamStore<T>,
    cache: &Option<(NormCache<T>, Tensor<T>)>,
    dy: Tensor<T>,
    g: &mut Grads<T>,
) -> Tensor<T> {
    match cache {
        None => dy,
        Some((nc, pre)) => norm.backward(p, nc, &leaky_relu_backward(pre, &dy), g),
    }
}

#[derive(Debug, Clone)]
struct EntryBlock {
    conv1: Conv3d,
    norm1: InstanceNorm,
    conv2: Conv3d,
    skip: Option<Conv3d>,
}

#[derive(Debug, Clone)]
struct EntryCache<T> {
    input: Tensor<T>,
    norm1: Option<(NormCache<T>, Tensor<T>)>,
    act1: Tensor<T>,
}

impl EntryBlock {
    fn forward<T: Real>(&self, p: &ParamStore<T>, mode: NetworkMode, x: &Tensor<T>) -> (Tensor<T>, EntryCache<T>) {
        let c1 = self.conv1.forward(p, x);
        let (a1, norm1) = pre_activate(&self.norm1, p, mode, &c1);
        let mut y = self.conv2.forward(p, &a1);
        match &self.skip {
            Some(skip) => y.add_assign(&skip.forward(p, x)),
            None => y.add_assign(x),
        }
        (
            y,
            EntryCache {
                input: x.clone(),
                norm1,
                act1: a1,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        c: &EntryCache<T>,
        dy: &Tensor<T>,
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let da1 = self.conv2.backward(p, &c.act1, dy, g, true).expect("dx requested");
        let dc1 = pre_activate_backward(&self.norm1, p, &c.norm1, da1, g);
        let dx_main = self.conv1.backward(p, &c.input, &dc1, g, need_dx);
        let dx_skip = match &self.skip {
            Some(skip) => skip.backward(p, &c.input, dy, g, need_dx),
            None => need_dx.then(|| dy.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    norm1: InstanceNorm,
    conv1: Conv3d,
    norm2: InstanceNorm,
    conv2: Conv3d,
}

#[derive(Debug, Clone)]
struct ResidualCache<T> {
    norm1: Option<(NormCache<T>, Tensor<T>)>,
    act1: Tensor<T>,
    norm2: Option<(NormCache<T>, Tensor<T>)>,
    act2: Tensor<T>,
}

impl ResidualBlock {
    fn forward<T: Real>(&self, p: &ParamStore<T>, mode: NetworkMode, x: &Tensor<T>) -> (Tensor<T>, ResidualCache<T>) {
        let (a1, norm1) = pre_activate(&self.norm1, p, mode, x);
        let c1 = self.conv1.forward(p, &a1);
        let (a2, norm2) = pre_activate(&self.norm2, p, mode, &c1);
        let mut y = self.conv2.forward(p, &a2);
        y.add_assign(x);
        (
            y,
            ResidualCache {
                norm1,
                act1: a1,
                norm2,
                act2: a2,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        c: &ResidualCache<T>,
        dy: &Tensor<T>,
        g: &mut Grads<T>,
    ) -> Tensor<T> {
        let da2 = self.conv2.backward(p, &c.act2, dy, g, true).expect("dx requested");
        let dc1 = pre_activate_backward(&self.norm2, p, &c.norm2, da2, g);
        let da1 = self.conv1.backward(p, &c.act1, &dc1, g, true).expect("dx requested");
        let mut dx = pre_activate_backward(&self.norm1, p, &c.norm1, da1, g);
        dx.add_assign(dy);
        dx
    }
}

#[derive(Debug, Clone)]
enum EncoderStage {
    Plain(Vec<ConvUnit>),
    Residual {
        entry: Box<EntryBlock>,
        blocks: Vec<ResidualBlock>,
    },
}

#[derive(Debug, Clone)]
enum StageCache<T> {
    Plain(Vec<UnitCache<T>>),
    Residual {
        entry: Box<EntryCache<T>>,
        blocks: Vec<ResidualCache<T>>,
    },
}

impl EncoderStage {
    fn forward<T: Real>(&self, p: &ParamStore<T>, mode: NetworkMode, x: &Tensor<T>) -> (Tensor<T>, StageCache<T>) {
        match self {
            EncoderStage::Plain(units) => {
                let mut h = x.clone();
                let mut caches = Vec::with_capacity(units.len());
                for u in units {
                    let (y, c) = u.forward(p, mode, &h);
                    caches.push(c);
                    h = y;
                }
                (h, StageCache::Plain(caches))
            }
            EncoderStage::Residual { entry, blocks } => {
                let (mut h, ec) = entry.forward(p, mode, x);
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (y, c) = b.forward(p, mode, &h);
                    caches.push(c);
                    h = y;
                }
                (
                    h,
                    StageCache::Residual {
                        entry: Box::new(ec),
                        blocks: caches,
                    },
                )
            }
        }
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &StageCache<T>,
        dy: Tensor<T>,
        g: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (EncoderStage::Plain(units), StageCache::Plain(caches)) => {
                let mut d = dy;
                for (i, (u, c)) in units.iter().zip(caches).enumerate().rev() {
                    d = u.backward(p, c, &d, g, i > 0 || need_dx)?;
                }
                Some(d)
            }
            (EncoderStage::Residual { entry, blocks }, StageCache::Residual { entry: ec, blocks: bc }) => {
                let mut d = dy;
                for (b, c) in blocks.iter().zip(bc).rev() {
                    d = b.backward(p, c, &d, g);
                }
                entry.backward(p, ec, &d, g, need_dx)
            }
            _ => unreachable!("stage/cache kind mismatch"),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: ConvTranspose3d,
    units: Vec<ConvUnit>,
    skip_channels: usize,
}

#[derive(Debug, Clone)]
struct DecoderCache<T> {
    below: Tensor<T>,
    units: Vec<UnitCache<T>>,
}

impl DecoderStage {
    fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        mode: NetworkMode,
        below: &Tensor<T>,
        skip: &Tensor<T>,
    ) -> (Tensor<T>, DecoderCache<T>) {
        let mut h = self.up.forward(p, below).concat(skip);
        let mut caches = Vec::with_capacity(self.units.len());
        for u in &self.units {
            let (y, c) = u.forward(p, mode, &h);
            caches.push(c);
            h = y;
        }
        (
            h,
            DecoderCache {
                below: below.clone(),
                units: caches,
            },
        )
    }

    /// Returns `(d_below, d_skip)`.
    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        c: &DecoderCache<T>,
        dy: Tensor<T>,
        g: &mut Grads<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let mut d = dy;
        for (u, uc) in self.units.iter().zip(&c.units).rev() {
            d = u.backward(p, uc, &d, g, true).expect("dx requested");
        }
        let (d_up, d_skip) = d.split(d.channels() - self.skip_channels);
        (self.up.backward(p, &c.below, &d_up, g), d_skip)
    }
}

/// Everything `backward` needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: Vec<StageCache<T>>,
    encoder_out: Vec<Tensor<T>>,
    decoder: Vec<DecoderCache<T>>,
    decoder_out: Vec<Tensor<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Sign of every leaky-ReLU pre-activation, in network order. Empty in
    /// linear mode. Finite-difference checks use it to detect kink crossings.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        let mut push = |n: &Option<(NormCache<T>, Tensor<T>)>| {
            if let Some((_, pre)) = n {
                signs.extend(pre.data().iter().map(|&v| v > T::zero()));
            }
        };
        for s in &self.encoder {
            match s {
                StageCache::Plain(units) => units.iter().for_each(|u| push(&u.norm)),
                StageCache::Residual { entry, blocks } => {
                    push(&entry.norm1);
                    for b in blocks {
                        push(&b.norm1);
                        push(&b.norm2);
                    }
                }
            }
        }
        for d in &self.decoder {
            d.units.iter().for_each(|u| push(&u.norm));
        }
        signs
    }
}

/// A trainable U-Net with its parameters.
#[derive(Debug, Clone)]
pub struct SegmentationNetwork<T = f32> {
    descriptor: TopologyDescriptor,
    seed: u64,
    mode: NetworkMode,
    params: ParamStore<T>,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    heads: Vec<Conv3d>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> Conv3d {
        let kv: usize = kernel.iter().product();
        let weight = self.store.push_kaiming(
            format!("{name}.weight"),
            vec![cout, cin, kernel[2], kernel[1], kernel[0]],
            cin * kv,
            LEAKY_SLOPE,
            &mut self.rng,
        );
        let bias = self.store.push_constant(format!("{name}.bias"), vec![cout], T::zero());
        Conv3d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> InstanceNorm {
        let gamma = self
            .store
            .push_constant(format!("{name}.gamma"), vec![channels], T::one());
        let beta = self
            .store
            .push_constant(format!("{name}.beta"), vec![channels], T::zero());
        InstanceNorm { gamma, beta, channels }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> ConvUnit {
        ConvUnit {
            conv: self.conv(&format!("{name}.conv"), cin, cout, kernel, stride),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize, stride: [usize; 3]) -> ConvTranspose3d {
        let kv: usize = stride.iter().product();
        let weight = self.store.push_kaiming(
            format!("{name}.weight"),
            vec![cin, cout, stride[2], stride[1], stride[0]],
            cout * kv,
            LEAKY_SLOPE,
            &mut self.rng,
        );
        let bias = self.store.push_constant(format!("{name}.bias"), vec![cout], T::zero());
        ConvTranspose3d {
            weight,
            bias,
            cin,
            cout,
            stride,
        }
    }
}

impl<T: Real> SegmentationNetwork<T> {
    /// Build with deterministic He initialisation under `seed`.
    pub fn build(descriptor: &TopologyDescriptor, seed: u64) -> Result<Self, NetworkError> {
        Self::build_with_mode(descriptor, seed, NetworkMode::Standard)
    }

    pub fn build_with_mode(
        descriptor: &TopologyDescriptor,
        seed: u64,
        mode: NetworkMode,
    ) -> Result<Self, NetworkError> {
        descriptor.validate()?;
        let t = descriptor;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let f = &t.features_per_stage;
        let mut encoder = Vec::with_capacity(t.num_stages);
        for s in 0..t.num_stages {
            let cin = t.stage_input_channels(s);
            let k = t.kernel_sizes[s];
            let stride = t.strides_per_stage[s];
            let c = f[s];
            let stage = match t.encoder_type {
                EncoderType::Plain => EncoderStage::Plain(
                    (0..t.blocks_per_stage_encoder[s])
                        .map(|i| {
                            let (ci, st) = if i == 0 { (cin, stride) } else { (c, [1, 1, 1]) };
                            b.unit(&format!("encoder.{s}.unit{i}"), ci, c, k, st)
                        })
                        .collect(),
                ),
                EncoderType::Residual => {
                    let entry = EntryBlock {
                        conv1: b.conv(&format!("encoder.{s}.entry.conv1"), cin, c, k, stride),
                        norm1: b.norm(&format!("encoder.{s}.entry.norm1"), c),
                        conv2: b.conv(&format!("encoder.{s}.entry.conv2"), c, c, k, [1, 1, 1]),
                        skip: (cin != c || stride != [1, 1, 1])
                            .then(|| b.conv(&format!("encoder.{s}.entry.skip"), cin, c, [1, 1, 1], stride)),
                    };
                    let blocks = (0..t.blocks_per_stage_encoder[s])
                        .map(|i| ResidualBlock {
                            norm1: b.norm(&format!("encoder.{s}.block{i}.norm1"), c),
                            conv1: b.conv(&format!("encoder.{s}.block{i}.conv1"), c, c, k, [1, 1, 1]),
                            norm2: b.norm(&format!("encoder.{s}.block{i}.norm2"), c),
                            conv2: b.conv(&format!("encoder.{s}.block{i}.conv2"), c, c, k, [1, 1, 1]),
                        })
                        .collect();
                    EncoderStage::Residual {
                        entry: Box::new(entry),
                        blocks,
                    }
                }
            };
            encoder.push(stage);
        }
        let mut decoder = Vec::with_capacity(t.num_stages - 1);
        for s in 0..t.num_stages - 1 {
            let up = b.up(&format!("decoder.{s}.up"), f[s + 1], f[s], t.strides_per_stage[s + 1]);
            let units = (0..t.convs_per_stage_decoder[s])
                .map(|i| {
                    let ci = if i == 0 { 2 * f[s] } else { f[s] };
                    b.unit(&format!("decoder.{s}.unit{i}"), ci, f[s], t.kernel_sizes[s], [1, 1, 1])
                })
                .collect();
            decoder.push(DecoderStage {
                up,
                units,
                skip_channels: f[s],
            });
        }
        let heads = (0..t.num_outputs())
            .map(|r| b.conv(&format!("head.{r}"), f[r], t.num_classes, [1, 1, 1], [1, 1, 1]))
            .collect();
        Ok(Self {
            descriptor: t.clone(),
            seed,
            mode,
            params: store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn descriptor(&self) -> &TopologyDescriptor {
        &self.descriptor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> NetworkMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> SegmentationNetwork<U> {
        SegmentationNetwork {
            descriptor: self.descriptor.clone(),
            seed: self.seed,
            mode: self.mode,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            heads: self.heads.clone(),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(), NetworkError> {
        if x.channels() != self.descriptor.num_input_channels {
            return Err(NetworkError::Channels {
                expected: self.descriptor.num_input_channels,
                got: x.channels(),
            });
        }
        self.descriptor.check_input(x.dims())?;
        Ok(())
    }

    fn run_encoder(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, Vec<StageCache<T>>) {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.encoder.len());
        let mut caches = Vec::with_capacity(self.encoder.len());
        for (s, stage) in self.encoder.iter().enumerate() {
            let input = if s == 0 { x } else { &outs[s - 1] };
            let (y, c) = stage.forward(&self.params, self.mode, input);
            caches.push(c);
            outs.push(y);
        }
        (outs, caches)
    }

    /// Decoder outputs, finest first.
    fn run_decoder(&self, encoder_out: &[Tensor<T>]) -> (Vec<Tensor<T>>, Vec<DecoderCache<T>>) {
        let n = self.descriptor.num_stages;
        let mut outs: Vec<Option<Tensor<T>>> = vec![None; n - 1];
        let mut caches: Vec<Option<DecoderCache<T>>> = vec![None; n - 1];
        for s in (0..n - 1).rev() {
            let below = if s == n - 2 {
                &encoder_out[n - 1]
            } else {
                outs[s + 1].as_ref().expect("computed")
            };
            let (y, c) = self.decoder[s].forward(&self.params, self.mode, below, &encoder_out[s]);
            outs[s] = Some(y);
            caches[s] = Some(c);
        }
        (
            outs.into_iter().flatten().collect(),
            caches.into_iter().flatten().collect(),
        )
    }

    fn head_input<'a>(&self, r: usize, encoder_out: &'a [Tensor<T>], decoder_out: &'a [Tensor<T>]) -> &'a Tensor<T> {
        if r < decoder_out.len() {
            &decoder_out[r]
        } else {
            &encoder_out[r]
        }
    }

    /// Logits at every supervised resolution, finest first.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, NetworkError> {
        Ok(self.forward_train(x)?.0)
    }

    /// Full-resolution logits only.
    pub fn forward_primary(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check(x)?;
        let (enc, _) = self.run_encoder(x);
        let (dec, _) = self.run_decoder(&enc);
        Ok(self.heads[0].forward(&self.params, &dec[0]))
    }

    /// Bottleneck feature map (encoder output).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check(x)?;
        let (mut enc, _) = self.run_encoder(x);
        Ok(enc.pop().expect("num_stages >= 2"))
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ForwardCache<T>), NetworkError> {
        self.check(x)?;
        let (encoder_out, encoder) = self.run_encoder(x);
        let (decoder_out, decoder) = self.run_decoder(&encoder_out);
        let logits = self
            .heads
            .iter()
            .enumerate()
            .map(|(r, h)| h.forward(&self.params, self.head_input(r, &encoder_out, &decoder_out)))
            .collect();
        Ok((
            logits,
            ForwardCache {
                encoder,
                encoder_out,
                decoder,
                decoder_out,
            },
        ))
    }

    /// Parameter gradients given the loss gradient for every output of [`Self::forward_train`].
    pub fn backward(&self, cache: &ForwardCache<T>, d_logits: &[Tensor<T>]) -> Result<Grads<T>, NetworkError> {
        if d_logits.len() != self.heads.len() {
            return Err(NetworkError::GradientArity {
                expected: self.heads.len(),
                got: d_logits.len(),
            });
        }
        let p = &self.params;
        let n = self.descriptor.num_stages;
        let mut g = p.zeros_like();
        let mut d_dec: Vec<Option<Tensor<T>>> = vec![None; n - 1];
        let mut d_enc: Vec<Option<Tensor<T>>> = vec![None; n];
        let accumulate = |slot: &mut Option<Tensor<T>>, t: Tensor<T>| match slot {
            Some(acc) => acc.add_assign(&t),
            None => *slot = Some(t),
        };
        for (r, (head, d)) in self.heads.iter().zip(d_logits).enumerate() {
            let input = self.head_input(r, &cache.encoder_out, &cache.decoder_out);
            let dx = head.backward(p, input, d, &mut g, true).expect("dx requested");
            if r < n - 1 {
                accumulate(&mut d_dec[r], dx);
            } else {
                accumulate(&mut d_enc[r], dx);
            }
        }
        for s in 0..n - 1 {
            let dy = d_dec[s]
                .take()
                .unwrap_or_else(|| Tensor::zeros(cache.decoder_out[s].channels(), cache.decoder_out[s].dims()));
            let (d_below, d_skip) = self.decoder[s].backward(p, &cache.decoder[s], dy, &mut g);
            accumulate(&mut d_enc[s], d_skip);
            if s == n - 2 {
                accumulate(&mut d_enc[n - 1], d_below);
            } else {
                accumulate(&mut d_dec[s + 1], d_below);
            }
        }
        for s in (0..n).rev() {
            let dy = d_enc[s].take().expect("every encoder stage feeds the decoder");
            if let Some(dx) = self.encoder[s].backward(p, &cache.encoder[s], dy, &mut g, s > 0) {
                if s > 0 {
                    accumulate(&mut d_enc[s - 1], dx);
                }
            }
        }
        Ok(g)
    }
}
