//! 1-D residual classifier and the convolutional autoencoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm1d, Conv1d, GlobalAvgPool, Layer, Linear, MaxPool1d, Mode, Relu, Upsample1d};
use super::tensor::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DepthPreset {
    Tiny,
    R18,
    R34,
    R101,
}

impl DepthPreset {
    /// Residual blocks per stage.
    pub fn blocks(self) -> [usize; 4] {
        match self {
            DepthPreset::Tiny => [1, 1, 1, 1],
            DepthPreset::R18 => [2, 2, 2, 2],
            DepthPreset::R34 => [3, 4, 6, 3],
            // Basic blocks stand in for bottlenecks; the architecture is
            // representable but not exercised.
            DepthPreset::R101 => [3, 4, 23, 3],
        }
    }

    pub fn widths(self) -> [usize; 4] {
        match self {
            DepthPreset::Tiny => [8, 16, 32, 64],
            _ => [64, 128, 256, 512],
        }
    }

    pub fn stem_width(self) -> usize {
        self.widths()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub preset: DepthPreset,
    pub input_len: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_true() -> bool {
    true
}

fn default_classes() -> usize {
    2
}

impl ArchSpec {
    pub fn new(preset: DepthPreset, input_len: usize) -> Self {
        Self {
            preset,
            input_len,
            batch_norm: true,
            num_classes: 2,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.preset.widths()[3]
    }
}

#[derive(Debug, Clone)]
enum Norm<T> {
    Batch(BatchNorm1d<T>),
    Identity,
}

impl<T: Scalar> Norm<T> {
    fn new(store: &mut ParamStore<T>, name: &str, ch: usize, enabled: bool) -> Self {
        if enabled {
            Norm::Batch(BatchNorm1d::new(store, name, ch))
        } else {
            Norm::Identity
        }
    }

    fn forward(&mut self, store: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Norm::Batch(bn) => bn.forward(store, &x, mode),
            Norm::Identity => Ok(x),
        }
    }

    fn backward(&mut self, store: &mut ParamStore<T>, g: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Norm::Batch(bn) => bn.backward(store, &g),
            Norm::Identity => Ok(g),
        }
    }
}

/// Conv followed by optional batch norm; convs carry a bias only when the
/// norm is absent.
#[derive(Debug, Clone)]
struct ConvNorm<T> {
    conv: Conv1d<T>,
    norm: Norm<T>,
}

impl<T: Scalar> ConvNorm<T> {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bn: bool,
        rng: &mut R,
    ) -> Self {
        let conv = Conv1d::new(
            store,
            &format!("{name}.conv"),
            in_ch,
            out_ch,
            kernel,
            stride,
            kernel / 2,
            !bn,
            rng,
        );
        let norm = Norm::new(store, &format!("{name}.bn"), out_ch, bn);
        Self { conv, norm }
    }

    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(store, x, mode)?;
        self.norm.forward(store, y, mode)
    }

    fn backward(&mut self, store: &mut ParamStore<T>, g: Tensor<T>) -> Result<Tensor<T>> {
        let g = self.norm.backward(store, g)?;
        self.conv.backward(store, &g)
    }
}

/// Basic residual block: two kernel-3 convs plus an identity or 1x1 projection shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    first: ConvNorm<T>,
    act1: Relu,
    second: ConvNorm<T>,
    shortcut: Option<ConvNorm<T>>,
    act_out: Relu,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bn: bool,
        rng: &mut R,
    ) -> Self {
        let first = ConvNorm::new(store, &format!("{name}.a"), in_ch, out_ch, 3, stride, bn, rng);
        let second = ConvNorm::new(store, &format!("{name}.b"), out_ch, out_ch, 3, 1, bn, rng);
        let shortcut = (stride != 1 || in_ch != out_ch)
            .then(|| ConvNorm::new(store, &format!("{name}.proj"), in_ch, out_ch, 1, stride, bn, rng));
        Self {
            first,
            act1: Relu::new(),
            second,
            shortcut,
            act_out: Relu::new(),
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward(&mut self, store: &mut ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.first.forward(store, x, mode)?;
        let h = self.act1.forward(store, &h, mode)?;
        let mut h = self.second.forward(store, &h, mode)?;
        match &mut self.shortcut {
            Some(proj) => h.add_assign(&proj.forward(store, x, mode)?)?,
            None => h.add_assign(x)?,
        }
        self.act_out.forward(store, &h, mode)
    }

    fn backward(&mut self, store: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act_out.backward(store, grad)?;
        let gm = self.second.backward(store, g.clone())?;
        let gm = self.act1.backward(store, &gm)?;
        let mut dx = self.first.backward(store, gm)?;
        match &mut self.shortcut {
            Some(proj) => dx.add_assign(&proj.backward(store, g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// (B, num_classes)
    pub logits: Tensor<T>,
    /// (B, latent_dim): pooled output of the last residual stage.
    pub latents: Tensor<T>,
}

/// Residual classifier: stem conv k7/s2, max pool, four stages, global
/// average pool (the latent map), and a linear head.
#[derive(Debug, Clone)]
pub struct ClassifierModel<T: Scalar = f32> {
    spec: ArchSpec,
    pub store: ParamStore<T>,
    stem: ConvNorm<T>,
    stem_act: Relu,
    pool: MaxPool1d,
    blocks: Vec<ResidualBlock<T>>,
    gap: GlobalAvgPool,
    head: Linear<T>,
    recorded: bool,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bn = spec.batch_norm;
        let stem_w = spec.preset.stem_width();
        let mut stem = ConvNorm::new(&mut store, "stem", 1, stem_w, 7, 2, bn, &mut rng);
        // Nothing upstream of the stem needs a gradient.
        stem.conv.input_grad = false;
        let mut blocks = Vec::new();
        let mut in_ch = stem_w;
        for (stage, (&n, &w)) in spec.preset.blocks().iter().zip(&spec.preset.widths()).enumerate() {
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(
                    &mut store,
                    &format!("stage{stage}.block{i}"),
                    in_ch,
                    w,
                    stride,
                    bn,
                    &mut rng,
                ));
                in_ch = w;
            }
        }
        let head = Linear::new(&mut store, "head", in_ch, spec.num_classes, &mut rng);
        let model = Self {
            spec,
            store,
            stem,
            stem_act: Relu::new(),
            pool: MaxPool1d::new(3, 2, 1),
            blocks,
            gap: GlobalAvgPool::new(),
            head,
            recorded: false,
        };
        model.check_length()?;
        Ok(model)
    }

    fn check_length(&self) -> Result<()> {
        let mut len = self.stem.conv.out_len(self.spec.input_len);
        len = if len == 0 { 0 } else { self.pool.out_len(len) };
        for _ in 1..4 {
            len = super::layers::conv_out_len(len, 3, 2, 1);
        }
        if len == 0 {
            return Err(Error::InvalidArgument(format!(
                "input length {} is too short for the network",
                self.spec.input_len
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    /// Sets the head weights and bias to zero so every input maps to equal logits.
    pub fn zero_head(&mut self) {
        self.store.param_mut(self.head.weight_id()).value.fill(T::zero());
        self.store.param_mut(self.head.bias_id()).value.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        match *x.shape() {
            [b, 1, l] if b > 0 && l == self.spec.input_len => {}
            _ => {
                return Err(Error::Shape(format!(
                    "model input: expected (B, 1, {}), got {:?}",
                    self.spec.input_len,
                    x.shape()
                )))
            }
        }
        self.recorded = false;
        let store = &mut self.store;
        let mut h = self.stem.forward(store, x, mode)?;
        h = self.stem_act.forward(store, &h, mode)?;
        h = self.pool.forward(store, &h, mode)?;
        for block in &mut self.blocks {
            h = block.forward(store, &h, mode)?;
        }
        let latents = self.gap.forward(store, &h, mode)?;
        let logits = self.head.forward(store, &latents, mode)?;
        self.recorded = mode == Mode::Train;
        Ok(ForwardOutput { logits, latents })
    }

    /// Accumulates parameter gradients given dLoss/dlogits and, optionally,
    /// an extra dLoss/dlatents from losses defined on the latent map.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, grad_latents: Option<&Tensor<T>>) -> Result<()> {
        if !self.recorded {
            return Err(Error::State("backward requires a preceding train-mode forward".into()));
        }
        self.recorded = false;
        let store = &mut self.store;
        let mut g = self.head.backward(store, grad_logits)?;
        if let Some(gl) = grad_latents {
            g.add_assign(gl)?;
        }
        g = self.gap.backward(store, &g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(store, &g)?;
        }
        g = self.pool.backward(store, &g)?;
        g = self.stem_act.backward(store, &g)?;
        self.stem.backward(store, g)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.store.zero_grad();
    }

    /// Eval-mode forward in chunks, concatenating the outputs.
    pub fn predict(&mut self, x: &Tensor<T>, chunk: usize) -> Result<ForwardOutput<T>> {
        let (b, l) = (x.shape()[0], x.shape()[2]);
        let chunk = chunk.max(1);
        let mut logits = Vec::with_capacity(b * self.spec.num_classes);
        let mut latents = Vec::with_capacity(b * self.latent_dim());
        for start in (0..b).step_by(chunk) {
            let end = (start + chunk).min(b);
            let part = Tensor::from_vec(&[end - start, 1, l], x.data()[start * l..end * l].to_vec())?;
            let out = self.forward(&part, Mode::Eval)?;
            logits.extend_from_slice(out.logits.data());
            latents.extend_from_slice(out.latents.data());
        }
        Ok(ForwardOutput {
            logits: Tensor::from_vec(&[b, self.spec.num_classes], logits)?,
            latents: Tensor::from_vec(&[b, self.latent_dim()], latents)?,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        let mut out = ClassifierModel::<U>::new(self.spec.clone(), 0).expect("spec already validated");
        out.store = self.store.cast();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub input_len: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
}

fn default_latent() -> usize {
    64
}

impl AutoencoderSpec {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            latent_dim: default_latent(),
        }
    }
}

const AE_CHANNELS: [usize; 3] = [8, 16, 16];
const AE_KERNELS: [usize; 3] = [7, 5, 5];

/// Strided-conv encoder with a dense bottleneck and a mirrored
/// upsample-conv decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder<T: Scalar = f32> {
    spec: AutoencoderSpec,
    pub store: ParamStore<T>,
    enc: Vec<(Conv1d<T>, Relu)>,
    enc_fc: Linear<T>,
    dec_fc: Linear<T>,
    dec_fc_act: Relu,
    dec: Vec<(Upsample1d, Conv1d<T>, Option<Relu>)>,
    lens: [usize; 4],
    recorded: bool,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        if spec.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut lens = [spec.input_len, 0, 0, 0];
        let mut enc = Vec::new();
        let mut in_ch = 1;
        for i in 0..3 {
            let k = AE_KERNELS[i];
            let mut conv = Conv1d::new(
                &mut store,
                &format!("enc{i}"),
                in_ch,
                AE_CHANNELS[i],
                k,
                2,
                k / 2,
                true,
                &mut rng,
            );
            conv.input_grad = i > 0;
            lens[i + 1] = conv.out_len(lens[i]);
            if lens[i + 1] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "input length {} is too short for the autoencoder",
                    spec.input_len
                )));
            }
            enc.push((conv, Relu::new()));
            in_ch = AE_CHANNELS[i];
        }
        let flat = AE_CHANNELS[2] * lens[3];
        let enc_fc = Linear::new(&mut store, "enc_fc", flat, spec.latent_dim, &mut rng);
        let dec_fc = Linear::new(&mut store, "dec_fc", spec.latent_dim, flat, &mut rng);
        let mut dec = Vec::new();
        for i in (0..3).rev() {
            let out_ch = if i == 0 { 1 } else { AE_CHANNELS[i - 1] };
            let k = AE_KERNELS[i];
            let conv = Conv1d::new(
                &mut store,
                &format!("dec{i}"),
                AE_CHANNELS[i],
                out_ch,
                k,
                1,
                k / 2,
                true,
                &mut rng,
            );
            dec.push((Upsample1d::new(lens[i]), conv, (i > 0).then(Relu::new)));
        }
        Ok(Self {
            spec,
            store,
            enc,
            enc_fc,
            dec_fc,
            dec_fc_act: Relu::new(),
            dec,
            lens,
            recorded: false,
        })
    }

    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match *x.shape() {
            [b, 1, l] if b > 0 && l == self.spec.input_len => Ok(b),
            _ => Err(Error::Shape(format!(
                "autoencoder input: expected (B, 1, {}), got {:?}",
                self.spec.input_len,
                x.shape()
            ))),
        }
    }

    pub fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let b = self.check_input(x)?;
        let store = &mut self.store;
        let mut h = x.clone();
        for (conv, act) in &mut self.enc {
            h = conv.forward(store, &h, mode)?;
            h = act.forward(store, &h, mode)?;
        }
        let flat = h.reshape(&[b, AE_CHANNELS[2] * self.lens[3]])?;
        self.enc_fc.forward(store, &flat, mode)
    }

    pub fn decode(&mut self, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let b = z.shape()[0];
        let store = &mut self.store;
        let h = self.dec_fc.forward(store, z, mode)?;
        let mut h = self
            .dec_fc_act
            .forward(store, &h, mode)?
            .reshape(&[b, AE_CHANNELS[2], self.lens[3]])?;
        for (up, conv, act) in &mut self.dec {
            h = up.forward(store, &h, mode)?;
            h = conv.forward(store, &h, mode)?;
            if let Some(act) = act {
                h = act.forward(store, &h, mode)?;
            }
        }
        Ok(h)
    }

    /// Returns (reconstruction, latent).
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        self.recorded = false;
        let z = self.encode(x, mode)?;
        let recon = self.decode(&z, mode)?;
        self.recorded = mode == Mode::Train;
        Ok((recon, z))
    }

    pub fn backward(&mut self, grad_recon: &Tensor<T>) -> Result<()> {
        if !self.recorded {
            return Err(Error::State("backward requires a preceding train-mode forward".into()));
        }
        self.recorded = false;
        let b = grad_recon.shape()[0];
        let store = &mut self.store;
        let mut g = grad_recon.clone();
        for (up, conv, act) in self.dec.iter_mut().rev() {
            if let Some(act) = act {
                g = act.backward(store, &g)?;
            }
            g = conv.backward(store, &g)?;
            g = up.backward(store, &g)?;
        }
        let g = g.reshape(&[b, AE_CHANNELS[2] * self.lens[3]])?;
        let g = self.dec_fc_act.backward(store, &g)?;
        let g = self.dec_fc.backward(store, &g)?;
        let g = self.enc_fc.backward(store, &g)?;
        let mut g = g.reshape(&[b, AE_CHANNELS[2], self.lens[3]])?;
        for (conv, act) in self.enc.iter_mut().rev() {
            g = act.backward(store, &g)?;
            g = conv.backward(store, &g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.store.zero_grad();
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        let mut out = Autoencoder::<U>::new(self.spec.clone(), 0).expect("spec already validated");
        out.store = self.store.cast();
        out
    }
}
