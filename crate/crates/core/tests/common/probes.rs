//! Finite-difference probes over layers, losses and whole models.

#![allow(dead_code)]

use cmc_core::nn::{
    cross_entropy, mse, symmetric_cross_entropy, ArchSpec, Autoencoder, AutoencoderSpec, BatchNorm1d, ClassifierModel,
    Conv1d, ConvLowering, DepthPreset, GlobalAvgPool, Layer, Linear, MaxPool1d, Mode, ParamStore, Relu, ResidualBlock,
    Scalar, Tensor, Upsample1d,
};
use cmc_core::train::{total_loss, LossMode, Normalization, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::gradcheck::Probe;

pub fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn tensor<T: Scalar>(shape: &[usize], values: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, values.iter().map(|&v| T::lit(v)).collect()).unwrap()
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn flatten_params<T: Scalar>(store: &ParamStore<T>) -> Vec<f64> {
    store.params.iter().flat_map(|p| to_f64(&p.value)).collect()
}

fn flatten_grads<T: Scalar>(store: &ParamStore<T>) -> Vec<f64> {
    store.params.iter().flat_map(|p| to_f64(&p.grad)).collect()
}

fn set_params<T: Scalar>(store: &mut ParamStore<T>, vars: &[f64]) {
    let mut i = 0;
    for p in &mut store.params {
        for v in p.value.data_mut() {
            *v = T::lit(vars[i]);
            i += 1;
        }
    }
    assert_eq!(i, vars.len());
}

fn dot<T: Scalar>(weights: &[f64], t: &Tensor<T>) -> f64 {
    assert_eq!(weights.len(), t.len());
    weights.iter().zip(t.data()).map(|(w, v)| w * v.as_f64()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Strided conv with bias, direct lowering.
    Conv,
    /// The same conv lowered to GEMM.
    ConvGemm,
    /// Stride-1 conv without bias, lowered to GEMM.
    ConvNoBias,
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear,
    Upsample,
    ResidualProjection,
    ResidualIdentity,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv,
        LayerKind::ConvGemm,
        LayerKind::ConvNoBias,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Linear,
        LayerKind::Upsample,
        LayerKind::ResidualProjection,
        LayerKind::ResidualIdentity,
    ];

    pub fn has_params(self) -> bool {
        !matches!(
            self,
            LayerKind::Relu | LayerKind::MaxPool | LayerKind::GlobalAvgPool | LayerKind::Upsample
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Input,
}

/// Objective `sum(r * layer(x))` for fixed random weights `r`.
pub struct LayerProbe<T: Scalar> {
    store: ParamStore<T>,
    layer: Box<dyn Layer<T>>,
    x: Tensor<T>,
    r: Vec<f64>,
    wrt: Wrt,
    base: Vec<f64>,
}

impl<T: Scalar> LayerProbe<T> {
    pub fn new(kind: LayerKind, wrt: Wrt, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<T>::new();
        let (layer, in_shape): (Box<dyn Layer<T>>, Vec<usize>) = match kind {
            LayerKind::Conv | LayerKind::ConvGemm => {
                let mut conv = Conv1d::new(&mut store, "c", 3, 4, 5, 2, 2, true, &mut rng);
                conv.lowering = if kind == LayerKind::Conv {
                    ConvLowering::Direct
                } else {
                    ConvLowering::Gemm
                };
                (Box::new(conv), vec![3, 3, 11])
            }
            LayerKind::ConvNoBias => {
                let mut conv = Conv1d::new(&mut store, "c", 2, 3, 3, 1, 1, false, &mut rng);
                conv.lowering = ConvLowering::Gemm;
                (Box::new(conv), vec![2, 2, 9])
            }
            LayerKind::BatchNorm => (Box::new(BatchNorm1d::new(&mut store, "bn", 3)), vec![4, 3, 6]),
            LayerKind::Relu => (Box::new(Relu::new()), vec![2, 3, 7]),
            LayerKind::MaxPool => (Box::new(MaxPool1d::new(3, 2, 1)), vec![2, 3, 9]),
            LayerKind::GlobalAvgPool => (Box::new(GlobalAvgPool::new()), vec![3, 4, 5]),
            LayerKind::Linear => (Box::new(Linear::new(&mut store, "l", 6, 4, &mut rng)), vec![3, 6]),
            LayerKind::Upsample => (Box::new(Upsample1d::new(13)), vec![2, 2, 5]),
            LayerKind::ResidualProjection => (
                Box::new(ResidualBlock::new(&mut store, "b", 2, 4, 2, true, &mut rng)),
                vec![3, 2, 10],
            ),
            LayerKind::ResidualIdentity => (
                Box::new(ResidualBlock::new(&mut store, "b", 3, 3, 1, false, &mut rng)),
                vec![2, 3, 8],
            ),
        };
        // Perturb the default affine init so gamma/beta gradients are generic.
        for p in &mut store.params {
            if p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.ends_with(".bias") {
                let noise = normals(p.value.len(), &mut rng);
                for (v, n) in p.value.data_mut().iter_mut().zip(noise) {
                    *v += T::lit(0.3 * n);
                }
            }
        }
        let n_in: usize = in_shape.iter().product();
        let x = tensor(&in_shape, &normals(n_in, &mut rng));
        let mut probe = Self {
            store,
            layer,
            x,
            r: Vec::new(),
            wrt,
            base: Vec::new(),
        };
        let out_len = probe.forward().len();
        probe.r = normals(out_len, &mut rng);
        probe.base = match wrt {
            Wrt::Params => flatten_params(&probe.store),
            Wrt::Input => to_f64(&probe.x),
        };
        probe
    }

    fn forward(&mut self) -> Tensor<T> {
        self.layer.forward(&mut self.store, &self.x, Mode::Train).unwrap()
    }

    fn set(&mut self, vars: &[f64]) {
        match self.wrt {
            Wrt::Params => set_params(&mut self.store, vars),
            Wrt::Input => self.x = tensor(self.x.shape(), vars),
        }
    }
}

impl<T: Scalar> Probe for LayerProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        self.set(vars);
        let y = self.forward();
        dot(&self.r, &y)
    }

    fn gradient(&mut self) -> Vec<f64> {
        let base = self.base.clone();
        self.set(&base);
        self.store.zero_grad();
        let y = self.forward();
        let g = tensor(y.shape(), &self.r);
        let dx = self.layer.backward(&mut self.store, &g).unwrap();
        match self.wrt {
            Wrt::Params => flatten_grads(&self.store),
            Wrt::Input => to_f64(&dx),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Symmetric,
    Mse,
}

/// A loss as a function of its input tensor.
pub struct LossProbe<T: Scalar> {
    kind: LossKind,
    shape: Vec<usize>,
    labels: Vec<u8>,
    target: Tensor<T>,
    base: Vec<f64>,
}

impl<T: Scalar> LossProbe<T> {
    pub fn new(kind: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 5;
        let shape = vec![b, 2];
        let base: Vec<f64> = normals(2 * b, &mut rng)
            .into_iter()
            .map(|v| T::lit(2.0 * v).as_f64())
            .collect();
        let labels = (0..b).map(|_| rng.gen_range(0..2u8)).collect();
        let target = tensor(&shape, &normals(2 * b, &mut rng));
        Self {
            kind,
            shape,
            labels,
            target,
            base,
        }
    }

    fn eval(&self, vars: &[f64]) -> (f64, Vec<f64>) {
        let z = tensor::<T>(&self.shape, vars);
        let out = match self.kind {
            LossKind::CrossEntropy => cross_entropy(&z, &self.labels).unwrap(),
            LossKind::Symmetric => symmetric_cross_entropy(&z, &self.labels, 0.7, 1.3, -4.0).unwrap(),
            LossKind::Mse => mse(&z, &self.target).unwrap(),
        };
        (out.loss, to_f64(&out.grad))
    }
}

impl<T: Scalar> Probe for LossProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        self.eval(vars).0
    }

    fn gradient(&mut self) -> Vec<f64> {
        self.eval(&self.base).1
    }
}

/// Cross-entropy of a whole classifier plus a random linear functional of its
/// latents, as a function of every parameter.
pub struct ModelProbe<T: Scalar> {
    model: ClassifierModel<T>,
    x: Tensor<T>,
    labels: Vec<u8>,
    r: Vec<f64>,
    base: Vec<f64>,
}

impl<T: Scalar> ModelProbe<T> {
    pub fn new(seed: u64, batch_norm: bool) -> Self {
        let mut spec = ArchSpec::new(DepthPreset::Tiny, 64);
        spec.batch_norm = batch_norm;
        let model = ClassifierModel::<T>::new(spec, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let b = 4;
        let x = tensor(&[b, 1, 64], &normals(b * 64, &mut rng));
        let labels = (0..b).map(|i| (i % 2) as u8).collect();
        let r = normals(b * model.latent_dim(), &mut rng);
        let base = flatten_params(&model.store);
        Self {
            model,
            x,
            labels,
            r,
            base,
        }
    }
}

impl<T: Scalar> Probe for ModelProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        set_params(&mut self.model.store, vars);
        let out = self.model.forward(&self.x, Mode::Train).unwrap();
        cross_entropy(&out.logits, &self.labels).unwrap().loss + dot(&self.r, &out.latents)
    }

    fn gradient(&mut self) -> Vec<f64> {
        let base = self.base.clone();
        set_params(&mut self.model.store, &base);
        self.model.zero_grad();
        let out = self.model.forward(&self.x, Mode::Train).unwrap();
        let ce = cross_entropy(&out.logits, &self.labels).unwrap();
        let gl = tensor(out.latents.shape(), &self.r);
        self.model.backward(&ce.grad, Some(&gl)).unwrap();
        flatten_grads(&self.model.store)
    }
}

/// Reconstruction MSE of the autoencoder as a function of every parameter.
pub struct AutoencoderProbe<T: Scalar> {
    ae: Autoencoder<T>,
    x: Tensor<T>,
    base: Vec<f64>,
}

impl<T: Scalar> AutoencoderProbe<T> {
    pub fn new(seed: u64) -> Self {
        let ae = Autoencoder::<T>::new(
            AutoencoderSpec {
                input_len: 40,
                latent_dim: 6,
            },
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let x = tensor(&[3, 1, 40], &normals(120, &mut rng));
        let base = flatten_params(&ae.store);
        Self { ae, x, base }
    }
}

impl<T: Scalar> Probe for AutoencoderProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        set_params(&mut self.ae.store, vars);
        let (recon, _) = self.ae.forward(&self.x, Mode::Train).unwrap();
        mse(&recon, &self.x).unwrap().loss
    }

    fn gradient(&mut self) -> Vec<f64> {
        let base = self.base.clone();
        set_params(&mut self.ae.store, &base);
        self.ae.zero_grad();
        let (recon, _) = self.ae.forward(&self.x, Mode::Train).unwrap();
        let g = mse(&recon, &self.x).unwrap().grad;
        self.ae.backward(&g).unwrap();
        flatten_grads(&self.ae.store)
    }
}

/// Latent-term settings exercised by the combined-loss probes.
pub const CMC_VARIANTS: [(Normalization, Option<f64>); 3] = [
    (Normalization::RawSum, None),
    (Normalization::PairMean, None),
    (Normalization::PairMean, Some(3.0)),
];

fn cmc_config(variant: usize, lambda1: f64, lambda2: f64) -> TrainConfig {
    let (normalization, margin) = CMC_VARIANTS[variant];
    TrainConfig {
        loss_mode: LossMode::Cmc,
        lambda1,
        lambda2,
        normalization,
        margin,
        ..TrainConfig::default()
    }
}

/// Classification loss plus weighted latent terms, as a function of the
/// logits and the latents together.
pub struct CombinedLossProbe<T: Scalar> {
    cfg: TrainConfig,
    b: usize,
    d: usize,
    labels: Vec<u8>,
    ids: Vec<usize>,
    base: Vec<f64>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> CombinedLossProbe<T> {
    pub fn new(variant: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, d) = (7, 3);
        let cfg = cmc_config(variant, rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
        let labels = (0..b).map(|_| rng.gen_range(0..2u8)).collect();
        let ids = (0..b).map(|_| rng.gen_range(0..3usize)).collect();
        let base = normals(b * 2 + b * d, &mut rng)
            .into_iter()
            .map(|v| T::lit(2.0 * v).as_f64())
            .collect();
        Self {
            cfg,
            b,
            d,
            labels,
            ids,
            base,
            _t: std::marker::PhantomData,
        }
    }

    fn eval(&self, vars: &[f64]) -> (f64, Vec<f64>) {
        let logits = tensor::<T>(&[self.b, 2], &vars[..self.b * 2]);
        let latents = tensor::<T>(&[self.b, self.d], &vars[self.b * 2..]);
        let out = total_loss(&logits, &self.labels, &latents, Some(&self.ids), &self.cfg).unwrap();
        let mut g = to_f64(&out.grad_logits);
        g.extend(to_f64(out.grad_latents.as_ref().unwrap()));
        (out.breakdown.l_total, g)
    }
}

impl<T: Scalar> Probe for CombinedLossProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        self.eval(vars).0
    }

    fn gradient(&mut self) -> Vec<f64> {
        self.eval(&self.base).1
    }
}

/// The combined training loss of a whole classifier, as a function of every
/// parameter.
pub struct CombinedModelProbe<T: Scalar> {
    model: ClassifierModel<T>,
    cfg: TrainConfig,
    x: Tensor<T>,
    labels: Vec<u8>,
    ids: Vec<usize>,
    base: Vec<f64>,
}

impl<T: Scalar> CombinedModelProbe<T> {
    pub fn new(variant: usize, seed: u64) -> Self {
        let model = ClassifierModel::<T>::new(ArchSpec::new(DepthPreset::Tiny, 64), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let b = 6;
        let x = tensor(&[b, 1, 64], &normals(b * 64, &mut rng));
        let labels = (0..b).map(|i| (i % 2) as u8).collect();
        let ids = (0..b).map(|i| i % 3).collect();
        let base = flatten_params(&model.store);
        Self {
            model,
            cfg: cmc_config(variant, 0.5, 0.3),
            x,
            labels,
            ids,
            base,
        }
    }
}

impl<T: Scalar> Probe for CombinedModelProbe<T> {
    fn vars(&self) -> Vec<f64> {
        self.base.clone()
    }

    fn quantize(&self, v: f64) -> f64 {
        T::lit(v).as_f64()
    }

    fn objective(&mut self, vars: &[f64]) -> f64 {
        set_params(&mut self.model.store, vars);
        let out = self.model.forward(&self.x, Mode::Train).unwrap();
        total_loss(&out.logits, &self.labels, &out.latents, Some(&self.ids), &self.cfg)
            .unwrap()
            .breakdown
            .l_total
    }

    fn gradient(&mut self) -> Vec<f64> {
        let base = self.base.clone();
        set_params(&mut self.model.store, &base);
        self.model.zero_grad();
        let out = self.model.forward(&self.x, Mode::Train).unwrap();
        let loss = total_loss(&out.logits, &self.labels, &out.latents, Some(&self.ids), &self.cfg).unwrap();
        self.model
            .backward(&loss.grad_logits, loss.grad_latents.as_ref())
            .unwrap();
        flatten_grads(&self.model.store)
    }
}
