//! The MultiPod classifier family: 1–4 residual-backbone pods behind
//! directional filter front-ends, plus an optional age feature, fused by a
//! single affine head into 6 stage logits.
//!
//! Each pod is the same backbone: 7×7 filter layer (8 kernels per input
//! channel) → 3×3 conv to 16 channels → three stages of three residual
//! blocks at widths 16/32/64 → global average pooling to a 64-vector.
//! Spatial sizes run 35×35 → 35×35 → 17×17 → 8×8.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters;
use crate::nn::layers::{
    gap_backward, gap_forward, BasicBlock, BatchNorm2d, BufferFn, Conv2d, FilterConv, Linear,
    ParamFn, Relu,
};
use crate::nn::tensor::{ConvGeom, Feat};
use crate::nn::Real;
use crate::par;
use crate::pipeline::{PatchSet, PATCH, PATCH_COUNT};
use crate::rng;

pub const CLASS_COUNT: usize = 6;
pub const AGE_REPEAT: usize = 6;
pub const AGE_SCALE: f64 = 0.1;
/// Standard deviation of the train-time age noise (variance 0.01).
pub const AGE_NOISE_STD: f64 = 0.1;

const HEAD_SEED_TAG: u64 = 0x4655_5345;

/// Pixel intensities enter the network divided by this.
pub const INPUT_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PodVariant {
    SinglePod,
    DuPod,
    TriPod,
    QuadPod,
    StackNet,
}

/// What pod `k` consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PodInput {
    /// One 35×35 patch by index.
    Patch(usize),
    /// All three patches stacked as channels.
    Stack,
}

impl PodVariant {
    pub const ALL: [PodVariant; 5] = [
        PodVariant::SinglePod,
        PodVariant::DuPod,
        PodVariant::TriPod,
        PodVariant::QuadPod,
        PodVariant::StackNet,
    ];

    pub fn pod_count(self) -> usize {
        match self {
            PodVariant::SinglePod => 1,
            PodVariant::DuPod => 2,
            PodVariant::TriPod | PodVariant::StackNet => 3,
            PodVariant::QuadPod => 4,
        }
    }

    /// Patch routing: pod `k` takes patch `k`, except the fourth pod reuses
    /// the middle patch (there are only three vertebrae), and StackNet pods
    /// all take the full stack.
    pub fn pod_input(self, k: usize) -> PodInput {
        debug_assert!(k < self.pod_count());
        match self {
            PodVariant::StackNet => PodInput::Stack,
            PodVariant::QuadPod if k == 3 => PodInput::Patch(1),
            _ => PodInput::Patch(k),
        }
    }

    /// Channels each pod sees.
    pub fn pod_in_c(self) -> usize {
        match self {
            PodVariant::StackNet => PATCH_COUNT,
            _ => 1,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            PodVariant::SinglePod => "singlepod",
            PodVariant::DuPod => "dupod",
            PodVariant::TriPod => "tripod",
            PodVariant::QuadPod => "quadpod",
            PodVariant::StackNet => "stacknet",
        }
    }

    pub fn from_token(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "singlepod" | "single" => Ok(PodVariant::SinglePod),
            "dupod" | "du" => Ok(PodVariant::DuPod),
            "tripod" | "tri" => Ok(PodVariant::TriPod),
            "quadpod" | "quad" => Ok(PodVariant::QuadPod),
            "stacknet" | "stack" => Ok(PodVariant::StackNet),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected singlepod|dupod|tripod|quadpod|stacknet)"
            ))),
        }
    }
}

impl std::fmt::Display for PodVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiPodConfig {
    pub variant: PodVariant,
    /// Initialise the front-end filters from the directional bank (true) or
    /// randomly (false). The layer shape is identical either way.
    pub use_directional_filters: bool,
    /// Keep the front-end filters fixed at their initialisation.
    pub freeze_filters: bool,
    pub use_age: bool,
    pub filter_sigma: f64,
    /// Residual stage widths; [16, 32, 64] is the real model, smaller widths
    /// exist for numeric probes.
    pub stage_widths: [usize; 3],
    pub seed: u64,
}

impl Default for MultiPodConfig {
    fn default() -> Self {
        MultiPodConfig {
            variant: PodVariant::TriPod,
            use_directional_filters: true,
            freeze_filters: false,
            use_age: true,
            filter_sigma: 1.5,
            stage_widths: [16, 32, 64],
            seed: 0,
        }
    }
}

impl MultiPodConfig {
    pub fn pod_count(&self) -> usize {
        self.variant.pod_count()
    }

    /// Width of the fusion head input.
    pub fn fusion_in(&self) -> usize {
        self.stage_widths[2] * self.pod_count() + if self.use_age { AGE_REPEAT } else { 0 }
    }
}

/// Age feature: `(0.1 · age)` repeated six times; in Train mode each entry
/// additionally gets i.i.d. Gaussian noise with variance 0.01 (pass the
/// record's RNG). Ages must be non-negative.
pub fn age_feature(age_years: f64, rng: Option<&mut ChaCha8Rng>) -> Result<[f64; AGE_REPEAT]> {
    if !age_years.is_finite() || age_years < 0.0 {
        return Err(Error::config(format!("age must be non-negative, got {age_years}")));
    }
    let base = AGE_SCALE * age_years;
    let mut out = [base; AGE_REPEAT];
    if let Some(r) = rng {
        let noise = Normal::new(0.0, AGE_NOISE_STD).expect("valid std");
        for v in out.iter_mut() {
            *v += noise.sample(r);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pod

#[derive(Clone, Debug)]
struct Pod<F> {
    filter: FilterConv<F>,
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    relu1: Relu,
    blocks: Vec<BasicBlock<F>>,
    /// Spatial size entering global average pooling (cached in train mode).
    gap_hw: (usize, usize),
}

impl<F: Real> Pod<F> {
    fn new(cfg: &MultiPodConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let in_c = cfg.variant.pod_in_c();
        let filter = if cfg.use_directional_filters {
            let bank = filters::build_bank(cfg.filter_sigma, !cfg.freeze_filters)?;
            FilterConv::from_bank_kernels(in_c, bank.kernels(), !cfg.freeze_filters)
        } else {
            FilterConv::random(in_c, rng, !cfg.freeze_filters)
        };
        let [w1, w2, w3] = cfg.stage_widths;
        if w1 == 0 || w2 == 0 || w3 == 0 {
            return Err(Error::config("stage widths must be positive".to_string()));
        }
        let conv1 = Conv2d::new(filter.out_c(), w1, ConvGeom::same3(), rng);
        let mut blocks = Vec::with_capacity(9);
        for _ in 0..3 {
            blocks.push(BasicBlock::new(w1, w1, false, rng));
        }
        blocks.push(BasicBlock::new(w1, w2, true, rng));
        for _ in 0..2 {
            blocks.push(BasicBlock::new(w2, w2, false, rng));
        }
        blocks.push(BasicBlock::new(w2, w3, true, rng));
        for _ in 0..2 {
            blocks.push(BasicBlock::new(w3, w3, false, rng));
        }
        Ok(Pod {
            filter,
            conv1,
            bn1: BatchNorm2d::new(w1),
            relu1: Relu::new(),
            blocks,
            gap_hw: (0, 0),
        })
    }

    fn forward(&mut self, x: &Feat<F>, train: bool, parallel: bool) -> Result<Feat<F>> {
        let mut t = self.filter.forward(x, train, parallel)?;
        t = self.conv1.forward(&t, train, parallel)?;
        self.bn1.forward(&mut t, train, parallel);
        self.relu1.forward(&mut t, train, parallel);
        for b in self.blocks.iter_mut() {
            t = b.forward(&t, train, parallel)?;
        }
        self.gap_hw = (t.h, t.w);
        Ok(gap_forward(&t, parallel))
    }

    fn backward(&mut self, dy: &Feat<F>, parallel: bool) {
        let (h, w) = self.gap_hw;
        let mut d = gap_backward(dy, h, w, parallel);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d, parallel);
        }
        self.relu1.backward(&mut d, parallel);
        self.bn1.backward(&mut d, parallel);
        let d = self.conv1.backward(&d, parallel);
        // The filter layer is first; its input gradient has no consumer.
        let _ = self.filter.backward(&d, parallel);
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.filter.visit(&format!("{prefix}.filter"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.s{}b{}", i / 3 + 1, i % 3), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut BufferFn<'_, F>) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&format!("{prefix}.s{}b{}", i / 3 + 1, i % 3), f);
        }
    }
}

// ---------------------------------------------------------------------------
// MultiPodModel

#[derive(Clone, Debug)]
pub struct MultiPodModel<F> {
    pub cfg: MultiPodConfig,
    /// Epochs completed by the training loop; checkpoint metadata.
    pub epoch: u64,
    pods: Vec<Pod<F>>,
    head: Linear<F>,
}

impl<F: Real> MultiPodModel<F> {
    /// Deterministic build: pod `k` draws from stream `seed ⊕ k`, so pods
    /// start from different parameters; the fusion head has its own stream.
    pub fn build(cfg: &MultiPodConfig) -> Result<Self> {
        let mut pods = Vec::with_capacity(cfg.pod_count());
        for k in 0..cfg.pod_count() {
            let mut r = rng::stream(cfg.seed ^ k as u64);
            pods.push(Pod::new(cfg, &mut r)?);
        }
        let mut hr = rng::stream(rng::mix2(cfg.seed, HEAD_SEED_TAG));
        let head = Linear::new(cfg.fusion_in(), CLASS_COUNT, &mut hr);
        Ok(MultiPodModel {
            cfg: cfg.clone(),
            epoch: 0,
            pods,
            head,
        })
    }

    /// Assemble pod `k`'s input feature batch from per-record patch sets
    /// (pixel domain; scaling happens inside the forward pass).
    pub fn pod_input_batch(variant: PodVariant, k: usize, batch: &[&PatchSet]) -> Feat<F> {
        let n = batch.len();
        match variant.pod_input(k) {
            PodInput::Patch(i) => {
                let mut f = Feat::zeros(n, PATCH, PATCH, 1);
                for (b, ps) in batch.iter().enumerate() {
                    for (dst, src) in f.sample_mut(b).iter_mut().zip(ps.patches[i].data()) {
                        *dst = F::lit(*src as f64);
                    }
                }
                f
            }
            PodInput::Stack => {
                let mut f = Feat::zeros(n, PATCH, PATCH, PATCH_COUNT);
                for (b, ps) in batch.iter().enumerate() {
                    let s = f.sample_mut(b);
                    for ic in 0..PATCH_COUNT {
                        for (j, src) in ps.patches[ic].data().iter().enumerate() {
                            s[j * PATCH_COUNT + ic] = F::lit(*src as f64);
                        }
                    }
                }
                f
            }
        }
    }

    /// Forward a batch. `inputs` holds one feature batch per pod (see
    /// [`Self::pod_input_batch`]); `age_features` is the flattened `N×6`
    /// block from [`age_feature`] and is required iff the config uses age.
    pub fn forward_batch(
        &mut self,
        inputs: &[Feat<F>],
        age_features: Option<&[F]>,
        train: bool,
        parallel: bool,
    ) -> Result<Feat<F>> {
        if inputs.len() != self.pods.len() {
            return Err(Error::geometry(
                "forward",
                format!("{} pod inputs for {} pods", inputs.len(), self.pods.len()),
            ));
        }
        let n = inputs[0].n;
        let in_c = self.cfg.variant.pod_in_c();
        for f in inputs {
            if (f.n, f.h, f.w, f.c) != (n, PATCH, PATCH, in_c) {
                return Err(Error::geometry(
                    "forward",
                    format!(
                        "pod input shape ({},{},{},{}), expected ({n},{PATCH},{PATCH},{in_c})",
                        f.n, f.h, f.w, f.c
                    ),
                ));
            }
        }
        match (self.cfg.use_age, age_features) {
            (true, Some(a)) if a.len() != n * AGE_REPEAT => {
                return Err(Error::config(format!(
                    "age feature block has {} values, expected {}",
                    a.len(),
                    n * AGE_REPEAT
                )));
            }
            (true, None) => {
                return Err(Error::config("config uses age but no age features given"))
            }
            _ => {}
        }

        let w3 = self.cfg.stage_widths[2];
        let mut fusion = Feat::zeros(n, 1, 1, self.cfg.fusion_in());
        for (k, pod) in self.pods.iter_mut().enumerate() {
            // Pixel domain → unit domain at the model boundary.
            let mut x = inputs[k].clone();
            let stride = x.stride();
            let inv = F::lit(1.0 / INPUT_SCALE);
            par::chunks_mut_indexed(parallel, &mut x.data, stride, |_, chunk| {
                for v in chunk.iter_mut() {
                    *v *= inv;
                }
            });
            let feat = pod.forward(&x, train, parallel)?;
            for b in 0..n {
                let dst = &mut fusion.sample_mut(b)[k * w3..(k + 1) * w3];
                dst.copy_from_slice(feat.sample(b));
            }
        }
        if self.cfg.use_age {
            let a = age_features.expect("checked above");
            let off = w3 * self.pods.len();
            for b in 0..n {
                fusion.sample_mut(b)[off..off + AGE_REPEAT]
                    .copy_from_slice(&a[b * AGE_REPEAT..(b + 1) * AGE_REPEAT]);
            }
        }
        Ok(self.head.forward(&fusion, train, parallel))
    }

    /// Backward from logit gradients; accumulates into every parameter's
    /// gradient buffer. Pods run in order, so accumulation stays fixed.
    pub fn backward(&mut self, dlogits: &Feat<F>, parallel: bool) {
        let dfusion = self.head.backward(dlogits, parallel);
        let w3 = self.cfg.stage_widths[2];
        let n = dfusion.n;
        for (k, pod) in self.pods.iter_mut().enumerate() {
            let mut dk = Feat::zeros(n, 1, 1, w3);
            for b in 0..n {
                dk.sample_mut(b)
                    .copy_from_slice(&dfusion.sample(b)[k * w3..(k + 1) * w3]);
            }
            pod.backward(&dk, parallel);
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamFn<'_, F>) {
        for k in 0..self.pods.len() {
            self.pods[k].visit(&format!("pod{k}"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferFn<'_, F>) {
        for k in 0..self.pods.len() {
            self.pods[k].visit_buffers(&format!("pod{k}"), f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(F::zero()));
    }

    /// Number of trainable scalars (frozen filter kernels excluded).
    pub fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// Shapes traced through pod 0 on a probe input, for the shape contract:
    /// bank → conv1 → stage1 → stage2 → stage3 → pooled → logits.
    pub fn probe_shapes(&mut self) -> Result<Vec<(String, Vec<usize>)>> {
        let in_c = self.cfg.variant.pod_in_c();
        let x = Feat::<F>::zeros(1, PATCH, PATCH, in_c);
        let mut shapes = Vec::new();
        let pod = &mut self.pods[0];
        let mut t = pod.filter.forward(&x, false, false)?;
        shapes.push(("bank".to_string(), vec![t.h, t.w, t.c]));
        t = pod.conv1.forward(&t, false, false)?;
        pod.bn1.forward(&mut t, false, false);
        pod.relu1.forward(&mut t, false, false);
        shapes.push(("conv1".to_string(), vec![t.h, t.w, t.c]));
        for (i, b) in pod.blocks.iter_mut().enumerate() {
            t = b.forward(&t, false, false)?;
            if i % 3 == 2 {
                shapes.push((format!("stage{}", i / 3 + 1), vec![t.h, t.w, t.c]));
            }
        }
        let pooled = gap_forward(&t, false);
        shapes.push(("pooled".to_string(), vec![pooled.c]));
        let inputs: Vec<Feat<F>> = (0..self.pods.len())
            .map(|_| Feat::zeros(1, PATCH, PATCH, in_c))
            .collect();
        let age = vec![F::zero(); AGE_REPEAT];
        let logits = self.forward_batch(
            &inputs,
            self.cfg.use_age.then_some(age.as_slice()),
            false,
            false,
        )?;
        shapes.push(("logits".to_string(), vec![logits.c]));
        Ok(shapes)
    }
}
