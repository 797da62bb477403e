//! Cross-entropy loss, SGD with momentum, the step learning-rate schedule,
//! the epoch loop, and checkpoint serialisation.
//!
//! Training is single-precision and deterministic in (inputs, config): the
//! epoch shuffle is keyed by (seed, epoch), every record's augmentation RNG
//! by (seed, epoch, record index) — independent of batch composition — and
//! all gradient accumulation uses the fixed orders guaranteed by [`crate::nn`].

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::dataset::{Manifest, StageLabel, STAGE_COUNT};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::{age_feature, MultiPodConfig, MultiPodModel, PodVariant, AGE_REPEAT};
use crate::nn::tensor::Feat;
use crate::nn::Real;
use crate::par;
use crate::pipeline::{self, augment, AugPolicy, ImageBuffer, PatchSet};
use crate::rng;

// ---------------------------------------------------------------------------
// Config and schedule

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decay milestones on the canonical 100-epoch scale; scaled
    /// proportionally when `epochs` differs (see [`TrainConfig::effective_milestones`]).
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub seed: u64,
    pub policy: AugPolicy,
    pub patch_aug: bool,
    pub parallel: bool,
    /// When set: final checkpoint (and periodic ones) land here.
    pub out_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 100,
            milestones: vec![25, 50, 75],
            decay: 0.1,
            seed: 0,
            policy: AugPolicy::translate_autocontrast(),
            patch_aug: true,
            parallel: true,
            out_dir: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.decay <= 0.0 || self.decay > 1.0 {
            return Err(Error::config("learning rate and decay must be positive"));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("momentum and weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("milestones must be strictly increasing"));
        }
        Ok(())
    }

    /// Milestones for the configured epoch count: proportionally rescaled
    /// from the 100-epoch scale (rounded to the nearest epoch), keeping the
    /// schedule's shape on short runs. Milestones that collapse to 0 or past
    /// the end are dropped.
    pub fn effective_milestones(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .milestones
            .iter()
            .map(|&m| {
                if self.epochs == 100 {
                    m
                } else {
                    (m as f64 * self.epochs as f64 / 100.0).round() as usize
                }
            })
            .filter(|&m| m > 0 && m < self.epochs)
            .collect();
        out.dedup();
        out
    }
}

/// Learning rate for an epoch: `lr0` divided by `1/decay` once per milestone
/// reached. Dividing by the exact inverse keeps the canonical schedule's
/// values (0.1 → 0.01 → 0.001 → 0.0001) exactly representable instead of
/// accumulating multiplication error.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    assert!(epoch < cfg.epochs, "epoch {epoch} out of range ({})", cfg.epochs);
    let k = cfg
        .effective_milestones()
        .iter()
        .filter(|&&m| epoch >= m)
        .count();
    cfg.lr0 / (1.0 / cfg.decay).powi(k as i32)
}

// ---------------------------------------------------------------------------
// Loss

/// Numerically stabilised softmax cross-entropy: returns the loss and
/// d(loss)/d(logits) (`softmax − onehot`).
pub fn cross_entropy<F: Real>(logits: &[F], label: StageLabel) -> Result<(F, Vec<F>)> {
    debug_assert_eq!(logits.len(), STAGE_COUNT);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("non-finite logits in loss"));
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (g, &z) in grad.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *g = e;
        sum += e;
    }
    let y = label.index();
    let loss = sum.ln() - (logits[y] - max);
    for g in grad.iter_mut() {
        *g = *g / sum;
    }
    grad[y] -= F::one();
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Optimizer

/// One SGD-with-momentum update: `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_update(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let step = g + weight_decay * *p;
        *v = momentum * *v + step;
        *p -= lr * *v;
    }
}

/// Per-tensor velocity buffers in visitation order.
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(model: &mut MultiPodModel<f32>) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(&mut |p| {
            velocity.push(vec![0.0f32; if p.trainable { p.value.len() } else { 0 }]);
        });
        SgdState { velocity }
    }

    pub fn step(&mut self, model: &mut MultiPodModel<f32>, lr: f64, momentum: f64, weight_decay: f64) {
        let mut i = 0usize;
        let velocity = &mut self.velocity;
        model.visit_params(&mut |p| {
            if p.trainable {
                sgd_update(
                    p.value,
                    p.grad,
                    &mut velocity[i],
                    lr as f32,
                    momentum as f32,
                    weight_decay as f32,
                );
            }
            i += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Run log

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// Epochs completed when the row was written (1-based), matching the
    /// checkpoint metadata. The schedule index is `epoch - 1`.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub rows: Vec<EpochRecord>,
}

pub const RUNLOG_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr";

impl RunLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr
            ));
        }
        fs::write(path, s).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn final_row(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    /// Row with the highest test accuracy (earliest epoch on ties).
    pub fn best_test(&self) -> Option<&EpochRecord> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if r.test_acc > b.test_acc => Some(r),
                None => Some(r),
                keep => keep,
            })
    }
}

// ---------------------------------------------------------------------------
// Epoch loop

/// Shuffled dataset indices chopped into batches; a trailing batch of one
/// record is merged into its predecessor so batch statistics stay defined.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("checked non-empty");
        batches.last_mut().expect("checked len > 1").extend(tail);
    }
    batches
}

struct PreparedSample {
    /// One patch set per pod for StackNet (independent augmentation draws);
    /// a single shared set otherwise.
    pod_sets: Vec<PatchSet>,
    age: [f64; AGE_REPEAT],
}

/// Run the training loop. Writes periodic/final checkpoints when the config
/// names an output directory. `on_epoch` (when given) sees each completed
/// epoch's record and returns `false` to stop early — the run log stays
/// truthful, it just ends at that epoch.
pub fn train(
    model: &mut MultiPodModel<f32>,
    train_manifest: &Manifest,
    test_manifest: &Manifest,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord) -> bool>,
) -> Result<RunLog> {
    cfg.validate()?;
    if train_manifest.is_empty() || test_manifest.is_empty() {
        return Err(Error::config("train and test manifests must be non-empty"));
    }
    let variant = model.cfg.variant;
    let pod_count = variant.pod_count();
    let use_age = model.cfg.use_age;
    let parallel = cfg.parallel;

    // Base images (post crop/resize, pre augmentation) are loaded once.
    let train_bases: Vec<ImageBuffer> = train_manifest
        .records()
        .iter()
        .map(|r| pipeline::eval_base_image(r, train_manifest.base_dir()))
        .collect::<Result<_>>()?;
    let train_ages: Vec<f64> = train_manifest.records().iter().map(|r| r.age_years).collect();
    let train_labels: Vec<StageLabel> = train_manifest.records().iter().map(|r| r.stage).collect();

    let test_sets: Vec<PatchSet> = test_manifest
        .records()
        .iter()
        .map(|r| {
            let img = pipeline::eval_base_image(r, test_manifest.base_dir())?;
            pipeline::extract_patches(&img)
        })
        .collect::<Result<_>>()?;
    let test_ages: Vec<f64> = test_manifest.records().iter().map(|r| r.age_years).collect();
    let test_labels: Vec<StageLabel> = test_manifest.records().iter().map(|r| r.stage).collect();

    let mut sgd = SgdState::new(model);
    let mut log = RunLog::default();
    let n_train = train_bases.len();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::epoch_stream(cfg.seed, epoch));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in batch_indices(&order, cfg.batch_size) {
            let bn = batch.len();
            let prepared: Vec<PreparedSample> = par::map_indexed(parallel, bn, |bi| {
                let idx = batch[bi];
                let mut r = rng::record_stream(cfg.seed, epoch, idx);
                let img = augment::apply_policy(&cfg.policy, &train_bases[idx], &mut r);
                let base = pipeline::extract_patches(&img)?;
                let pod_sets = if cfg.patch_aug {
                    match variant {
                        PodVariant::StackNet => (0..pod_count)
                            .map(|_| augment::augment_patchset(&base, &mut r))
                            .collect(),
                        _ => vec![augment::augment_patchset(&base, &mut r)],
                    }
                } else {
                    vec![base]
                };
                let age = if use_age {
                    age_feature(train_ages[idx], Some(&mut r))?
                } else {
                    [0.0; AGE_REPEAT]
                };
                Ok(PreparedSample { pod_sets, age })
            })
            .into_iter()
            .collect::<Result<_>>()?;

            let inputs: Vec<Feat<f32>> = (0..pod_count)
                .map(|k| {
                    let refs: Vec<&PatchSet> = prepared
                        .iter()
                        .map(|p| {
                            if p.pod_sets.len() == pod_count {
                                &p.pod_sets[k]
                            } else {
                                &p.pod_sets[0]
                            }
                        })
                        .collect();
                    MultiPodModel::<f32>::pod_input_batch(variant, k, &refs)
                })
                .collect();
            let age_block: Vec<f32> = prepared
                .iter()
                .flat_map(|p| p.age.iter().map(|&v| v as f32))
                .collect();

            let logits = model.forward_batch(
                &inputs,
                use_age.then_some(age_block.as_slice()),
                true,
                parallel,
            )?;

            let mut dlogits = Feat::<f32>::zeros(bn, 1, 1, STAGE_COUNT);
            let inv_bn = 1.0f32 / bn as f32;
            for b in 0..bn {
                let label = train_labels[batch[b]];
                let (loss, grad) = cross_entropy(logits.sample(b), label)?;
                loss_sum += loss as f64;
                if evaluation::argmax(logits.sample(b)) == label.index() {
                    correct += 1;
                }
                for (d, g) in dlogits.sample_mut(b).iter_mut().zip(&grad) {
                    *d = g * inv_bn;
                }
            }

            model.zero_grads();
            model.backward(&dlogits, parallel);
            sgd.step(model, lr, cfg.momentum, cfg.weight_decay);
        }

        let preds = evaluation::predictions_prepared(model, &test_sets, &test_ages, parallel)?;
        let test_correct = preds
            .iter()
            .zip(&test_labels)
            .filter(|(p, l)| p == l)
            .count();
        let row = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n_train as f64,
            train_acc: correct as f64 / n_train as f64,
            test_acc: test_correct as f64 / test_labels.len() as f64,
            lr,
        };
        model.epoch = (epoch + 1) as u64;
        if let (Some(dir), Some(every)) = (&cfg.out_dir, cfg.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(model, &dir.join(format!("checkpoint_ep{}.bin", epoch + 1)))?;
            }
        }
        log.rows.push(row);
        let keep_going = on_epoch
            .as_mut()
            .map(|f| f(log.rows.last().expect("just pushed")))
            .unwrap_or(true);
        if !keep_going {
            break;
        }
    }

    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(model, &dir.join("checkpoint.bin"))?;
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "multipod-checkpoint v1";

fn config_header(model: &MultiPodModel<f32>, tensor_count: usize) -> String {
    let c = &model.cfg;
    let [w1, w2, w3] = c.stage_widths;
    format!(
        "{CHECKPOINT_MAGIC}\n\
         variant={}\n\
         use_directional_filters={}\n\
         freeze_filters={}\n\
         use_age={}\n\
         filter_sigma={}\n\
         stage_widths={w1},{w2},{w3}\n\
         seed={}\n\
         epoch={}\n\
         tensors={tensor_count}\n\n",
        c.variant, c.use_directional_filters, c.freeze_filters, c.use_age, c.filter_sigma, c.seed,
        model.epoch
    )
}

fn collect_tensors(model: &mut MultiPodModel<f32>) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.name.clone(), p.value.to_vec())));
    model.visit_buffers(&mut |b| out.push((b.name.clone(), b.value.to_vec())));
    out
}

/// Serialise the model: a plain-text key=value header, a blank line, then
/// named tensors as `(u32 name length, name, u8 rank, u32 dims…, f32 data)`,
/// all little-endian. Byte-stable for a given model state.
pub fn save_checkpoint(model: &mut MultiPodModel<f32>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(model);
    let mut buf: Vec<u8> = config_header(model, tensors.len()).into_bytes();
    for (name, data) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(1u8);
        buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(
                self.path,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

fn header_value<'a>(lines: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    lines
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::checkpoint(path, format!("missing header key '{key}'")))
}

fn parse_header_bool(lines: &[(String, String)], key: &str, path: &Path) -> Result<bool> {
    match header_value(lines, key, path)? {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(Error::checkpoint(path, format!("bad boolean {key}={v}"))),
    }
}

/// Rebuild a model from [`save_checkpoint`] output. The header's declared
/// config drives the rebuild; any disagreement between that config and the
/// stored tensors (names, order, sizes, count) is a hard error rather than a
/// partially-loaded model.
pub fn load_checkpoint(path: &Path) -> Result<MultiPodModel<f32>> {
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let header_end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::checkpoint(path, "missing header terminator".to_string()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::checkpoint(path, "header is not UTF-8".to_string()))?;
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::checkpoint(path, "unrecognised format/version".to_string()));
    }
    let kv: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();

    let widths_raw = header_value(&kv, "stage_widths", path)?;
    let widths: Vec<usize> = widths_raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::checkpoint(path, format!("bad stage_widths '{widths_raw}'")))?;
    if widths.len() != 3 {
        return Err(Error::checkpoint(path, "stage_widths must have 3 entries".to_string()));
    }
    let cfg = MultiPodConfig {
        variant: PodVariant::from_token(header_value(&kv, "variant", path)?)?,
        use_directional_filters: parse_header_bool(&kv, "use_directional_filters", path)?,
        freeze_filters: parse_header_bool(&kv, "freeze_filters", path)?,
        use_age: parse_header_bool(&kv, "use_age", path)?,
        filter_sigma: header_value(&kv, "filter_sigma", path)?
            .parse()
            .map_err(|_| Error::checkpoint(path, "bad filter_sigma".to_string()))?,
        stage_widths: [widths[0], widths[1], widths[2]],
        seed: header_value(&kv, "seed", path)?
            .parse()
            .map_err(|_| Error::checkpoint(path, "bad seed".to_string()))?,
    };
    let epoch: u64 = header_value(&kv, "epoch", path)?
        .parse()
        .map_err(|_| Error::checkpoint(path, "bad epoch".to_string()))?;
    let declared: usize = header_value(&kv, "tensors", path)?
        .parse()
        .map_err(|_| Error::checkpoint(path, "bad tensor count".to_string()))?;

    let mut model = MultiPodModel::<f32>::build(&cfg)?;
    model.epoch = epoch;
    let mut expected: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| expected.push((p.name.clone(), p.value.len())));
    model.visit_buffers(&mut |b| expected.push((b.name.clone(), b.value.len())));
    if declared != expected.len() {
        return Err(Error::checkpoint(
            path,
            format!(
                "declared config expects {} tensors, header says {declared}",
                expected.len()
            ),
        ));
    }

    let mut cur = Cursor {
        buf: &bytes,
        pos: header_end + 2,
        path,
    };
    let mut loaded: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (name, len) in &expected {
        let name_len = cur.u32("tensor name length")? as usize;
        let got_name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::checkpoint(path, "tensor name is not UTF-8".to_string()))?;
        if got_name != name {
            return Err(Error::checkpoint(
                path,
                format!("tensor '{got_name}' where '{name}' was expected"),
            ));
        }
        let rank = cur.u8("tensor rank")?;
        if rank != 1 {
            return Err(Error::checkpoint(path, format!("unsupported tensor rank {rank}")));
        }
        let dim = cur.u32("tensor dim")? as usize;
        if dim != *len {
            return Err(Error::checkpoint(
                path,
                format!("tensor '{name}' has {dim} values, model needs {len}"),
            ));
        }
        let raw = cur.take(4 * dim, "tensor data")?;
        loaded.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    if cur.pos != bytes.len() {
        return Err(Error::checkpoint(path, "trailing bytes after last tensor".to_string()));
    }

    let mut it = loaded.into_iter();
    model.visit_params(&mut |p| p.value.copy_from_slice(&it.next().expect("counted")));
    model.visit_buffers(&mut |b| b.value.copy_from_slice(&it.next().expect("counted")));
    Ok(model)
}
