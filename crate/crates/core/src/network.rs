//! The two-head fingertip network and its checkpoint format.
//!
//! ```text
//! input [B,3,S,S] -> backbone (stride 32) -> neck (stride-2 convs to 1x1)
//!                                              |-> offset head  (10 ch)       -> [B,5,2]
//!                                              `-> class head   (5*(N+1) ch)  -> [B,5,N+1]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, AnchorLayout, FINGER_COUNT};
use crate::nn::{Activation, Conv2d, Layer, LayerCache, Tensor4};
use crate::scalar::Scalar;

/// Spatial reduction of every backbone.
pub const OUTPUT_STRIDE: usize = 32;

/// Version written into the checkpoint sidecar.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ABFPECK\0";

const NONLINEARITY: Activation = Activation::Leaky(0.1);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Five stride-2 3x3 conv blocks, widths 16..256, trained from scratch.
    #[default]
    ReferenceSmall,
    /// Caller-supplied layers; see [`Backbone::custom`].
    Pluggable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub anchor_count: usize,
    pub anchor_layout: AnchorLayout,
    pub backbone: BackboneKind,
    pub neck_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            anchor_count: 24,
            anchor_layout: AnchorLayout::Angular,
            backbone: BackboneKind::ReferenceSmall,
            neck_channels: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::invalid(format!(
                "input_size {} is not a positive multiple of {OUTPUT_STRIDE}",
                self.input_size
            )));
        }
        if self.anchor_count < 3 {
            return Err(Error::invalid("anchor_count must be >= 3"));
        }
        if self.neck_channels == 0 {
            return Err(Error::invalid("neck_channels must be positive"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.anchor_count + 1
    }

    pub fn anchor_grid<T: Scalar>(&self) -> Result<AnchorGrid<T>> {
        AnchorGrid::with_layout(self.anchor_layout, self.anchor_count, self.input_size)
    }
}

/// Raw head outputs for a batch.
///
/// `class_scores` is `[B, 5, N+1]` (pre-softmax), `offsets` is `[B, 5, 2]`
/// in units of the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T> {
    pub batch: usize,
    pub classes: usize,
    pub class_scores: Vec<T>,
    pub offsets: Vec<T>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn zeros(batch: usize, classes: usize) -> Self {
        Self {
            batch,
            classes,
            class_scores: vec![T::zero(); batch * FINGER_COUNT * classes],
            offsets: vec![T::zero(); batch * FINGER_COUNT * 2],
        }
    }

    pub fn sample_scores(&self, b: usize) -> &[T] {
        let n = FINGER_COUNT * self.classes;
        &self.class_scores[b * n..(b + 1) * n]
    }

    pub fn sample_offsets(&self, b: usize) -> &[T] {
        &self.offsets[b * FINGER_COUNT * 2..(b + 1) * FINGER_COUNT * 2]
    }

    pub fn is_finite(&self) -> bool {
        self.class_scores.iter().chain(&self.offsets).all(|v| v.is_finite())
    }
}

/// Feature extractor mapping `[3, S, S]` to `[C, S/32, S/32]`.
pub struct Backbone<T: Scalar> {
    layers: Vec<Box<dyn Layer<T>>>,
    out_channels: usize,
}

impl<T: Scalar> Backbone<T> {
    pub fn reference_small(rng: &mut ChaCha8Rng) -> Self {
        let widths = [3, 16, 32, 64, 128, 256];
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut conv = Conv2d::new(w[0], w[1], 3, 2, 1, NONLINEARITY);
                conv.init_normal(he_std(conv.fan_in()), rng);
                Box::new(conv) as Box<dyn Layer<T>>
            })
            .collect();
        Self {
            layers,
            out_channels: 256,
        }
    }

    /// Wraps caller-supplied layers. The stride contract is checked when the
    /// backbone is attached to a model.
    pub fn custom(layers: Vec<Box<dyn Layer<T>>>, out_channels: usize) -> Self {
        Self {
            layers,
            out_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.layers
            .iter()
            .try_fold(input, |shape, layer| layer.output_shape(shape))
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Intermediate state recorded by [`FingertipNet::forward_train`].
pub struct ForwardTape<T> {
    caches: Vec<LayerCache<T>>,
    batch: usize,
}

/// Parameter gradients, one buffer per parameter tensor in [`FingertipNet::params`] order.
pub type Gradients<T> = Vec<Vec<T>>;

/// Backbone, neck and the two heads.
pub struct FingertipNet<T: Scalar> {
    cfg: ModelConfig,
    backbone: Backbone<T>,
    neck: Vec<Conv2d<T>>,
    offset_head: Conv2d<T>,
    class_head: Conv2d<T>,
}

impl<T: Scalar> FingertipNet<T> {
    /// Builds a model with seeded random initialization.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = match cfg.backbone {
            BackboneKind::ReferenceSmall => Backbone::reference_small(&mut rng),
            BackboneKind::Pluggable => {
                return Err(Error::invalid(
                    "a pluggable backbone must be supplied via FingertipNet::with_backbone",
                ))
            }
        };
        Self::assemble(cfg, backbone, &mut rng)
    }

    pub fn with_backbone(cfg: &ModelConfig, backbone: Backbone<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::assemble(cfg, backbone, &mut rng)
    }

    fn assemble(cfg: &ModelConfig, backbone: Backbone<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let s = cfg.input_size;
        let feat = backbone.output_shape([3, s, s])?;
        let want = s / OUTPUT_STRIDE;
        if feat != [backbone.out_channels(), want, want] {
            return Err(Error::invalid(format!(
                "backbone maps [3, {s}, {s}] to {feat:?}, expected [{}, {want}, {want}]",
                backbone.out_channels()
            )));
        }
        let mut neck = Vec::new();
        let mut channels = backbone.out_channels();
        let mut side = want;
        // always at least one neck layer, then halve (ceil) until 1x1
        loop {
            let mut conv = Conv2d::new(channels, cfg.neck_channels, 3, 2, 1, NONLINEARITY);
            conv.init_normal(he_std(conv.fan_in()), rng);
            neck.push(conv);
            channels = cfg.neck_channels;
            side = side.div_ceil(2);
            if side == 1 {
                break;
            }
        }
        let mut offset_head = Conv2d::new(channels, FINGER_COUNT * 2, 1, 1, 0, Activation::Identity);
        offset_head.init_normal(0.1 * (1.0 / channels as f64).sqrt(), rng);
        let mut class_head =
            Conv2d::new(channels, FINGER_COUNT * cfg.classes(), 1, 1, 0, Activation::Identity);
        class_head.init_normal((1.0 / channels as f64).sqrt(), rng);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            neck,
            offset_head,
            class_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Spatial shape of the backbone output for the configured input.
    pub fn backbone_output_shape(&self) -> Result<[usize; 3]> {
        let s = self.cfg.input_size;
        self.backbone.output_shape([3, s, s])
    }

    pub fn neck_depth(&self) -> usize {
        self.neck.len()
    }

    fn to_internal(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [_, c, h, w] = batch.dims();
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::invalid(format!(
                "expected input [B, 3, {s}, {s}], got {:?}",
                batch.dims()
            )));
        }
        let mut x = batch.swap_leading();
        // center [0, 1] inputs
        let half = T::of(0.5);
        x.data_mut().iter_mut().for_each(|v| *v = *v - half);
        Ok(x)
    }

    fn layers(&self) -> impl Iterator<Item = &dyn Layer<T>> {
        self.backbone
            .layers
            .iter()
            .map(|l| l.as_ref())
            .chain(self.neck.iter().map(|l| l as &dyn Layer<T>))
    }

    fn heads(&self, feat: &Tensor4<T>, tape: Option<&mut ForwardTape<T>>) -> HeadOutputs<T> {
        let batch = feat.dims()[1];
        let (off, cls) = match tape {
            Some(tape) => {
                let mut c_off = LayerCache::default();
                let mut c_cls = LayerCache::default();
                let off = self.offset_head.forward(feat, Some(&mut c_off));
                let cls = self.class_head.forward(feat, Some(&mut c_cls));
                tape.caches.push(c_off);
                tape.caches.push(c_cls);
                (off, cls)
            }
            None => (
                self.offset_head.forward(feat, None),
                self.class_head.forward(feat, None),
            ),
        };
        // [C, B, 1, 1] -> [B, C]
        HeadOutputs {
            batch,
            classes: self.cfg.classes(),
            class_scores: cls.swap_leading().into_vec(),
            offsets: off.swap_leading().into_vec(),
        }
    }

    /// Inference on an NCHW batch with values in `[0, 1]`.
    pub fn forward(&self, batch: &Tensor4<T>) -> Result<HeadOutputs<T>> {
        let mut x = self.to_internal(batch)?;
        for layer in self.layers() {
            x = layer.forward(&x, None);
        }
        Ok(self.heads(&x, None))
    }

    /// Forward pass that records what [`Self::backward`] needs.
    pub fn forward_train(&self, batch: &Tensor4<T>) -> Result<(HeadOutputs<T>, ForwardTape<T>)> {
        let mut x = self.to_internal(batch)?;
        let mut tape = ForwardTape {
            caches: Vec::new(),
            batch: batch.dims()[0],
        };
        for layer in self.layers() {
            let mut cache = LayerCache::default();
            x = layer.forward(&x, Some(&mut cache));
            tape.caches.push(cache);
        }
        let out = self.heads(&x, Some(&mut tape));
        Ok((out, tape))
    }

    /// Backpropagates loss gradients w.r.t. the head outputs into parameter gradients.
    pub fn backward(&self, tape: ForwardTape<T>, d_out: &HeadOutputs<T>) -> Result<Gradients<T>> {
        let b = tape.batch;
        if d_out.batch != b || d_out.classes != self.cfg.classes() {
            return Err(Error::invalid("head gradient shape does not match the tape"));
        }
        let mut grads = self.zero_grads();
        let mut caches = tape.caches;
        let c_cls = caches.pop().expect("tape has class head cache");
        let c_off = caches.pop().expect("tape has offset head cache");
        let n_params = grads.len();
        let (body, head_grads) = grads.split_at_mut(n_params - 4);
        let (g_off, g_cls) = head_grads.split_at_mut(2);

        let d_off = Tensor4::from_vec([b, FINGER_COUNT * 2, 1, 1], d_out.offsets.clone())?.swap_leading();
        let d_cls = Tensor4::from_vec([b, FINGER_COUNT * d_out.classes, 1, 1], d_out.class_scores.clone())?
            .swap_leading();
        let mut dx = self
            .offset_head
            .backward(&c_off, d_off, g_off, true)
            .expect("requested input grad");
        let dx_cls = self
            .class_head
            .backward(&c_cls, d_cls, g_cls, true)
            .expect("requested input grad");
        dx.data_mut()
            .iter_mut()
            .zip(dx_cls.data())
            .for_each(|(a, b)| *a = *a + *b);

        let layers: Vec<&dyn Layer<T>> = self.layers().collect();
        let mut offset = body.len();
        for (i, (layer, cache)) in layers.iter().zip(caches.iter()).enumerate().rev() {
            let np = layer.params().len();
            offset -= np;
            let need_dx = i > 0;
            match layer.backward(cache, dx, &mut body[offset..offset + np], need_dx) {
                Some(next) => dx = next,
                None => break,
            }
        }
        Ok(grads)
    }

    /// All parameter tensors: backbone, neck, offset head, class head.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.layers().flat_map(|l| l.params()).collect();
        out.extend(self.offset_head.params());
        out.extend(self.class_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in self.backbone.layers.iter_mut() {
            out.extend(l.params_mut());
        }
        for l in self.neck.iter_mut() {
            out.extend(l.params_mut());
        }
        out.extend(self.offset_head.params_mut());
        out.extend(self.class_head.params_mut());
        out
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Sidecar metadata written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub input_size: usize,
    pub anchor_count: usize,
    pub anchor_layout: AnchorLayout,
    pub backbone: BackboneKind,
    pub neck_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CheckpointMeta {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            anchor_count: self.anchor_count,
            anchor_layout: self.anchor_layout,
            backbone: self.backbone,
            neck_channels: self.neck_channels,
        }
    }
}

/// `model.ckpt` -> `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes raw parameters plus a JSON metadata sidecar.
///
/// Binary layout: magic, dtype tag (u8 length + bytes), tensor count (u32),
/// then per tensor a u64 element count and little-endian values.
pub fn save_checkpoint<T: Scalar>(model: &FingertipNet<T>, path: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = model.config();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        input_size: cfg.input_size,
        anchor_count: cfg.anchor_count,
        anchor_layout: cfg.anchor_layout,
        backbone: cfg.backbone,
        neck_channels: cfg.neck_channels,
        seed,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(T::DTYPE.len() as u8);
    buf.extend_from_slice(T::DTYPE.as_bytes());
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        match T::DTYPE {
            "f32" => p
                .iter()
                .for_each(|v| buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes())),
            _ => p
                .iter()
                .for_each(|v| buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes())),
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Incompatible(format!(
            "{} has format_version {:?}, this build reads {CHECKPOINT_FORMAT_VERSION}",
            side.display(),
            version
        )));
    }
    Ok(serde_json::from_value(value)?)
}

/// Loads a reference-backbone checkpoint.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(FingertipNet<T>, ModelConfig)> {
    let meta = read_checkpoint_meta(path)?;
    let cfg = meta.model_config();
    let model = FingertipNet::new(&cfg, 0)?;
    fill_from_checkpoint(model, path).map(|m| (m, cfg))
}

/// Loads a checkpoint whose backbone layers are supplied by the caller.
pub fn load_checkpoint_with_backbone<T: Scalar>(
    path: &Path,
    backbone: Backbone<T>,
) -> Result<(FingertipNet<T>, ModelConfig)> {
    let meta = read_checkpoint_meta(path)?;
    let cfg = meta.model_config();
    let model = FingertipNet::with_backbone(&cfg, backbone, 0)?;
    fill_from_checkpoint(model, path).map(|m| (m, cfg))
}

/// Loads a checkpoint and checks it against the anchor grid the caller intends to use.
pub fn load_checkpoint_for_grid<T: Scalar>(
    path: &Path,
    anchor_count: usize,
    input_size: usize,
) -> Result<(FingertipNet<T>, ModelConfig)> {
    let meta = read_checkpoint_meta(path)?;
    if meta.anchor_count != anchor_count || meta.input_size != input_size {
        return Err(Error::Incompatible(format!(
            "checkpoint has anchor_count={} input_size={}, requested anchor_count={anchor_count} input_size={input_size}",
            meta.anchor_count, meta.input_size
        )));
    }
    load_checkpoint(path)
}

fn fill_from_checkpoint<T: Scalar>(mut model: FingertipNet<T>, path: &Path) -> Result<FingertipNet<T>> {
    let corrupt = |message: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt("truncated"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let tag_len = take(1)?[0] as usize;
    let dtype = std::str::from_utf8(take(tag_len)?).map_err(|_| corrupt("bad dtype tag"))?;
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(&format!("unknown dtype {other}"))),
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint holds {count} tensors, model expects {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if n != p.len() {
            return Err(Error::Incompatible(format!(
                "tensor of {n} values where the model expects {}",
                p.len()
            )));
        }
        let raw = take(n * width)?;
        for (v, chunk) in p.iter_mut().zip(raw.chunks_exact(width)) {
            *v = if width == 4 {
                T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
            } else {
                T::of(f64::from_le_bytes(chunk.try_into().unwrap()))
            };
        }
    }
    drop(params);
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(b: usize, s: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * s * s;
        Tensor4::from_vec([b, 3, s, s], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn small_cfg(input: usize, n: usize) -> ModelConfig {
        ModelConfig {
            input_size: input,
            anchor_count: n,
            neck_channels: 32,
            ..Default::default()
        }
    }

    #[test]
    fn default_shape_contract() {
        let cfg = ModelConfig::default();
        let model = FingertipNet::<f32>::new(&cfg, 1).unwrap();
        assert_eq!(model.backbone_output_shape().unwrap(), [256, 7, 7]);
        assert_eq!(model.neck_depth(), 3);
        let out = model.forward(&random_batch(2, 224, 0)).unwrap();
        assert_eq!(out.class_scores.len(), 2 * 5 * 25);
        assert_eq!(out.offsets.len(), 2 * 5 * 2);
    }

    #[test]
    fn shape_contract_across_sizes() {
        for (s, n) in [(64, 3), (96, 4), (128, 64), (224, 4)] {
            let model = FingertipNet::<f32>::new(&small_cfg(s, n), 1).unwrap();
            assert_eq!(model.backbone_output_shape().unwrap()[1..], [s / 32, s / 32]);
            let out = model.forward(&random_batch(3, s, 1)).unwrap();
            assert_eq!(out.batch, 3);
            assert_eq!(out.classes, n + 1);
            assert_eq!(out.class_scores.len(), 3 * 5 * (n + 1));
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(FingertipNet::<f32>::new(&small_cfg(100, 24), 0).is_err());
        assert!(FingertipNet::<f32>::new(&small_cfg(64, 2), 0).is_err());
        let model = FingertipNet::<f32>::new(&small_cfg(64, 4), 0).unwrap();
        assert!(model.forward(&random_batch(1, 96, 0)).is_err());
    }

    #[test]
    fn zero_image_gives_finite_outputs() {
        let model = FingertipNet::<f32>::new(&small_cfg(64, 24), 3).unwrap();
        let out = model.forward(&Tensor4::zeros([2, 3, 64, 64])).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn batch_concatenation_is_independent() {
        let model = FingertipNet::<f32>::new(&small_cfg(64, 8), 2).unwrap();
        let a = random_batch(2, 64, 10);
        let b = random_batch(3, 64, 11);
        let ab = Tensor4::concat(&[&a, &b]).unwrap();
        let oa = model.forward(&a).unwrap();
        let ob = model.forward(&b).unwrap();
        let oab = model.forward(&ab).unwrap();
        let cat: Vec<f32> = oa.class_scores.iter().chain(&ob.class_scores).copied().collect();
        for (x, y) in oab.class_scores.iter().zip(&cat) {
            assert!((x - y).abs() <= 1e-5);
        }
        let cat: Vec<f32> = oa.offsets.iter().chain(&ob.offsets).copied().collect();
        for (x, y) in oab.offsets.iter().zip(&cat) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let x = random_batch(1, 64, 4);
        let a = FingertipNet::<f32>::new(&small_cfg(64, 4), 9).unwrap();
        let b = FingertipNet::<f32>::new(&small_cfg(64, 4), 9).unwrap();
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_eq!(a.forward(&x).unwrap(), a.forward(&x).unwrap());
        let c = FingertipNet::<f32>::new(&small_cfg(64, 4), 10).unwrap();
        assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
    }

    /// Whole-network finite differences on a handful of parameters per tensor.
    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = small_cfg(64, 4);
        let mut model = FingertipNet::<f64>::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 2 * 3 * 64 * 64;
        let x = Tensor4::from_vec([2, 3, 64, 64], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (out, tape) = model.forward_train(&x).unwrap();
        let mut probe = HeadOutputs::<f64>::zeros(out.batch, out.classes);
        probe.class_scores.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        probe.offsets.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let objective = |o: &HeadOutputs<f64>| -> f64 {
            o.class_scores.iter().zip(&probe.class_scores).map(|(a, b)| a * b).sum::<f64>()
                + o.offsets.iter().zip(&probe.offsets).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = model.backward(tape, &probe).unwrap();
        let h = 1e-7;
        for t in 0..grads.len() {
            assert!(grads[t].iter().any(|g| *g != 0.0), "tensor {t} has a dead gradient");
            let len = grads[t].len();
            for i in [0, len / 3, len - 1] {
                let orig = model.params()[t][i];
                model.params_mut()[t][i] = orig + h;
                let fp = objective(&model.forward(&x).unwrap());
                model.params_mut()[t][i] = orig - h;
                let fm = objective(&model.forward(&x).unwrap());
                model.params_mut()[t][i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let g = grads[t][i];
                assert!(
                    (fd - g).abs() <= 1e-6 + 1e-4 * fd.abs().max(g.abs()),
                    "tensor {t} index {i}: fd {fd} vs analytic {g}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = FingertipNet::<f32>::new(&small_cfg(64, 6), 4).unwrap();
        save_checkpoint(&model, &path, Some(4)).unwrap();
        let (loaded, cfg) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(&cfg, model.config());
        let x = random_batch(2, 64, 8);
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        let meta = read_checkpoint_meta(&path).unwrap();
        assert_eq!(meta.seed, Some(4));
        assert_eq!(meta.anchor_count, 6);
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = FingertipNet::<f32>::new(&small_cfg(64, 6), 4).unwrap();
        save_checkpoint(&model, &path, None).unwrap();

        match load_checkpoint_for_grid::<f32>(&path, 24, 64) {
            Err(Error::Incompatible(_)) => {}
            other => panic!("expected incompatibility, got {:?}", other.err()),
        }

        let side = sidecar_path(&path);
        let text = fs::read_to_string(&side).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
        fs::write(&side, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Incompatible(_))));

        fs::remove_file(&side).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::MissingSidecar(p)) => assert_eq!(p, side),
            other => panic!("expected missing sidecar, got {:?}", other.err()),
        }
    }

    #[test]
    fn custom_backbone_must_honor_stride() {
        let cfg = ModelConfig {
            backbone: BackboneKind::Pluggable,
            ..small_cfg(64, 4)
        };
        assert!(FingertipNet::<f32>::new(&cfg, 0).is_err());
        let shallow: Vec<Box<dyn Layer<f32>>> = vec![Box::new(Conv2d::new(3, 8, 3, 2, 1, Activation::Relu))];
        assert!(FingertipNet::with_backbone(&cfg, Backbone::custom(shallow, 8), 0).is_err());
        let deep: Vec<Box<dyn Layer<f32>>> = (0..5)
            .map(|i| {
                let mut c = Conv2d::<f32>::new(if i == 0 { 3 } else { 8 }, 8, 3, 2, 1, Activation::Relu);
                c.weight.iter_mut().for_each(|w| *w = 0.01);
                Box::new(c) as Box<dyn Layer<f32>>
            })
            .collect();
        let model = FingertipNet::with_backbone(&cfg, Backbone::custom(deep, 8), 0).unwrap();
        assert_eq!(model.forward(&random_batch(1, 64, 0)).unwrap().class_scores.len(), 25);
    }
}
