use serde::{Deserialize, Serialize};

use crate::data::image::{ImageTensor, ValueRange};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Conv2d, ConvTranspose2d, InceptionResBlock, Init, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape of a U-Net with inception/residual blocks at every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetSpec {
    pub input_size: usize,
    /// Number of pooling stages; the bottleneck works at `input_size / 2^depth`.
    pub depth: usize,
    /// Channels of the first stage; each deeper stage doubles it.
    pub base_width: usize,
    pub batch_norm: bool,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            input_size: 256,
            depth: 3,
            base_width: 8,
            batch_norm: true,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width < 4 {
            return Err(Error::Config(
                "unet needs depth >= 1 and base_width >= 4".into(),
            ));
        }
        let f = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} = {f}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

/// Encoder/decoder segmentation network. Parameter groups are created in
/// encoder-to-head order, so a frozen prefix covers the encoder first.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub spec: UNetSpec,
    pub store: ParamStore<T>,
    encoder: Vec<InceptionResBlock>,
    bottleneck: InceptionResBlock,
    up: Vec<ConvTranspose2d>,
    decoder: Vec<InceptionResBlock>,
    head: Conv2d,
}

fn he(fan_in: usize) -> Init {
    Init::HeUniform { fan_in, gain: 1.0 }
}

pub fn build_unet<T: Scalar>(spec: &UNetSpec, seed: u64) -> Result<UNet<T>> {
    spec.validate()?;
    let mut store = ParamStore::new(seed);
    let act = Activation::Relu;
    let bn = spec.batch_norm;
    let mut encoder = Vec::with_capacity(spec.depth);
    let mut cin = 1;
    for s in 0..spec.depth {
        let w = spec.width(s);
        encoder.push(InceptionResBlock::new(
            &mut store,
            &format!("enc{s}"),
            cin,
            w,
            he(cin * 9),
            bn,
            act,
        )?);
        cin = w;
    }
    let wb = spec.width(spec.depth);
    let bottleneck =
        InceptionResBlock::new(&mut store, "bottleneck", cin, wb, he(cin * 9), bn, act)?;
    let mut up = Vec::with_capacity(spec.depth);
    let mut decoder = Vec::with_capacity(spec.depth);
    let mut below = wb;
    for s in (0..spec.depth).rev() {
        let w = spec.width(s);
        up.push(ConvTranspose2d::new(
            &mut store,
            &format!("up{s}"),
            below,
            w,
            2,
            2,
            0,
            he(below),
            true,
        ));
        decoder.push(InceptionResBlock::new(
            &mut store,
            &format!("dec{s}"),
            2 * w,
            w,
            he(2 * w * 9),
            bn,
            act,
        )?);
        below = w;
    }
    let head = Conv2d::same(&mut store, "head", below, 1, 1, he(below));
    Ok(UNet {
        spec: spec.clone(),
        store,
        encoder,
        bottleneck,
        up,
        decoder,
        head,
    })
}

impl<T: Scalar> UNet<T> {
    /// Logits `[n, 1, s, s]` for a `[n, 1, s, s]` input in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = &self.store;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(g, s, h, mode)?;
            skips.push(h);
            h = g.max_pool2(h)?;
        }
        h = self.bottleneck.forward(g, s, h, mode)?;
        for (up, block) in self.up.iter().zip(&self.decoder) {
            let u = up.forward(g, s, h, mode)?;
            let skip = skips.pop().expect("one skip per stage");
            let cat = g.concat(&[u, skip])?;
            h = block.forward(g, s, cat, mode)?;
        }
        self.head.forward(g, s, h, mode)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.weight_count()
    }

    pub fn group_count(&self) -> usize {
        self.store.group_count()
    }

    /// Soft masks for a batch of images, in input order.
    pub fn predict_masks(&self, images: &[ImageTensor<T>]) -> Result<Vec<ImageTensor<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.check_inputs(images)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let y = self.forward(&mut g, x, Mode::EVAL)?;
        let probs = g.value(y).map(crate::graph::sigmoid);
        (0..images.len())
            .map(|i| ImageTensor::from_batch(&probs, i, ValueRange::UNIT))
            .collect()
    }

    /// Stacks images into a model batch after checking size and range.
    pub(crate) fn check_inputs(&self, images: &[ImageTensor<T>]) -> Result<Tensor<T>> {
        let s = self.spec.input_size;
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::Shape(format!(
                    "segmentation input must be {s}x{s}, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            if img.range() != ValueRange::UNIT {
                return Err(Error::Range(format!(
                    "segmentation input must be in [0, 1], got {:?}",
                    img.range()
                )));
            }
        }
        let parts: Vec<Tensor<T>> = images.iter().map(ImageTensor::to_tensor).collect();
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    }
}

pub fn predict_mask<T: Scalar>(model: &UNet<T>, img: &ImageTensor<T>) -> Result<ImageTensor<T>> {
    Ok(model.predict_masks(std::slice::from_ref(img))?.remove(0))
}
