use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::nn::{
    Activation, BatchNorm, Conv2d, ConvTranspose2d, InceptionResBlock, Init, Linear, Mode,
    ParamStore,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Generator conditioned on an encoded batch of random real images.
    Randgan,
    /// Plain DCGAN generator, the baseline.
    Anogan,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Randgan => "randgan",
            Variant::Anogan => "anogan",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "randgan" => Ok(Variant::Randgan),
            "anogan" => Ok(Variant::Anogan),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Layer sizes shared by both variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanArch {
    /// Square image side; a power of two of at least 8.
    pub image_size: usize,
    pub latent_dim: usize,
    /// Generator channels at the 4x4 projection; halved after every upsampling.
    pub gen_width: usize,
    /// Discriminator channels of the first block; doubled per block.
    pub disc_width: usize,
    /// Channels of the first context-encoder stage.
    pub context_width: usize,
    /// Length of the encoded context vector.
    pub context_dim: usize,
    /// 1-based discriminator block whose activations define the feature map f.
    pub feature_tap: usize,
    /// Inception/residual blocks in the RANDGAN trunk (at 4x4 and after each
    /// non-final upsampling stage, up to this many).
    pub trunk_blocks: usize,
}

impl Default for GanArch {
    fn default() -> Self {
        Self::full()
    }
}

impl GanArch {
    /// Full 128x128 profile.
    pub fn full() -> Self {
        Self {
            image_size: 128,
            latent_dim: 100,
            gen_width: 256,
            disc_width: 32,
            context_width: 8,
            context_dim: 64,
            feature_tap: 3,
            trunk_blocks: 3,
        }
    }

    /// Reduced 32x32 profile for desk-scale runs.
    pub fn reduced() -> Self {
        Self {
            image_size: 32,
            latent_dim: 100,
            gen_width: 64,
            disc_width: 16,
            context_width: 8,
            context_dim: 32,
            feature_tap: 3,
            trunk_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size {} must be a power of two >= 8",
                self.image_size
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.gen_width < 4
            || self.disc_width == 0
            || self.context_width < 4
            || self.context_dim == 0
        {
            return Err(Error::Config(
                "gan widths must be positive (gen and context widths >= 4)".into(),
            ));
        }
        if !(1..=4).contains(&self.feature_tap) {
            return Err(Error::Config(format!(
                "feature_tap {} must lie in 1..=4",
                self.feature_tap
            )));
        }
        Ok(())
    }

    /// Upsampling stages from 4x4 to the image size.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    fn gen_channels(&self, stage: usize) -> usize {
        (self.gen_width >> stage).max(4)
    }
}

fn dcgan_init() -> Init {
    Init::Normal {
        mean: 0.0,
        std: 0.02,
    }
}

/// Context encoder: two inception/residual stages with pooling, global
/// average pooling and a linear map to `context_dim`, then a mean over the
/// batch so the result does not depend on image order.
#[derive(Debug, Clone)]
struct ContextEncoder {
    blocks: Vec<InceptionResBlock>,
    out: Linear,
}

impl ContextEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, arch: &GanArch) -> Result<Self> {
        let w = arch.context_width;
        let act = Activation::LeakyRelu;
        let blocks = vec![
            InceptionResBlock::new(store, "g.ctx.inc0", 1, w, dcgan_init(), false, act)?,
            InceptionResBlock::new(store, "g.ctx.inc1", w, 2 * w, dcgan_init(), false, act)?,
        ];
        let out = Linear::new(
            store,
            "g.ctx.out",
            2 * w,
            arch.context_dim,
            dcgan_init(),
            true,
        );
        Ok(Self { blocks, out })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = images;
        for b in &self.blocks {
            h = b.forward(g, store, h, mode)?;
            h = g.max_pool2(h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let per_image = self.out.forward(g, store, pooled, mode)?;
        g.mean_rows(per_image)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    deconv: ConvTranspose2d,
    norm: Option<BatchNorm>,
    block: Option<InceptionResBlock>,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub arch: GanArch,
    pub variant: Variant,
    pub store: ParamStore<T>,
    encoder: Option<ContextEncoder>,
    proj_z: Linear,
    proj_ctx: Option<Linear>,
    proj_norm: BatchNorm,
    proj_block: Option<InceptionResBlock>,
    stages: Vec<UpStage>,
}

pub fn build_generator<T: Scalar>(
    arch: &GanArch,
    variant: Variant,
    seed: u64,
) -> Result<Generator<T>> {
    arch.validate()?;
    let mut store = ParamStore::new(seed);
    let randgan = variant == Variant::Randgan;
    let encoder = if randgan {
        Some(ContextEncoder::new(&mut store, arch)?)
    } else {
        None
    };
    let c0 = arch.gen_channels(0);
    // The first projection acts on concat[z, ctx]; it is split into a z part
    // (shared by both variants, so both start from the same weights) and a
    // context part.
    let proj_z = Linear::new(
        &mut store,
        "g.proj_z",
        arch.latent_dim,
        c0 * 16,
        dcgan_init(),
        true,
    );
    let proj_ctx = randgan.then(|| {
        Linear::new(
            &mut store,
            "g.proj_ctx",
            arch.context_dim,
            c0 * 16,
            dcgan_init(),
            false,
        )
    });
    let proj_norm = BatchNorm::new(&mut store, "g.proj_bn", c0, gamma_init());
    let mut blocks_left = if randgan { arch.trunk_blocks } else { 0 };
    let mut take_block =
        |store: &mut ParamStore<T>, name: &str, c: usize| -> Result<Option<InceptionResBlock>> {
            if blocks_left == 0 {
                return Ok(None);
            }
            blocks_left -= 1;
            Ok(Some(InceptionResBlock::new(
                store,
                name,
                c,
                c,
                dcgan_init(),
                true,
                Activation::Relu,
            )?))
        };
    let proj_block = take_block(&mut store, "g.inc0", c0)?;
    let n = arch.stages();
    let mut stages = Vec::with_capacity(n);
    let mut cin = c0;
    for s in 1..=n {
        let last = s == n;
        let cout = if last { 1 } else { arch.gen_channels(s) };
        let deconv = ConvTranspose2d::new(
            &mut store,
            &format!("g.up{s}"),
            cin,
            cout,
            4,
            2,
            1,
            dcgan_init(),
            last,
        );
        let norm =
            (!last).then(|| BatchNorm::new(&mut store, &format!("g.up{s}_bn"), cout, gamma_init()));
        let block = if last {
            None
        } else {
            take_block(&mut store, &format!("g.inc{s}"), cout)?
        };
        stages.push(UpStage {
            deconv,
            norm,
            block,
        });
        cin = cout;
    }
    Ok(Generator {
        arch: arch.clone(),
        variant,
        store,
        encoder,
        proj_z,
        proj_ctx,
        proj_norm,
        proj_block,
        stages,
    })
}

fn gamma_init() -> Init {
    Init::Normal {
        mean: 1.0,
        std: 0.02,
    }
}

impl<T: Scalar> Generator<T> {
    /// Encodes a `[b, 1, s, s]` batch of real images to a `[1, context_dim]` vector.
    /// Errors for the baseline variant, which has no encoder.
    pub fn encode(&self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<Var> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config("the anogan generator has no context encoder".into()))?;
        let (_, c, h, w) = g.value(images).dims4()?;
        let s = self.arch.image_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "context images must be [b, 1, {s}, {s}], got c={c} {h}x{w}"
            )));
        }
        enc.forward(g, &self.store, images, mode)
    }

    /// Maps `z` `[n, d]` (and for RANDGAN an encoded context `[1, context_dim]`)
    /// to images `[n, 1, s, s]` in `[-1, 1]`. The baseline ignores `context`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        context: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        let st = &self.store;
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.arch.latent_dim {
            return Err(Error::Shape(format!(
                "z must be [n, {}], got {zs:?}",
                self.arch.latent_dim
            )));
        }
        let n = zs[0];
        let mut h = self.proj_z.forward(g, st, z, mode)?;
        if let Some(pc) = &self.proj_ctx {
            let ctx = context
                .ok_or_else(|| Error::Config("randgan forward needs an encoded context".into()))?;
            let c = pc.forward(g, st, ctx, mode)?;
            let c = g.broadcast_rows(c, n)?;
            h = g.add(h, c)?;
        }
        let c0 = self.arch.gen_channels(0);
        h = g.reshape(h, &[n, c0, 4, 4])?;
        h = self.proj_norm.forward(g, st, h, mode)?;
        h = g.relu(h);
        if let Some(b) = &self.proj_block {
            h = b.forward(g, st, h, mode)?;
        }
        for stage in &self.stages {
            h = stage.deconv.forward(g, st, h, mode)?;
            match &stage.norm {
                Some(bn) => {
                    h = bn.forward(g, st, h, mode)?;
                    h = g.relu(h);
                }
                None => h = g.tanh(h),
            }
            if let Some(b) = &stage.block {
                h = b.forward(g, st, h, mode)?;
            }
        }
        Ok(h)
    }

    /// Evaluation-mode images for latent codes `z` `[n, d]` and, for RANDGAN,
    /// a precomputed context vector of length `context_dim`.
    pub fn generate(&self, z: &Tensor<T>, context: Option<&[T]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let ctx = match (self.variant, context) {
            (Variant::Randgan, Some(c)) => Some(g.constant(self.context_tensor(c)?)),
            _ => None,
        };
        let y = self.forward(&mut g, zv, ctx, Mode::EVAL)?;
        Ok(g.value(y).clone())
    }

    /// Encodes real images `[b, 1, s, s]` to a context vector in evaluation mode.
    pub fn encode_context(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let c = self.encode(&mut g, x, Mode::EVAL)?;
        Ok(g.value(c).data().to_vec())
    }

    pub fn context_tensor(&self, c: &[T]) -> Result<Tensor<T>> {
        if c.len() != self.arch.context_dim {
            return Err(Error::Shape(format!(
                "context has {} values, model expects {}",
                c.len(),
                self.arch.context_dim
            )));
        }
        Tensor::from_vec(&[1, c.len()], c.to_vec())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub arch: GanArch,
    pub store: ParamStore<T>,
    blocks: Vec<Conv2d>,
    head: Linear,
}

pub fn build_discriminator<T: Scalar>(arch: &GanArch, seed: u64) -> Result<Discriminator<T>> {
    arch.validate()?;
    let mut store = ParamStore::new(seed);
    let mut blocks = Vec::with_capacity(4);
    let (mut cin, mut side) = (1, arch.image_size);
    for b in 0..4 {
        let cout = arch.disc_width << b;
        // stride-2 while there is room to halve, then shape-preserving 3x3
        let conv = if side >= 2 {
            side /= 2;
            Conv2d::new(
                &mut store,
                &format!("d.conv{}", b + 1),
                cin,
                cout,
                4,
                2,
                1,
                dcgan_init(),
                true,
            )
        } else {
            Conv2d::new(
                &mut store,
                &format!("d.conv{}", b + 1),
                cin,
                cout,
                3,
                1,
                1,
                dcgan_init(),
                true,
            )
        };
        blocks.push(conv);
        cin = cout;
    }
    let head = Linear::new(
        &mut store,
        "d.head",
        cin * side * side,
        1,
        dcgan_init(),
        true,
    );
    Ok(Discriminator {
        arch: arch.clone(),
        store,
        blocks,
        head,
    })
}

impl<T: Scalar> Discriminator<T> {
    /// Returns `(logits [n, 1], features [n, k])`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let (n, c, h, w) = g.value(x).dims4()?;
        let s = self.arch.image_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "discriminator input must be [n, 1, {s}, {s}], got c={c} {h}x{w}"
            )));
        }
        let mut a = x;
        let mut feat = None;
        for (i, conv) in self.blocks.iter().enumerate() {
            a = conv.forward(g, &self.store, a, mode)?;
            a = g.leaky_relu(a, T::lit(0.2));
            if i + 1 == self.arch.feature_tap {
                let k = g.value(a).per_sample();
                feat = Some(g.reshape(a, &[n, k])?);
            }
        }
        let k = g.value(a).per_sample();
        let flat = g.reshape(a, &[n, k])?;
        let logits = self.head.forward(g, &self.store, flat, mode)?;
        Ok((logits, feat.expect("feature tap within 1..=4")))
    }

    /// Length of the feature vector f(x).
    pub fn feature_dim(&self) -> usize {
        let mut side = self.arch.image_size;
        for b in 0..self.arch.feature_tap {
            if side >= 2 {
                side /= 2;
            }
            if b + 1 == self.arch.feature_tap {
                return (self.arch.disc_width << b) * side * side;
            }
        }
        unreachable!("feature_tap validated")
    }

    /// Real-image probabilities and features for a `[n, 1, s, s]` batch.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let (logits, feat) = self.forward(&mut g, x, Mode::EVAL)?;
        let p = g.value(logits).data().iter().map(|&l| sigmoid(l)).collect();
        Ok((p, g.value(feat).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> GanArch {
        GanArch {
            image_size: 8,
            latent_dim: 4,
            gen_width: 8,
            disc_width: 4,
            context_width: 4,
            context_dim: 3,
            feature_tap: 3,
            trunk_blocks: 1,
        }
    }

    fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn generator_output_is_bounded_and_sized() {
        for arch in [tiny(), GanArch::reduced()] {
            for variant in [Variant::Randgan, Variant::Anogan] {
                let gen = build_generator::<f64>(&arch, variant, 1).unwrap();
                let s = arch.image_size;
                let ctx = gen
                    .encoder
                    .as_ref()
                    .map(|_| gen.encode_context(&normal(&[3, 1, s, s], 2)).unwrap());
                let y = gen
                    .generate(&normal(&[2, arch.latent_dim], 3), ctx.as_deref())
                    .unwrap();
                assert_eq!(y.shape(), &[2, 1, s, s]);
                assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn discriminator_blocks_handle_tiny_images() {
        let d = build_discriminator::<f64>(&tiny(), 0).unwrap();
        let (p, f) = d.discriminate(&normal(&[3, 1, 8, 8], 1)).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f.shape(), &[3, d.feature_dim()]);
        let full = build_discriminator::<f32>(&GanArch::full(), 0).unwrap();
        assert_eq!(full.feature_dim(), 128 * 16 * 16);
    }

    #[test]
    fn bad_arch_is_rejected() {
        assert!(GanArch {
            image_size: 48,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GanArch {
            feature_tap: 5,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(GanArch {
            latent_dim: 0,
            ..tiny()
        }
        .validate()
        .is_err());
    }
}
