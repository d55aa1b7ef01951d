use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::params::{Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;

/// How a forward pass treats normalisation layers and parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm uses batch statistics and records running-average updates.
    pub train: bool,
    /// Parameters are bound as trainable leaves.
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        grad: true,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        grad: false,
    };
    /// Training-mode statistics without parameter gradients.
    pub const TRAIN_NO_GRAD: Mode = Mode {
        train: true,
        grad: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, T::lit(0.2)),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        store.begin_group(name);
        let weight = store.add(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            init,
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                &[cout],
                Init::Zeros,
                ParamKind::Weight,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// Same-size convolution with an odd kernel.
    pub fn same<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        init: Init,
    ) -> Self {
        Self::new(store, name, cin, cout, kernel, 1, kernel / 2, init, true)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        store.begin_group(name);
        let weight = store.add(
            &format!("{name}.weight"),
            &[cin, cout, kernel, kernel],
            init,
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                &[cout],
                Init::Zeros,
                ParamKind::Weight,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        store.begin_group(name);
        let weight = store.add(
            &format!("{name}.weight"),
            &[fout, fin],
            init,
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                &format!("{name}.bias"),
                &[fout],
                Init::Zeros,
                ParamKind::Weight,
            )
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        gamma_init: Init,
    ) -> Self {
        store.begin_group(name);
        Self {
            gamma: store.add(
                &format!("{name}.gamma"),
                &[channels],
                gamma_init,
                ParamKind::Weight,
            ),
            beta: store.add(
                &format!("{name}.beta"),
                &[channels],
                Init::Zeros,
                ParamKind::Weight,
            ),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                &[channels],
                Init::Zeros,
                ParamKind::Buffer,
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                &[channels],
                Init::Ones,
                ParamKind::Buffer,
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma, mode.grad);
        let beta = g.param(store, self.beta, mode.grad);
        let eps = T::lit(self.eps);
        if mode.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, eps)?;
            let stats = stats.expect("batch statistics in training mode");
            let m = T::lit(self.momentum);
            let blend = |old: &[T], new: &[T]| -> Vec<T> {
                old.iter()
                    .zip(new)
                    .map(|(&o, &n)| (T::one() - m) * o + m * n)
                    .collect()
            };
            let rm = blend(store.value(self.running_mean).data(), &stats.mean);
            let rv = blend(store.value(self.running_var).data(), &stats.var_unbiased);
            let c = rm.len();
            g.push_buffer_update(self.running_mean, crate::Tensor::from_vec(&[c], rm)?);
            g.push_buffer_update(self.running_var, crate::Tensor::from_vec(&[c], rv)?);
            Ok(y)
        } else {
            let rm = store.value(self.running_mean).data().to_vec();
            let rv = store.value(self.running_var).data().to_vec();
            Ok(g.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps)?.0)
        }
    }
}

/// Parallel 1x1 / 3x3 / 5x5 convolution branches concatenated along channels,
/// summed with a shortcut (identity, or a 1x1 projection when channel counts
/// differ), optionally batch-normalised, then activated.
#[derive(Debug, Clone)]
pub struct InceptionResBlock {
    pub branch1: Conv2d,
    pub branch3: Conv2d,
    pub branch5: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
    pub out_channels: usize,
}

impl InceptionResBlock {
    /// Channel split of the three branches.
    pub fn branch_widths(out: usize) -> Result<(usize, usize, usize)> {
        if out < 3 {
            return Err(Error::Config(format!(
                "inception block needs at least 3 output channels, got {out}"
            )));
        }
        let side = (out / 4).max(1);
        Ok((side, out - 2 * side, side))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        init: Init,
        norm: bool,
        act: Activation,
    ) -> Result<Self> {
        let (w1, w3, w5) = Self::branch_widths(cout)?;
        let branch1 = Conv2d::same(store, &format!("{name}.b1"), cin, w1, 1, init);
        let branch3 = Conv2d::same(store, &format!("{name}.b3"), cin, w3, 3, init);
        let branch5 = Conv2d::same(store, &format!("{name}.b5"), cin, w5, 5, init);
        let shortcut =
            (cin != cout).then(|| Conv2d::same(store, &format!("{name}.proj"), cin, cout, 1, init));
        let norm = norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), cout, Init::Ones));
        Ok(Self {
            branch1,
            branch3,
            branch5,
            shortcut,
            norm,
            act,
            out_channels: cout,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let a = self.branch1.forward(g, store, x, mode)?;
        let b = self.branch3.forward(g, store, x, mode)?;
        let c = self.branch5.forward(g, store, x, mode)?;
        let cat = g.concat(&[a, b, c])?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, store, x, mode)?,
            None => x,
        };
        let mut y = g.add(cat, skip)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, store, y, mode)?;
        }
        Ok(self.act.apply(g, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn inception_block_keeps_spatial_size() {
        let mut store = ParamStore::<f64>::new(1);
        let block = InceptionResBlock::new(
            &mut store,
            "blk",
            2,
            8,
            Init::HeUniform {
                fan_in: 18,
                gain: 1.0,
            },
            false,
            Activation::Relu,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2, 6, 5], 0.5));
        let y = block.forward(&mut g, &store, x, Mode::EVAL).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 8, 6, 5]);
        assert!(InceptionResBlock::branch_widths(2).is_err());
    }

    #[test]
    fn batch_norm_train_mode_records_running_stats() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 2, Init::Ones);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap());
        let y = bn.forward(&mut g, &store, x, Mode::TRAIN).unwrap();
        let out = g.value(y).data().to_vec();
        assert!((out[0] + out[2]).abs() < 1e-9);
        let updates = g.take_buffer_updates();
        store.apply_buffer_updates(updates);
        let rm = store.value(bn.running_mean).data();
        assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
    }
}
