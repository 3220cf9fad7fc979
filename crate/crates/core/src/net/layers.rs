use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamStore;
use crate::tensor::{Graph, Tensor, VarId};

/// Parameter construction context: the store being filled and the seeded
/// generator that makes initialization reproducible.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        Tensor::from_vec(shape, data)
    }
}

/// Forward context: the graph being recorded and the parameters read.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub s: &'a ParamStore,
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// He-normal initialised convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        Self::with_init(init, name, cin, cout, k, stride, std, bias.then_some(0.0))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        std: f32,
        bias: Option<f32>,
    ) -> Self {
        let wt = init.normal(&[cout, cin, k, k], std);
        let w = init.store.add(format!("{name}.weight"), wt);
        let b = bias.map(|v| init.store.add(format!("{name}.bias"), Tensor::full(&[cout], v)));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        let w = cx.s.var(cx.g, self.w);
        let b = self.b.map(|b| cx.s.var(cx.g, b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub fn gn_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 2)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            gamma: init
                .store
                .add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: init
                .store
                .add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: gn_groups(channels),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        let gamma = cx.s.var(cx.g, self.gamma);
        let beta = cx.s.var(cx.g, self.beta);
        cx.g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Convolution (no bias) → group norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    conv: Conv,
    norm: Norm,
    relu: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, k, stride, false),
            norm: Norm::new(init, &format!("{name}.norm"), cout),
            relu,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        let y = self.conv.forward(cx, x);
        let y = self.norm.forward(cx, y);
        if self.relu {
            cx.g.relu(y)
        } else {
            y
        }
    }
}
