use std::sync::Arc;

use super::kernels::{self, ConvGeom, GroupStats};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Identifies one parameter tensor inside one parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

enum Op {
    Input,
    Param(ParamKey),
    Conv {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        geom: ConvGeom,
        cout: usize,
    },
    Add(VarId, VarId),
    Relu(VarId),
    GroupNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        stats: GroupStats,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    Resize {
        x: VarId,
        bilinear: bool,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is propagated to it.
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is tracked (used by gradient probes).
    pub fn input_tracked(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, key: ParamKey, value: Arc<Tensor>, trainable: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Param(key),
            needs_grad: trainable,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: VarId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], cin, "conv input channels {} != weight {}", cin, ws[1]);
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let cout = ws[0];
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            cout,
            bias.as_deref(),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[n, cout, ho, wo], out),
            Op::Conv { x, w, b, geom, cout },
            needs,
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn group_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, groups: usize) -> VarId {
        let xv = self.value(x);
        let dims = xv.dims4();
        assert_eq!(dims.1 % groups, 0, "channels must divide into groups");
        let (y, stats) = kernels::group_norm_forward(
            xv.data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::from_vec(xv.shape(), y),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        )
    }

    pub fn max_pool(&mut self, x: VarId, k: usize, stride: usize, pad: usize) -> VarId {
        let xv = self.value(x);
        let dims = xv.dims4();
        let (out, argmax, ho, wo) = kernels::max_pool_forward(xv.data(), dims, k, stride, pad);
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[dims.0, dims.1, ho, wo], out),
            Op::MaxPool { x, argmax },
            needs,
        )
    }

    /// Resample spatially to `(h, w)`, nearest or bilinear (half-pixel).
    pub fn resize(&mut self, x: VarId, h: usize, w: usize, bilinear: bool) -> VarId {
        let xv = self.value(x);
        let dims = xv.dims4();
        if (dims.2, dims.3) == (h, w) {
            return x;
        }
        let out = kernels::resize_forward(xv.data(), dims, h, w, bilinear);
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(&[dims.0, dims.1, h, w], out),
            Op::Resize { x, bilinear },
            needs,
        )
    }

    /// Reverse-mode sweep seeded with `d(loss)/d(var)` for each seed.
    pub fn backward(&self, seeds: &[(VarId, &Tensor)]) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                self.value(*v).shape(),
                g.shape(),
                "seed gradient shape mismatch"
            );
            accumulate(&mut grads[v.0], (*g).clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(dy);
                }
                Op::Conv { x, w, b, geom, cout } => {
                    let xv = self.value(*x);
                    let n = xv.dims4().0;
                    let mut dw = self
                        .needs(*w)
                        .then(|| Tensor::zeros(self.value(*w).shape()));
                    let mut db = b
                        .filter(|b| self.needs(*b))
                        .map(|b| Tensor::zeros(self.value(b).shape()));
                    let dx = kernels::conv2d_backward(
                        xv.data(),
                        n,
                        geom,
                        self.value(*w).data(),
                        *cout,
                        dy.data(),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx));
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], dy);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let xv = self.value(*x);
                    let mut dg = self
                        .needs(*gamma)
                        .then(|| Tensor::zeros(self.value(*gamma).shape()));
                    let mut dbt = self
                        .needs(*beta)
                        .then(|| Tensor::zeros(self.value(*beta).shape()));
                    let dx = kernels::group_norm_backward(
                        xv.data(),
                        xv.dims4(),
                        *groups,
                        self.value(*gamma).data(),
                        stats,
                        dy.data(),
                        dg.as_mut().map(|t| t.data_mut()),
                        dbt.as_mut().map(|t| t.data_mut()),
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx));
                    }
                    if let Some(dg) = dg {
                        accumulate(&mut grads[gamma.0], dg);
                    }
                    if let Some(dbt) = dbt {
                        accumulate(&mut grads[beta.0], dbt);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (&g, &a) in dy.data().iter().zip(argmax) {
                        d[a as usize] += g;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Resize { x, bilinear } => {
                    let xv = self.value(*x);
                    let (_, _, oh, ow) = node.value.dims4();
                    let dx = kernels::resize_backward(dy.data(), xv.dims4(), oh, ow, *bilinear);
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), dx));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(k) => Some((k, i)),
                _ => None,
            })
            .collect();
        Grads { grads, params }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamKey, usize)>,
}

impl Grads {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(k, i)| self.grads[*i].as_ref().map(|g| (*k, g)))
    }
}
