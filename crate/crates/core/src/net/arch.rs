//! Backbones, pyramid necks and task heads.

use super::layers::{Conv, ConvNorm, Ctx, Init};
use super::spec::{BackboneKind, NeckKind};
use crate::tensor::VarId;

#[derive(Clone, Debug)]
struct BasicBlock {
    a: ConvNorm,
    b: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            a: ConvNorm::new(init, &format!("{name}.conv1"), cin, cout, 3, stride, true),
            b: ConvNorm::new(init, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| {
                ConvNorm::new(init, &format!("{name}.down"), cin, cout, 1, stride, false)
            }),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        let y = self.a.forward(cx, x);
        let y = self.b.forward(cx, y);
        let s = match &self.shortcut {
            Some(sc) => sc.forward(cx, x),
            None => x,
        };
        let y = cx.g.add(y, s);
        cx.g.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    a: ConvNorm,
    b: ConvNorm,
    c: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl Bottleneck {
    fn new(init: &mut Init, name: &str, cin: usize, mid: usize, stride: usize) -> Self {
        let cout = mid * 4;
        Self {
            a: ConvNorm::new(init, &format!("{name}.conv1"), cin, mid, 1, 1, true),
            b: ConvNorm::new(init, &format!("{name}.conv2"), mid, mid, 3, stride, true),
            c: ConvNorm::new(init, &format!("{name}.conv3"), mid, cout, 1, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| {
                ConvNorm::new(init, &format!("{name}.down"), cin, cout, 1, stride, false)
            }),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        let y = self.a.forward(cx, x);
        let y = self.b.forward(cx, y);
        let y = self.c.forward(cx, y);
        let s = match &self.shortcut {
            Some(sc) => sc.forward(cx, x),
            None => x,
        };
        let y = cx.g.add(y, s);
        cx.g.relu(y)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
    Plain(ConvNorm),
}

impl Block {
    fn forward(&self, cx: &mut Ctx, x: VarId) -> VarId {
        match self {
            Block::Basic(b) => b.forward(cx, x),
            Block::Bottleneck(b) => b.forward(cx, x),
            Block::Plain(b) => b.forward(cx, x),
        }
    }
}

/// Feature extractor producing maps at strides 4, 8, 16 and 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Vec<ConvNorm>,
    max_pool: bool,
    stages: Vec<Vec<Block>>,
    channels: [usize; 4],
}

impl Backbone {
    pub fn new(kind: BackboneKind, init: &mut Init) -> Self {
        match kind {
            BackboneKind::Resnet18 | BackboneKind::Resnet50 => {
                let stem = vec![ConvNorm::new(init, "backbone.stem", 3, 64, 7, 2, true)];
                let (depths, bottleneck) = if kind == BackboneKind::Resnet18 {
                    ([2, 2, 2, 2], false)
                } else {
                    ([3, 4, 6, 3], true)
                };
                let mut cin = 64;
                let mut stages = Vec::new();
                let mut channels = [0; 4];
                for (si, &depth) in depths.iter().enumerate() {
                    let width = 64 << si;
                    let mut blocks = Vec::new();
                    for bi in 0..depth {
                        let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                        let name = format!("backbone.layer{}.{bi}", si + 1);
                        if bottleneck {
                            blocks.push(Block::Bottleneck(Bottleneck::new(
                                init, &name, cin, width, stride,
                            )));
                            cin = width * 4;
                        } else {
                            blocks.push(Block::Basic(BasicBlock::new(
                                init, &name, cin, width, stride,
                            )));
                            cin = width;
                        }
                    }
                    channels[si] = cin;
                    stages.push(blocks);
                }
                Self {
                    stem,
                    max_pool: true,
                    stages,
                    channels,
                }
            }
            BackboneKind::Tiny => {
                let stem = vec![ConvNorm::new(init, "backbone.stem", 3, 16, 3, 2, true)];
                let widths = [32, 64, 96, 128];
                let mut cin = 16;
                let mut stages = Vec::new();
                for (si, &w) in widths.iter().enumerate() {
                    let name = format!("backbone.stage{}", si + 1);
                    let mut blocks = vec![Block::Plain(ConvNorm::new(
                        init,
                        &format!("{name}.down"),
                        cin,
                        w,
                        3,
                        2,
                        true,
                    ))];
                    if si < 2 {
                        blocks.push(Block::Basic(BasicBlock::new(
                            init,
                            &format!("{name}.block"),
                            w,
                            w,
                            1,
                        )));
                    }
                    cin = w;
                    stages.push(blocks);
                }
                Self {
                    stem,
                    max_pool: false,
                    stages,
                    channels: widths,
                }
            }
        }
    }

    /// Output channels at strides 4, 8, 16, 32.
    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// Returns the stride-4, 8, 16 and 32 feature maps.
    pub fn forward(&self, cx: &mut Ctx, x: VarId) -> [VarId; 4] {
        let mut y = x;
        for s in &self.stem {
            y = s.forward(cx, y);
        }
        if self.max_pool {
            y = cx.g.max_pool(y, 3, 2, 1);
        }
        let mut outs = [y; 4];
        for (si, stage) in self.stages.iter().enumerate() {
            for b in stage {
                y = b.forward(cx, y);
            }
            outs[si] = y;
        }
        outs
    }
}

/// Index into the backbone outputs for a stride in {4, 8, 16, 32}.
fn backbone_slot(stride: usize) -> usize {
    stride.trailing_zeros() as usize - 2
}

/// Feature pyramid neck (FPN, optionally with the PAFPN bottom-up path).
#[derive(Clone, Debug)]
pub struct Neck {
    kind: NeckKind,
    slots: Vec<usize>,
    lateral: Vec<Conv>,
    output: Vec<Conv>,
    down: Vec<Conv>,
    pa_output: Vec<Conv>,
    extra: Vec<Conv>,
}

impl Neck {
    pub fn new(
        kind: NeckKind,
        backbone_channels: [usize; 4],
        strides: &[usize],
        channels: usize,
        init: &mut Init,
    ) -> Self {
        let slots: Vec<usize> = strides
            .iter()
            .filter(|s| **s <= 32)
            .map(|s| backbone_slot(*s))
            .collect();
        let n_extra = strides.len() - slots.len();
        let lateral = slots
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Conv::new(init, &format!("neck.lateral{i}"), backbone_channels[s], channels, 1, 1, true)
            })
            .collect();
        let output = (0..slots.len())
            .map(|i| Conv::new(init, &format!("neck.fpn{i}"), channels, channels, 3, 1, true))
            .collect();
        let (down, pa_output) = if kind == NeckKind::Pafpn {
            (
                (1..slots.len())
                    .map(|i| Conv::new(init, &format!("neck.down{i}"), channels, channels, 3, 2, true))
                    .collect(),
                (1..slots.len())
                    .map(|i| Conv::new(init, &format!("neck.pafpn{i}"), channels, channels, 3, 1, true))
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let extra = (0..n_extra)
            .map(|i| Conv::new(init, &format!("neck.extra{i}"), channels, channels, 3, 2, true))
            .collect();
        Self {
            kind,
            slots,
            lateral,
            output,
            down,
            pa_output,
            extra,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, feats: &[VarId; 4]) -> Vec<VarId> {
        let lat: Vec<VarId> = self
            .slots
            .iter()
            .zip(&self.lateral)
            .map(|(&s, conv)| conv.forward(cx, feats[s]))
            .collect();
        // top-down
        let mut td = lat.clone();
        for i in (0..td.len() - 1).rev() {
            let (_, _, h, w) = cx.g.value(td[i]).dims4();
            let up = cx.g.resize(td[i + 1], h, w, false);
            td[i] = cx.g.add(lat[i], up);
        }
        let mut outs: Vec<VarId> = td
            .iter()
            .zip(&self.output)
            .map(|(&t, conv)| conv.forward(cx, t))
            .collect();
        if self.kind == NeckKind::Pafpn {
            for i in 1..outs.len() {
                let d = self.down[i - 1].forward(cx, outs[i - 1]);
                outs[i] = cx.g.add(outs[i], d);
            }
            for i in 1..outs.len() {
                outs[i] = self.pa_output[i - 1].forward(cx, outs[i]);
            }
        }
        let mut last = *outs.last().expect("at least one backbone level");
        for (i, conv) in self.extra.iter().enumerate() {
            let x = if i == 0 { last } else { cx.g.relu(last) };
            last = conv.forward(cx, x);
            outs.push(last);
        }
        outs
    }
}

/// Shared single-stage detection head applied to every pyramid level.
#[derive(Clone, Debug)]
pub struct DetHead {
    cls_tower: Vec<ConvNorm>,
    reg_tower: Vec<ConvNorm>,
    cls_out: Conv,
    reg_out: Conv,
}

/// Prior probability used to initialise the classification bias.
pub const CLS_PRIOR: f32 = 0.01;

impl DetHead {
    pub fn new(
        init: &mut Init,
        channels: usize,
        classes: usize,
        anchors: usize,
        depth: usize,
    ) -> Self {
        let tower = |init: &mut Init, name: &str| {
            (0..depth)
                .map(|i| ConvNorm::new(init, &format!("det.{name}{i}"), channels, channels, 3, 1, true))
                .collect::<Vec<_>>()
        };
        let cls_tower = tower(init, "cls_tower");
        let reg_tower = tower(init, "reg_tower");
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        Self {
            cls_tower,
            reg_tower,
            cls_out: Conv::with_init(init, "det.cls_out", channels, anchors * classes, 3, 1, 0.01, Some(prior_bias)),
            reg_out: Conv::with_init(init, "det.reg_out", channels, anchors * 4, 3, 1, 0.01, Some(0.0)),
        }
    }

    /// Class logits (N×A·C×H×W) and box deltas (N×A·4×H×W) for one level.
    pub fn forward(&self, cx: &mut Ctx, x: VarId) -> (VarId, VarId) {
        let mut c = x;
        for l in &self.cls_tower {
            c = l.forward(cx, c);
        }
        let mut r = x;
        for l in &self.reg_tower {
            r = l.forward(cx, r);
        }
        (self.cls_out.forward(cx, c), self.reg_out.forward(cx, r))
    }
}

/// Upsampling decoder from the finest pyramid level to input resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    block1: ConvNorm,
    block2: ConvNorm,
    classifier: Conv,
}

impl SegHead {
    pub fn new(init: &mut Init, channels: usize, classes: usize) -> Self {
        let mid = channels / 2;
        Self {
            block1: ConvNorm::new(init, "seg.block1", channels, mid, 3, 1, true),
            block2: ConvNorm::new(init, "seg.block2", mid, mid, 3, 1, true),
            classifier: Conv::new(init, "seg.classifier", mid, classes, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, finest: VarId, input_hw: (usize, usize)) -> VarId {
        let y = self.block1.forward(cx, finest);
        let (_, _, h, w) = cx.g.value(y).dims4();
        let y = cx.g.resize(y, (2 * h).min(input_hw.0), (2 * w).min(input_hw.1), true);
        let y = self.block2.forward(cx, y);
        let (_, _, h, w) = cx.g.value(y).dims4();
        let y = cx.g.resize(y, (2 * h).min(input_hw.0), (2 * w).min(input_hw.1), true);
        let y = self.classifier.forward(cx, y);
        cx.g.resize(y, input_hw.0, input_hw.1, true)
    }
}
