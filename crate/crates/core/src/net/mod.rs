//! Student/teacher networks: shared encoder (backbone + pyramid neck), a
//! single-stage detection head, an upsampling segmentation head, adaptive
//! distillation layers and the anchor machinery.

pub mod anchors;
mod arch;
mod checkpoint;
pub mod layers;
mod nms;
mod params;
mod spec;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use anchors::{assign_targets, decode, encode, generate_anchors, Anchor, AnchorAssignment, AnchorLabel};
pub use checkpoint::Checkpoint;
pub use nms::{decode_and_nms, nms, sigmoid, PostProcess};
pub use params::ParamStore;
pub use spec::{AnchorConfig, BackboneKind, NeckKind, NetworkSpec};

use arch::{Backbone, DetHead, Neck, SegHead};
use layers::{Conv, Ctx, Init};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::tensor::{Grads, Graph, Tensor, VarId};

/// Pyramid feature maps, finest level first; each is N×C×H_l×W_l.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<Arc<Tensor>>,
}

/// Raw detection-head outputs for a batch plus the anchors they refer to.
#[derive(Clone, Debug)]
pub struct DetectionOutput {
    /// Per level, N×(A·C)×H×W class logits.
    pub cls: Vec<Arc<Tensor>>,
    /// Per level, N×(A·4)×H×W box deltas.
    pub reg: Vec<Arc<Tensor>>,
    pub num_classes: usize,
    pub anchors_per_location: usize,
    /// Anchors of one image, all levels concatenated.
    pub anchors: Arc<Vec<Anchor>>,
}

/// Gather per-level N×(A·k)×H×W maps into an N×anchors×k layout.
pub fn flatten_levels(levels: &[&Tensor], a: usize, k: usize) -> Vec<f32> {
    let n = levels[0].dims4().0;
    let per_image: usize = levels
        .iter()
        .map(|t| {
            let (_, _, h, w) = t.dims4();
            h * w * a * k
        })
        .sum();
    let mut out = vec![0.0f32; n * per_image];
    for b in 0..n {
        let mut o = b * per_image;
        for t in levels {
            let (_, ch, h, w) = t.dims4();
            debug_assert_eq!(ch, a * k);
            let d = t.data();
            for y in 0..h {
                for x in 0..w {
                    for ai in 0..a {
                        for c in 0..k {
                            out[o] = d[((b * ch + ai * k + c) * h + y) * w + x];
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`flatten_levels`]: scatter an N×anchors×k buffer back to
/// tensors shaped like `shapes`.
pub fn unflatten_levels(flat: &[f32], shapes: &[&[usize]], a: usize, k: usize) -> Vec<Tensor> {
    let mut outs: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let n = shapes[0][0];
    let per_image: usize = shapes.iter().map(|s| s[2] * s[3] * a * k).sum();
    for b in 0..n {
        let mut o = b * per_image;
        for t in outs.iter_mut() {
            let (_, ch, h, w) = t.dims4();
            let d = t.data_mut();
            for y in 0..h {
                for x in 0..w {
                    for ai in 0..a {
                        for c in 0..k {
                            d[((b * ch + ai * k + c) * h + y) * w + x] = flat[o];
                            o += 1;
                        }
                    }
                }
            }
        }
    }
    outs
}

impl DetectionOutput {
    pub fn batch_size(&self) -> usize {
        self.cls[0].dims4().0
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// N×anchors×C class logits.
    pub fn flat_logits(&self) -> Vec<f32> {
        let refs: Vec<&Tensor> = self.cls.iter().map(|t| &**t).collect();
        flatten_levels(&refs, self.anchors_per_location, self.num_classes)
    }

    /// N×anchors×4 box deltas.
    pub fn flat_deltas(&self) -> Vec<f32> {
        let refs: Vec<&Tensor> = self.reg.iter().map(|t| &**t).collect();
        flatten_levels(&refs, self.anchors_per_location, 4)
    }

    pub fn image_logits(&self, n: usize) -> Vec<f32> {
        let per = self.num_anchors() * self.num_classes;
        self.flat_logits()[n * per..(n + 1) * per].to_vec()
    }

    pub fn image_deltas(&self, n: usize) -> Vec<[f32; 4]> {
        let per = self.num_anchors() * 4;
        self.flat_deltas()[n * per..(n + 1) * per]
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    }

    pub fn cls_grad_to_levels(&self, flat: &[f32]) -> Vec<Tensor> {
        let shapes: Vec<&[usize]> = self.cls.iter().map(|t| t.shape()).collect();
        unflatten_levels(flat, &shapes, self.anchors_per_location, self.num_classes)
    }

    pub fn reg_grad_to_levels(&self, flat: &[f32]) -> Vec<Tensor> {
        let shapes: Vec<&[usize]> = self.reg.iter().map(|t| t.shape()).collect();
        unflatten_levels(flat, &shapes, self.anchors_per_location, 4)
    }

    pub fn same_geometry(&self, other: &DetectionOutput) -> bool {
        self.num_classes == other.num_classes
            && self.anchors_per_location == other.anchors_per_location
            && self.anchors == other.anchors
            && self
                .cls
                .iter()
                .zip(&other.cls)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Graph handles for the detection head outputs.
#[derive(Clone, Debug)]
pub struct DetVars {
    pub cls: Vec<VarId>,
    pub reg: Vec<VarId>,
}

/// A recorded forward pass; keeps the graph so losses can be
/// back-propagated into the network parameters.
pub struct ForwardPass {
    pub graph: Graph,
    pub features: Vec<VarId>,
    pub det: Option<DetVars>,
    pub seg: Option<VarId>,
    pub input_hw: (usize, usize),
    anchors: Option<Arc<Vec<Anchor>>>,
    num_classes: usize,
    anchors_per_location: usize,
}

impl ForwardPass {
    pub fn features(&self) -> PyramidFeatures {
        PyramidFeatures {
            levels: self
                .features
                .iter()
                .map(|v| self.graph.shared_value(*v))
                .collect(),
        }
    }

    pub fn detection(&self) -> Option<DetectionOutput> {
        let det = self.det.as_ref()?;
        Some(DetectionOutput {
            cls: det.cls.iter().map(|v| self.graph.shared_value(*v)).collect(),
            reg: det.reg.iter().map(|v| self.graph.shared_value(*v)).collect(),
            num_classes: self.num_classes,
            anchors_per_location: self.anchors_per_location,
            anchors: Arc::clone(self.anchors.as_ref()?),
        })
    }

    /// N×classes×H×W segmentation logits.
    pub fn segmentation(&self) -> Option<&Tensor> {
        self.seg.map(|v| self.graph.value(v))
    }
}

/// Shared encoder plus task heads.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    store: ParamStore,
    backbone: Backbone,
    neck: Neck,
    det: Option<DetHead>,
    seg: Option<SegHead>,
}

impl Network {
    /// Deterministic construction from `(spec, seed)`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let backbone = Backbone::new(spec.backbone, &mut init);
        let neck = Neck::new(
            spec.neck,
            backbone.channels(),
            &spec.pyramid_strides,
            spec.neck_channels,
            &mut init,
        );
        let det = spec.has_head(Task::Detection).then(|| {
            DetHead::new(
                &mut init,
                spec.neck_channels,
                spec.det_classes,
                spec.anchors.per_location(),
                spec.tower_depth,
            )
        });
        let seg = spec
            .has_head(Task::Segmentation)
            .then(|| SegHead::new(&mut init, spec.neck_channels, spec.seg_classes));
        Ok(Self {
            spec: spec.clone(),
            seed,
            store,
            backbone,
            neck,
            det,
            seg,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    /// Run the encoder and the requested heads on an N×3×H×W batch.
    pub fn forward(&self, images: &Tensor, heads: &[Task]) -> Result<ForwardPass> {
        self.forward_in(Graph::new(), images, heads)
    }

    /// Like [`Network::forward`] but records into an existing graph, so
    /// several passes can share one backward sweep.
    pub fn forward_in(&self, mut graph: Graph, images: &Tensor, heads: &[Task]) -> Result<ForwardPass> {
        let (_, c, h, w) = images.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        for t in heads {
            if !self.spec.has_head(*t) {
                return Err(Error::InvalidInput(format!("network has no {t} head")));
            }
        }
        let x = graph.input(images.clone());
        let mut cx = Ctx {
            g: &mut graph,
            s: &self.store,
        };
        let c_feats = self.backbone.forward(&mut cx, x);
        let features = self.neck.forward(&mut cx, &c_feats);
        let det = match (&self.det, heads.contains(&Task::Detection)) {
            (Some(head), true) => {
                let (cls, reg) = features.iter().map(|f| head.forward(&mut cx, *f)).unzip();
                Some(DetVars { cls, reg })
            }
            _ => None,
        };
        let seg = match (&self.seg, heads.contains(&Task::Segmentation)) {
            (Some(head), true) => Some(head.forward(&mut cx, features[0], (h, w))),
            _ => None,
        };
        let anchors = det.as_ref().map(|_| {
            let sizes: Vec<(usize, usize)> = features
                .iter()
                .map(|f| {
                    let (_, _, fh, fw) = graph.value(*f).dims4();
                    (fh, fw)
                })
                .collect();
            Arc::new(
                generate_anchors(&sizes, &self.spec.pyramid_strides, &self.spec.anchors)
                    .into_iter()
                    .flatten()
                    .collect::<Vec<_>>(),
            )
        });
        Ok(ForwardPass {
            graph,
            features,
            det,
            seg,
            input_hw: (h, w),
            anchors,
            num_classes: self.spec.det_classes,
            anchors_per_location: self.spec.anchors.per_location(),
        })
    }

    /// Add parameter gradients from a backward sweep (no-op when frozen).
    pub fn accumulate(&mut self, grads: &Grads) {
        self.store.accumulate(grads);
    }

    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            seed: self.seed,
            iteration,
            tensors: self.store.to_map("model/"),
            meta: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::build(&ckpt.spec, ckpt.seed)?;
        net.store.load_map(&ckpt.tensors, "model/")?;
        Ok(net)
    }

    /// Load a checkpoint as a frozen (teacher) network.
    pub fn load_frozen(path: &std::path::Path) -> Result<Self> {
        let mut net = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        net.freeze();
        Ok(net)
    }
}

/// One 3×3 convolution per pyramid level mapping student channels onto a
/// teacher's channels.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    store: ParamStore,
    convs: Vec<Conv>,
    pub student_channels: usize,
    pub teacher_channels: usize,
}

pub fn build_adapters(student: &NetworkSpec, teacher: &NetworkSpec, seed: u64) -> Result<AdapterSet> {
    let levels = student.pyramid_strides.len();
    if levels != teacher.pyramid_strides.len() {
        return Err(Error::Shape(format!(
            "student has {levels} pyramid levels, teacher {}",
            teacher.pyramid_strides.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e25);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let convs = (0..levels)
        .map(|l| {
            Conv::new(
                &mut init,
                &format!("adapter{l}"),
                student.neck_channels,
                teacher.neck_channels,
                3,
                1,
                true,
            )
        })
        .collect();
    Ok(AdapterSet {
        store,
        convs,
        student_channels: student.neck_channels,
        teacher_channels: teacher.neck_channels,
    })
}

impl AdapterSet {
    pub fn len(&self) -> usize {
        self.convs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Adapt student pyramid features recorded in `g`.
    pub fn forward(&self, g: &mut Graph, feats: &[VarId]) -> Result<Vec<VarId>> {
        if feats.len() != self.convs.len() {
            return Err(Error::Shape(format!(
                "{} feature levels for {} adapters",
                feats.len(),
                self.convs.len()
            )));
        }
        let mut cx = Ctx { g, s: &self.store };
        Ok(self
            .convs
            .iter()
            .zip(feats)
            .map(|(c, f)| c.forward(&mut cx, *f))
            .collect())
    }

    pub fn accumulate(&mut self, grads: &Grads) {
        self.store.accumulate(grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, size: usize, salt: u32) -> Tensor {
        let len = n * 3 * size * size;
        Tensor::from_vec(
            &[n, 3, size, size],
            (0..len)
                .map(|i| ((i as u32).wrapping_mul(2_654_435_761).wrapping_add(salt) % 1000) as f32 / 500.0 - 1.0)
                .collect(),
        )
    }

    #[test]
    fn tiny_forward_shapes() {
        let spec = NetworkSpec::tiny();
        let net = Network::build(&spec, 0).unwrap();
        for size in [64, 96] {
            let pass = net
                .forward(&batch(2, size, 1), &[Task::Detection, Task::Segmentation])
                .unwrap();
            let feats = pass.features();
            let expect = spec.level_sizes(size, size);
            assert_eq!(feats.levels.len(), 5);
            for (f, (h, w)) in feats.levels.iter().zip(&expect) {
                assert_eq!(f.shape(), &[2, spec.neck_channels, *h, *w]);
            }
            let det = pass.detection().unwrap();
            let a = spec.anchors.per_location();
            assert_eq!(det.num_anchors(), expect.iter().map(|(h, w)| h * w * a).sum::<usize>());
            assert_eq!(pass.segmentation().unwrap().shape(), &[2, 6, size, size]);
        }
    }

    #[test]
    fn tiny_backbone_is_about_a_third_of_a_million_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        Backbone::new(BackboneKind::Tiny, &mut init);
        let n = store.num_params();
        assert!((250_000..350_000).contains(&n), "{n}");
    }

    #[test]
    fn same_seed_same_outputs() {
        let spec = NetworkSpec::tiny();
        let a = Network::build(&spec, 5).unwrap();
        let b = Network::build(&spec, 5).unwrap();
        assert_eq!(a.digest(), b.digest());
        let x = batch(1, 64, 2);
        let pa = a.forward(&x, &[Task::Detection]).unwrap();
        let pb = b.forward(&x, &[Task::Detection]).unwrap();
        assert_eq!(pa.detection().unwrap().flat_logits(), pb.detection().unwrap().flat_logits());
        assert_ne!(Network::build(&spec, 6).unwrap().digest(), a.digest());
    }

    #[test]
    fn absent_head_is_an_error() {
        let spec = NetworkSpec::tiny().with_heads(&[Task::Detection]);
        let net = Network::build(&spec, 0).unwrap();
        assert!(net.forward(&batch(1, 64, 0), &[Task::Segmentation]).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let t1 = Tensor::from_vec(&[2, 6, 4, 4], (0..192).map(|i| i as f32).collect());
        let t2 = Tensor::from_vec(&[2, 6, 2, 2], (0..48).map(|i| -(i as f32)).collect());
        let flat = flatten_levels(&[&t1, &t2], 3, 2);
        let back = unflatten_levels(&flat, &[t1.shape(), t2.shape()], 3, 2);
        assert_eq!(back, vec![t1.clone(), t2]);
        // first anchor of the first location of image 0 holds channels 0..2
        assert_eq!(flat[0], t1.data()[0]);
        assert_eq!(flat[1], t1.data()[16]);
    }

    #[test]
    fn adapters_map_to_teacher_shape() {
        let student = NetworkSpec::tiny();
        let teacher = NetworkSpec {
            neck: NeckKind::Pafpn,
            neck_channels: 48,
            ..NetworkSpec::tiny()
        };
        let adapters = build_adapters(&student, &teacher, 0).unwrap();
        let net = Network::build(&student, 0).unwrap();
        let tnet = Network::build(&teacher, 1).unwrap();
        let x = batch(1, 64, 9);
        let mut pass = net.forward(&x, &[]).unwrap();
        let tfeat = tnet.forward(&x, &[]).unwrap().features();
        let feats = pass.features.clone();
        let adapted = adapters.forward(&mut pass.graph, &feats).unwrap();
        for (a, t) in adapted.iter().zip(&tfeat.levels) {
            assert_eq!(pass.graph.value(*a).shape(), t.shape());
        }
        let mut short = NetworkSpec::tiny();
        short.pyramid_strides = vec![8, 16, 32];
        assert!(build_adapters(&short, &teacher, 0).is_err());
    }
}

#[cfg(test)]
mod size_tests {
    use super::*;

    #[test]
    fn teacher_student_parameter_ratio() {
        let s = Network::build(&NetworkSpec::student(), 0).unwrap().num_params() as f64;
        let t = Network::build(&NetworkSpec::teacher(), 0).unwrap().num_params() as f64;
        let ratio = t / s;
        assert!((1.4..=1.8).contains(&ratio), "student {s} teacher {t} ratio {ratio}");
    }
}
