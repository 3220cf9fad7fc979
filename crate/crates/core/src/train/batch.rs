use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BoxSet, LabelMap, LoadedDataset, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64 finaliser, used to derive independent generator seeds.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Endless reshuffled index stream. The permutation of each epoch depends
/// only on `(seed, stream, epoch)`, so any position can be recomputed after
/// a restart.
#[derive(Clone, Debug)]
pub struct Sampler {
    len: usize,
    seed: u64,
    stream: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        Self {
            len,
            seed,
            stream,
            cached: None,
        }
    }

    fn epoch(&mut self, e: u64) -> &[usize] {
        if self.cached.as_ref().is_none_or(|(c, _)| *c != e) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.seed, self.stream, e])));
            self.cached = Some((e, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    pub fn at(&mut self, position: u64) -> usize {
        let n = self.len as u64;
        let e = position / n;
        self.epoch(e)[(position % n) as usize]
    }

    pub fn batch(&mut self, iteration: u64, batch_size: usize) -> Vec<usize> {
        let start = iteration * batch_size as u64;
        (0..batch_size as u64).map(|k| self.at(start + k)).collect()
    }
}

/// Images and annotations of one task for one pass.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task: Task,
    pub dataset_id: String,
    /// N×3×H×W.
    pub images: Tensor,
    pub boxes: Vec<BoxSet>,
    /// Empty for detection batches.
    pub labels: Vec<LabelMap>,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.images.dims4().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn flip_image(img: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return img.clone();
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    let (src, dst) = (img.data(), out.data_mut());
    for k in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                dst[(k * h + y) * w + x] = src[(k * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Flip decisions for every slot of a batch.
pub fn batch_flips(seed: u64, stream: u64, iteration: u64, n: usize) -> Vec<(bool, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, stream, iteration, 0xf11b]));
    (0..n).map(|_| (rng.random::<bool>(), rng.random::<bool>())).collect()
}

/// Assemble a batch from dataset items with optional per-item flips.
pub fn make_batch(ds: &LoadedDataset, indices: &[usize], flips: Option<&[(bool, bool)]>) -> Result<TaskBatch> {
    if indices.is_empty() {
        return Err(Error::Data(format!("empty batch from dataset `{}`", ds.name)));
    }
    let mut imgs = Vec::with_capacity(indices.len());
    let mut boxes = Vec::with_capacity(indices.len());
    let mut labels = Vec::new();
    for (slot, &i) in indices.iter().enumerate() {
        let (hf, vf) = flips.map_or((false, false), |f| f[slot]);
        let img = &ds.images[i];
        let (h, w) = (img.shape()[1] as f32, img.shape()[2] as f32);
        let (c, hh, ww) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        imgs.push(flip_image(img, hf, vf).reshape(&[1, c, hh, ww]));
        boxes.push(ds.boxes[i].iter().map(|b| b.flipped(w, h, hf, vf)).collect());
        if ds.task == Task::Segmentation {
            let lm = ds.labels[i]
                .as_ref()
                .ok_or_else(|| Error::Data(format!("segmentation item {i} of `{}` has no mask", ds.name)))?;
            labels.push(lm.flipped(hf, vf));
        }
    }
    Ok(TaskBatch {
        task: ds.task,
        dataset_id: ds.name.clone(),
        images: Tensor::stack_batch(&imgs),
        boxes,
        labels,
    })
}
