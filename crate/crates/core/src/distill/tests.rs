use std::sync::Arc;

use super::*;
use crate::net::{build_adapters, Network, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], r: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-r..r)).collect())
}

fn fd_check(x: &[f32], grad: &[f32], f: impl Fn(&[f32]) -> f64) {
    let h = 1e-3f32;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h as f64);
        let ana = grad[i] as f64;
        let scale = num.abs().max(ana.abs()).max(1e-3);
        assert!((num - ana).abs() <= 1e-2 * scale, "i={i} numeric {num} analytic {ana}");
    }
}

/// A detection output with one 1×1 level; values given per anchor.
fn det_output(logits: &[f32], deltas: &[f32], a: usize, c: usize) -> DetectionOutput {
    DetectionOutput {
        cls: vec![Arc::new(Tensor::from_vec(&[1, a * c, 1, 1], logits.to_vec()))],
        reg: vec![Arc::new(Tensor::from_vec(&[1, a * 4, 1, 1], deltas.to_vec()))],
        num_classes: c,
        anchors_per_location: a,
        anchors: Arc::new(vec![[0.0, 0.0, 8.0, 8.0]; a]),
    }
}

#[test]
fn soft_seg_two_class_example() {
    let s = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]);
    let t = Tensor::from_vec(&[1, 2, 1, 1], vec![2.0, 0.0]);
    let got = soft_seg_loss(&s, &t, 1.0).unwrap().value.total;
    let p1 = 2f64.exp() / (2f64.exp() + 1.0);
    let p2 = 1.0 - p1;
    let expect = p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln();
    assert!((p1 - 0.8808).abs() < 1e-4);
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn soft_seg_identical_is_zero_and_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = rand_tensor(&mut rng, &[2, 3, 2, 2], 3.0);
    assert!(soft_seg_loss(&s, &s, 2.0).unwrap().value.total.abs() < 1e-12);
    let t = rand_tensor(&mut rng, &[2, 3, 2, 2], 3.0);
    for temp in [1.0, 2.5] {
        let g = soft_seg_loss(&s, &t, temp).unwrap();
        fd_check(s.data(), g.grad.data(), |x| {
            let xs = Tensor::from_vec(s.shape(), x.to_vec());
            soft_seg_loss(&xs, &t, temp).unwrap().value.total
        });
    }
}

#[test]
fn soft_seg_large_temperature_is_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 4;
    let s = rand_tensor(&mut rng, &[1, c, 1, 1], 2.0);
    let t = rand_tensor(&mut rng, &[1, c, 1, 1], 2.0);
    let got = soft_seg_loss(&s, &t, 100.0).unwrap().value.total;
    let ms: f64 = s.data().iter().map(|v| *v as f64).sum::<f64>() / c as f64;
    let mt: f64 = t.data().iter().map(|v| *v as f64).sum::<f64>() / c as f64;
    let q: f64 = (0..c)
        .map(|k| {
            let d = t.data()[k] as f64 - mt - s.data()[k] as f64 + ms;
            d * d
        })
        .sum::<f64>()
        * 0.5
        / c as f64;
    assert!((got - q).abs() <= 0.05 * q, "{got} vs {q}");
}

#[test]
fn soft_det_scalar_oracle_and_gating() {
    // 3 anchors, 2 classes
    let zs: [f64; 6] = [0.3, -1.0, 2.0, 0.1, -0.5, -2.0];
    let zt: [f64; 6] = [1.5, -2.0, -3.0, -4.0, 0.2, 0.0];
    let ds = [0.1, 0.2, -0.3, 0.4, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let dt = [0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 1.5, 0.5, 1.0, 3.0];
    let f32s = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
    let s = det_output(&f32s(&zs), &ds, 3, 2);
    let t = det_output(&f32s(&zt), &dt, 3, 2);
    let p = BalancedL1Params::default();
    let temp = 2.0;
    let got = soft_det_loss(&s, &t, temp, 0.3, p).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut kl = 0.0;
    for i in 0..6 {
        let q = sig(zt[i] / temp);
        let r = sig(zs[i] / temp);
        kl += q * (q / r).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - r)).ln();
    }
    let cls = temp * temp * kl / 6.0;
    // teacher max prob per anchor: sig(1.5)=.82, sig(-3)=.047, sig(0.2)=.55
    let gated = [true, false, true];
    let mut reg = 0.0;
    for a in 0..3 {
        if gated[a] {
            for k in 0..4 {
                reg += crate::loss::balanced_l1((ds[a * 4 + k] - dt[a * 4 + k]).abs() as f64, 0.5, 1.5, 1.0).0;
            }
        }
    }
    reg /= 2.0;
    assert!((got.value.components["soft_cls"] - cls).abs() < 1e-9);
    assert!((got.value.components["soft_reg"] - reg).abs() < 1e-6);
    assert!((got.value.total - cls - reg).abs() < 1e-6);
    assert!(got.grad.reg[4..8].iter().all(|g| *g == 0.0));
}

#[test]
fn soft_det_background_teacher_has_no_regression_term() {
    let s = det_output(&[0.0, 1.0], &[0.5; 8], 2, 1);
    let t = det_output(&[-9.0, -8.0], &[0.0; 8], 2, 1);
    let got = soft_det_loss(&s, &t, 1.0, 0.3, BalancedL1Params::default()).unwrap();
    assert_eq!(got.value.components["soft_reg"], 0.0);
    assert!(got.value.components["soft_cls"] > 0.0);
    let same = soft_det_loss(&t, &t, 1.0, 0.3, BalancedL1Params::default()).unwrap();
    assert!(same.value.total.abs() < 1e-12);
}

#[test]
fn soft_det_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zs: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let zt: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ds: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dt: Vec<f32> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t = det_output(&zt, &dt, 4, 2);
    let p = BalancedL1Params::default();
    let g = soft_det_loss(&det_output(&zs, &ds, 4, 2), &t, 1.5, 0.3, p).unwrap();
    fd_check(&zs, &g.grad.cls, |x| {
        soft_det_loss(&det_output(x, &ds, 4, 2), &t, 1.5, 0.3, p).unwrap().value.total
    });
    fd_check(&ds, &g.grad.reg, |x| {
        soft_det_loss(&det_output(&zs, x, 4, 2), &t, 1.5, 0.3, p).unwrap().value.total
    });
}

#[test]
fn feature_mse_examples() {
    let a = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]);
    let t = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]);
    assert_eq!(feature_mse(&[&a], &[&t]).unwrap().value.total, 9.0);
    assert_eq!(feature_mse(&[&t], &[&t]).unwrap().value.total, 0.0);
    let bad = Tensor::zeros(&[1, 2, 1, 1]);
    assert!(feature_mse(&[&a], &[&bad]).is_err());
}

#[test]
fn pdf_reduces_to_mse_and_zero_weights_vanish() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = vec![rand_tensor(&mut rng, &[2, 3, 4, 4], 1.0), rand_tensor(&mut rng, &[2, 3, 2, 2], 1.0)];
    let t = vec![rand_tensor(&mut rng, &[2, 3, 4, 4], 1.0), rand_tensor(&mut rng, &[2, 3, 2, 2], 1.0)];
    let ar: Vec<&Tensor> = a.iter().collect();
    let tr: Vec<&Tensor> = t.iter().collect();
    let ones = WeightMap {
        levels: vec![Tensor::full(&[2, 4, 4], 1.0), Tensor::full(&[2, 2, 2], 1.0)],
    };
    let mse = feature_mse(&ar, &tr).unwrap();
    let pdf = pdf_feature(&ar, &tr, &ones).unwrap();
    assert!((mse.value.total - pdf.value.total).abs() <= 1e-6 * mse.value.total);
    let zeros = WeightMap {
        levels: vec![Tensor::zeros(&[2, 4, 4]), Tensor::zeros(&[2, 2, 2])],
    };
    assert_eq!(pdf_feature(&ar, &tr, &zeros).unwrap().value.total, 0.0);
}

#[test]
fn pdf_weighted_oracle_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[1, 2, 2, 2], 1.0);
    let t = rand_tensor(&mut rng, &[1, 2, 2, 2], 1.0);
    let w = Tensor::from_vec(&[1, 2, 2], (0..4).map(|_| rng.random_range(0.0..1.0)).collect());
    let wm = WeightMap { levels: vec![w.clone()] };
    let got = pdf_feature(&[&a], &[&t], &wm).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..4 {
        let wv = w.data()[p] as f64;
        for k in 0..2 {
            let d = a.data()[k * 4 + p] as f64 - t.data()[k * 4 + p] as f64;
            num += wv * d * d;
        }
        den += wv * 2.0;
    }
    assert!((got.value.total - num / den).abs() < 1e-9);
    let flat: Vec<f32> = got.grad.iter().flat_map(|g| g.data().to_vec()).collect();
    fd_check(a.data(), &flat, |x| {
        let xa = Tensor::from_vec(a.shape(), x.to_vec());
        pdf_feature(&[&xa], &[&t], &wm).unwrap().value.total
    });
}

#[test]
fn pdf_weight_two_point_example() {
    let logit = |p: f64| (p / (1.0 - p)).ln() as f32;
    let s = det_output(&[logit(0.9)], &[0.0; 4], 1, 1);
    let t = det_output(&[logit(0.9)], &[0.0; 4], 1, 1);
    // two locations on one level
    let two = |v: [f32; 2]| DetectionOutput {
        cls: vec![Arc::new(Tensor::from_vec(&[1, 1, 1, 2], v.to_vec()))],
        reg: vec![Arc::new(Tensor::zeros(&[1, 4, 1, 2]))],
        num_classes: 1,
        anchors_per_location: 1,
        anchors: Arc::new(vec![[0.0, 0.0, 8.0, 8.0]; 2]),
    };
    let ws = pdf_weight_map_det(&two([logit(0.9), logit(0.9)]), &two([logit(0.9), logit(0.1)]), PdfDirection::WeightAgreement).unwrap();
    assert_eq!(ws.levels[0].data(), &[1.0, 0.0]);
    let wd = pdf_weight_map_det(&two([logit(0.9), logit(0.9)]), &two([logit(0.9), logit(0.1)]), PdfDirection::WeightDisagreement).unwrap();
    assert_eq!(wd.levels[0].data(), &[0.0, 1.0]);
    let same = pdf_weight_map_det(&s, &t, PdfDirection::WeightAgreement).unwrap();
    assert_eq!(same.levels[0].data(), &[1.0]);
    let same = pdf_weight_map_det(&s, &t, PdfDirection::WeightDisagreement).unwrap();
    assert_eq!(same.levels[0].data(), &[0.0]);
}

#[test]
fn pdf_seg_pooling_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = rand_tensor(&mut rng, &[2, 3, 20, 20], 3.0);
    let t = rand_tensor(&mut rng, &[2, 3, 20, 20], 3.0);
    let sizes = [(3, 3), (2, 2)];
    let wm = pdf_weight_map_seg(&s, &t, &sizes, &[8, 16], PdfDirection::WeightAgreement).unwrap();
    assert_eq!(wm.levels[0].shape(), &[2, 3, 3]);
    assert!(wm.levels.iter().all(|l| l.data().iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(pdf_weight_map_seg(&s, &t, &[(2, 2)], &[8], PdfDirection::WeightAgreement).is_err());
}

#[test]
fn adapter_receives_gradient_under_feature_loss() {
    let spec = NetworkSpec::tiny();
    let net = Network::build(&spec, 0).unwrap();
    let teacher = Network::build(&NetworkSpec { neck_channels: 16, ..NetworkSpec::tiny() }, 1).unwrap();
    let mut adapters = build_adapters(&spec, teacher.spec(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 3, 32, 32], 1.0);
    let tf = teacher.forward(&x, &[]).unwrap().features();
    let mut pass = net.forward(&x, &[]).unwrap();
    let feats = pass.features.clone();
    let loss = feature_mse_loss(&mut pass.graph, &feats, &tf, &adapters).unwrap();
    assert!(loss.value.total > 0.0);
    let seeds: Vec<(VarId, &Tensor)> = loss.seeds.iter().map(|(v, t)| (*v, t)).collect();
    let grads = pass.graph.backward(&seeds);
    adapters.accumulate(&grads);
    let gnorm: f64 = (0..adapters.store().len()).map(|i| adapters.store().grad(i).sum_sq()).sum();
    assert!(gnorm > 0.0);
}

#[test]
fn labels_follow_table_rows() {
    let mut c = DistillConfig { use_soft: true, feature_mode: FeatureMode::Pdf, ..Default::default() };
    assert_eq!(c.label(), "+ Soft + PDF");
    c.use_soft = false;
    c.feature_mode = FeatureMode::Mse;
    assert_eq!(c.label(), "+ MSE");
}
