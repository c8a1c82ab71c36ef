mod common;

use common::seeded;
use uncseg::dcnn::{backward, build_network, forward_batch, NetworkConfig};
use uncseg::losses::{
    batch_loss, brier, cross_entropy, loss_curve_csv, loss_for_true_label_curve, soft_dice, LossKind,
};
use uncseg::ops::{softmax_groups, softmax_groups_grad, Mode};
use uncseg::optim::{adam_step, AdamConfig, AdamState};
use uncseg::{LabelMap, RngStream, Tensor};

fn single(p: [f64; 4]) -> Tensor<f64> {
    Tensor::new(vec![4, 1], p.to_vec()).unwrap()
}

#[test]
fn reference_values() {
    let l0 = LabelMap::new(vec![1], vec![0]).unwrap();
    let l2 = LabelMap::new(vec![1], vec![2]).unwrap();
    assert!((cross_entropy(&single([0.25; 4]), &l0).unwrap().0 - 4f64.ln()).abs() < 1e-12);
    assert!((cross_entropy(&single([0.5, 0.5, 0.0, 0.0]), &l0).unwrap().0 - 2f64.ln()).abs() < 1e-12);
    assert_eq!(cross_entropy(&single([0.0, 0.0, 1.0, 0.0]), &l2).unwrap().0, 0.0);
    assert!((brier(&single([0.25; 4]), &l2).unwrap().0 - 0.1875).abs() < 1e-12);
    assert!((brier(&single([0.5, 0.5, 0.0, 0.0]), &l0).unwrap().0 - 0.125).abs() < 1e-12);
    // single voxel of class 2 at p = 0.25: class-2 term 0.5/(1.0625+ε); the
    // other two foreground classes are empty in reference
    let eps = 1e-6;
    let t2 = (0.5 + eps) / (0.0625 + 1.0 + eps);
    let empty = eps / (0.0625 + eps);
    let sd = soft_dice(&single([0.25; 4]), &l2).unwrap().0;
    assert!((sd - (1.0 - (t2 + 2.0 * empty) / 3.0)).abs() < 1e-12);
    assert!((t2 - 0.4706).abs() < 1e-4);
}

#[test]
fn losses_vanish_on_one_hot_targets() {
    let labels = LabelMap::new(vec![6], vec![0, 1, 2, 3, 1, 3]).unwrap();
    let mut data = vec![0.0; 24];
    for (v, &l) in labels.data().iter().enumerate() {
        data[l as usize * 6 + v] = 1.0;
    }
    let p = Tensor::new(vec![4, 6], data).unwrap();
    assert_eq!(cross_entropy(&p, &labels).unwrap().0, 0.0);
    assert_eq!(brier(&p, &labels).unwrap().0, 0.0);
    assert!(soft_dice(&p, &labels).unwrap().0.abs() < 1e-6);
}

#[test]
fn brier_is_permutation_symmetric() {
    let mut rng = seeded(3);
    let perm = [2usize, 0, 3, 1];
    for _ in 0..50 {
        let n = 5;
        let mut data = vec![0.0; 4 * n];
        let mut permuted = vec![0.0; 4 * n];
        for v in 0..n {
            let p = rng.simplex(4);
            for c in 0..4 {
                data[c * n + v] = p[c];
                permuted[perm[c] * n + v] = p[c];
            }
        }
        let labels: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        let moved: Vec<u8> = labels.iter().map(|&l| perm[l as usize] as u8).collect();
        let a = brier(
            &Tensor::new(vec![4, n], data).unwrap(),
            &LabelMap::new(vec![n], labels).unwrap(),
        )
        .unwrap()
        .0;
        let b = brier(
            &Tensor::new(vec![4, n], permuted).unwrap(),
            &LabelMap::new(vec![n], moved).unwrap(),
        )
        .unwrap()
        .0;
        assert!((a - b).abs() < 1e-12);
    }
}

/// Checks monotonicity on the 1,000-point grid and the half-confidence
/// penalty ordering; returns `(sd(0.5), ce(0.5))`.
pub fn true_label_curves_ok() -> Result<(f64, f64), String> {
    for kind in LossKind::ALL {
        let curve = loss_for_true_label_curve(kind, 1000);
        if curve.len() != 1000 {
            return Err(format!("{kind}: {} points", curve.len()));
        }
        if let Some(w) = curve.windows(2).find(|w| w[1].loss > w[0].loss) {
            return Err(format!(
                "{kind} increases between p={} and p={}",
                w[0].p_true, w[1].p_true
            ));
        }
        if (curve[999].p_true - 1.0).abs() > 1e-12 || curve[999].loss.abs() > 1e-6 {
            return Err(format!("{kind} at p=1 is {}", curve[999].loss));
        }
    }
    let at = |kind| loss_for_true_label_curve(kind, 1000)[499];
    let (sd, ce) = (at(LossKind::SoftDice), at(LossKind::CrossEntropy));
    if (sd.p_true - 0.5).abs() > 1e-12 {
        return Err(format!("grid point 499 is p={}", sd.p_true));
    }
    if !(sd.loss < ce.loss) {
        return Err(format!(
            "soft-Dice {} not below cross-entropy {} at p=0.5",
            sd.loss, ce.loss
        ));
    }
    Ok((sd.loss, ce.loss))
}

#[test]
fn true_label_curves() {
    let (sd, ce) = true_label_curves_ok().unwrap();
    assert!((ce - 2f64.ln()).abs() < 1e-12);
    assert!(sd < ce);
    let csv = loss_curve_csv(1000);
    assert!(csv.starts_with("p_true,ce,sd,bs\n"));
    assert_eq!(csv.lines().count(), 1001);
}

#[test]
fn one_adam_step_reduces_each_loss() {
    let mut cfg = NetworkConfig::desk();
    cfg.channels = 6;
    for kind in LossKind::ALL {
        let mut improved = 0;
        for seed in 0..20 {
            let mut params = build_network::<f32>(&cfg, &RngStream::new(seed, 0)).unwrap();
            let mut rng = seeded(seed);
            let input = Tensor::from_fn(&[2, 2, 80, 80], |_| rng.uniform() as f32);
            let ed = LabelMap::new(vec![2, 12, 12], (0..288).map(|_| rng.below(4) as u8).collect()).unwrap();
            let es = LabelMap::new(vec![2, 12, 12], (0..288).map(|_| rng.below(4) as u8).collect()).unwrap();
            let drop = RngStream::new(seed, 1);
            let loss_of = |p: &uncseg::dcnn::NetworkParams<f32>| {
                let pass = forward_batch(p, &input, Mode::Train, &drop).unwrap();
                let probs = softmax_groups(&pass.logits).unwrap();
                (batch_loss(kind, &probs, &ed, &es).unwrap(), pass, probs)
            };
            let ((before, gp), pass, probs) = loss_of(&params);
            let grads = backward(
                &params,
                pass.cache.as_ref().unwrap(),
                &softmax_groups_grad(&probs, &gp).unwrap(),
            )
            .unwrap();
            let mut state = AdamState::new(params.trainable());
            adam_step(
                &mut params.trainable_mut(),
                &grads,
                &mut state,
                1e-3,
                &AdamConfig::default(),
            )
            .unwrap();
            let ((after, _), _, _) = loss_of(&params);
            improved += (after < before) as usize;
        }
        assert!(improved >= 18, "{kind}: {improved}/20");
    }
}
