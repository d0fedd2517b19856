//! Combined segmentation loss with per-class adaptive concentration.
//!
//! The loss mixes a reshaped-cosine dice term with pixel-averaged cross
//! entropy. Each class carries a concentration value kappa that reshapes its
//! cosine similarity: large kappa makes the similarity compact (hard to
//! satisfy, for easy classes), kappa 0 leaves it as plain cosine (wide, for
//! difficult classes). After every epoch the harness sets
//! `kappa_c = kappa_max * IoU_c` from the validation IoU, so the class
//! ranking by kappa always matches the ranking by IoU.
//!
//! Cosine vectors are L2-normalized flattened per-class maps with an epsilon
//! guard; a class absent from both prediction mass and target counts as a
//! perfect match. Kappa values are constants during backward.

use crate::error::{Result, SacError};
use crate::nn;
use crate::ops::{tvmf_phi_f64, Op};
use crate::tape::Ctx;
use crate::tensor::{Scalar, Tensor};
use std::io::Write;
use std::path::Path;

/// Epsilon guarding the cosine normalization.
pub const COSINE_EPS: f64 = 1e-6;

/// Epsilon clamping the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaRecord {
    pub epoch: usize,
    pub class: usize,
    pub iou: f64,
    pub kappa: f64,
}

/// Per-class concentration values with their update history.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaState {
    kappa: Vec<f64>,
    kappa_max: f64,
    history: Vec<KappaRecord>,
}

impl KappaState {
    /// Before the first validation pass every class starts at `kappa_max/2`.
    pub fn init(classes: usize, kappa_max: f64) -> Result<Self> {
        if classes == 0 || kappa_max < 0.0 || !kappa_max.is_finite() {
            return Err(SacError::InvalidArgument {
                op: "kappa_state",
                reason: format!("classes {classes}, kappa_max {kappa_max}"),
            });
        }
        Ok(KappaState {
            kappa: vec![kappa_max / 2.0; classes],
            kappa_max,
            history: Vec::new(),
        })
    }

    pub fn from_parts(kappa: Vec<f64>, kappa_max: f64, history: Vec<KappaRecord>) -> Self {
        KappaState {
            kappa,
            kappa_max,
            history,
        }
    }

    pub fn classes(&self) -> usize {
        self.kappa.len()
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn kappa_max(&self) -> f64 {
        self.kappa_max
    }

    pub fn history(&self) -> &[KappaRecord] {
        &self.history
    }

    /// Linear update `kappa_c = kappa_max * IoU_c`; appends to the history.
    pub fn update_kappa(&mut self, epoch: usize, val_iou: &[f64]) -> Result<()> {
        if val_iou.len() != self.kappa.len() {
            return Err(SacError::InvalidArgument {
                op: "update_kappa",
                reason: format!(
                    "{} IoU values for {} classes",
                    val_iou.len(),
                    self.kappa.len()
                ),
            });
        }
        if let Some(bad) = val_iou.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SacError::InvalidArgument {
                op: "update_kappa",
                reason: format!("IoU {bad} outside [0,1]"),
            });
        }
        for (c, (&iou, k)) in val_iou.iter().zip(self.kappa.iter_mut()).enumerate() {
            *k = self.kappa_max * iou;
            self.history.push(KappaRecord {
                epoch,
                class: c,
                iou,
                kappa: *k,
            });
        }
        Ok(())
    }

    /// Writes the full history as `epoch,class,iou,kappa` rows.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,class,iou,kappa\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.class, r.iou, r.kappa));
        }
        let mut f = std::fs::File::create(path)
            .map_err(|e| SacError::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| SacError::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Loss weights and smoothing.
#[derive(Debug, Clone, Copy)]
pub struct CtLossConfig {
    /// Weight of the dice term; `1 - gamma` weights cross entropy.
    pub gamma: f64,
    pub classes: usize,
}

impl CtLossConfig {
    pub fn new(gamma: f64, classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(SacError::InvalidArgument {
                op: "ct_loss",
                reason: format!("gamma {gamma} outside [0,1]"),
            });
        }
        Ok(CtLossConfig { gamma, classes })
    }
}

/// Cosine similarity between the flattened class-`c` prediction map and the
/// matching one-hot target map. Both-empty classes count as 1.
pub fn class_cosine<F: Scalar>(
    probs: &Tensor<F>,
    onehot: &Tensor<F>,
    class: usize,
) -> Result<f64> {
    check_probs_onehot(probs, onehot)?;
    let n = probs.shape()[1];
    if class >= n {
        return Err(SacError::InvalidArgument {
            op: "class_cosine",
            reason: format!("class {class} out of range for {n} classes"),
        });
    }
    let [b, _, h, w] = [probs.shape()[0], n, probs.shape()[2], probs.shape()[3]];
    let plane = h * w;
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for bi in 0..b {
        let base = (bi * n + class) * plane;
        for k in base..base + plane {
            let a = probs.data()[k].real();
            let y = onehot.data()[k].real();
            dot += a * y;
            na += a * a;
            nb += y * y;
        }
    }
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt() + COSINE_EPS))
}

fn check_probs_onehot<F: Scalar>(probs: &Tensor<F>, onehot: &Tensor<F>) -> Result<()> {
    if probs.shape().len() != 4 {
        return Err(SacError::BadShape {
            op: "loss",
            shape: probs.shape().to_vec(),
            reason: "expected (B,N,H,W) probabilities".into(),
        });
    }
    if probs.shape() != onehot.shape() {
        return Err(SacError::ShapeMismatch {
            op: "loss",
            lhs: probs.shape().to_vec(),
            rhs: onehot.shape().to_vec(),
        });
    }
    if probs.data().iter().any(|v| *v < F::zero()) {
        return Err(SacError::InvalidArgument {
            op: "loss",
            reason: "negative probabilities".into(),
        });
    }
    Ok(())
}

/// `phi_kappa(cos) = (1 + cos)/(1 + kappa (1 - cos)) - 1`; identity at kappa 0.
pub fn tvmf_phi(cos_theta: f64, kappa: f64) -> Result<f64> {
    if kappa < 0.0 {
        return Err(SacError::InvalidArgument {
            op: "tvmf_phi",
            reason: format!("kappa {kappa} must be non-negative"),
        });
    }
    Ok(tvmf_phi_f64(cos_theta, kappa))
}

/// Mean over classes of `(1 - phi_kappa_c(cos_c))^2`, differentiable w.r.t.
/// the probabilities. Value range `[0, 4]`.
pub fn tvmf_dice_loss<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    probs: C::V,
    onehot: C::V,
    ks: &KappaState,
) -> Result<C::V> {
    let classes = cx.shape_of(&probs).get(1).copied().unwrap_or(0);
    if classes != ks.classes() {
        return Err(SacError::InvalidArgument {
            op: "tvmf_dice",
            reason: format!(
                "{} classes in probabilities, {} kappa values",
                classes,
                ks.classes()
            ),
        });
    }
    let kappas: Vec<F> = ks.kappa().iter().map(|&k| F::from_real(k)).collect();
    cx.apply(
        Op::TvmfDice {
            kappas,
            eps: F::from_real(COSINE_EPS),
        },
        &[probs, onehot],
    )
}

/// Pixel-averaged multi-class cross entropy with a clamped logarithm.
pub fn cross_entropy<F: Scalar, C: Ctx<F>>(cx: &mut C, probs: C::V, onehot: C::V) -> Result<C::V> {
    cx.apply(
        Op::CrossEntropy {
            eps: F::from_real(LOG_EPS),
        },
        &[probs, onehot],
    )
}

/// `gamma * tvmf + (1 - gamma) * cross_entropy`.
pub fn ct_loss<F: Scalar, C: Ctx<F>>(
    cx: &mut C,
    probs: C::V,
    onehot: C::V,
    ks: &KappaState,
    cfg: &CtLossConfig,
) -> Result<C::V> {
    let dice = tvmf_dice_loss(cx, probs.clone(), onehot.clone(), ks)?;
    let ce = cross_entropy(cx, probs, onehot)?;
    let wd = nn::scale(cx, dice, F::from_real(cfg.gamma))?;
    let wc = nn::scale(cx, ce, F::from_real(1.0 - cfg.gamma))?;
    nn::add(cx, wd, wc)
}

/// One-hot encoding of class-id labels into `(B,N,H,W)`.
pub fn onehot_from_labels<F: Scalar>(
    labels: &[u8],
    batch: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<F>> {
    let plane = h * w;
    if labels.len() != batch * plane {
        return Err(SacError::InvalidArgument {
            op: "onehot",
            reason: format!(
                "{} labels for batch {batch} of {h}x{w}",
                labels.len()
            ),
        });
    }
    let mut t = Tensor::zeros(&[batch, classes, h, w]);
    for bi in 0..batch {
        for p in 0..plane {
            let c = labels[bi * plane + p] as usize;
            if c >= classes {
                return Err(SacError::InvalidArgument {
                    op: "onehot",
                    reason: format!("label {c} out of range for {classes} classes"),
                });
            }
            t.data_mut()[(bi * classes + c) * plane + p] = F::one();
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{Imm, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs_onehot(a: &[f64], b: &[f64]) -> (Tensor<f64>, Tensor<f64>) {
        // one class of interest (class 0) over a 2x2 map, second class filler
        let mut pa = a.to_vec();
        let mut pb = b.to_vec();
        for v in a {
            pa.push(1.0 - v);
        }
        for v in b {
            pb.push(1.0 - v);
        }
        (
            Tensor::from_f64_slice(&[1, 2, 2, 2], &pa).unwrap(),
            Tensor::from_f64_slice(&[1, 2, 2, 2], &pb).unwrap(),
        )
    }

    #[test]
    fn class_cosine_hand_cases() {
        let (p, y) = probs_onehot(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0]);
        assert!((class_cosine(&p, &y, 0).unwrap() - 1.0).abs() < 1e-5);

        let (p, y) = probs_onehot(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(class_cosine(&p, &y, 0).unwrap(), 0.0);

        let (p, y) = probs_onehot(&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0]);
        assert!((class_cosine(&p, &y, 0).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn tvmf_phi_examples_and_domain() {
        assert_eq!(tvmf_phi(1.0, 123.0).unwrap(), 1.0);
        assert!((tvmf_phi(0.3, 0.0).unwrap() - 0.3).abs() < 1e-15);
        assert!((tvmf_phi(0.5, 1.0).unwrap()).abs() < 1e-15);
        assert!(tvmf_phi(0.5, -0.1).is_err());
    }

    #[test]
    fn tvmf_dice_perfect_and_composed() {
        let ks = KappaState::from_parts(vec![3.0, 1.0], 32.0, vec![]);
        // class 0 perfect (cos ~ 1), class 1 cos = 0.5 with kappa 1 -> term 1
        let p = Tensor::from_f64_slice(
            &[1, 2, 2, 2],
            &[1.0, 0.0, 0.0, 0.0, /* class1 */ 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let y = Tensor::from_f64_slice(
            &[1, 2, 2, 2],
            &[1.0, 0.0, 0.0, 0.0, /* class1 */ 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let mut imm = Imm::new();
        let pv = Ctx::<f64>::leaf(&mut imm, p);
        let yv = Ctx::<f64>::leaf(&mut imm, y);
        let l = tvmf_dice_loss(&mut imm, pv, yv, &ks).unwrap();
        assert!((l.data()[0] - 0.5).abs() < 1e-5, "{}", l.data()[0]);
    }

    #[test]
    fn tvmf_dice_kappa_zero_reduces_to_squared_cosine_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, n, h, w) = (2, 3, 4, 4);
        let mut pv = Vec::new();
        for _ in 0..b * n * h * w {
            pv.push(rng.gen_range(0.01..1.0));
        }
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n) as u8).collect();
        let probs = Tensor::<f64>::from_f64_slice(&[b, n, h, w], &pv).unwrap();
        let onehot = onehot_from_labels::<f64>(&labels, b, n, h, w).unwrap();

        let ks = KappaState::from_parts(vec![0.0; n], 32.0, vec![]);
        let mut imm = Imm::new();
        let pvv = Ctx::<f64>::leaf(&mut imm, probs.clone());
        let yvv = Ctx::<f64>::leaf(&mut imm, onehot.clone());
        let got = tvmf_dice_loss(&mut imm, pvv, yvv, &ks).unwrap().data()[0];

        // independent route: direct class cosines
        let mut want = 0.0;
        for c in 0..n {
            let cos = class_cosine(&probs, &onehot, c).unwrap();
            want += (1.0 - cos) * (1.0 - cos);
        }
        want /= n as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let labels = vec![0u8, 1, 2, 3];
        let onehot = onehot_from_labels::<f64>(&labels, 1, 4, 2, 2).unwrap();
        let mut imm = Imm::new();

        // exact prediction -> ~0
        let yv = Ctx::<f64>::leaf(&mut imm, onehot.clone());
        let pv = Ctx::<f64>::leaf(&mut imm, onehot.clone());
        let l = cross_entropy(&mut imm, pv, yv.clone()).unwrap();
        assert!(l.data()[0].abs() < 1e-11);

        // uniform over 4 classes -> ln 4
        let uni = Ctx::<f64>::leaf(&mut imm, Tensor::full(&[1, 4, 2, 2], 0.25));
        let l = cross_entropy(&mut imm, uni, yv.clone()).unwrap();
        assert!((l.data()[0] - 4.0f64.ln()).abs() < 1e-9);

        // zero probability on the true class stays finite
        let zero = Ctx::<f64>::leaf(&mut imm, Tensor::zeros(&[1, 4, 2, 2]));
        let l = cross_entropy(&mut imm, zero, yv).unwrap();
        assert!(l.data()[0].is_finite());
        assert!(l.data()[0] > 20.0);
    }

    #[test]
    fn ct_loss_weighting_and_degenerate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, n, h, w) = (1, 3, 4, 4);
        let pv: Vec<f64> = (0..b * n * h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n) as u8).collect();
        let probs = Tensor::<f64>::from_f64_slice(&[b, n, h, w], &pv).unwrap();
        let onehot = onehot_from_labels::<f64>(&labels, b, n, h, w).unwrap();
        let ks = KappaState::init(n, 32.0).unwrap();

        let eval = |gamma: f64| -> f64 {
            let mut imm = Imm::new();
            let p = Ctx::<f64>::leaf(&mut imm, probs.clone());
            let y = Ctx::<f64>::leaf(&mut imm, onehot.clone());
            let cfg = CtLossConfig::new(gamma, n).unwrap();
            ct_loss(&mut imm, p, y, &ks, &cfg).unwrap().data()[0]
        };
        let dice = {
            let mut imm = Imm::new();
            let p = Ctx::<f64>::leaf(&mut imm, probs.clone());
            let y = Ctx::<f64>::leaf(&mut imm, onehot.clone());
            tvmf_dice_loss(&mut imm, p, y, &ks).unwrap().data()[0]
        };
        let ce = {
            let mut imm = Imm::new();
            let p = Ctx::<f64>::leaf(&mut imm, probs.clone());
            let y = Ctx::<f64>::leaf(&mut imm, onehot.clone());
            cross_entropy(&mut imm, p, y).unwrap().data()[0]
        };
        assert_eq!(eval(1.0), dice);
        assert_eq!(eval(0.0), ce);
        assert!((eval(0.6) - (0.6 * dice + 0.4 * ce)).abs() < 1e-15);

        // perfect prediction -> 0 under any weighting
        let mut imm = Imm::new();
        let p = Ctx::<f64>::leaf(&mut imm, onehot.clone());
        let y = Ctx::<f64>::leaf(&mut imm, onehot.clone());
        let cfg = CtLossConfig::new(0.6, n).unwrap();
        let l = ct_loss(&mut imm, p, y, &ks, &cfg).unwrap().data()[0];
        assert!(l.abs() < 1e-10, "{l}");
    }

    #[test]
    fn gamma_validation() {
        assert!(CtLossConfig::new(1.2, 3).is_err());
        assert!(CtLossConfig::new(-0.1, 3).is_err());
    }

    #[test]
    fn update_kappa_rule_and_errors() {
        let mut ks = KappaState::init(2, 32.0).unwrap();
        assert_eq!(ks.kappa(), &[16.0, 16.0]);
        ks.update_kappa(0, &[0.25, 0.75]).unwrap();
        assert_eq!(ks.kappa(), &[8.0, 24.0]);
        ks.update_kappa(1, &[0.0, 1.0]).unwrap();
        assert_eq!(ks.kappa(), &[0.0, 32.0]);
        assert_eq!(ks.history().len(), 4);
        assert_eq!(
            ks.history()[2],
            KappaRecord {
                epoch: 1,
                class: 0,
                iou: 0.0,
                kappa: 0.0
            }
        );

        assert!(ks.update_kappa(2, &[0.5]).is_err());
        assert!(ks.update_kappa(2, &[0.5, 1.5]).is_err());
    }

    #[test]
    fn kappa_ranking_follows_iou_ranking() {
        let mut ks = KappaState::init(4, 32.0).unwrap();
        let ious = [0.3, 0.9, 0.3, 0.1];
        ks.update_kappa(0, &ious).unwrap();
        let mut by_iou: Vec<usize> = (0..4).collect();
        by_iou.sort_by(|&a, &b| ious[a].partial_cmp(&ious[b]).unwrap());
        let k = ks.kappa();
        for pair in by_iou.windows(2) {
            assert!(k[pair[0]] <= k[pair[1]]);
        }
    }

    #[test]
    fn ct_loss_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, n, h, w) = (2, 3, 4, 4);
        let pv: Vec<f64> = (0..b * n * h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n) as u8).collect();
        let probs = Tensor::<f64>::from_f64_slice(&[b, n, h, w], &pv).unwrap();
        let onehot = onehot_from_labels::<f64>(&labels, b, n, h, w).unwrap();
        let mut ks = KappaState::init(n, 32.0).unwrap();
        ks.update_kappa(0, &[0.1, 0.6, 0.95]).unwrap();
        let cfg = CtLossConfig::new(0.6, n).unwrap();

        let report = crate::gradcheck::gradcheck(
            "ct_loss",
            |t: &mut Tape<f64>, x| {
                let y = t.constant(onehot.clone());
                ct_loss(t, x, y, &ks, &cfg)
            },
            &probs,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{}", report.line());
    }

    #[test]
    fn monotonicity_along_segment_to_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (b, n, h, w) = (1, 3, 4, 4);
        let labels: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n) as u8).collect();
        let onehot = onehot_from_labels::<f64>(&labels, b, n, h, w).unwrap();
        let pv: Vec<f64> = (0..b * n * h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
        let probs = Tensor::<f64>::from_f64_slice(&[b, n, h, w], &pv).unwrap();
        let ks = KappaState::init(n, 32.0).unwrap();
        let cfg = CtLossConfig::new(0.6, n).unwrap();

        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let blend: Vec<f64> = probs
                .data()
                .iter()
                .zip(onehot.data())
                .map(|(&p, &y)| (1.0 - t) * p + t * y)
                .collect();
            let bt = Tensor::<f64>::from_f64_slice(&[b, n, h, w], &blend).unwrap();
            let mut imm = Imm::new();
            let p = Ctx::<f64>::leaf(&mut imm, bt);
            let y = Ctx::<f64>::leaf(&mut imm, onehot.clone());
            let l = ct_loss(&mut imm, p, y, &ks, &cfg).unwrap().data()[0];
            assert!(l <= prev + 1e-9, "loss rose from {prev} to {l} at t={t}");
            prev = l;
        }
    }
}
