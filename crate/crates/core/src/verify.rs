//! The gradient-verification suite: every differentiable primitive, the
//! deformable core with respect to each argument, the ARFM block, the
//! combined loss, and a micro-configuration model forward, all checked
//! against central finite differences in f64.
//!
//! Model-level checks run at 10x the base tolerance; long chains accumulate
//! legitimate truncation error.

use crate::arfm::{arfm_forward, ArfmParams};

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::losses::{ct_loss, onehot_from_labels, CtLossConfig, KappaState};
use crate::model::{SacNetConfig, SacNetModel};
use crate::nn::{Binder, Mode, ParamStore};
use crate::ops::Op;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which subset of checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteFilter {
    All,
    Dcnv3,
    Arfm,
    Losses,
    Model,
}

impl std::str::FromStr for SuiteFilter {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(SuiteFilter::All),
            "dcnv3" => Ok(SuiteFilter::Dcnv3),
            "arfm" => Ok(SuiteFilter::Arfm),
            "losses" => Ok(SuiteFilter::Losses),
            "model" => Ok(SuiteFilter::Model),
            other => Err(format!(
                "unknown op group {other}; expected all|dcnv3|arfm|losses|model"
            )),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Fractional offsets bounded away from integer sampling positions, where
/// the bilinear interpolant has kinks and central differences disagree with
/// the one-sided analytical derivative.
fn rand_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..0.45);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const EPS: f64 = 1e-5;

/// Runs the selected checks. Primitive checks belong to the `All` group;
/// the named groups cover the composite operators.
pub fn run_gradcheck_suite(filter: SuiteFilter, tol: f64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut reports = Vec::new();
    let all = filter == SuiteFilter::All;

    if all {
        primitives(&mut rng, tol, &mut reports)?;
    }
    if all || filter == SuiteFilter::Dcnv3 {
        dcnv3_checks(&mut rng, tol, &mut reports)?;
    }
    if all || filter == SuiteFilter::Arfm {
        arfm_checks(&mut rng, tol, &mut reports)?;
    }
    if all || filter == SuiteFilter::Losses {
        loss_checks(&mut rng, tol, &mut reports)?;
    }
    if all || filter == SuiteFilter::Model {
        model_check(&mut rng, tol * 10.0, &mut reports)?;
    }
    Ok(reports)
}

fn weighted_sum(t: &mut Tape<f64>, v: crate::tape::Var, w: &Tensor<f64>) -> Result<crate::tape::Var> {
    let wv = t.constant(w.clone());
    let prod = t.record(Op::Mul, &[v, wv])?;
    t.record(Op::SumAll, &[prod])
}

fn primitives(
    rng: &mut ChaCha8Rng,
    tol: f64,
    reports: &mut Vec<GradcheckReport>,
) -> Result<()> {
    // elementwise binary ops against a fixed second operand
    let other = rand_tensor(rng, &[2, 3], 1.0);
    for (name, op) in [("add", Op::Add), ("sub", Op::Sub), ("mul", Op::Mul)] {
        let point = rand_tensor(rng, &[2, 3], 1.0);
        let o = other.clone();
        reports.push(gradcheck(
            name,
            move |t, x| {
                let b = t.constant(o.clone());
                let y = t.record(op.clone(), &[x, b])?;
                t.record(Op::SumAll, &[y])
            },
            &point,
            EPS,
            tol,
        )?);
    }

    // scale / add_scalar / reshape / sum chain
    let point = rand_tensor(rng, &[3, 4], 1.0);
    reports.push(gradcheck(
        "scale_reshape_sum",
        |t, x| {
            let s = t.record(Op::Scale(1.7), &[x])?;
            let a = t.record(Op::AddScalar(-0.3), &[s])?;
            let r = t.record(Op::Reshape(vec![12]), &[a])?;
            let sq = t.record(Op::Mul, &[r, r])?;
            t.record(Op::SumAll, &[sq])
        },
        &point,
        EPS,
        tol,
    )?);

    // gelu
    let point = rand_tensor(rng, &[8], 2.0);
    let w = rand_tensor(rng, &[8], 1.0);
    reports.push(gradcheck(
        "gelu",
        |t, x| {
            let g = t.record(Op::Gelu, &[x])?;
            weighted_sum(t, g, &w)
        },
        &point,
        EPS,
        tol,
    )?);

    // softmax along a middle axis
    let point = rand_tensor(rng, &[2, 5, 3], 2.0);
    let w = rand_tensor(rng, &[2, 5, 3], 1.0);
    reports.push(gradcheck(
        "softmax_axis1",
        |t, x| {
            let y = t.record(Op::Softmax { axis: 1 }, &[x])?;
            weighted_sum(t, y, &w)
        },
        &point,
        EPS,
        tol,
    )?);

    // layernorm w.r.t. each input
    let xfix = rand_tensor(rng, &[2, 6, 3, 3], 1.0);
    let gfix = rand_tensor(rng, &[6], 1.0);
    let bfix = rand_tensor(rng, &[6], 1.0);
    let wfix = rand_tensor(rng, &[2, 6, 3, 3], 1.0);
    for (name, which) in [("layernorm_x", 0), ("layernorm_gamma", 1), ("layernorm_beta", 2)] {
        let (xf, gf, bf, wf) = (xfix.clone(), gfix.clone(), bfix.clone(), wfix.clone());
        let point = match which {
            0 => xfix.clone(),
            1 => gfix.clone(),
            _ => bfix.clone(),
        };
        reports.push(gradcheck(
            name,
            move |t, p| {
                let x = if which == 0 { p } else { t.constant(xf.clone()) };
                let g = if which == 1 { p } else { t.constant(gf.clone()) };
                let b = if which == 2 { p } else { t.constant(bf.clone()) };
                let y = t.record(Op::LayerNorm { axis: 1, eps: 1e-6 }, &[x, g, b])?;
                weighted_sum(t, y, &wf)
            },
            &point,
            EPS,
            tol,
        )?);
    }

    // conv2d w.r.t. x, w, b at two stride/pad settings
    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        let xfix = rand_tensor(rng, &[2, 3, 6, 6], 1.0);
        let wfixk = rand_tensor(rng, &[4, 3, 3, 3], 0.5);
        let bfix = rand_tensor(rng, &[4], 0.5);
        let oh = (6 + 2 * pad - 3) / stride + 1;
        let wsum = rand_tensor(rng, &[2, 4, oh, oh], 1.0);
        for (label, which) in [("x", 0usize), ("w", 1), ("b", 2)] {
            let name = format!("conv2d_s{stride}_{label}");
            let (xf, wf, bf, ws) = (xfix.clone(), wfixk.clone(), bfix.clone(), wsum.clone());
            let point = match which {
                0 => xfix.clone(),
                1 => wfixk.clone(),
                _ => bfix.clone(),
            };
            reports.push(gradcheck(
                &name,
                move |t, p| {
                    let x = if which == 0 { p } else { t.constant(xf.clone()) };
                    let w = if which == 1 { p } else { t.constant(wf.clone()) };
                    let b = if which == 2 { p } else { t.constant(bf.clone()) };
                    let y = t.record(Op::Conv2d { stride, pad }, &[x, w, b])?;
                    weighted_sum(t, y, &ws)
                },
                &point,
                EPS,
                tol,
            )?);
        }
    }

    // bilinear resize up and down
    for (name, oh, ow) in [("resize_up", 7usize, 9usize), ("resize_down", 3, 2)] {
        let point = rand_tensor(rng, &[1, 2, 5, 4], 1.0);
        let w = rand_tensor(rng, &[1, 2, oh, ow], 1.0);
        reports.push(gradcheck(
            name,
            move |t, x| {
                let y = t.record(Op::BilinearResize { out_h: oh, out_w: ow }, &[x])?;
                weighted_sum(t, y, &w)
            },
            &point,
            EPS,
            tol,
        )?);
    }

    // bilinear point sample w.r.t. image and point
    let img = rand_tensor(rng, &[3, 5, 5], 1.0);
    let pt = Tensor::from_f64_slice(&[2], &[2.3, 1.7]).unwrap();
    let wc = rand_tensor(rng, &[3], 1.0);
    {
        let (p, w) = (pt.clone(), wc.clone());
        reports.push(gradcheck(
            "bilinear_sample_x",
            move |t, x| {
                let point = t.constant(p.clone());
                let y = t.record(Op::BilinearSample, &[x, point])?;
                weighted_sum(t, y, &w)
            },
            &img,
            EPS,
            tol,
        )?);
    }
    {
        let (i, w) = (img.clone(), wc);
        reports.push(gradcheck(
            "bilinear_sample_point",
            move |t, p| {
                let x = t.constant(i.clone());
                let y = t.record(Op::BilinearSample, &[x, p])?;
                weighted_sum(t, y, &w)
            },
            &pt,
            EPS,
            tol,
        )?);
    }

    // LayerScale channel product w.r.t. both inputs
    let xfix = rand_tensor(rng, &[2, 4, 3, 3], 1.0);
    let gfix = rand_tensor(rng, &[4], 1.0);
    let wfix = rand_tensor(rng, &[2, 4, 3, 3], 1.0);
    {
        let (g, w) = (gfix.clone(), wfix.clone());
        reports.push(gradcheck(
            "mul_channel_x",
            move |t, x| {
                let gv = t.constant(g.clone());
                let y = t.record(Op::MulChannel, &[x, gv])?;
                weighted_sum(t, y, &w)
            },
            &xfix,
            EPS,
            tol,
        )?);
    }
    {
        let (x, w) = (xfix.clone(), wfix);
        reports.push(gradcheck(
            "mul_channel_gamma",
            move |t, g| {
                let xv = t.constant(x.clone());
                let y = t.record(Op::MulChannel, &[xv, g])?;
                weighted_sum(t, y, &w)
            },
            &gfix,
            EPS,
            tol,
        )?);
    }

    // channel concat (both slots) and droppath's fixed-mask sample scaling
    let afix = rand_tensor(rng, &[2, 3, 4, 4], 1.0);
    let bfix = rand_tensor(rng, &[2, 2, 4, 4], 1.0);
    let wfix = rand_tensor(rng, &[2, 5, 4, 4], 1.0);
    for (name, which) in [("concat_a", 0usize), ("concat_b", 1)] {
        let (af, bf, wf) = (afix.clone(), bfix.clone(), wfix.clone());
        let point = if which == 0 { afix.clone() } else { bfix.clone() };
        reports.push(gradcheck(
            name,
            move |t, p| {
                let a = if which == 0 { p } else { t.constant(af.clone()) };
                let b = if which == 1 { p } else { t.constant(bf.clone()) };
                let y = t.record(Op::ConcatChannels, &[a, b])?;
                weighted_sum(t, y, &wf)
            },
            &point,
            EPS,
            tol,
        )?);
    }
    let point = rand_tensor(rng, &[4, 2, 3, 3], 1.0);
    let w = rand_tensor(rng, &[4, 2, 3, 3], 1.0);
    reports.push(gradcheck(
        "droppath_mask_scaling",
        move |t, x| {
            let y = t.record(Op::ScaleSamples(vec![2.0, 0.0, 2.0, 2.0]), &[x])?;
            weighted_sum(t, y, &w)
        },
        &point,
        EPS,
        tol,
    )?);

    Ok(())
}

fn dcnv3_checks(
    rng: &mut ChaCha8Rng,
    tol: f64,
    reports: &mut Vec<GradcheckReport>,
) -> Result<()> {
    let (b, c, h, w) = (2usize, 4usize, 6usize, 6usize);
    let (groups, points) = (2usize, 9usize);
    let cp = c / groups;

    let xfix = rand_tensor(rng, &[b, c, h, w], 1.0);
    let off_fix = rand_offsets(rng, &[b, groups, points, 2, h, w]);
    let logits_fix = rand_tensor(rng, &[b, groups, points, h, w], 1.0);
    let proj_fix = rand_tensor(rng, &[groups, c, cp], 0.7);
    let wsum = rand_tensor(rng, &[b, c, h, w], 1.0);

    // gradcheck dcnv3_apply w.r.t. input, offsets, modulation logits, and
    // projection weights; modulation passes through its softmax over K.
    for (name, which) in [
        ("dcnv3_apply_x", 0usize),
        ("dcnv3_apply_offsets", 1),
        ("dcnv3_apply_modulation_logits", 2),
        ("dcnv3_apply_proj", 3),
    ] {
        let (xf, of, lf, pf, ws) = (
            xfix.clone(),
            off_fix.clone(),
            logits_fix.clone(),
            proj_fix.clone(),
            wsum.clone(),
        );
        let point = match which {
            0 => xfix.clone(),
            1 => off_fix.clone(),
            2 => logits_fix.clone(),
            _ => proj_fix.clone(),
        };
        reports.push(gradcheck(
            name,
            move |t, p| {
                let x = if which == 0 { p } else { t.constant(xf.clone()) };
                let off = if which == 1 { p } else { t.constant(of.clone()) };
                let logits = if which == 2 { p } else { t.constant(lf.clone()) };
                let proj = if which == 3 { p } else { t.constant(pf.clone()) };
                let modulation = t.record(Op::Softmax { axis: 2 }, &[logits])?;
                let y = t.record(Op::DcnCore { groups, points }, &[x, off, modulation, proj])?;
                weighted_sum(t, y, &ws)
            },
            &point,
            EPS,
            tol,
        )?);
    }
    Ok(())
}

fn arfm_checks(
    rng: &mut ChaCha8Rng,
    tol: f64,
    reports: &mut Vec<GradcheckReport>,
) -> Result<()> {
    let channels = 4usize;
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(123);
    let params = ArfmParams::build(&mut store, &mut init_rng, "gc", channels, 2, 2, 0.0, None)?;
    // non-degenerate generators and LayerScales so every path carries signal
    for id in [params.dcn.gens.offset_w, params.dcn.gens.modulation_w] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_offsets(&mut init_rng, &shape).requires_grad(true);
    }
    for id in [params.gamma1, params.gamma2] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&mut init_rng, &shape, 0.5).requires_grad(true);
    }

    let xpoint = rand_tensor(rng, &[1, channels, 5, 5], 1.0);
    let wsum = rand_tensor(rng, &[1, channels, 5, 5], 1.0);
    {
        let (store_c, params_c, ws) = (store.clone(), params.clone(), wsum.clone());
        reports.push(gradcheck(
            "arfm_forward_x",
            move |t, x| {
                let mut binder = Binder::new(&store_c);
                let y = arfm_forward(t, &mut binder, &store_c, x, &params_c, Mode::Eval, None)?;
                weighted_sum(t, y, &ws)
            },
            &xpoint,
            EPS,
            tol,
        )?);
    }

    // and w.r.t. a parameter tensor: pre-bind the probed leaf for ffn_w1
    let wid = params.ffn_w1;
    let wpoint = store.get(wid).clone();
    {
        let (store_c, params_c, xf, ws) = (store, params, xpoint, wsum);
        reports.push(gradcheck(
            "arfm_forward_ffn_w1",
            move |t, p| {
                let mut binder = Binder::new(&store_c);
                binder.put(wid, p);
                let x = t.constant(xf.clone());
                let y = arfm_forward(t, &mut binder, &store_c, x, &params_c, Mode::Eval, None)?;
                weighted_sum(t, y, &ws)
            },
            &wpoint,
            EPS,
            tol,
        )?);
    }
    Ok(())
}

fn loss_checks(
    rng: &mut ChaCha8Rng,
    tol: f64,
    reports: &mut Vec<GradcheckReport>,
) -> Result<()> {
    let (b, n, h, w) = (2usize, 3usize, 4usize, 4usize);
    let probs_data: Vec<f64> = (0..b * n * h * w).map(|_| rng.gen_range(0.05..1.0)).collect();
    let probs = Tensor::new(vec![b, n, h, w], probs_data).unwrap();
    let labels: Vec<u8> = (0..b * h * w).map(|_| rng.gen_range(0..n) as u8).collect();
    let onehot = onehot_from_labels::<f64>(&labels, b, n, h, w).unwrap();
    let mut ks = KappaState::init(n, 32.0).unwrap();
    ks.update_kappa(0, &[0.15, 0.5, 0.9]).unwrap();
    let cfg = CtLossConfig::new(0.6, n).unwrap();

    {
        let (oh, ksc) = (onehot.clone(), ks.clone());
        reports.push(gradcheck(
            "tvmf_dice_loss",
            move |t, x| {
                let y = t.constant(oh.clone());
                crate::losses::tvmf_dice_loss(t, x, y, &ksc)
            },
            &probs,
            EPS,
            tol,
        )?);
    }
    {
        let oh = onehot.clone();
        reports.push(gradcheck(
            "cross_entropy",
            move |t, x| {
                let y = t.constant(oh.clone());
                crate::losses::cross_entropy(t, x, y)
            },
            &probs,
            EPS,
            tol,
        )?);
    }
    {
        let oh = onehot;
        reports.push(gradcheck(
            "ct_loss",
            move |t, x| {
                let y = t.constant(oh.clone());
                ct_loss(t, x, y, &ks, &cfg)
            },
            &probs,
            EPS,
            tol,
        )?);
    }
    Ok(())
}

fn model_check(
    rng: &mut ChaCha8Rng,
    tol: f64,
    reports: &mut Vec<GradcheckReport>,
) -> Result<()> {
    let model = SacNetModel::<f64>::new(SacNetConfig::micro(3), 42)?;
    let img = rand_tensor(rng, &[1, 3, 32, 32], 0.5);
    let w = rand_tensor(rng, &[1, 3, 32, 32], 1.0);
    reports.push(gradcheck(
        "model_forward_micro_x",
        move |t, x| {
            let mut binder = Binder::new(&model.store);
            let probs = model.model_forward(t, &mut binder, x, Mode::Eval, None)?;
            weighted_sum(t, probs, &w)
        },
        &img,
        2e-5,
        tol,
    )?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dcnv3_group_passes() {
        let reports = run_gradcheck_suite(SuiteFilter::Dcnv3, 1e-4).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn arfm_group_passes() {
        for r in run_gradcheck_suite(SuiteFilter::Arfm, 1e-4).unwrap() {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn losses_group_passes() {
        for r in run_gradcheck_suite(SuiteFilter::Losses, 1e-4).unwrap() {
            assert!(r.pass, "{}", r.line());
        }
    }
}
