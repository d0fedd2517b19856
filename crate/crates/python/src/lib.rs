//! Python bindings over the core stack: the segmentation model, the
//! adaptive loss pieces, overlap/distance metrics, synthetic data and the
//! gradient-check suite. Images and probability maps cross the boundary as
//! flat row-major lists with explicit shapes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sacnet_core::losses::{self, CtLossConfig, KappaState};
use sacnet_core::metrics::BinaryMask;
use sacnet_core::model::{SacNetConfig, SacNetModel};
use sacnet_core::nn::Binder;
use sacnet_core::tape::{Ctx, Imm};
use sacnet_core::tensor::Tensor;
use sacnet_core::train::argmax_labels;
use sacnet_core::verify::{run_gradcheck_suite, SuiteFilter};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mask_from_rows(rows: Vec<Vec<bool>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must be a non-empty rectangle"));
    }
    BinaryMask::new(h, w, rows.into_iter().flatten().collect()).map_err(err)
}

/// The assembled encoder-decoder (f64 evaluation mode).
#[pyclass]
struct Model {
    inner: SacNetModel<f64>,
}

#[pymethods]
impl Model {
    /// Builds a model from a preset name ("paper", "toy", "micro") or from
    /// explicit architecture arguments.
    #[new]
    #[pyo3(signature = (num_classes, preset="toy", seed=0, embed_dims=None, depths=None, groups=None, input_size=None, share_projection=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_classes: usize,
        preset: &str,
        seed: u64,
        embed_dims: Option<Vec<usize>>,
        depths: Option<Vec<usize>>,
        groups: Option<usize>,
        input_size: Option<usize>,
        share_projection: Option<bool>,
    ) -> PyResult<Self> {
        let mut cfg = match preset {
            "paper" => SacNetConfig::paper(num_classes),
            "toy" => SacNetConfig::toy(num_classes),
            "micro" => SacNetConfig::micro(num_classes),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown preset {other}; expected paper, toy or micro"
                )))
            }
        };
        if let Some(d) = embed_dims {
            cfg.embed_dims = d;
        }
        if let Some(d) = depths {
            cfg.depths = d;
        }
        if let Some(g) = groups {
            cfg.groups = g;
        }
        if let Some(s) = input_size {
            cfg.input_h = s;
            cfg.input_w = s;
        }
        if let Some(s) = share_projection {
            cfg.share_projection = s;
        }
        let inner = SacNetModel::new(cfg, seed).map_err(err)?;
        Ok(Model { inner })
    }

    /// Class probabilities for a flat row-major (3,S,S) image in [0,1].
    /// Returns (flat probabilities, (classes, height, width)).
    fn forward(&self, image: Vec<f64>) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
        let (h, w) = (self.inner.config.input_h, self.inner.config.input_w);
        let expected = 3 * h * w;
        if image.len() != expected {
            return Err(PyValueError::new_err(format!(
                "image must have {expected} values (3x{h}x{w}), got {}",
                image.len()
            )));
        }
        let img = Tensor::<f64>::new(vec![1, 3, h, w], image).map_err(err)?;
        let probs = self.inner.predict(&img).map_err(err)?;
        let n = self.inner.config.num_classes;
        Ok((probs.data().to_vec(), (n, h, w)))
    }

    /// Per-pixel argmax class ids as rows.
    fn predict_labels(&self, image: Vec<f64>) -> PyResult<Vec<Vec<u8>>> {
        let (flat, (_, h, w)) = self.forward(image)?;
        let probs = Tensor::<f64>::new(
            vec![1, self.inner.config.num_classes, h, w],
            flat,
        )
        .map_err(err)?;
        let labels = argmax_labels(&probs);
        Ok(labels.chunks(w).map(|r| r.to_vec()).collect())
    }

    /// Distinct, shared, and hypothetical-unshared parameter value counts.
    fn count_parameters(&self) -> (usize, usize, usize) {
        let c = self.inner.count_parameters();
        (c.total, c.shared, c.unshared_equivalent)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.inner.config.input_h, self.inner.config.input_w)
    }
}

/// Deterministic synthetic dataset; returns (flat (3,S,S) image, flat mask)
/// pairs.
#[pyfunction]
fn gen_synthetic(
    seed: u64,
    count: usize,
    size: usize,
    classes: usize,
) -> PyResult<Vec<(Vec<f64>, Vec<u8>)>> {
    let samples = sacnet_core::data::gen_synthetic(seed, count, size, classes).map_err(err)?;
    Ok(samples.into_iter().map(|s| (s.image, s.mask)).collect())
}

#[pyfunction]
fn dsc(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    sacnet_core::metrics::dsc(&mask_from_rows(a)?, &mask_from_rows(b)?).map_err(err)
}

#[pyfunction]
fn iou(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    sacnet_core::metrics::iou(&mask_from_rows(a)?, &mask_from_rows(b)?).map_err(err)
}

#[pyfunction]
fn hausdorff(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    sacnet_core::metrics::hausdorff(&mask_from_rows(a)?, &mask_from_rows(b)?).map_err(err)
}

#[pyfunction]
fn hd95(a: Vec<Vec<bool>>, b: Vec<Vec<bool>>) -> PyResult<f64> {
    sacnet_core::metrics::hd95(&mask_from_rows(a)?, &mask_from_rows(b)?).map_err(err)
}

/// Reshaped cosine similarity `(1 + cos)/(1 + kappa (1 - cos)) - 1`.
#[pyfunction]
fn tvmf_phi(cos_theta: f64, kappa: f64) -> PyResult<f64> {
    losses::tvmf_phi(cos_theta, kappa).map_err(err)
}

fn loss_inputs(
    probs: Vec<f64>,
    labels: Vec<u8>,
    batch: usize,
    classes: usize,
    size: usize,
) -> PyResult<(Tensor<f64>, Tensor<f64>)> {
    let p = Tensor::<f64>::new(vec![batch, classes, size, size], probs).map_err(err)?;
    let y = losses::onehot_from_labels::<f64>(&labels, batch, classes, size, size).map_err(err)?;
    Ok((p, y))
}

/// Mean over classes of `(1 - phi_kappa_c(cos_c))^2` for flat probabilities
/// against integer labels.
#[pyfunction]
fn tvmf_dice_loss(
    probs: Vec<f64>,
    labels: Vec<u8>,
    batch: usize,
    classes: usize,
    size: usize,
    kappas: Vec<f64>,
) -> PyResult<f64> {
    let (p, y) = loss_inputs(probs, labels, batch, classes, size)?;
    let ks = KappaState::from_parts(kappas, f64::MAX, vec![]);
    let mut imm = Imm::new();
    let pv = Ctx::<f64>::leaf(&mut imm, p);
    let yv = Ctx::<f64>::leaf(&mut imm, y);
    let l = losses::tvmf_dice_loss(&mut imm, pv, yv, &ks).map_err(err)?;
    l.item().map_err(err)
}

#[pyfunction]
fn cross_entropy(
    probs: Vec<f64>,
    labels: Vec<u8>,
    batch: usize,
    classes: usize,
    size: usize,
) -> PyResult<f64> {
    let (p, y) = loss_inputs(probs, labels, batch, classes, size)?;
    let mut imm = Imm::new();
    let pv = Ctx::<f64>::leaf(&mut imm, p);
    let yv = Ctx::<f64>::leaf(&mut imm, y);
    let l = losses::cross_entropy(&mut imm, pv, yv).map_err(err)?;
    l.item().map_err(err)
}

/// `gamma * tvmf + (1 - gamma) * cross_entropy`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn ct_loss(
    probs: Vec<f64>,
    labels: Vec<u8>,
    batch: usize,
    classes: usize,
    size: usize,
    kappas: Vec<f64>,
    gamma: f64,
) -> PyResult<f64> {
    let (p, y) = loss_inputs(probs, labels, batch, classes, size)?;
    let ks = KappaState::from_parts(kappas, f64::MAX, vec![]);
    let cfg = CtLossConfig::new(gamma, classes).map_err(err)?;
    let mut imm = Imm::new();
    let pv = Ctx::<f64>::leaf(&mut imm, p);
    let yv = Ctx::<f64>::leaf(&mut imm, y);
    let l = losses::ct_loss(&mut imm, pv, yv, &ks, &cfg).map_err(err)?;
    l.item().map_err(err)
}

/// The per-epoch concentration update `kappa_c = kappa_max * IoU_c`.
#[pyfunction]
fn kappa_update(kappa_max: f64, val_iou: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut ks = KappaState::init(val_iou.len(), kappa_max).map_err(err)?;
    ks.update_kappa(0, &val_iou).map_err(err)?;
    Ok(ks.kappa().to_vec())
}

#[pyfunction]
fn cosine_lr(step: u64, total: u64, base_lr: f64) -> PyResult<f64> {
    sacnet_core::optim::cosine_lr(step, total, base_lr).map_err(err)
}

/// Runs the finite-difference gradient suite; returns one dict per check.
#[pyfunction]
#[pyo3(signature = (op="all", tol=1e-4))]
fn gradcheck(py: Python<'_>, op: &str, tol: f64) -> PyResult<Vec<Py<PyAny>>> {
    let filter: SuiteFilter = op.parse().map_err(PyValueError::new_err)?;
    let reports = run_gradcheck_suite(filter, tol)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut out = Vec::with_capacity(reports.len());
    for r in reports {
        let d = pyo3::types::PyDict::new(py);
        d.set_item("name", r.name)?;
        d.set_item("max_abs_err", r.max_abs_err)?;
        d.set_item("max_rel_err", r.max_rel_err)?;
        d.set_item("pass", r.pass)?;
        out.push(d.into_any().unbind());
    }
    Ok(out)
}

/// Degenerate deformable aggregation check: zero offsets and uniform
/// modulation reduce the operator to a 3x3 neighborhood mean followed by
/// the grouped projection. Returns the max abs difference against that
/// closed form on a random input.
#[pyfunction]
fn dcn_degenerate_residual(seed: u64) -> PyResult<f64> {
    use sacnet_core::dcn;
    use sacnet_core::nn::ParamStore;
    use rand::SeedableRng;
    let mut store = ParamStore::<f64>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = dcn::Dcnv3Params::build(&mut store, &mut rng, "d", 4, 2, 9, None).map_err(err)?;
    let x = sacnet_core::nn::trunc_normal::<f64>(&mut rng, &[1, 4, 8, 8], 1.0);

    let mut imm = Imm::new();
    let mut binder = Binder::new(&store);
    let xv = Ctx::<f64>::leaf(&mut imm, x.clone());
    let field = dcn::compute_offsets_modulation(&mut imm, &mut binder, &store, xv.clone(), &p)
        .map_err(err)?;
    let out = dcn::dcnv3_apply(&mut imm, &mut binder, &store, xv, &field, &p).map_err(err)?;

    // closed form: per-group neighborhood mean, then the grouped projection
    let proj = store.get(p.proj);
    let (c, cp, h, w) = (4usize, 2usize, 8usize, 8usize);
    let mut worst = 0.0f64;
    for hy in 0..h {
        for wx in 0..w {
            let mut s = vec![0.0f64; c];
            for g in 0..2 {
                for cpi in 0..cp {
                    let mut mean = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (hy as i64 + dy, wx as i64 + dx);
                            if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                                mean += x.at4(0, g * cp + cpi, yy as usize, xx as usize);
                            }
                        }
                    }
                    mean /= 9.0;
                    for co in 0..c {
                        s[co] += proj.data()[(g * c + co) * cp + cpi] * mean;
                    }
                }
            }
            for co in 0..c {
                worst = worst.max((out.at4(0, co, hy, wx) - s[co]).abs());
            }
        }
    }
    Ok(worst)
}

#[pymodule]
fn sacnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(tvmf_phi, m)?)?;
    m.add_function(wrap_pyfunction!(tvmf_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(ct_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_update, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(dcn_degenerate_residual, m)?)?;
    Ok(())
}
