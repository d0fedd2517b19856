//! Central-difference verification of analytical gradients.
//!
//! Always runs in 64-bit mode; finite differences are not trustworthy in
//! f32. Per coordinate the reported error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, ABS_FALLBACK / tol)`,
//! so magnitudes above the floor are judged relatively and tiny ones fall
//! back to an absolute comparison against `ABS_FALLBACK`. A deep function
//! evaluated in f64 carries ~1e-13 of arithmetic noise, which makes a pure
//! relative criterion unattainable for coordinates whose true gradient is
//! itself near roundoff; the floored denominator is the strictest test the
//! arithmetic supports while still catching any real backward-pass bug.

use crate::error::{Result, SacError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Absolute error criterion for near-zero gradient coordinates.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<44} max_abs={:>12.3e} max_rel={:>12.3e} {}",
            self.name,
            self.max_abs_err,
            self.max_rel_err,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks the tape gradient of `f` (a scalar-valued function of one tensor)
/// against central differences `(f(x+eps e_i) - f(x-eps e_i)) / 2 eps`.
pub fn gradcheck<Ff>(
    name: &str,
    f: Ff,
    point: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    Ff: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    // Analytical gradient.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().requires_grad(true));
    let y = f(&mut tape, x)?;
    let yt = tape.value(y)?;
    if !yt.is_scalar() {
        return Err(SacError::NonScalarLoss {
            shape: yt.shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytical = tape
        .grad(x)?
        .expect("requires_grad leaf must have a gradient after backward")
        .to_vec();

    // Numerical gradient, coordinate by coordinate.
    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(pt.clone());
        let out = f(&mut t, v)?;
        t.value(out)?.item()
    };

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let denom_floor = ABS_FALLBACK / tol;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytical[i];
        let abs = (a - numeric).abs();
        max_abs = max_abs.max(abs);
        let mag = a.abs().max(numeric.abs()).max(denom_floor);
        max_rel = max_rel.max(abs / mag);
    }

    Ok(GradcheckReport {
        name: name.to_string(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        pass: max_rel < tol,
    })
}
