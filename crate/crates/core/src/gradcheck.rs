//! Finite-difference gradient checks.
//!
//! Layer-level checks drive one layer in isolation with the scalar loss
//! `L = Σ out · R` for a fixed random projection `R`, so `∂L/∂out = R`.
//! End-to-end checks use the softmax cross-entropy of the whole stack, where
//! a perturbation routinely moves some ReLU or max-pool input across its
//! kink; those coordinates fall back to a one-sided or shorter difference.
//! Both compare central differences against the analytic backward pass on
//! a random subset of coordinates, using the norm-wise relative error
//! `‖a − n‖ / max(‖a‖, ‖n‖, 1e-4)`.
//!
//! Tolerances assume the default `f64` build.

use serde::{Deserialize, Serialize};

use crate::dataset::Class;
use crate::error::{Error, Result};
use crate::nn::{shape_trace, Layer, Mode, Model};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::training::softmax_cross_entropy;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Initial finite-difference step.
    pub step: Real,
    /// Coordinates sampled per tensor in layer-level checks.
    pub max_coords: usize,
    /// Coordinates sampled per parameter tensor in the end-to-end check.
    pub e2e_coords: usize,
    pub layer_tol: Real,
    pub e2e_tol: Real,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            max_coords: 24,
            e2e_coords: 6,
            layer_tol: 1e-6,
            e2e_tol: 1e-4,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub layer: usize,
    pub kind: &'static str,
    /// `"input"` or the parameter name.
    pub target: String,
    pub coords: usize,
    /// Coordinates where a kink was detected and a one-sided difference used.
    pub kinks: usize,
    pub rel_error: Real,
    pub tol: Real,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub layers: Vec<CheckResult>,
    pub end_to_end: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().chain(&self.end_to_end).all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.layers.iter().chain(&self.end_to_end).filter(|r| !r.passed)
    }

    pub fn max_layer_error(&self) -> Real {
        self.layers.iter().map(|r| r.rel_error).fold(0.0, Real::max)
    }

    pub fn max_e2e_error(&self) -> Real {
        self.end_to_end.iter().map(|r| r.rel_error).fold(0.0, Real::max)
    }
}

/// Denominator floor for [`relative_error`], acting as an absolute
/// tolerance for near-zero gradients. A conv bias feeding a train-mode
/// batch-norm has an identically zero gradient, where the end-to-end
/// finite-difference estimate is rounding noise of order 1e-9.
pub const NORM_FLOOR: Real = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    let norm = |v: &mut dyn Iterator<Item = Real>| v.map(|x| x * x).sum::<Real>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(NORM_FLOOR)
}

fn sample_coords(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len <= max {
        return all;
    }
    for i in 0..max {
        let j = i + rng.below(len - i);
        all.swap(i, j);
    }
    all.truncate(max);
    all.sort_unstable();
    all
}

/// Inputs bounded away from zero so ReLU kinks are not straddled.
fn test_input(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.uniform(0.1, 1.0);
            if rng.next_u64() & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Finite-difference slope of `f` at the current point, robust to ReLU and
/// max-pool kinks. The forward and backward slopes of a smooth function
/// agree to `O(h)`. When they do not, a kink lies within the step: a side
/// whose full- and half-step slopes agree is smooth and is extrapolated;
/// if neither side is smooth the step shrinks tenfold, down to `MIN_STEP`.
/// Returns the estimate and whether a kink was detected.
fn kink_aware_slope(mut f: impl FnMut(Real) -> Result<Real>, step: Real) -> Result<(Real, bool)> {
    let f0 = f(0.0)?;
    let mut h = step;
    loop {
        let (fp, fm) = (f(h)?, f(-h)?);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        // gaps within rounding noise of the loss say nothing about kinks
        let noise = NOISE_ULPS * Real::EPSILON * f0.abs().max(1.0) / h;
        let agree = |a: Real, b: Real| (a - b).abs() <= (KINK_TOL * a.abs().max(b.abs())).max(noise);
        if agree(fwd, bwd) {
            return Ok(((fp - fm) / (2.0 * h), h != step));
        }
        let fwd_half = (f(h / 2.0)? - f0) / (h / 2.0);
        let bwd_half = (f0 - f(-h / 2.0)?) / (h / 2.0);
        // Richardson extrapolation cancels the O(h) bias of a one-sided slope
        let (fwd_ok, bwd_ok) = (agree(fwd, fwd_half), agree(bwd, bwd_half));
        if fwd_ok && (!bwd_ok || (fwd - fwd_half).abs() <= (bwd - bwd_half).abs()) {
            return Ok((2.0 * fwd_half - fwd, true));
        }
        if bwd_ok {
            return Ok((2.0 * bwd_half - bwd, true));
        }
        if h / 10.0 < MIN_STEP {
            return Ok(((fp - fm) / (2.0 * h), true));
        }
        h /= 10.0;
    }
}

/// Smallest step tried before giving up on isolating a kink.
const MIN_STEP: Real = 1e-8;

/// Relative disagreement between one-sided slopes above which a kink is
/// assumed. Smooth points at the end-to-end step sit near 1e-7. An
/// undetected kink biases the central difference by at most half the gap,
/// so this must stay well under the end-to-end tolerance; false positives
/// are harmless because the extrapolated slope is accurate either way.
const KINK_TOL: Real = 1e-5;

/// Rounding error of a loss evaluation, in units of machine epsilon.
const NOISE_ULPS: Real = 64.0;

fn projected_loss(out: &Tensor, r: &Tensor) -> Real {
    out.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

fn result(layer: usize, kind: &'static str, target: &str, a: &[Real], n: &[Real], tol: Real) -> CheckResult {
    let rel_error = relative_error(a, n);
    CheckResult {
        layer,
        kind,
        target: target.to_string(),
        coords: a.len(),
        kinks: 0,
        rel_error,
        tol,
        passed: rel_error < tol,
    }
}

/// Checks input and parameter gradients of a single layer on `input`.
/// `index` only labels the results. Running statistics are restored.
pub fn check_layer(layer: &mut dyn Layer, index: usize, input: &Tensor, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let kind = layer.kind();
    let mut rng = Rng::new(opts.seed).child(&format!("gradcheck/layer{index}"));
    let fwd_rng = rng.child("forward");
    let saved: Vec<Tensor> = layer.buffers().into_iter().map(|(_, t)| t.clone()).collect();

    let out = layer.forward_train(input, &mut fwd_rng.clone())?;
    let r = test_input(out.shape(), &mut rng)?;
    let grad_in = layer.backward(&r)?;
    let param_grads: Vec<Tensor> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let h = opts.step;
    let loss_at = |layer: &mut dyn Layer, x: &Tensor| -> Result<Real> {
        let y = layer.forward_train(x, &mut fwd_rng.clone())?;
        layer.clear_cache();
        Ok(projected_loss(&y, &r))
    };

    let mut results = Vec::new();
    let coords = sample_coords(input.len(), opts.max_coords, &mut rng);
    let mut x = input.clone();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for &c in &coords {
        let orig = x.as_slice()[c];
        x.as_mut_slice()[c] = orig + h;
        let plus = loss_at(layer, &x)?;
        x.as_mut_slice()[c] = orig - h;
        let minus = loss_at(layer, &x)?;
        x.as_mut_slice()[c] = orig;
        a.push(grad_in.as_slice()[c]);
        n.push((plus - minus) / (2.0 * h));
    }
    results.push(result(index, kind, "input", &a, &n, opts.layer_tol));

    for (pi, grad) in param_grads.iter().enumerate() {
        let name = layer.params()[pi].name;
        let coords = sample_coords(grad.len(), opts.max_coords, &mut rng);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &c in &coords {
            let orig = layer.params()[pi].value.as_slice()[c];
            layer.params_mut()[pi].value.as_mut_slice()[c] = orig + h;
            let plus = loss_at(layer, input)?;
            layer.params_mut()[pi].value.as_mut_slice()[c] = orig - h;
            let minus = loss_at(layer, input)?;
            layer.params_mut()[pi].value.as_mut_slice()[c] = orig;
            a.push(grad.as_slice()[c]);
            n.push((plus - minus) / (2.0 * h));
        }
        results.push(result(index, kind, name, &a, &n, opts.layer_tol));
    }

    for ((_, buf), old) in layer.buffers_mut().into_iter().zip(saved) {
        *buf = old;
    }
    layer.clear_cache();
    Ok(results)
}

/// Runs [`check_layer`] on every layer of `model`, in place. Spatial inputs
/// are shrunk to at most 4×4 to keep the check cheap; dense layers see
/// their exact input width.
pub fn check_model_layers(model: &mut Model, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let trace = shape_trace(model.config())?;
    let mut input_shape = model.config().input.to_vec();
    let mut rng = Rng::new(opts.seed).child("gradcheck/inputs");
    let mut results = Vec::new();
    for i in 0..model.layers().len() {
        let mut shape = vec![opts.batch.max(2)];
        if input_shape.len() == 3 {
            shape.extend([input_shape[0].min(4), input_shape[1].min(4), input_shape[2]]);
        } else {
            shape.extend_from_slice(&input_shape);
        }
        let x = test_input(&shape, &mut rng)?;
        let layer = model.layers_mut()[i].as_mut();
        results.extend(check_layer(layer, i, &x, opts).map_err(|e| Error::Layer {
            index: i,
            kind: layer.kind(),
            source: Box::new(e),
        })?);
        input_shape = trace[i].clone();
    }
    Ok(results)
}

/// Cross-entropy gradient check of every parameter tensor through the full
/// train-mode stack, on a random batch with alternating labels.
pub fn check_end_to_end(model: &mut Model, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).child("gradcheck/e2e");
    let mut shape = vec![opts.batch.max(2)];
    shape.extend_from_slice(&model.config().input);
    let x = rng.uniform_tensor(&shape, 0.0, 1.0)?;
    let labels: Vec<Real> = (0..shape[0])
        .flat_map(|i| Class::from_index(i % 2).one_hot())
        .collect();
    let y = Tensor::new(vec![shape[0], 2], labels)?;
    let fwd_rng = rng.child("forward");
    let saved: Vec<(String, Tensor)> = model
        .named_buffers()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();

    let logits = model.forward(&x, Mode::Train, &mut fwd_rng.clone())?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &y)?;
    model.backward(&dlogits)?;

    let h = opts.step;
    let loss_at = |model: &mut Model| -> Result<Real> {
        let z = model.forward(&x, Mode::Train, &mut fwd_rng.clone())?;
        Ok(softmax_cross_entropy(&z, &y)?.0)
    };

    let mut results = Vec::new();
    for li in 0..model.layers().len() {
        let kind = model.layers()[li].kind();
        let grads: Vec<(&'static str, Tensor)> = model.layers()[li]
            .params()
            .iter()
            .map(|p| (p.name, p.grad.clone()))
            .collect();
        for (pi, (name, grad)) in grads.iter().enumerate() {
            let coords = sample_coords(grad.len(), opts.e2e_coords, &mut rng);
            let (mut a, mut n, mut kinks) = (Vec::new(), Vec::new(), 0);
            for &c in &coords {
                let orig = model.layers()[li].params()[pi].value.as_slice()[c];
                let (slope, kink) = kink_aware_slope(
                    |d| {
                        model.layers_mut()[li].params_mut()[pi].value.as_mut_slice()[c] = orig + d;
                        loss_at(model)
                    },
                    h,
                )?;
                model.layers_mut()[li].params_mut()[pi].value.as_mut_slice()[c] = orig;
                a.push(grad.as_slice()[c]);
                n.push(slope);
                kinks += kink as usize;
            }
            results.push(CheckResult {
                kinks,
                ..result(li, kind, name, &a, &n, opts.e2e_tol)
            });
        }
    }

    for (name, t) in saved {
        model.set_tensor(&name, t)?;
    }
    for layer in model.layers_mut() {
        layer.clear_cache();
    }
    Ok(results)
}

/// Layer-level and end-to-end checks on `model`; parameters and running
/// statistics are left as they were.
pub fn run(model: &mut Model, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        layers: check_model_layers(model, opts)?,
        end_to_end: check_end_to_end(model, opts)?,
    })
}
