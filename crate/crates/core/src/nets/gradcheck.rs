//! Central-difference gradient checking in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{ModelInput, StereoModel};
use crate::error::Result;
use crate::head::DisparityMap;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn name(&self, i: usize) -> String {
        format!("x[{i}]")
    }

    /// The value together with an identifier of the smooth piece of a
    /// piecewise-smooth objective that `x` lies on; `None` means the
    /// objective is smooth everywhere.
    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<u64>)> {
        Ok((self.value(x)?, None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor: entries whose gradients are both below this in
    /// magnitude are compared absolutely.
    pub floor: f64,
    /// A stencil that straddles a kink is retried at a tenth of the step,
    /// down to this size.
    pub min_step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            min_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_param: String,
    /// Indices whose error exceeded the tolerance.
    pub flagged: Vec<usize>,
    pub checked: usize,
    /// Entries whose step had to shrink to stay clear of a kink.
    pub reduced: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn grad_check(obj: &impl Objective, x0: &[f64], opts: GradCheckOptions) -> Result<GradCheckReport> {
    let analytic = obj.gradient(x0)?;
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_param: String::new(),
        flagged: Vec::new(),
        checked: x0.len(),
        reduced: 0,
    };
    let (_, sig0) = obj.evaluate(x0)?;
    for i in 0..x0.len() {
        let mut step = opts.step;
        let numeric = loop {
            x[i] = x0[i] + step;
            let (plus, sp) = obj.evaluate(&x)?;
            x[i] = x0[i] - step;
            let (minus, sm) = obj.evaluate(&x)?;
            x[i] = x0[i];
            if (sp == sig0 && sm == sig0) || step / 10.0 < opts.min_step {
                break (plus - minus) / (2.0 * step);
            }
            step /= 10.0;
        };
        if step < opts.step {
            report.reduced += 1;
        }
        let err = relative_error(analytic[i], numeric, opts.floor);
        if err > opts.tolerance || !err.is_finite() {
            report.flagged.push(i);
        }
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    report.worst_param = obj.name(report.worst_index);
    Ok(report)
}

/// `x0` plus uniform noise in `[-scale, scale]`. Freshly initialized nets
/// have zero biases, which puts every unit fed only by zeros (padding,
/// zero-filled hypotheses) exactly on a LeakyReLU kink where no derivative
/// exists; checking at a nearby generic point avoids that.
pub fn generic_point(x0: &[f64], scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x0.iter().map(|v| v + rng.random_range(-scale..=scale)).collect()
}

/// The training loss of a model on one sample, as a function of its
/// trainable parameters.
pub struct ModelObjective {
    pub model: StereoModel<f64>,
    pub input: ModelInput<f64>,
    pub gt: DisparityMap<f64>,
    names: Vec<String>,
}

impl ModelObjective {
    pub fn new(model: StereoModel<f64>, input: ModelInput<f64>, gt: DisparityMap<f64>) -> Self {
        let names = model.trainable_names();
        Self {
            model,
            input,
            gt,
            names,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.model.flatten_trainable()
    }

    fn with(&self, x: &[f64]) -> Result<StereoModel<f64>> {
        let mut m = self.model.clone();
        m.assign_trainable(x)?;
        Ok(m)
    }
}

impl Objective for ModelObjective {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let m = self.with(x)?;
        let f = m.forward(&self.input)?;
        Ok(m.loss(&f, &self.gt)?.total)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.with(x)?;
        let f = m.forward_train(&self.input)?;
        let (_, g) = m.backward(&f, &self.gt)?;
        Ok(m.flatten_grads(&g))
    }

    fn name(&self, i: usize) -> String {
        self.names.get(i).cloned().unwrap_or_else(|| format!("x[{i}]"))
    }

    fn evaluate(&self, x: &[f64]) -> Result<(f64, Option<u64>)> {
        let m = self.with(x)?;
        let f = m.forward_train(&self.input)?;
        Ok((m.loss(&f, &self.gt)?.total, Some(m.kink_signature(&f, &self.gt)?)))
    }
}
