use num_traits::ToPrimitive;
use rayon::prelude::*;

use super::dd::DoubleDouble;
use super::mlp::{Activation, Scalar};
use super::model::{
    backward, forward_train, upstream_loss, AggregationParams, Intermediates, ViewBatch,
    TENSOR_NAMES,
};
use super::AggregationError;

/// Deliberate corruption of one analytic gradient value, used to prove that
/// the checker catches faults.
#[derive(Debug, Clone, PartialEq)]
pub struct Fault {
    pub tensor: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose central stencil crossed a kink and were differenced
    /// one-sidedly instead.
    pub one_sided: usize,
    /// Elements with kinks on both sides of the stencil.
    pub straddled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_error < self.tolerance))
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-12, a.abs() + b.abs())
}

fn compare(name: &str, analytic: &[f64], numeric: &[(f64, Stencil)]) -> TensorCheck {
    let mut out = TensorCheck {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().map_or(0.0, |n| n.0),
        one_sided: 0,
        straddled: 0,
    };
    for (i, (&a, &(n, stencil))) in analytic.iter().zip(numeric).enumerate() {
        match stencil {
            Stencil::Central => {}
            Stencil::OneSided => out.one_sided += 1,
            Stencil::Straddled => out.straddled += 1,
        }
        let err = relative_error(a, n);
        if err > out.max_rel_error || err.is_nan() {
            out.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            out.worst_index = i;
            out.analytic = a;
            out.numeric = n;
        }
    }
    out
}

/// Loss and branch signature of one extended-precision evaluation.
struct Probe<'a> {
    params: AggregationParams<DoubleDouble>,
    batch: ViewBatch<DoubleDouble>,
    upstream: &'a [DoubleDouble],
    kinked: bool,
}

/// Input addressed by a finite-difference probe.
#[derive(Debug, Clone, Copy)]
enum Target {
    Param(usize),
    Features,
    Conditions,
}

impl Probe<'_> {
    fn slot(&mut self, target: Target, i: usize) -> &mut DoubleDouble {
        match target {
            Target::Param(t) => &mut self.params.tensors_mut().swap_remove(t)[i],
            Target::Features => &mut self.batch.features_mut()[i],
            Target::Conditions => &mut self.batch.conditions_mut()[i],
        }
    }

    fn eval(&self) -> (DoubleDouble, Vec<u32>) {
        let (pooled, cache) = forward_train(&self.batch, &self.params).expect("checked shapes");
        (upstream_loss(&pooled, self.upstream), cache.branch_signature(self.kinked))
    }
}

/// Which stencil produced a numeric derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stencil {
    Central,
    OneSided,
    /// Both sides leave the branch; central differences are reported as is.
    Straddled,
}

/// Finite-difference derivative of every element addressed by `slot`, in
/// double-double precision. The central stencil is used unless it crosses a
/// kink of the forward pass, in which case the second-order one-sided stencil
/// on the side that stays on the base branch is used.
fn numeric_gradient(
    base: &Probe<'_>,
    len: usize,
    step: f64,
    target: Target,
) -> Vec<(f64, Stencil)> {
    let (f0, sig0) = base.eval();
    (0..len)
        .into_par_iter()
        .map_init(
            || Probe {
                params: base.params.clone(),
                batch: base.batch.clone(),
                upstream: base.upstream,
                kinked: base.kinked,
            },
            |probe, i| {
                let x = *probe.slot(target, i);
                let h = DoubleDouble::new(step);
                let mut at = |offset: f64| {
                    *probe.slot(target, i) = x + h * DoubleDouble::new(offset);
                    let out = probe.eval();
                    *probe.slot(target, i) = x;
                    out
                };
                let (fp, sp) = at(1.0);
                let (fm, sm) = at(-1.0);
                let two = DoubleDouble::new(2.0);
                let three = DoubleDouble::new(3.0);
                let four = DoubleDouble::new(4.0);
                let central = ((fp - fm) / (two * h), Stencil::Central);
                let (d, stencil) = if sp == sig0 && sm == sig0 {
                    central
                } else {
                    let ahead = (sp == sig0).then(|| at(2.0)).filter(|(_, s)| *s == sig0);
                    let behind = (sm == sig0).then(|| at(-2.0)).filter(|(_, s)| *s == sig0);
                    match (ahead, behind) {
                        (Some((f2, _)), _) => {
                            ((four * fp - three * f0 - f2) / (two * h), Stencil::OneSided)
                        }
                        (None, Some((f2, _))) => {
                            ((three * f0 - four * fm + f2) / (two * h), Stencil::OneSided)
                        }
                        (None, None) => (central.0, Stencil::Straddled),
                    }
                };
                (d.to_f64().unwrap_or(f64::NAN), stencil)
            },
        )
        .collect()
}

/// Compares [`backward`] against central finite differences of
/// `sum(upstream * pooled)` for every parameter tensor and for the input
/// features and conditions.
pub fn grad_check(
    params: &AggregationParams<f64>,
    batch: &ViewBatch<f64>,
    upstream: &[f64],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, AggregationError> {
    let (_, cache) = forward_train(batch, params)?;
    let mut grads = backward(batch, params, &cache, upstream)?;
    if let Some(f) = &config.fault {
        let slot = match f.tensor.as_str() {
            "features" => grads.features.get_mut(f.index),
            "conditions" => grads.conditions.get_mut(f.index),
            name => match TENSOR_NAMES.iter().position(|&t| t == name) {
                Some(t) => grads.params.tensors_mut().swap_remove(t).get_mut(f.index),
                None => None,
            },
        };
        match slot {
            Some(v) => *v += f.delta,
            None => {
                return Err(AggregationError::ShapeMismatch(format!(
                    "no gradient element {}[{}]",
                    f.tensor, f.index
                )))
            }
        }
    }

    let up: Vec<DoubleDouble> = upstream.iter().map(|&u| DoubleDouble::new(u)).collect();
    let base = Probe {
        params: params.cast(),
        batch: batch.cast(),
        upstream: &up,
        kinked: params.activation() != Activation::Identity,
    };
    let mut report = GradCheckReport {
        tolerance: config.tolerance,
        tensors: Vec::new(),
    };
    let analytic: Vec<Vec<f64>> = grads.params.tensors().into_iter().cloned().collect();
    for (t, name) in TENSOR_NAMES.iter().enumerate() {
        let numeric = numeric_gradient(&base, analytic[t].len(), config.step, Target::Param(t));
        report.tensors.push(compare(name, &analytic[t], &numeric));
    }
    let numeric = numeric_gradient(&base, grads.features.len(), config.step, Target::Features);
    report.tensors.push(compare("features", &grads.features, &numeric));
    let numeric = numeric_gradient(&base, grads.conditions.len(), config.step, Target::Conditions);
    report.tensors.push(compare("conditions", &grads.conditions, &numeric));
    Ok(report)
}

/// Share of each viewing condition in the quality scores' sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    /// Mean over views and blocks of `(d x / d o_j)^2`.
    pub raw: Vec<f64>,
    /// `raw` normalized to sum to 100.
    pub percent: Vec<f64>,
    /// Set when every raw value is zero; `percent` is then uniform.
    pub degenerate: bool,
}

/// Derivatives of each view's scores with respect to that view's own
/// conditions, including the path through the channelwise max.
pub fn descriptor_sensitivity<T: Scalar>(
    batch: &ViewBatch<T>,
    params: &AggregationParams<T>,
) -> Result<Sensitivity, AggregationError> {
    let (_, cache) = forward_train(batch, params)?;
    Ok(sensitivity_from(params, &cache))
}

fn sensitivity_from<T: Scalar>(params: &AggregationParams<T>, cache: &Intermediates<T>) -> Sensitivity {
    let (k, m, d) = (params.k(), params.m(), params.d());
    let mut raw = vec![0.0f64; d];
    let mut count = 0usize;
    let mut e_j = vec![T::zero(); d];
    let mut dz = vec![T::zero(); m];
    let mut dzmax = vec![T::zero(); m];
    let mut dzw = vec![T::zero(); 2 * m];
    let mut dx = vec![T::zero(); k];
    for pc in &cache.points {
        for &i in &pc.order {
            count += 1;
            for j in 0..d {
                e_j.iter_mut().for_each(|v| *v = T::zero());
                e_j[j] = T::one();
                params.phi1.tangent(&pc.h1[i * m..(i + 1) * m], &e_j, &mut dz);
                for ch in 0..m {
                    dzmax[ch] = if pc.zarg[ch] == i { dz[ch] } else { T::zero() };
                }
                dzw[..m].copy_from_slice(&dz);
                params.phi2.tangent(&pc.h2, &dzmax, &mut dzw[m..]);
                params.phi3.tangent(&pc.h3[i * m..(i + 1) * m], &dzw, &mut dx);
                raw[j] += dx.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
            }
        }
    }
    let denom = (count * k).max(1) as f64;
    raw.iter_mut().for_each(|v| *v /= denom);
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Sensitivity {
            percent: raw.iter().map(|v| 100.0 * v / total).collect(),
            raw,
            degenerate: false,
        }
    } else {
        Sensitivity {
            percent: vec![100.0 / d as f64; d],
            raw,
            degenerate: true,
        }
    }
}
