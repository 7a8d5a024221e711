//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParameterStore, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates of each parameter (sampled).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; falls back to the
/// absolute error when both gradients are essentially zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for each parameter in `params` (all parameters if empty).
pub fn check<F>(
    store: &ParameterStore,
    params: &[ParamId],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let params: Vec<ParamId> = if params.is_empty() {
        store.ids().collect()
    } else {
        params.to_vec()
    };
    let mut tape = Tape::new(store);
    let root = f(&mut tape)?;
    let grads = tape.backward(root)?;
    let analytic_of = |id: ParamId| -> Vec<f64> {
        let numel = store.value(id).numel();
        grads
            .param_grads()
            .find(|(p, _)| *p == id)
            .and_then(|(_, g)| g.map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; numel])
    };
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new(s);
        let r = f(&mut t)?;
        Ok(t.value(r).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(params.len());
    let mut work = store.clone();
    for id in params {
        let full = analytic_of(id);
        let base = store.value(id).clone();
        let numel = base.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut plus = base.data().to_vec();
            plus[c] += opts.step;
            work.set_value(id, Tensor::new(base.shape().to_vec(), plus)?)?;
            let fp = eval(&work)?;
            let mut minus = base.data().to_vec();
            minus[c] -= opts.step;
            work.set_value(id, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fm = eval(&work)?;
            numeric.push((fp - fm) / (2.0 * opts.step));
        }
        work.set_value(id, base)?;
        let analytic: Vec<f64> = coords.iter().map(|&c| full[c]).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        report.push(ParamCheck {
            name: store.name(id).to_string(),
            analytic_norm: norm(&analytic),
            numeric_norm: norm(&numeric),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(GradCheckReport { params: report })
}
