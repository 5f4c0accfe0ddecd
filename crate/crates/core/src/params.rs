//! Named parameter tensors with per-parameter Adam state.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};

/// One trainable tensor plus its optimizer moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

/// Adam hyperparameters with the standard defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamOptions {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        AdamOptions {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Parameter names are unique; iteration order is the sorted name order, which
/// keeps every downstream computation deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> Result<()> {
        if rows * cols != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                value.len()
            )));
        }
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} already exists")));
        }
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            Param {
                rows,
                cols,
                value,
                first_moment: vec![0.0; n],
                second_moment: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Replaces a parameter's values, keeping its shape and optimizer state.
    pub fn set_value(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if value.len() != p.value.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} holds {} values, got {}",
                p.value.len(),
                value.len()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Mutates one parameter's raw values; used by finite-difference probes.
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if index >= p.value.len() {
            return Err(Error::invalid(format!(
                "index {index} out of range for parameter {name}"
            )));
        }
        p.value[index] += delta;
        Ok(())
    }

    /// Inserts every parameter as a differentiable leaf on `tape`.
    pub fn bind_trainable(&self, tape: &mut Tape) -> Result<BTreeMap<String, ValueId>> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            ids.insert(name.clone(), tape.leaf(p.rows, p.cols, p.value.clone())?);
        }
        Ok(ids)
    }

    /// Inserts every parameter as a constant: values participate, gradients
    /// are blocked at the source.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<BTreeMap<String, ValueId>> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            ids.insert(name.clone(), tape.constant(p.rows, p.cols, p.value.clone())?);
        }
        Ok(ids)
    }

    /// Collects gradients for every bound parameter after a backward pass.
    pub fn collect_grads(
        &self,
        tape: &Tape,
        ids: &BTreeMap<String, ValueId>,
        grads: &crate::autodiff::Gradients,
    ) -> GradMap {
        let mut out = GradMap::new();
        for (name, p) in &self.entries {
            if let Some(&id) = ids.get(name) {
                let _ = tape;
                out.insert(name.clone(), grads.wrt(id, p.value.len()));
            }
        }
        out
    }

    /// Standard Adam update with bias correction. Rejects non-finite
    /// gradients, naming the offending parameter.
    pub fn adam_step(&mut self, grads: &GradMap, lr: f64, opts: AdamOptions) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.value.len() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    p.value.len()
                )));
            }
            p.step += 1;
            let bc1 = 1.0 - opts.beta1.powi(p.step as i32);
            let bc2 = 1.0 - opts.beta2.powi(p.step as i32);
            for i in 0..g.len() {
                p.first_moment[i] = opts.beta1 * p.first_moment[i] + (1.0 - opts.beta1) * g[i];
                p.second_moment[i] =
                    opts.beta2 * p.second_moment[i] + (1.0 - opts.beta2) * g[i] * g[i];
                let m_hat = p.first_moment[i] / bc1;
                let v_hat = p.second_moment[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + opts.epsilon);
            }
        }
        Ok(())
    }

    /// Bitwise equality of parameter values (optimizer state ignored).
    pub fn values_equal_bitwise(&self, other: &ParamStore) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(
            |((an, ap), (bn, bp))| {
                an == bn
                    && ap.value.len() == bp.value.len()
                    && ap
                        .value
                        .iter()
                        .zip(&bp.value)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            },
        )
    }
}

/// Worst-case relative disagreement between analytic and central-difference
/// gradients of a rebuildable scalar loss.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Central finite differences (step `h`) against `analytic`, re-evaluating
/// `loss` with each entry of each parameter perturbed in both directions.
/// Relative error uses max(|a|, |n|, 1e-3) as the denominator so that
/// near-zero gradients are compared at the finite-difference noise floor.
pub fn check_gradients<F>(
    store: &ParamStore,
    analytic: &GradMap,
    h: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = store.clone();
    for (name, grad) in analytic {
        let len = store.get(name)?.value.len();
        if grad.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "analytic gradient for {name} has {} entries, parameter has {len}",
                grad.len()
            )));
        }
        for i in 0..len {
            probe.nudge(name, i, h)?;
            let plus = loss(&probe)?;
            probe.nudge(name, i, -2.0 * h)?;
            let minus = loss(&probe)?;
            probe.nudge(name, i, h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-3);
            let rel = (grad[i] - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 2, vec![0.5, -0.5]).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        store.adam_step(&grads, 0.1, AdamOptions::default()).unwrap();
        assert_eq!(store.get("w").unwrap().value, vec![0.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With g=1 the bias-corrected ratio m_hat/sqrt(v_hat) is exactly 1, so
        // the first update is -lr up to epsilon.
        let mut store = ParamStore::new();
        store.insert("w", 1, 1, vec![1.0]).unwrap();
        let mut grads = GradMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        store.adam_step(&grads, 0.1, AdamOptions::default()).unwrap();
        assert_abs_diff_eq!(store.get("w").unwrap().value[0], 0.9, epsilon = 1e-8);
    }

    #[test]
    fn ten_steps_match_reference_trace() {
        // Independent scalar Adam on f(w) = w^2, w0 = 1, lr = 0.1.
        let opts = AdamOptions::default();
        let mut w_ref = 1.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut trace = Vec::new();
        for t in 1..=10u32 {
            let g = 2.0 * w_ref;
            m = opts.beta1 * m + (1.0 - opts.beta1) * g;
            v = opts.beta2 * v + (1.0 - opts.beta2) * g * g;
            let m_hat = m / (1.0 - opts.beta1.powi(t as i32));
            let v_hat = v / (1.0 - opts.beta2.powi(t as i32));
            w_ref -= 0.1 * m_hat / (v_hat.sqrt() + opts.epsilon);
            trace.push(w_ref);
        }

        let mut store = ParamStore::new();
        store.insert("w", 1, 1, vec![1.0]).unwrap();
        for step in 0..10 {
            let w = store.get("w").unwrap().value[0];
            let mut grads = GradMap::new();
            grads.insert("w".to_string(), vec![2.0 * w]);
            store.adam_step(&grads, 0.1, opts).unwrap();
            let got = store.get("w").unwrap().value[0];
            assert!(
                (got - trace[step]).abs() <= 1e-12,
                "step {step}: {got} vs {}",
                trace[step]
            );
        }
    }

    #[test]
    fn nan_gradient_names_offender() {
        let mut store = ParamStore::new();
        store.insert("enc.w0", 1, 1, vec![1.0]).unwrap();
        let mut grads = GradMap::new();
        grads.insert("enc.w0".to_string(), vec![f64::NAN]);
        let err = store.adam_step(&grads, 0.1, AdamOptions::default()).unwrap_err();
        match err {
            Error::TrainingDiverged(msg) => assert!(msg.contains("enc.w0")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 1, vec![0.0]).unwrap();
        assert!(store.insert("w", 1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn grad_check_accepts_exact_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 3, vec![0.3, -0.2, 0.9]).unwrap();
        // loss = sum w^3; grad = 3 w^2
        let loss = |s: &ParamStore| -> Result<f64> {
            Ok(s.get("w")?.value.iter().map(|w| w * w * w).sum())
        };
        let mut analytic = GradMap::new();
        analytic.insert(
            "w".to_string(),
            store.get("w").unwrap().value.iter().map(|w| 3.0 * w * w).collect(),
        );
        let report = check_gradients(&store, &analytic, 1e-5, loss).unwrap();
        assert!(report.max_rel_err <= 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_flags_wrong_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", 1, 1, vec![0.7]).unwrap();
        let loss = |s: &ParamStore| -> Result<f64> { Ok(s.get("w")?.value[0].powi(2)) };
        let mut analytic = GradMap::new();
        analytic.insert("w".to_string(), vec![100.0]);
        let report = check_gradients(&store, &analytic, 1e-5, loss).unwrap();
        assert!(report.max_rel_err > 0.5);
        assert_eq!(report.worst_param, "w");
    }
}
