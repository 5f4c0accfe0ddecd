//! Exact Shannon quantities over finite joint distributions.
//!
//! All quantities are in bits (log base 2) with the 0·log 0 = 0 convention.
//! Tables are validated at construction and immutable afterwards, so they can
//! be shared freely across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard cap on total table cells; larger requests fail loudly.
pub const MAX_TABLE_CELLS: usize = 1 << 24;

/// Tolerance on |sum(mass) - 1| accepted at construction.
pub const MASS_SUM_TOL: f64 = 1e-12;

/// A finite symbol alphabet, optionally with named symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    size: usize,
    labels: Option<Vec<String>>,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("alphabet size must be >= 1"));
        }
        Ok(Alphabet { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("alphabet size must be >= 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::invalid(format!("duplicate symbol label {l:?}")));
            }
        }
        Ok(Alphabet {
            size: labels.len(),
            labels: Some(labels),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
}

/// Neumaier compensated summation; keeps validation honest for large tables.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Entropy in bits of a probability vector, skipping zero-mass cells.
pub fn entropy_bits(pmf: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in pmf {
        if p > 0.0 {
            h -= p * p.log2();
        }
    }
    h
}

/// Exact joint probability table over 2 or 3 finite axes, row-major mass.
#[derive(Clone, Debug)]
pub struct JointTable {
    axes: Vec<Alphabet>,
    mass: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JointTableJson {
    axes: Vec<usize>,
    mass: Vec<f64>,
}

impl JointTable {
    /// Validates axis count (2 or 3), cell count, nonnegativity and unit mass.
    pub fn new(axes: Vec<Alphabet>, mass: Vec<f64>) -> Result<Self> {
        if axes.len() < 2 || axes.len() > 3 {
            return Err(Error::invalid(format!(
                "joint table needs 2 or 3 axes, got {}",
                axes.len()
            )));
        }
        let mut cells: usize = 1;
        for a in &axes {
            cells = cells
                .checked_mul(a.size())
                .filter(|&c| c <= MAX_TABLE_CELLS)
                .ok_or_else(|| {
                    Error::ResourceLimit(format!("table exceeds {MAX_TABLE_CELLS} cells"))
                })?;
        }
        if mass.len() != cells {
            return Err(Error::invalid(format!(
                "mass has {} entries, axes imply {cells}",
                mass.len()
            )));
        }
        for (i, &m) in mass.iter().enumerate() {
            if !(m >= 0.0) {
                return Err(Error::invariant(format!(
                    "negative or NaN mass {m} at flat index {i}"
                )));
            }
        }
        let total = compensated_sum(mass.iter().copied());
        if (total - 1.0).abs() > MASS_SUM_TOL {
            return Err(Error::invariant(format!(
                "mass sums to {total}, expected 1 within {MASS_SUM_TOL:e}"
            )));
        }
        Ok(JointTable { axes, mass })
    }

    pub fn axis_count(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, i: usize) -> &Alphabet {
        &self.axes[i]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].size();
        }
        strides
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::invalid("axis subset must be non-empty"));
        }
        let mut seen = vec![false; self.axes.len()];
        for &a in subset {
            if a >= self.axes.len() {
                return Err(Error::invalid(format!(
                    "axis {a} out of range for {}-axis table",
                    self.axes.len()
                )));
            }
            if seen[a] {
                return Err(Error::invalid(format!("axis {a} repeated in subset")));
            }
            seen[a] = true;
        }
        Ok(())
    }

    /// Marginal distribution over `subset` (in the order given), row-major.
    pub fn marginal(&self, subset: &[usize]) -> Result<Vec<f64>> {
        self.check_subset(subset)?;
        let strides = self.strides();
        let sub_sizes: Vec<usize> = subset.iter().map(|&a| self.axes[a].size()).collect();
        let mut sub_strides = vec![1usize; subset.len()];
        for i in (0..subset.len().saturating_sub(1)).rev() {
            sub_strides[i] = sub_strides[i + 1] * sub_sizes[i + 1];
        }
        let out_len: usize = sub_sizes.iter().product();
        let mut out = vec![0.0; out_len];
        let mut idx = vec![0usize; self.axes.len()];
        for flat in 0..self.mass.len() {
            let m = self.mass[flat];
            if m != 0.0 {
                let mut rem = flat;
                for (d, s) in strides.iter().enumerate() {
                    idx[d] = rem / s;
                    rem %= s;
                }
                let mut o = 0;
                for (k, &a) in subset.iter().enumerate() {
                    o += idx[a] * sub_strides[k];
                }
                out[o] += m;
            }
        }
        Ok(out)
    }

    /// H(subset) in bits.
    pub fn entropy(&self, subset: &[usize]) -> Result<f64> {
        Ok(entropy_bits(&self.marginal(subset)?))
    }

    /// H(target | given) = H(target, given) - H(given), in bits.
    pub fn conditional_entropy(&self, target: &[usize], given: &[usize]) -> Result<f64> {
        for t in target {
            if given.contains(t) {
                return Err(Error::invalid(format!(
                    "axis {t} appears in both target and given sets"
                )));
            }
        }
        let mut both = target.to_vec();
        both.extend_from_slice(given);
        Ok(self.entropy(&both)? - self.entropy(given)?)
    }

    /// I(a; b) = H(a) + H(b) - H(a, b), in bits.
    pub fn mutual_information(&self, axes_a: &[usize], axes_b: &[usize]) -> Result<f64> {
        for a in axes_a {
            if axes_b.contains(a) {
                return Err(Error::invalid(format!(
                    "axis {a} appears on both sides of the mutual information"
                )));
            }
        }
        let mut both = axes_a.to_vec();
        both.extend_from_slice(axes_b);
        Ok(self.entropy(axes_a)? + self.entropy(axes_b)? - self.entropy(&both)?)
    }

    /// JSON document: {"axes": [sizes], "mass": [row-major]}.
    pub fn to_json(&self) -> String {
        let doc = JointTableJson {
            axes: self.axes.iter().map(|a| a.size()).collect(),
            mass: self.mass.clone(),
        };
        serde_json::to_string(&doc).expect("table serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JointTableJson = serde_json::from_str(text)?;
        let axes = doc
            .axes
            .iter()
            .map(|&s| Alphabet::new(s))
            .collect::<Result<Vec<_>>>()?;
        JointTable::new(axes, doc.mass)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn table2(nx: usize, ny: usize, mass: Vec<f64>) -> JointTable {
        JointTable::new(
            vec![Alphabet::new(nx).unwrap(), Alphabet::new(ny).unwrap()],
            mass,
        )
        .unwrap()
    }

    /// X uniform over 8, U = floor(X/2): deterministic 4-way coarsening.
    fn dyadic_pair() -> JointTable {
        let mut mass = vec![0.0; 8 * 4];
        for x in 0..8 {
            mass[x * 4 + x / 2] = 1.0 / 8.0;
        }
        table2(8, 4, mass)
    }

    #[test]
    fn uniform_entropy_is_log2_m() {
        let t = table2(4, 1, vec![0.25; 4]);
        assert_abs_diff_eq!(t.entropy(&[0]).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn point_mass_entropy_is_zero() {
        let mut mass = vec![0.0; 4];
        mass[2] = 1.0;
        let t = table2(4, 1, mass);
        assert_abs_diff_eq!(t.entropy(&[0]).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn dyadic_pmf_entropy() {
        // -sum p log2 p for (0.5, 0.25, 0.125, 0.125) summed by hand:
        // 0.5*1 + 0.25*2 + 2*0.125*3 = 1.75
        let t = table2(4, 1, vec![0.5, 0.25, 0.125, 0.125]);
        assert_abs_diff_eq!(t.entropy(&[0]).unwrap(), 1.75, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_function_has_zero_conditional_entropy() {
        let t = dyadic_pair();
        assert!(t.conditional_entropy(&[1], &[0]).unwrap().abs() <= 1e-12);
        assert_abs_diff_eq!(
            t.conditional_entropy(&[0], &[1]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn independent_axes_conditional_entropy_is_marginal_entropy() {
        let t = table2(4, 2, vec![0.125; 8]);
        assert_abs_diff_eq!(
            t.conditional_entropy(&[0], &[1]).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(t.mutual_information(&[0], &[1]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn coarsening_mutual_information() {
        let t = dyadic_pair();
        assert_abs_diff_eq!(t.mutual_information(&[0], &[1]).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_subset_rejected() {
        let t = dyadic_pair();
        assert!(matches!(t.entropy(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn overlapping_sets_rejected() {
        let t = dyadic_pair();
        assert!(matches!(
            t.conditional_entropy(&[0], &[0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            t.mutual_information(&[0, 1], &[1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unnormalized_table_rejected() {
        let r = JointTable::new(
            vec![Alphabet::new(2).unwrap(), Alphabet::new(2).unwrap()],
            vec![0.5, 0.5, 0.5, 0.5],
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn cell_cap_enforced() {
        let r = JointTable::new(
            vec![
                Alphabet::new(4096).unwrap(),
                Alphabet::new(4096).unwrap(),
                Alphabet::new(4096).unwrap(),
            ],
            vec![],
        );
        assert!(matches!(r, Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn duplicate_labels_rejected() {
        assert!(Alphabet::with_labels(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = table2(3, 2, vec![0.1, 0.2, 0.3, 0.15, 0.15, 0.1]);
        let back = JointTable::from_json(&t.to_json()).unwrap();
        for (a, b) in t.mass().iter().zip(back.mass()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    /// Random strictly-positive tables with exact-enough normalization.
    fn arb_table(max_a: usize, max_b: usize) -> impl Strategy<Value = JointTable> {
        (2..=max_a, 2..=max_b)
            .prop_flat_map(|(na, nb)| {
                prop::collection::vec(1e-3..1.0f64, na * nb)
                    .prop_map(move |raw| (na, nb, raw))
            })
            .prop_map(|(na, nb, raw)| {
                let s = compensated_sum(raw.iter().copied());
                let mass: Vec<f64> = raw.iter().map(|v| v / s).collect();
                table2(na, nb, mass)
            })
    }

    proptest! {
        #[test]
        fn chain_rule_holds(t in arb_table(6, 5)) {
            let lhs = t.entropy(&[0, 1]).unwrap();
            let rhs = t.entropy(&[0]).unwrap() + t.conditional_entropy(&[1], &[0]).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn mutual_information_symmetric_and_nonnegative(t in arb_table(6, 5)) {
            let ab = t.mutual_information(&[0], &[1]).unwrap();
            let ba = t.mutual_information(&[1], &[0]).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab >= -1e-12);
            prop_assert!(t.entropy(&[0]).unwrap() >= -1e-12);
            prop_assert!(t.conditional_entropy(&[0], &[1]).unwrap() >= -1e-12);
        }

        #[test]
        fn mi_matches_joint_entropy_identity(t in arb_table(6, 5)) {
            let mi = t.mutual_information(&[0], &[1]).unwrap();
            let alt = t.entropy(&[0]).unwrap() + t.entropy(&[1]).unwrap()
                - t.entropy(&[0, 1]).unwrap();
            prop_assert!((mi - alt).abs() <= 1e-12);
        }
    }

    #[test]
    fn deterministic_map_conditional_is_exact_zero_within_tolerance() {
        // B = f(A) for a random-looking f over 16 symbols.
        let f = [3usize, 1, 4, 1, 5, 2, 6, 5, 3, 5, 0, 2, 1, 4, 6, 3];
        let mut mass = vec![0.0; 16 * 7];
        for (a, &b) in f.iter().enumerate() {
            mass[a * 7 + b] = 1.0 / 16.0;
        }
        let t = table2(16, 7, mass);
        assert!(t.conditional_entropy(&[1], &[0]).unwrap().abs() <= 1e-12);
    }
}
