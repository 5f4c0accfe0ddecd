//! Finite-alphabet direct- and transform-coding models as deterministic maps.
//!
//! A spec induces an exact joint law over (X, U, Xhat); the verifiers check by
//! enumeration that the latent entropy H(U) decomposes against the conditional
//! source entropy H(X|Xhat), with the residual H(U|Xhat) appearing exactly when
//! the synthesis map merges indices.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::{compensated_sum, entropy_bits, Alphabet, JointTable, MAX_TABLE_CELLS};

/// Gap above which an identity check fails, in bits. Looser than the table
/// normalization tolerance to absorb rounding across triple marginalizations.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Direct coding: source -> quantizer -> injective codebook.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectCodecSpec {
    /// Source pmf over the input alphabet.
    pub source: Vec<f64>,
    /// Total map from source symbol to index; length |X|, values < M.
    pub quantizer: Vec<usize>,
    /// Injective map from index to reconstruction symbol; length M.
    pub codebook: Vec<usize>,
}

impl DirectCodecSpec {
    pub fn validate(&self) -> Result<()> {
        validate_pmf(&self.source, "source")?;
        let m = self.codebook.len();
        if m == 0 {
            return Err(Error::invalid("codebook must be non-empty"));
        }
        if self.quantizer.len() != self.source.len() {
            return Err(Error::invalid(format!(
                "quantizer covers {} symbols, source has {}",
                self.quantizer.len(),
                self.source.len()
            )));
        }
        for &u in &self.quantizer {
            if u >= m {
                return Err(Error::invalid(format!("quantizer index {u} >= M = {m}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in &self.codebook {
            if !seen.insert(c) {
                return Err(Error::invalid(format!(
                    "codebook not injective: value {c} repeated"
                )));
            }
        }
        Ok(())
    }

    pub fn index_count(&self) -> usize {
        self.codebook.len()
    }

    pub fn recon_count(&self) -> usize {
        self.codebook.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// Transform coding: source -> analysis -> quantizer -> injective dequantizer
/// -> synthesis. Synthesis is NOT required to be injective; merges create the
/// H(U|Xhat) residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformCodecSpec {
    pub source: Vec<f64>,
    /// X -> Y, length |X|.
    pub analysis: Vec<usize>,
    /// Y -> U, length |Y| = max(analysis)+1.
    pub quantizer: Vec<usize>,
    /// U -> Yhat, injective, length M = max(quantizer)+1.
    pub dequantizer: Vec<usize>,
    /// Yhat -> Xhat, length max(dequantizer)+1; may merge.
    pub synthesis: Vec<usize>,
}

impl TransformCodecSpec {
    pub fn validate(&self) -> Result<()> {
        validate_pmf(&self.source, "source")?;
        if self.analysis.len() != self.source.len() {
            return Err(Error::invalid("analysis map must cover every source symbol"));
        }
        let ny = max_plus_one(&self.analysis);
        if self.quantizer.len() < ny {
            return Err(Error::invalid(format!(
                "quantizer covers {} transformed symbols, analysis reaches {ny}",
                self.quantizer.len()
            )));
        }
        let m = max_plus_one(&self.quantizer);
        if self.dequantizer.len() < m {
            return Err(Error::invalid(format!(
                "dequantizer covers {} indices, quantizer reaches {m}",
                self.dequantizer.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &y in &self.dequantizer {
            if !seen.insert(y) {
                return Err(Error::invalid(format!(
                    "dequantizer not injective: value {y} repeated"
                )));
            }
        }
        let nyhat = max_plus_one(&self.dequantizer);
        if self.synthesis.len() < nyhat {
            return Err(Error::invalid(format!(
                "synthesis covers {} latent reconstructions, dequantizer reaches {nyhat}",
                self.synthesis.len()
            )));
        }
        Ok(())
    }

    pub fn index_count(&self) -> usize {
        max_plus_one(&self.quantizer)
    }

    pub fn recon_count(&self) -> usize {
        max_plus_one(&self.synthesis)
    }

    /// Composite X -> (U, Xhat) mapping.
    fn encode(&self, x: usize) -> (usize, usize) {
        let u = self.quantizer[self.analysis[x]];
        let xhat = self.synthesis[self.dequantizer[u]];
        (u, xhat)
    }
}

fn validate_pmf(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{what} pmf must be non-empty")));
    }
    for &v in p {
        if !(v >= 0.0) {
            return Err(Error::invariant(format!("{what} pmf has negative or NaN mass")));
        }
    }
    let total = compensated_sum(p.iter().copied());
    if (total - 1.0).abs() > crate::info::MASS_SUM_TOL {
        return Err(Error::invariant(format!(
            "{what} pmf sums to {total}, expected 1"
        )));
    }
    Ok(())
}

fn max_plus_one(map: &[usize]) -> usize {
    map.iter().copied().max().map_or(0, |m| m + 1)
}

/// One verified equality: lhs, rhs and their absolute gap in bits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        let gap = (lhs - rhs).abs();
        IdentityCheck {
            name: name.to_string(),
            lhs,
            rhs,
            gap,
            pass: gap <= IDENTITY_TOL,
        }
    }
}

/// Report over all identities of one spec, plus the H(U|Xhat) residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identities: Vec<IdentityCheck>,
    #[serde(rename = "residual_H_U_given_Xhat")]
    pub residual: f64,
}

impl IdentityReport {
    pub fn all_pass(&self) -> bool {
        self.identities.iter().all(|c| c.pass)
    }

    pub fn max_gap(&self) -> f64 {
        self.identities.iter().map(|c| c.gap).fold(0.0, f64::max)
    }
}

enum AnySpec<'a> {
    Direct(&'a DirectCodecSpec),
    Transform(&'a TransformCodecSpec),
}

fn build_joint(spec: AnySpec<'_>) -> Result<JointTable> {
    let (source, m, nxhat): (&[f64], usize, usize) = match &spec {
        AnySpec::Direct(s) => (&s.source, s.index_count(), s.recon_count()),
        AnySpec::Transform(s) => (&s.source, s.index_count(), s.recon_count()),
    };
    let nx = source.len();
    let cells = nx
        .checked_mul(m)
        .and_then(|c| c.checked_mul(nxhat))
        .filter(|&c| c <= MAX_TABLE_CELLS)
        .ok_or_else(|| Error::ResourceLimit(format!("joint over {nx}x{m}x{nxhat} exceeds cap")))?;
    let mut mass = vec![0.0; cells];
    for x in 0..nx {
        let (u, xhat) = match &spec {
            AnySpec::Direct(s) => {
                let u = s.quantizer[x];
                (u, s.codebook[u])
            }
            AnySpec::Transform(s) => s.encode(x),
        };
        mass[(x * m + u) * nxhat + xhat] = source[x];
    }
    JointTable::new(
        vec![Alphabet::new(nx)?, Alphabet::new(m)?, Alphabet::new(nxhat)?],
        mass,
    )
}

/// Exact joint law over (X, U, Xhat) induced by a direct spec.
pub fn induced_joint_direct(spec: &DirectCodecSpec) -> Result<JointTable> {
    spec.validate()?;
    build_joint(AnySpec::Direct(spec))
}

/// Exact joint law over (X, U, Xhat) induced by a transform spec.
pub fn induced_joint_transform(spec: &TransformCodecSpec) -> Result<JointTable> {
    spec.validate()?;
    build_joint(AnySpec::Transform(spec))
}

const X: usize = 0;
const U: usize = 1;
const XHAT: usize = 2;

fn report_from_joint(joint: &JointTable, direct: bool) -> Result<IdentityReport> {
    let h_x = joint.entropy(&[X])?;
    let h_u = joint.entropy(&[U])?;
    let h_xhat = joint.entropy(&[XHAT])?;
    let i_x_xhat = joint.mutual_information(&[X], &[XHAT])?;
    let h_x_given_xhat = joint.conditional_entropy(&[X], &[XHAT])?;
    let h_u_given_xhat = joint.conditional_entropy(&[U], &[XHAT])?;

    let identities = if direct {
        vec![
            IdentityCheck::new("I(X;Xhat) = H(Xhat)", i_x_xhat, h_xhat),
            IdentityCheck::new("H(Xhat) = H(U)", h_xhat, h_u),
            IdentityCheck::new("H(U) = I(X;Xhat)", h_u, i_x_xhat),
            IdentityCheck::new("H(U) = H(X) - H(X|Xhat)", h_u, h_x - h_x_given_xhat),
        ]
    } else {
        vec![
            IdentityCheck::new("I(X;Xhat) = H(Xhat)", i_x_xhat, h_xhat),
            IdentityCheck::new("H(Xhat) = H(U) - H(U|Xhat)", h_xhat, h_u - h_u_given_xhat),
            IdentityCheck::new("H(U) = I(X;Xhat) + H(U|Xhat)", h_u, i_x_xhat + h_u_given_xhat),
            IdentityCheck::new(
                "H(U) = H(X) - H(X|Xhat) + H(U|Xhat)",
                h_u,
                h_x - h_x_given_xhat + h_u_given_xhat,
            ),
        ]
    };
    Ok(IdentityReport {
        identities,
        residual: h_u_given_xhat,
    })
}

/// Verifies the four direct-coding equalities by enumeration.
pub fn verify_direct_identities(spec: &DirectCodecSpec) -> Result<IdentityReport> {
    let joint = induced_joint_direct(spec)?;
    report_from_joint(&joint, true)
}

/// Verifies the four transform-coding equalities by enumeration; the residual
/// H(U|Xhat) is reported alongside.
pub fn verify_transform_identities(spec: &TransformCodecSpec) -> Result<IdentityReport> {
    let joint = induced_joint_transform(spec)?;
    report_from_joint(&joint, false)
}

/// Randomized spec generator. Source pmfs are symmetric Dirichlet(1) draws,
/// quantizers random surjections, and transform synthesis maps merge each
/// adjacent index pair with probability 0.5 so both residual regimes appear.
pub struct SpecSampler {
    rng: ChaCha12Rng,
    max_alphabet: usize,
}

impl SpecSampler {
    pub fn new(seed: u64, max_alphabet: usize) -> Result<Self> {
        if max_alphabet < 2 {
            return Err(Error::invalid("max alphabet must be >= 2"));
        }
        use rand::SeedableRng;
        Ok(SpecSampler {
            rng: ChaCha12Rng::seed_from_u64(seed),
            max_alphabet,
        })
    }

    fn dirichlet_pmf(&mut self, n: usize) -> Vec<f64> {
        // Dirichlet(1) = normalized i.i.d. Exp(1).
        let raw: Vec<f64> = (0..n)
            .map(|_| -(1.0 - self.rng.random::<f64>()).ln())
            .collect();
        let s = compensated_sum(raw.iter().copied());
        raw.iter().map(|v| v / s).collect()
    }

    fn random_surjection(&mut self, from: usize, to: usize) -> Vec<usize> {
        debug_assert!(to <= from);
        let mut map = vec![0usize; from];
        let mut order: Vec<usize> = (0..from).collect();
        for i in (1..from).rev() {
            let j = self.rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (u, &x) in order.iter().take(to).enumerate() {
            map[x] = u;
        }
        for &x in order.iter().skip(to) {
            map[x] = self.rng.random_range(0..to);
        }
        map
    }

    pub fn random_direct(&mut self) -> DirectCodecSpec {
        let nx = self.rng.random_range(2..=self.max_alphabet);
        let m = self.rng.random_range(1..=nx);
        let source = self.dirichlet_pmf(nx);
        let quantizer = self.random_surjection(nx, m);
        // Injective codebook: a random permutation of m reconstruction symbols.
        let mut codebook: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = self.rng.random_range(0..=i);
            codebook.swap(i, j);
        }
        DirectCodecSpec {
            source,
            quantizer,
            codebook,
        }
    }

    pub fn random_transform(&mut self) -> TransformCodecSpec {
        let nx = self.rng.random_range(2..=self.max_alphabet);
        let ny = self.rng.random_range(2..=nx);
        let m = self.rng.random_range(1..=ny);
        let source = self.dirichlet_pmf(nx);
        let analysis = self.random_surjection(nx, ny);
        let quantizer = self.random_surjection(ny, m);
        let mut dequantizer: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = self.rng.random_range(0..=i);
            dequantizer.swap(i, j);
        }
        let nyhat = m;
        // Merge runs of adjacent latent reconstructions with probability 0.5.
        let mut synthesis = vec![0usize; nyhat];
        let mut next = 0usize;
        for y in 0..nyhat {
            if y > 0 && self.rng.random::<bool>() {
                synthesis[y] = synthesis[y - 1];
            } else {
                synthesis[y] = next;
                next += 1;
            }
        }
        TransformCodecSpec {
            source,
            analysis,
            quantizer,
            dequantizer,
            synthesis,
        }
    }
}

/// Merge two index cells of a direct spec; used to exercise quantizer
/// coarsening (H(U) can only decrease).
pub fn merge_direct_cells(spec: &DirectCodecSpec, keep: usize, drop: usize) -> Result<DirectCodecSpec> {
    let m = spec.index_count();
    if keep >= m || drop >= m || keep == drop {
        return Err(Error::invalid("cells to merge must be distinct and < M"));
    }
    let remap = |u: usize| -> usize {
        let v = if u == drop { keep } else { u };
        if v > drop {
            v - 1
        } else {
            v
        }
    };
    let quantizer = spec.quantizer.iter().map(|&u| remap(u)).collect();
    let mut codebook = spec.codebook.clone();
    codebook.remove(drop);
    Ok(DirectCodecSpec {
        source: spec.source.clone(),
        quantizer,
        codebook,
    })
}

/// Distortion matrix over source x reconstruction symbol pairs.
#[derive(Clone, Debug)]
pub struct DistortionMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl DistortionMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "distortion matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("distortion values must be finite and >= 0"));
        }
        Ok(DistortionMatrix { rows, cols, values })
    }

    /// Squared error over integer-valued symbols 0..n-1.
    pub fn squared_error(n: usize) -> Self {
        let mut values = Vec::with_capacity(n * n);
        for x in 0..n {
            for c in 0..n {
                let d = x as f64 - c as f64;
                values.push(d * d);
            }
        }
        DistortionMatrix {
            rows: n,
            cols: n,
            values,
        }
    }

    pub fn get(&self, x: usize, c: usize) -> f64 {
        self.values[x * self.cols + c]
    }
}

/// Result of the brute-force rate probe. The value is an upper bound on
/// N*R(D): only deterministic quantizer/codebook designs are searched.
#[derive(Clone, Debug, Serialize)]
pub struct RateProbe {
    pub bits: f64,
    /// Always true: deterministic designs can only upper-bound R(D).
    pub upper_bound: bool,
    pub designs_tried: usize,
    pub feasible_designs: usize,
}

/// Brute-force minimum of I(X;Xhat) over a grid + randomized family of
/// deterministic quantizer/codebook pairs meeting E[d] <= D.
///
/// The grid family enumerates every contiguous partition when |X| <= 16 and
/// equal-width partitions otherwise; each cell gets the reconstruction symbol
/// minimizing its expected distortion. For deterministic designs
/// I(X;Xhat) = H(Xhat).
pub fn min_mutual_information_probe(
    source: &[f64],
    distortion: &DistortionMatrix,
    d_max: f64,
    seed: u64,
    random_designs: usize,
) -> Result<RateProbe> {
    validate_pmf(source, "source")?;
    let nx = source.len();
    if distortion.rows != nx {
        return Err(Error::ShapeMismatch(format!(
            "distortion matrix has {} rows, source has {nx} symbols",
            distortion.rows
        )));
    }
    if nx * distortion.cols > 4096 {
        return Err(Error::ResourceLimit(format!(
            "probe limited to |X|*|Xhat| <= 4096, got {}",
            nx * distortion.cols
        )));
    }
    let best_possible: f64 = (0..nx)
        .map(|x| {
            source[x]
                * (0..distortion.cols)
                    .map(|c| distortion.get(x, c))
                    .fold(f64::INFINITY, f64::min)
        })
        .sum();
    if best_possible > d_max {
        return Err(Error::NoFeasibleCodec(format!(
            "minimum achievable distortion {best_possible} exceeds target {d_max}"
        )));
    }

    let mut tried = 0usize;
    let mut feasible = 0usize;
    let mut best_bits = f64::INFINITY;
    let mut consider = |cells: &[usize]| {
        tried += 1;
        let m = max_plus_one(cells);
        // Optimal reconstruction per cell under the source-weighted distortion.
        let mut recon = vec![0usize; m];
        for (u, r) in recon.iter_mut().enumerate() {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..distortion.cols {
                let d: f64 = (0..nx)
                    .filter(|&x| cells[x] == u)
                    .map(|x| source[x] * distortion.get(x, c))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best_c = c;
                }
            }
            *r = best_c;
        }
        let expected_d: f64 = (0..nx)
            .map(|x| source[x] * distortion.get(x, recon[cells[x]]))
            .sum();
        if expected_d <= d_max {
            feasible += 1;
            // Distinct cells may share a reconstruction; H(Xhat) accounts for it.
            let mut p_xhat = vec![0.0; distortion.cols];
            for x in 0..nx {
                p_xhat[recon[cells[x]]] += source[x];
            }
            best_bits = best_bits.min(entropy_bits(&p_xhat));
        }
    };

    if nx <= 16 {
        // Every contiguous partition: one bit per boundary.
        for boundaries in 0..(1usize << (nx - 1)) {
            let mut cells = vec![0usize; nx];
            let mut cell = 0usize;
            for x in 1..nx {
                if boundaries & (1 << (x - 1)) != 0 {
                    cell += 1;
                }
                cells[x] = cell;
            }
            consider(&cells);
        }
    } else {
        for m in 1..=nx.min(64) {
            let cells: Vec<usize> = (0..nx).map(|x| (x * m) / nx).collect();
            consider(&cells);
        }
    }

    use rand::SeedableRng;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..random_designs {
        let m = rng.random_range(1..=nx);
        let cells: Vec<usize> = (0..nx).map(|_| rng.random_range(0..m)).collect();
        consider(&cells);
    }

    if feasible == 0 {
        return Err(Error::NoFeasibleCodec(format!(
            "no design in the searched family met E[d] <= {d_max}"
        )));
    }
    Ok(RateProbe {
        bits: best_bits,
        upper_bound: true,
        designs_tried: tried,
        feasible_designs: feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dyadic_direct() -> DirectCodecSpec {
        DirectCodecSpec {
            source: vec![1.0 / 8.0; 8],
            quantizer: (0..8).map(|x| x / 2).collect(),
            codebook: vec![0, 1, 2, 3],
        }
    }

    #[test]
    fn induced_joint_matches_composition() {
        let spec = dyadic_direct();
        let joint = induced_joint_direct(&spec).unwrap();
        let nonzero = joint.mass().iter().filter(|&&m| m > 0.0).count();
        assert_eq!(nonzero, 8);
        for &m in joint.mass().iter().filter(|&&m| m > 0.0) {
            assert_abs_diff_eq!(m, 1.0 / 8.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn point_mass_source_gives_unit_cell() {
        let spec = DirectCodecSpec {
            source: vec![0.0, 1.0, 0.0],
            quantizer: vec![0, 1, 1],
            codebook: vec![0, 1],
        };
        let joint = induced_joint_direct(&spec).unwrap();
        let nonzero: Vec<f64> = joint.mass().iter().copied().filter(|&m| m > 0.0).collect();
        assert_eq!(nonzero, vec![1.0]);
    }

    #[test]
    fn marginal_on_x_equals_source() {
        let mut sampler = SpecSampler::new(7, 12).unwrap();
        // A 12-symbol source with a 4-level quantizer.
        let spec = DirectCodecSpec {
            source: sampler.dirichlet_pmf(12),
            quantizer: sampler.random_surjection(12, 4),
            codebook: vec![2, 0, 3, 1],
        };
        let joint = induced_joint_direct(&spec).unwrap();
        let marginal = joint.marginal(&[0]).unwrap();
        for (a, b) in marginal.iter().zip(&spec.source) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn dyadic_direct_identities() {
        let report = verify_direct_identities(&dyadic_direct()).unwrap();
        assert!(report.all_pass(), "{report:?}");
        assert!(report.residual.abs() <= IDENTITY_TOL);
        // H(U)=2, H(X)=3, H(X|Xhat)=1.
        let theorem = &report.identities[3];
        assert_abs_diff_eq!(theorem.lhs, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theorem.rhs, 3.0 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lossless_direct_identities() {
        let spec = DirectCodecSpec {
            source: vec![0.4, 0.3, 0.2, 0.1],
            quantizer: vec![0, 1, 2, 3],
            codebook: vec![3, 2, 1, 0],
        };
        let report = verify_direct_identities(&spec).unwrap();
        assert!(report.all_pass());
        let joint = induced_joint_direct(&spec).unwrap();
        assert!(joint.conditional_entropy(&[0], &[2]).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn two_to_one_merge_residual() {
        // U uniform over 4, synthesis merges {0,1} and {2,3}.
        let spec = TransformCodecSpec {
            source: vec![0.25; 4],
            analysis: vec![0, 1, 2, 3],
            quantizer: vec![0, 1, 2, 3],
            dequantizer: vec![0, 1, 2, 3],
            synthesis: vec![0, 0, 1, 1],
        };
        let report = verify_transform_identities(&spec).unwrap();
        assert!(report.all_pass(), "{report:?}");
        assert_abs_diff_eq!(report.residual, 1.0, epsilon = 1e-12);
        let eq9 = &report.identities[1];
        assert_abs_diff_eq!(eq9.lhs, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eq9.rhs, 2.0 - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn injective_synthesis_reduces_to_direct() {
        let spec = TransformCodecSpec {
            source: vec![0.5, 0.25, 0.125, 0.125],
            analysis: vec![0, 0, 1, 2],
            quantizer: vec![0, 1, 1],
            dequantizer: vec![1, 0],
            synthesis: vec![0, 1],
        };
        let report = verify_transform_identities(&spec).unwrap();
        assert!(report.all_pass());
        assert!(report.residual.abs() <= IDENTITY_TOL);
        // With zero residual the transform identities collapse to the direct set.
        let eq9 = &report.identities[1];
        assert_abs_diff_eq!(eq9.lhs, eq9.rhs, epsilon = 1e-12);
    }

    #[test]
    fn direct_spec_determinism_invariants() {
        let mut sampler = SpecSampler::new(11, 32).unwrap();
        for _ in 0..50 {
            let spec = sampler.random_direct();
            let joint = induced_joint_direct(&spec).unwrap();
            assert!(joint.conditional_entropy(&[2], &[0]).unwrap().abs() <= IDENTITY_TOL);
            assert!(joint.conditional_entropy(&[2], &[1]).unwrap().abs() <= IDENTITY_TOL);
            assert!(joint.conditional_entropy(&[1], &[2]).unwrap().abs() <= IDENTITY_TOL);
        }
    }

    #[test]
    fn transform_spec_determinism_invariants() {
        let mut sampler = SpecSampler::new(13, 32).unwrap();
        let mut positive_residual = 0usize;
        for _ in 0..50 {
            let spec = sampler.random_transform();
            let joint = induced_joint_transform(&spec).unwrap();
            assert!(joint.conditional_entropy(&[2], &[0]).unwrap().abs() <= IDENTITY_TOL);
            assert!(joint.conditional_entropy(&[2], &[1]).unwrap().abs() <= IDENTITY_TOL);
            let residual = joint.conditional_entropy(&[1], &[2]).unwrap();
            assert!(residual >= -IDENTITY_TOL);
            if residual > 0.01 {
                positive_residual += 1;
            }
        }
        assert!(positive_residual > 0, "sampler never produced a merging synthesis");
    }

    #[test]
    fn coarsening_never_increases_latent_entropy() {
        let mut sampler = SpecSampler::new(17, 24).unwrap();
        for _ in 0..50 {
            let spec = sampler.random_direct();
            if spec.index_count() < 2 {
                continue;
            }
            let h_before = induced_joint_direct(&spec).unwrap().entropy(&[1]).unwrap();
            let merged = merge_direct_cells(&spec, 0, spec.index_count() - 1).unwrap();
            let h_after = induced_joint_direct(&merged).unwrap().entropy(&[1]).unwrap();
            assert!(h_after <= h_before + IDENTITY_TOL);
        }
    }

    #[test]
    fn probe_constant_reconstruction_is_free() {
        let source = vec![0.25; 4];
        let d = DistortionMatrix::squared_error(4);
        let probe = min_mutual_information_probe(&source, &d, 100.0, 1, 50).unwrap();
        assert_abs_diff_eq!(probe.bits, 0.0, epsilon = 1e-12);
        assert!(probe.upper_bound);
    }

    #[test]
    fn probe_zero_distortion_forces_lossless() {
        let source = vec![0.25; 4];
        let d = DistortionMatrix::squared_error(4);
        let probe = min_mutual_information_probe(&source, &d, 0.0, 1, 50).unwrap();
        assert_abs_diff_eq!(probe.bits, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn probe_infeasible_distortion_errors() {
        // Reconstruction alphabet {0} only, distortion 1 for every other symbol.
        let source = vec![0.5, 0.5];
        let d = DistortionMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        let r = min_mutual_information_probe(&source, &d, 0.25, 1, 10);
        assert!(matches!(r, Err(Error::NoFeasibleCodec(_))));
    }

    #[test]
    fn report_json_schema() {
        let report = verify_direct_identities(&dyadic_direct()).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("identities").is_some());
        assert!(json.get("residual_H_U_given_Xhat").is_some());
        let first = &json["identities"][0];
        for key in ["name", "lhs", "rhs", "gap", "pass"] {
            assert!(first.get(key).is_some(), "missing key {key}");
        }
    }
}
