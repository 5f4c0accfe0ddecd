//! Randomized enumeration suite for the coding-model identities, plus the
//! exhaustive set-partition oracle for the rate probe.

use ratelab_core::coding::{
    merge_direct_cells, min_mutual_information_probe, verify_direct_identities,
    verify_transform_identities, DistortionMatrix, SpecSampler, IDENTITY_TOL,
};
use ratelab_core::info::entropy_bits;

#[test]
fn direct_identities_hold_on_randomized_specs() {
    let mut sampler = SpecSampler::new(1, 64).unwrap();
    let mut max_gap = 0.0f64;
    for i in 0..300 {
        let spec = sampler.random_direct();
        let report = verify_direct_identities(&spec).unwrap();
        assert!(report.all_pass(), "spec {i}: {report:?}");
        assert!(
            report.residual.abs() <= IDENTITY_TOL,
            "direct coding must have zero residual"
        );
        max_gap = max_gap.max(report.max_gap());
    }
    assert!(max_gap <= IDENTITY_TOL);
}

#[test]
fn transform_identities_hold_with_residual_coverage() {
    let mut sampler = SpecSampler::new(2, 64).unwrap();
    let mut positive_residual = 0usize;
    for i in 0..300 {
        let spec = sampler.random_transform();
        let report = verify_transform_identities(&spec).unwrap();
        assert!(report.all_pass(), "spec {i}: {report:?}");
        assert!(report.residual >= -IDENTITY_TOL);
        if report.residual > 0.01 {
            positive_residual += 1;
        }
    }
    assert!(
        positive_residual >= 30,
        "merging synthesis maps underrepresented: {positive_residual}/300"
    );
}

#[test]
fn quantizer_coarsening_is_monotone_in_latent_entropy() {
    let mut sampler = SpecSampler::new(3, 48).unwrap();
    let mut checked = 0usize;
    for _ in 0..100 {
        let spec = sampler.random_direct();
        let m = spec.index_count();
        if m < 2 {
            continue;
        }
        let before = ratelab_core::coding::induced_joint_direct(&spec)
            .unwrap()
            .entropy(&[1])
            .unwrap();
        for (keep, drop) in [(0usize, m - 1), (m / 2, 0)] {
            if keep == drop {
                continue;
            }
            let merged = merge_direct_cells(&spec, keep, drop).unwrap();
            let after = ratelab_core::coding::induced_joint_direct(&merged)
                .unwrap()
                .entropy(&[1])
                .unwrap();
            assert!(
                after <= before + IDENTITY_TOL,
                "merging cells increased H(U): {before} -> {after}"
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

/// Every set partition of {0..n-1} via restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut a = vec![0usize; n];
    fn rec(a: &mut Vec<usize>, pos: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
        if pos == a.len() {
            out.push(a.clone());
            return;
        }
        for cell in 0..=max_used + 1 {
            a[pos] = cell;
            rec(a, pos + 1, max_used.max(cell), out);
        }
    }
    if n > 0 {
        rec(&mut a, 1, 0, &mut out);
    }
    out
}

/// Exhaustive oracle: minimum H(Xhat) over ALL partitions (any shape, any
/// M <= |X|) with per-cell optimal reconstructions, subject to E[d] <= D.
fn exhaustive_min_bits(source: &[f64], d: &DistortionMatrix, d_max: f64) -> Option<f64> {
    let n = source.len();
    let mut best: Option<f64> = None;
    for cells in all_partitions(n) {
        let m = cells.iter().copied().max().unwrap() + 1;
        let mut recon = vec![0usize; m];
        for (u, r) in recon.iter_mut().enumerate() {
            let mut best_c = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..d.cols {
                let cost: f64 = (0..n)
                    .filter(|&x| cells[x] == u)
                    .map(|x| source[x] * d.get(x, c))
                    .sum();
                if cost < best_d {
                    best_d = cost;
                    best_c = c;
                }
            }
            *r = best_c;
        }
        let expected: f64 = (0..n).map(|x| source[x] * d.get(x, recon[cells[x]])).sum();
        if expected <= d_max {
            let mut p_xhat = vec![0.0; d.cols];
            for x in 0..n {
                p_xhat[recon[cells[x]]] += source[x];
            }
            let bits = entropy_bits(&p_xhat);
            best = Some(best.map_or(bits, |b: f64| b.min(bits)));
        }
    }
    best
}

#[test]
fn rate_probe_matches_exhaustive_partition_search() {
    // Uniform over {0..7}, squared error, distortion budget 0.3. The Bell
    // number B(8) = 4140 partitions make full enumeration cheap.
    let source = vec![1.0 / 8.0; 8];
    let d = DistortionMatrix::squared_error(8);
    let partitions = all_partitions(8);
    assert_eq!(partitions.len(), 4140);

    let oracle = exhaustive_min_bits(&source, &d, 0.3).expect("feasible");
    // Frozen from the enumeration: partition {0,1,2 | 3 | 4 | 5 | 6 | 7}
    // with E[d] = 0.25 gives 3/8*log2(8/3) + 15/8 bits.
    let frozen = 0.375 * (8.0f64 / 3.0).log2() + 1.875;
    assert!((oracle - frozen).abs() <= 1e-12, "oracle {oracle} vs frozen {frozen}");

    let probe = min_mutual_information_probe(&source, &d, 0.3, 1, 200).unwrap();
    assert!(probe.upper_bound);
    assert!(
        (probe.bits - oracle).abs() <= 1e-12,
        "probe {} vs oracle {oracle}",
        probe.bits
    );
}

#[test]
fn rate_probe_respects_size_cap() {
    let source = vec![1.0 / 128.0; 128];
    let d = DistortionMatrix::squared_error(128);
    let r = min_mutual_information_probe(&source, &d, 10.0, 1, 10);
    assert!(matches!(r, Err(ratelab_core::Error::ResourceLimit(_))));
}

#[test]
fn spec_json_replay_round_trip() {
    let mut sampler = SpecSampler::new(9, 16).unwrap();
    let spec = sampler.random_transform();
    let text = serde_json::to_string(&spec).unwrap();
    let back: ratelab_core::coding::TransformCodecSpec = serde_json::from_str(&text).unwrap();
    let a = verify_transform_identities(&spec).unwrap();
    let b = verify_transform_identities(&back).unwrap();
    assert_eq!(a.residual.to_bits(), b.residual.to_bits());
}
