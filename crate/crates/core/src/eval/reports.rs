//! Report assembly over finished runs: rate-quality curves, alpha sweeps and
//! domain-shift tables. All emitted files carry the producing run hashes and
//! seeds in a comment header.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::CodecModel;
use crate::error::{Error, Result};
use crate::eval::bd::{bd_rate, RdCurve, RdPoint};
use crate::eval::svg::{line_plot, PlotOptions, Series};
use crate::rng::{stream, StreamKind};
use crate::sources::{shifted_sampler, DomainShift, SourceSpec};
use crate::trainer::RunRecord;

/// Image-scale context rendered on sweep outputs; never asserted at desk
/// scale.
pub const ALPHA_REFERENCE_NOTE: &str =
    "image-scale reference: alpha=1 peaks at -1.24% BD-Rate; desk-scale values are not comparable";

/// Image-scale context for the generalization table.
pub const DOMAIN_REFERENCE_NOTE: &str =
    "image-scale reference: strongest out-of-domain gain -2.38% (pathology/attention); context only";

/// Curve from the final metric row of each run, sorted by lambda.
pub fn curve_from_records(records: &[&RunRecord]) -> Result<RdCurve> {
    let mut points = Vec::new();
    let mut provenance = Vec::new();
    for r in records {
        let m = r.final_metrics()?;
        points.push(RdPoint {
            rate: m.rate_bpd,
            quality: m.quality_db,
        });
        provenance.push(r.run_id.clone());
    }
    RdCurve::new(points, provenance)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn alpha_key(alpha: f64) -> String {
    format!("{alpha}")
}

/// Groups by alpha and seed; within a group, runs sorted by lambda.
fn group_runs(records: &[RunRecord]) -> BTreeMap<(String, u64), Vec<&RunRecord>> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((alpha_key(r.config.alpha), r.config.seed))
            .or_default()
            .push(r);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.config.lambda.total_cmp(&b.config.lambda));
    }
    groups
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub bd_rate_percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaMedian {
    pub alpha: f64,
    pub median_bd_rate_percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaSweepReport {
    pub rows: Vec<SweepRow>,
    pub medians: Vec<AlphaMedian>,
    pub run_ids: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AlphaSweepReport {
    /// Median BD-Rate of the best alpha (> 0), if any regularized runs exist.
    pub fn best_alpha(&self) -> Option<&AlphaMedian> {
        self.medians
            .iter()
            .filter(|m| m.alpha > 0.0)
            .min_by(|a, b| a.median_bd_rate_percent.total_cmp(&b.median_bd_rate_percent))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# runs: {}", self.run_ids.join(","));
        let _ = writeln!(
            out,
            "# seeds: {}",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(out, "# {ALPHA_REFERENCE_NOTE}");
        let _ = writeln!(out, "alpha,seed,bd_rate_percent");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.alpha, r.seed, r.bd_rate_percent);
        }
        for m in &self.medians {
            let _ = writeln!(out, "{},median,{}", m.alpha, m.median_bd_rate_percent);
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let mut by_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            if r.alpha > 0.0 {
                by_seed
                    .entry(r.seed)
                    .or_default()
                    .push((r.alpha, r.bd_rate_percent));
            }
        }
        let mut series: Vec<Series> = by_seed
            .into_iter()
            .map(|(seed, points)| Series {
                label: format!("seed {seed}"),
                points,
            })
            .collect();
        let medians: Vec<(f64, f64)> = self
            .medians
            .iter()
            .filter(|m| m.alpha > 0.0)
            .map(|m| (m.alpha, m.median_bd_rate_percent))
            .collect();
        if !medians.is_empty() {
            series.push(Series {
                label: "median".to_string(),
                points: medians,
            });
        }
        line_plot(
            &series,
            &PlotOptions {
                title: "BD-Rate vs regularization factor (anchor: alpha=0)".to_string(),
                x_label: "alpha".to_string(),
                y_label: "BD-Rate %".to_string(),
                x_log: true,
                ..PlotOptions::default()
            },
        )
    }
}

/// Per-alpha BD-Rate against the alpha = 0 anchor of the same seed. Anchor
/// rows are included with an exact 0.
pub fn alpha_sweep(records: &[RunRecord]) -> Result<AlphaSweepReport> {
    let groups = group_runs(records);
    let mut anchors: BTreeMap<u64, RdCurve> = BTreeMap::new();
    for ((alpha, seed), runs) in &groups {
        if alpha == "0" {
            anchors.insert(*seed, curve_from_records(runs)?);
        }
    }
    if anchors.is_empty() {
        return Err(Error::invalid(
            "alpha sweep needs anchor runs with alpha = 0",
        ));
    }
    let mut rows = Vec::new();
    let mut per_alpha: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
    for ((alpha_s, seed), runs) in &groups {
        let alpha = runs[0].config.alpha;
        let anchor = anchors.get(seed).ok_or_else(|| {
            Error::invalid(format!("missing alpha = 0 anchor for seed {seed}"))
        })?;
        let bd = if alpha == 0.0 {
            0.0
        } else {
            bd_rate(anchor, &curve_from_records(runs)?)?.bd_rate_percent
        };
        rows.push(SweepRow {
            alpha,
            seed: *seed,
            bd_rate_percent: bd,
        });
        per_alpha
            .entry(alpha_s.clone())
            .or_insert_with(|| (alpha, Vec::new()))
            .1
            .push(bd);
    }
    let medians = per_alpha
        .into_values()
        .map(|(alpha, values)| AlphaMedian {
            alpha,
            median_bd_rate_percent: median(values),
        })
        .collect();
    let mut run_ids: Vec<String> = records.iter().map(|r| r.run_id.clone()).collect();
    run_ids.sort();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.config.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut report = AlphaSweepReport {
        rows,
        medians,
        run_ids,
        seeds,
    };
    report
        .medians
        .sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    report
        .rows
        .sort_by(|a, b| (a.alpha, a.seed).partial_cmp(&(b.alpha, b.seed)).expect("finite"));
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainShiftRow {
    pub shift: String,
    pub alpha: f64,
    pub seed: u64,
    pub bd_rate_percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DomainShiftReport {
    pub rows: Vec<DomainShiftRow>,
    pub medians: Vec<(String, f64, f64)>,
    pub run_ids: Vec<String>,
    pub seeds: Vec<u64>,
}

impl DomainShiftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# runs: {}", self.run_ids.join(","));
        let _ = writeln!(
            out,
            "# seeds: {}",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(out, "# {DOMAIN_REFERENCE_NOTE}");
        let _ = writeln!(out, "shift,alpha,seed,bd_rate_percent");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.shift, r.alpha, r.seed, r.bd_rate_percent);
        }
        for (shift, alpha, m) in &self.medians {
            let _ = writeln!(out, "{shift},{alpha},median,{m}");
        }
        out
    }
}

/// Re-evaluates every run's final checkpoint on each shifted source and
/// reports the BD-Rate of regularized models against the anchor, per shift.
/// The identity shift is always evaluated first as the in-domain reference.
pub fn domain_shift_report(
    records: &[RunRecord],
    base: &SourceSpec,
    shifts: &[DomainShift],
    eval_rows: usize,
    eval_seed: u64,
) -> Result<DomainShiftReport> {
    if eval_rows == 0 {
        return Err(Error::invalid("domain shift evaluation needs eval_rows >= 1"));
    }
    let mut all_shifts = vec![DomainShift::Identity];
    all_shifts.extend_from_slice(shifts);

    let groups = group_runs(records);
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for shift in &all_shifts {
        let sampler = shifted_sampler(base, shift)?;
        if sampler.dim() != records[0].config.codec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "shifted source dim {} vs codec input dim {}",
                sampler.dim(),
                records[0].config.codec.input_dim
            )));
        }
        let mut rng = stream(eval_seed, StreamKind::Probe);
        let batch = sampler.sample_batch(&mut rng, eval_rows);

        // Fresh rate/quality points for every run on this shifted batch.
        let mut curves: BTreeMap<(String, u64), RdCurve> = BTreeMap::new();
        for ((alpha_s, seed), runs) in &groups {
            let mut points = Vec::new();
            let mut provenance = Vec::new();
            for r in runs {
                let codec = CodecModel::load(&r.checkpoint_dir())?;
                let out = codec.encode_eval(&batch)?;
                let quality = if out.distortion_mse > 0.0 {
                    -10.0 * out.distortion_mse.log10()
                } else {
                    f64::INFINITY
                };
                points.push(RdPoint {
                    rate: out.rate_bits_per_dim,
                    quality,
                });
                provenance.push(r.run_id.clone());
            }
            curves.insert((alpha_s.clone(), *seed), RdCurve::new(points, provenance)?);
        }

        let mut per_alpha: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
        for ((alpha_s, seed), runs) in &groups {
            let alpha = runs[0].config.alpha;
            if alpha == 0.0 {
                continue;
            }
            let anchor = curves.get(&("0".to_string(), *seed)).ok_or_else(|| {
                Error::invalid(format!("missing alpha = 0 anchor for seed {seed}"))
            })?;
            let test = curves.get(&(alpha_s.clone(), *seed)).expect("just built");
            let bd = bd_rate(anchor, test)?.bd_rate_percent;
            rows.push(DomainShiftRow {
                shift: shift.name(),
                alpha,
                seed: *seed,
                bd_rate_percent: bd,
            });
            per_alpha
                .entry(alpha_s.clone())
                .or_insert_with(|| (alpha, Vec::new()))
                .1
                .push(bd);
        }
        for (_, (alpha, values)) in per_alpha {
            medians.push((shift.name(), alpha, median(values)));
        }
    }

    let mut run_ids: Vec<String> = records.iter().map(|r| r.run_id.clone()).collect();
    run_ids.sort();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.config.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(DomainShiftReport {
        rows,
        medians,
        run_ids,
        seeds,
    })
}

/// One row per run: the final operating point plus identity.
pub fn rd_points_csv(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    let mut ids: Vec<String> = records.iter().map(|r| r.run_id.clone()).collect();
    ids.sort();
    let _ = writeln!(out, "# runs: {}", ids.join(","));
    let _ = writeln!(out, "lambda,alpha,seed,rate_bpd,mse,quality_db,run_id");
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.config.alpha, a.config.seed, a.config.lambda)
            .partial_cmp(&(b.config.alpha, b.config.seed, b.config.lambda))
            .expect("finite")
    });
    for r in sorted {
        let m = r.final_metrics()?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.lambda, m.alpha, m.seed, m.rate_bpd, m.mse, m.quality_db, r.run_id
        );
    }
    Ok(out)
}

/// Parses a curve file: `rate,quality` rows, `#` comments and an optional
/// header line. Extra columns after the first two are ignored.
pub fn parse_curve_csv(text: &str, name: &str) -> Result<RdCurve> {
    let mut points = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::invalid(format!(
                "curve file {name}: row needs at least rate,quality: {line}"
            )));
        }
        let rate = fields[0].trim().parse::<f64>();
        let quality = fields[1].trim().parse::<f64>();
        match (rate, quality) {
            (Ok(r), Ok(q)) => points.push(RdPoint { rate: r, quality: q }),
            _ if points.is_empty() => continue, // header line
            _ => {
                return Err(Error::invalid(format!(
                    "curve file {name}: malformed row {line}"
                )))
            }
        }
    }
    RdCurve::new(points, vec![name.to_string()])
}

/// Rate-quality curves figure for a set of finished runs, one series per
/// (alpha, seed) group.
pub fn rd_curves_svg(records: &[RunRecord]) -> Result<String> {
    let groups = group_runs(records);
    let mut series = Vec::new();
    for ((alpha, seed), runs) in &groups {
        let curve = curve_from_records(runs)?;
        series.push(Series {
            label: format!("alpha={alpha} seed={seed}"),
            points: curve.points().iter().map(|p| (p.rate, p.quality)).collect(),
        });
    }
    Ok(line_plot(
        &series,
        &PlotOptions {
            title: "Rate-quality curves".to_string(),
            x_label: "rate (bits/dim)".to_string(),
            y_label: "quality (dB)".to_string(),
            x_log: true,
            ..PlotOptions::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{MetricRow, RunConfig, RunStatus};
    use crate::codec::CodecArch;
    use crate::source_model::{ContextMode, SourceModelArch};
    use crate::sources::default_gauss_mix;

    fn fake_record(lambda: f64, alpha: f64, seed: u64, rate: f64, quality: f64) -> RunRecord {
        let config = RunConfig {
            lambda,
            alpha,
            seed,
            steps: 1,
            batch_size: 1,
            eval_every: 1,
            dataset_size: 10,
            codec_lr: 1e-4,
            source_lr: 1e-3,
            stage2_period: 1,
            source: default_gauss_mix(4),
            codec: CodecArch {
                input_dim: 4,
                hidden: vec![8],
                latent_dim: 2,
            },
            source_model: SourceModelArch {
                dim: 4,
                hidden: vec![8],
                context: ContextMode::Factorized,
            },
        };
        let run_id = config.hash();
        RunRecord {
            run_id,
            config,
            status: RunStatus::Complete,
            metrics: vec![MetricRow {
                step: 1,
                lambda,
                alpha,
                seed,
                rate_bpd: rate,
                mse: 10f64.powf(-quality / 10.0),
                quality_db: quality,
                reg_bits: 0.0,
            }],
            run_dir: std::path::PathBuf::from("unused"),
            wall_secs: 0.0,
            cached: false,
        }
    }

    fn grid_records(alpha: f64, seed: u64, rate_factor: f64) -> Vec<RunRecord> {
        let lambdas = [0.0018, 0.0035, 0.0067, 0.0130];
        let rates = [0.25, 0.5, 1.0, 2.0];
        let qualities = [30.0, 33.0, 36.0, 39.0];
        lambdas
            .iter()
            .zip(rates.iter().zip(&qualities))
            .map(|(&l, (&r, &q))| fake_record(l, alpha, seed, r * rate_factor, q))
            .collect()
    }

    #[test]
    fn sweep_cardinality_and_medians() {
        let mut records = Vec::new();
        for seed in [1u64, 2, 3] {
            records.extend(grid_records(0.0, seed, 1.0));
            records.extend(grid_records(0.1, seed, 0.98));
            records.extend(grid_records(1.0, seed, 0.95));
            records.extend(grid_records(3.0, seed, 1.02));
        }
        let report = alpha_sweep(&records).unwrap();
        // 4 alphas (incl. anchor) x 3 seeds rows; 4 medians.
        assert_eq!(report.rows.len(), 12);
        assert_eq!(report.medians.len(), 4);
        let best = report.best_alpha().unwrap();
        assert_eq!(best.alpha, 1.0);
        assert!((best.median_bd_rate_percent - (-5.0)).abs() < 0.2);
        let csv = report.to_csv();
        assert!(csv.contains("alpha,seed,bd_rate_percent"));
        assert!(csv.contains("-1.24%"));
        let svg = report.to_svg();
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn anchor_only_sweep_yields_zero_rows() {
        let records = grid_records(0.0, 1, 1.0);
        let report = alpha_sweep(&records).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].bd_rate_percent, 0.0);
    }

    #[test]
    fn missing_anchor_is_an_error() {
        let records = grid_records(0.5, 1, 1.0);
        assert!(alpha_sweep(&records).is_err());
    }

    #[test]
    fn curve_csv_parser_accepts_headers_and_comments() {
        let text = "# comment\nrate_bpd,quality_db\n0.25,30.0\n0.5,33\n1.0,36.0\n2.0,39.0\n";
        let curve = parse_curve_csv(text, "t.csv").unwrap();
        assert_eq!(curve.points().len(), 4);
    }

    #[test]
    fn curve_csv_parser_rejects_garbage_mid_file() {
        let text = "0.25,30.0\nnot,anumber\n";
        assert!(parse_curve_csv(text, "t.csv").is_err());
    }
}
