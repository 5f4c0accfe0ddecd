//! Plug-in entropy-identity probe for trained codecs.
//!
//! Runs the codec deterministically over every point of a small source grid,
//! builds the exact induced joints over (X, Xhat-bin) and (U, Xhat-bin), and
//! checks the latent-entropy decomposition on the trained system. The checks
//! hold for any deterministic maps, so a failing probe is an implementation
//! bug, never a modeling artifact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;
use crate::coding::{IdentityCheck, IDENTITY_TOL};
use crate::error::{Error, Result};
use crate::info::{Alphabet, JointTable, MAX_TABLE_CELLS};
use crate::sources::SourceBatch;

/// Uniform lattice over [lo, hi]^dim with `points_per_dim` samples per axis.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub dim: usize,
    pub points_per_dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > 4 {
            return Err(Error::invalid("probe source dimension must be 1..=4"));
        }
        if self.points_per_dim < 2 || self.points_per_dim > 32 {
            return Err(Error::invalid("probe grid must have 2..=32 points per dim"));
        }
        if !(self.hi > self.lo) {
            return Err(Error::invalid("probe grid needs hi > lo"));
        }
        Ok(())
    }

    pub fn atom_count(&self) -> usize {
        self.points_per_dim.pow(self.dim as u32)
    }

    /// All lattice points, row-major in odometer order.
    pub fn atoms(&self) -> SourceBatch {
        let n = self.atom_count();
        let step = (self.hi - self.lo) / (self.points_per_dim - 1) as f64;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut idx = vec![0usize; self.dim];
        for _ in 0..n {
            for &i in &idx {
                data.push(self.lo + step * i as f64);
            }
            for d in (0..self.dim).rev() {
                idx[d] += 1;
                if idx[d] < self.points_per_dim {
                    break;
                }
                idx[d] = 0;
            }
        }
        SourceBatch {
            rows: n,
            dim: self.dim,
            data,
            domain: "probe-grid".to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub identities: Vec<IdentityCheck>,
    #[serde(rename = "residual_H_U_given_Xhat")]
    pub residual: f64,
    pub h_x: f64,
    pub h_u: f64,
    pub h_xhat: f64,
    pub h_x_given_xhat: f64,
    pub atoms: usize,
    pub distinct_latents: usize,
    pub distinct_reconstruction_bins: usize,
    pub bins: usize,
}

impl ProbeReport {
    pub fn all_pass(&self) -> bool {
        self.identities.iter().all(|c| c.pass)
    }

    pub fn theorem_gap(&self) -> f64 {
        self.identities.last().map_or(f64::NAN, |c| c.gap)
    }
}

fn check(name: &str, lhs: f64, rhs: f64) -> IdentityCheck {
    IdentityCheck {
        name: name.to_string(),
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        pass: (lhs - rhs).abs() <= IDENTITY_TOL,
    }
}

/// Enumerates the codec over the grid and reports the latent-entropy
/// decomposition with the reconstruction discretized to `bins` per dimension
/// over its observed range.
pub fn identity_probe(model: &CodecModel, grid: &ProbeGrid, bins: usize) -> Result<ProbeReport> {
    grid.validate()?;
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    if grid.dim != model.arch.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "probe grid dim {} vs codec input dim {}",
            grid.dim, model.arch.input_dim
        )));
    }
    let atoms_batch = grid.atoms();
    let n = atoms_batch.rows;
    let out = model.encode_eval(&atoms_batch)?;
    let m = model.arch.latent_dim;

    // Deduplicate latent vectors and binned reconstructions.
    let mut u_ids: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    let mut u_of = Vec::with_capacity(n);
    for i in 0..n {
        let key: Vec<i64> = out.latent[i * m..(i + 1) * m]
            .iter()
            .map(|&v| v as i64)
            .collect();
        let next = u_ids.len();
        let id = *u_ids.entry(key).or_insert(next);
        u_of.push(id);
    }

    let dim = grid.dim;
    let mut mins = vec![f64::INFINITY; dim];
    let mut maxs = vec![f64::NEG_INFINITY; dim];
    for i in 0..n {
        for d in 0..dim {
            let v = out.reconstruction[i * dim + d];
            mins[d] = mins[d].min(v);
            maxs[d] = maxs[d].max(v);
        }
    }
    let mut xhat_ids: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    let mut xhat_of = Vec::with_capacity(n);
    for i in 0..n {
        let mut key = Vec::with_capacity(dim);
        for d in 0..dim {
            let width = maxs[d] - mins[d];
            let bin = if width > 0.0 {
                let b = ((out.reconstruction[i * dim + d] - mins[d]) / width * bins as f64) as u32;
                b.min(bins as u32 - 1)
            } else {
                0
            };
            key.push(bin);
        }
        let next = xhat_ids.len();
        let id = *xhat_ids.entry(key).or_insert(next);
        xhat_of.push(id);
    }

    let nu = u_ids.len();
    let nxhat = xhat_ids.len();
    for (rows, cols) in [(n, nxhat), (nu, nxhat)] {
        if rows.saturating_mul(cols) > MAX_TABLE_CELLS {
            return Err(Error::ResourceLimit(format!(
                "probe joint {rows}x{cols} exceeds the {MAX_TABLE_CELLS}-cell cap"
            )));
        }
    }

    let p = 1.0 / n as f64;
    let mut x_xhat = vec![0.0; n * nxhat];
    let mut u_xhat = vec![0.0; nu * nxhat];
    for i in 0..n {
        x_xhat[i * nxhat + xhat_of[i]] += p;
        u_xhat[u_of[i] * nxhat + xhat_of[i]] += p;
    }
    let t_x_xhat = JointTable::new(
        vec![Alphabet::new(n)?, Alphabet::new(nxhat)?],
        x_xhat,
    )?;
    let t_u_xhat = JointTable::new(
        vec![Alphabet::new(nu)?, Alphabet::new(nxhat)?],
        u_xhat,
    )?;

    let h_x = t_x_xhat.entropy(&[0])?;
    let h_xhat = t_x_xhat.entropy(&[1])?;
    let h_x_given_xhat = t_x_xhat.conditional_entropy(&[0], &[1])?;
    let i_x_xhat = t_x_xhat.mutual_information(&[0], &[1])?;
    let h_u = t_u_xhat.entropy(&[0])?;
    let h_u_given_xhat = t_u_xhat.conditional_entropy(&[0], &[1])?;

    let identities = vec![
        check("I(X;Xhat) = H(Xhat)", i_x_xhat, h_xhat),
        check("H(Xhat) = H(U) - H(U|Xhat)", h_xhat, h_u - h_u_given_xhat),
        check("H(U) = I(X;Xhat) + H(U|Xhat)", h_u, i_x_xhat + h_u_given_xhat),
        check(
            "H(U) = H(X) - H(X|Xhat) + H(U|Xhat)",
            h_u,
            h_x - h_x_given_xhat + h_u_given_xhat,
        ),
    ];
    Ok(ProbeReport {
        identities,
        residual: h_u_given_xhat,
        h_x,
        h_u,
        h_xhat,
        h_x_given_xhat,
        atoms: n,
        distinct_latents: nu,
        distinct_reconstruction_bins: nxhat,
        bins,
    })
}

/// Codec whose analysis and synthesis are exact identity maps; reduces the
/// probe to direct coding when the grid sits on integers.
pub fn identity_codec(dim: usize) -> Result<CodecModel> {
    use crate::codec::CodecArch;
    let arch = CodecArch {
        input_dim: dim,
        hidden: vec![],
        latent_dim: dim,
    };
    let mut rng = crate::rng::stream(0, crate::rng::StreamKind::CodecInit);
    let mut model = CodecModel::init(arch, &mut rng)?;
    let mut eye = vec![0.0; dim * dim];
    for i in 0..dim {
        eye[i * dim + i] = 1.0;
    }
    model.params.set_value("enc.w0", eye.clone())?;
    model.params.set_value("enc.b0", vec![0.0; dim])?;
    model.params.set_value("dec.w0", eye)?;
    model.params.set_value("dec.b0", vec![0.0; dim])?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecArch;
    use crate::rng::{stream, StreamKind};

    #[test]
    fn identity_codec_has_zero_residual_and_exact_theorem() {
        let model = identity_codec(2).unwrap();
        let grid = ProbeGrid {
            dim: 2,
            points_per_dim: 32,
            lo: 0.0,
            hi: 31.0,
        };
        let report = identity_probe(&model, &grid, 32).unwrap();
        assert!(report.all_pass(), "{report:?}");
        assert!(report.residual.abs() <= IDENTITY_TOL);
        assert!((report.h_x - 10.0).abs() <= 1e-12);
        assert!((report.h_u - 10.0).abs() <= 1e-12);
    }

    #[test]
    fn random_codec_satisfies_theorem_exactly() {
        let arch = CodecArch {
            input_dim: 2,
            hidden: vec![8],
            latent_dim: 3,
        };
        for seed in 0..5 {
            let mut rng = stream(seed, StreamKind::CodecInit);
            let model = CodecModel::init(arch.clone(), &mut rng).unwrap();
            let grid = ProbeGrid {
                dim: 2,
                points_per_dim: 16,
                lo: -2.0,
                hi: 2.0,
            };
            let report = identity_probe(&model, &grid, 16).unwrap();
            assert!(
                report.theorem_gap() <= IDENTITY_TOL,
                "seed {seed}: {report:?}"
            );
        }
    }

    #[test]
    fn coarser_bins_never_decrease_residual() {
        // Binning is a deterministic function of the reconstruction, so
        // merging bins can only add latent uncertainty.
        let arch = CodecArch {
            input_dim: 2,
            hidden: vec![8],
            latent_dim: 2,
        };
        let mut rng = stream(3, StreamKind::CodecInit);
        let model = CodecModel::init(arch, &mut rng).unwrap();
        let grid = ProbeGrid {
            dim: 2,
            points_per_dim: 24,
            lo: -2.0,
            hi: 2.0,
        };
        let mut last = f64::NEG_INFINITY;
        for bins in [64usize, 32, 16, 8] {
            let report = identity_probe(&model, &grid, bins).unwrap();
            assert!(
                report.residual >= last - IDENTITY_TOL,
                "residual decreased from {last} to {} at {bins} bins",
                report.residual
            );
            last = report.residual;
        }
    }

    #[test]
    fn dim_cap_is_enforced() {
        let model = identity_codec(2).unwrap();
        let grid = ProbeGrid {
            dim: 5,
            points_per_dim: 8,
            lo: 0.0,
            hi: 1.0,
        };
        assert!(identity_probe(&model, &grid, 8).is_err());
    }
}
