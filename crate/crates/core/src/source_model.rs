//! Conditional source entropy model q(x | xhat) and the regularized training
//! objective built on it.
//!
//! The model is a per-dimension Gaussian whose mean and scale come from an MLP
//! reading the reconstruction (factorized mode) or the reconstruction plus the
//! strictly preceding source dimensions (causal mode). Its log-likelihood
//! enters the codec loss with weight alpha; gradients reach the codec through
//! the reconstruction, never the model's own parameters, which train in a
//! separate stage against a frozen reconstruction.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::codec::CodecGraphNodes;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sources::SourceBatch;
use crate::special::softplus_inv;

/// Scale floor for the conditional Gaussian; prevents density spikes when the
/// model starts memorizing near-exact reconstructions.
pub const SOURCE_SIGMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// (mu, sigma) for every dimension from xhat alone.
    Factorized,
    /// Dimension i additionally reads x_1..x_{i-1}, never x_i or later.
    Causal,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct SourceModelArch {
    pub dim: usize,
    /// Hidden widths; defaults match the codec synthesis MLP.
    pub hidden: Vec<usize>,
    pub context: ContextMode,
}

impl Default for SourceModelArch {
    fn default() -> Self {
        SourceModelArch {
            dim: 8,
            hidden: vec![32, 32],
            context: ContextMode::Factorized,
        }
    }
}

impl SourceModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("source model dim must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }

    fn factorized_widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim];
        w.extend(&self.hidden);
        w.push(2 * self.dim);
        w
    }

    fn causal_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.dim];
        w.extend(&self.hidden);
        w.push(2);
        w
    }
}

#[derive(Clone, Debug)]
pub struct SourceModel {
    pub arch: SourceModelArch,
    pub params: ParamStore,
}

/// Graph handles for the conditional Gaussian heads.
pub struct SourceModelNodes {
    pub mu: ValueId,
    pub sigma: ValueId,
    /// Negative log likelihood in bits per dimension (batch mean).
    pub nll_bits_per_dim: ValueId,
}

fn xavier(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    use rand::Rng;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

impl SourceModel {
    pub fn init(arch: SourceModelArch, rng: &mut ChaCha12Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        match arch.context {
            ContextMode::Factorized => {
                let widths = arch.factorized_widths();
                for l in 0..widths.len() - 1 {
                    let (fi, fo) = (widths[l], widths[l + 1]);
                    params.insert(&format!("sm.w{l}"), fi, fo, xavier(rng, fi, fo))?;
                    let mut bias = vec![0.0; fo];
                    if l == widths.len() - 2 {
                        // Raw-scale half of the output starts at sigma ~ 1.
                        for b in bias.iter_mut().skip(arch.dim) {
                            *b = softplus_inv(1.0);
                        }
                    }
                    params.insert(&format!("sm.b{l}"), 1, fo, bias)?;
                }
            }
            ContextMode::Causal => {
                let widths = arch.causal_widths();
                for head in 0..arch.dim {
                    for l in 0..widths.len() - 1 {
                        let (fi, fo) = (widths[l], widths[l + 1]);
                        params.insert(&format!("sm.h{head}.w{l}"), fi, fo, xavier(rng, fi, fo))?;
                        let mut bias = vec![0.0; fo];
                        if l == widths.len() - 2 {
                            bias[1] = softplus_inv(1.0);
                        }
                        params.insert(&format!("sm.h{head}.b{l}"), 1, fo, bias)?;
                    }
                }
            }
        }
        Ok(SourceModel { arch, params })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let header = serde_json::json!({ "source_model": self.arch });
        crate::checkpoint::save(dir, &self.params, &header)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (params, header) = crate::checkpoint::load(dir)?;
        let arch: SourceModelArch = serde_json::from_value(
            header
                .get("source_model")
                .cloned()
                .ok_or_else(|| Error::invalid("checkpoint header lacks a source_model entry"))?,
        )?;
        Ok(SourceModel { arch, params })
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        prefix: &str,
        widths: &[usize],
        input: ValueId,
    ) -> Result<ValueId> {
        let mut h = input;
        for l in 0..widths.len() - 1 {
            let w = ids[&format!("{prefix}.w{l}")];
            let b = ids[&format!("{prefix}.b{l}")];
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if l + 1 < widths.len() - 1 {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    fn split_columns(
        &self,
        tape: &mut Tape,
        wide: ValueId,
        rows: usize,
        dim: usize,
    ) -> Result<(ValueId, ValueId)> {
        // Column selection via constant selector matrices keeps the op set small.
        let mut left = vec![0.0; 2 * dim * dim];
        let mut right = vec![0.0; 2 * dim * dim];
        for j in 0..dim {
            left[j * dim + j] = 1.0;
            right[(dim + j) * dim + j] = 1.0;
        }
        let left_sel = tape.constant(2 * dim, dim, left)?;
        let right_sel = tape.constant(2 * dim, dim, right)?;
        let mu = tape.matmul(wide, left_sel)?;
        let raw = tape.matmul(wide, right_sel)?;
        let _ = rows;
        Ok((mu, raw))
    }

    /// Conditional Gaussian heads over `x` given `xhat`. Both operands are
    /// whatever the caller wants gradients to flow through; the causal mask is
    /// a constant, so masked Jacobian entries are exactly zero.
    pub fn heads(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: ValueId,
        xhat: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let dim = self.arch.dim;
        let (rows, xcols) = tape.shape(x);
        if xcols != dim || tape.shape(xhat) != (rows, dim) {
            return Err(Error::ShapeMismatch(format!(
                "source model expects {rows}x{dim} operands"
            )));
        }
        match self.arch.context {
            ContextMode::Factorized => {
                let widths = self.arch.factorized_widths();
                let wide = self.mlp(tape, ids, "sm", &widths, xhat)?;
                self.split_columns(tape, wide, rows, dim)
            }
            ContextMode::Causal => {
                let widths = self.arch.causal_widths();
                let mut mu_cols: Option<ValueId> = None;
                let mut raw_cols: Option<ValueId> = None;
                for head in 0..dim {
                    let mut mask = vec![0.0; dim];
                    for m in mask.iter_mut().take(head) {
                        *m = 1.0;
                    }
                    let mask_id = tape.constant(1, dim, mask)?;
                    let masked_x = tape.mul(x, mask_id)?;
                    let input = tape.concat_cols(xhat, masked_x)?;
                    let out = self.mlp(tape, ids, &format!("sm.h{head}"), &widths, input)?;
                    // out: rows x 2 -> split into mu and raw-sigma columns.
                    let mu_sel = tape.constant(2, 1, vec![1.0, 0.0])?;
                    let raw_sel = tape.constant(2, 1, vec![0.0, 1.0])?;
                    let mu_h = tape.matmul(out, mu_sel)?;
                    let raw_h = tape.matmul(out, raw_sel)?;
                    mu_cols = Some(match mu_cols {
                        None => mu_h,
                        Some(acc) => tape.concat_cols(acc, mu_h)?,
                    });
                    raw_cols = Some(match raw_cols {
                        None => raw_h,
                        Some(acc) => tape.concat_cols(acc, raw_h)?,
                    });
                }
                Ok((mu_cols.expect("dim >= 1"), raw_cols.expect("dim >= 1")))
            }
        }
    }

    /// Negative log likelihood of `x` under the conditional Gaussian, in bits
    /// per dimension (batch mean). Returns the (mu, sigma, nll) nodes.
    pub fn nll_graph(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: ValueId,
        xhat: ValueId,
    ) -> Result<SourceModelNodes> {
        let (rows, dim) = tape.shape(x);
        let (mu, raw) = self.heads(tape, ids, x, xhat)?;
        let sp = tape.softplus(raw);
        let sigma = tape.clamp_min(sp, SOURCE_SIGMA_FLOOR);
        // -ln N(x; mu, sigma^2) = 0.5 ln(2 pi) + ln sigma + 0.5 z^2
        let diff = tape.sub(x, mu)?;
        let z = tape.div(diff, sigma)?;
        let z2 = tape.square(z);
        let half_z2 = tape.scale(z2, 0.5);
        let ln_sigma = tape.ln(sigma);
        let nll_nats = tape.add(half_z2, ln_sigma)?;
        let nll_nats = tape.add_scalar(nll_nats, 0.5 * (2.0 * PI).ln());
        let nll_bits = tape.scale(nll_nats, 1.0 / LN_2);
        let total = tape.sum_all(nll_bits);
        let nll_bits_per_dim = tape.scale(total, 1.0 / (rows * dim) as f64);
        if tape.value(mu).iter().any(|v| !v.is_finite())
            || tape.value(sigma).iter().any(|v| !v.is_finite())
        {
            return Err(Error::ModelDiverged(
                "non-finite source model output".to_string(),
            ));
        }
        Ok(SourceModelNodes {
            mu,
            sigma,
            nll_bits_per_dim,
        })
    }

    /// Value-level NLL in bits per dimension with the model frozen.
    pub fn source_nll(&self, x: &SourceBatch, xhat: &[f64]) -> Result<f64> {
        if xhat.len() != x.data.len() {
            return Err(Error::ShapeMismatch(
                "x and xhat must have the same shape".to_string(),
            ));
        }
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape)?;
        let x_id = tape.constant(x.rows, x.dim, x.data.clone())?;
        let xhat_id = tape.constant(x.rows, x.dim, xhat.to_vec())?;
        let nodes = self.nll_graph(&mut tape, &ids, x_id, xhat_id)?;
        Ok(tape.scalar(nodes.nll_bits_per_dim))
    }
}

/// Per-term breakdown of the regularized objective.
#[derive(Clone, Debug, Serialize)]
pub struct RegularizedLossBreakdown {
    /// Bits per sample from the latent prior.
    pub rate_bits: f64,
    pub distortion_mse: f64,
    /// E[log2 q(x|xhat)] in bits per sample; enters the total with weight
    /// +alpha, i.e. minus alpha times the estimated conditional entropy.
    pub regularizer_bits: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Graph nodes of the regularized objective.
pub struct RegularizedLossNodes {
    pub total: ValueId,
    pub rate_total: ValueId,
    pub mse: ValueId,
    /// E[log2 q(x|xhat)] per sample (a node only when alpha > 0).
    pub regularizer: Option<ValueId>,
}

/// total = rate + lambda * distortion + alpha * E[log2 q(x|xhat)].
///
/// The source model must be bound frozen by the caller: stage 1 of the
/// two-stage loop updates only the codec, so gradients reach the codec through
/// the rate, the distortion and the regularizer's dependence on xhat, while
/// the model's own parameters see none.
pub fn regularized_loss_nodes(
    tape: &mut Tape,
    codec_nodes: &CodecGraphNodes,
    source_model: Option<(&SourceModel, &BTreeMap<String, ValueId>)>,
    lambda: f64,
    alpha: f64,
) -> Result<RegularizedLossNodes> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let rd = crate::codec::rd_loss_node(tape, codec_nodes, lambda)?;
    if alpha == 0.0 {
        return Ok(RegularizedLossNodes {
            total: rd,
            rate_total: codec_nodes.rate_total,
            mse: codec_nodes.mse,
            regularizer: None,
        });
    }
    let (sm, ids) = source_model.ok_or_else(|| {
        Error::invalid("alpha > 0 requires a source model for the regularizer")
    })?;
    let nodes = sm.nll_graph(tape, ids, codec_nodes.x, codec_nodes.xhat)?;
    // E[log2 q] per sample = -(nll bits/dim) * dim.
    let (_, dim) = tape.shape(codec_nodes.x);
    let log_likelihood = tape.scale(nodes.nll_bits_per_dim, -(dim as f64));
    let weighted = tape.scale(log_likelihood, alpha);
    let total = tape.add(rd, weighted)?;
    Ok(RegularizedLossNodes {
        total,
        rate_total: codec_nodes.rate_total,
        mse: codec_nodes.mse,
        regularizer: Some(log_likelihood),
    })
}

/// Extracts the value-level breakdown from the loss nodes.
pub fn breakdown(
    tape: &Tape,
    nodes: &RegularizedLossNodes,
    lambda: f64,
    alpha: f64,
) -> RegularizedLossBreakdown {
    RegularizedLossBreakdown {
        rate_bits: tape.scalar(nodes.rate_total),
        distortion_mse: tape.scalar(nodes.mse),
        regularizer_bits: nodes.regularizer.map_or(0.0, |r| tape.scalar(r)),
        total: tape.scalar(nodes.total),
        alpha,
        lambda,
    }
}

/// Stage-2 objective: total NLL bits per sample of `x` under the model given a
/// frozen reconstruction. Gradients reach only the model parameters.
pub fn source_model_step_loss(
    tape: &mut Tape,
    sm: &SourceModel,
    ids: &BTreeMap<String, ValueId>,
    x: &SourceBatch,
    xhat_frozen: &[f64],
) -> Result<ValueId> {
    if xhat_frozen.len() != x.data.len() {
        return Err(Error::ShapeMismatch(
            "x and xhat must have the same shape".to_string(),
        ));
    }
    let x_id = tape.constant(x.rows, x.dim, x.data.clone())?;
    let xhat_id = tape.constant(x.rows, x.dim, xhat_frozen.to_vec())?;
    let nodes = sm.nll_graph(tape, ids, x_id, xhat_id)?;
    Ok(tape.scale(nodes.nll_bits_per_dim, x.dim as f64))
}
