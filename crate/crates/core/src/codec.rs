//! Toy transform codec: MLP analysis/synthesis over vector sources, uniform
//! scalar quantization with an additive-uniform-noise training surrogate, and
//! a factorized Gaussian prior on the latent evaluated by CDF differences.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sources::SourceBatch;
use crate::special::{softplus, softplus_inv};

/// Scale parameters are clamped here before entering the rate term.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Interval masses are floored to keep the log finite if a latent escapes far
/// into a tail; gradients vanish on the floored side.
const MASS_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecArch {
    /// Source dimension N.
    pub input_dim: usize,
    /// Hidden widths of the analysis MLP; synthesis mirrors them.
    pub hidden: Vec<usize>,
    /// Latent dimension M.
    pub latent_dim: usize,
}

impl Default for CodecArch {
    fn default() -> Self {
        CodecArch {
            input_dim: 8,
            hidden: vec![32, 32],
            latent_dim: 4,
        }
    }
}

impl CodecArch {
    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(self.input_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("codec dimensions must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }
}

/// Uniform(-0.5, 0.5) noise for the quantization surrogate, or a test hook
/// that injects zeros.
pub enum NoiseSource {
    Seeded(ChaCha12Rng),
    Disabled,
}

impl NoiseSource {
    pub fn fill(&mut self, out: &mut [f64]) {
        match self {
            NoiseSource::Seeded(rng) => {
                for v in out.iter_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
            }
            NoiseSource::Disabled => out.fill(0.0),
        }
    }
}

/// Concrete values from one encode pass.
#[derive(Clone, Debug)]
pub struct CodecOutput {
    pub rows: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Analysis output y before quantization or noise.
    pub pre_quant: Vec<f64>,
    /// Surrogate latent (train) or integer-valued hard latent (eval).
    pub latent: Vec<f64>,
    pub reconstruction: Vec<f64>,
    /// Total bits per sample divided by the source dimension.
    pub rate_bits_per_dim: f64,
    pub distortion_mse: f64,
    pub train_mode: bool,
}

/// Node handles for the differentiable encode path; the trainer composes
/// losses on top of these.
pub struct CodecGraphNodes {
    pub x: ValueId,
    pub y: ValueId,
    pub latent: ValueId,
    pub xhat: ValueId,
    /// Bits per sample (batch mean of the per-row bit sum).
    pub rate_total: ValueId,
    /// Mean squared error per coordinate.
    pub mse: ValueId,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub arch: CodecArch,
    pub params: ParamStore,
}

fn xavier(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

impl CodecModel {
    /// Fresh model with Xavier-uniform weights, zero biases, zero prior means
    /// and unit prior scales.
    pub fn init(arch: CodecArch, rng: &mut ChaCha12Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        for (prefix, widths) in [("enc", arch.encoder_widths()), ("dec", arch.decoder_widths())] {
            for l in 0..widths.len() - 1 {
                let (fi, fo) = (widths[l], widths[l + 1]);
                params.insert(&format!("{prefix}.w{l}"), fi, fo, xavier(rng, fi, fo))?;
                params.insert(&format!("{prefix}.b{l}"), 1, fo, vec![0.0; fo])?;
            }
        }
        params.insert("prior.mu", 1, arch.latent_dim, vec![0.0; arch.latent_dim])?;
        params.insert(
            "prior.sigma_raw",
            1,
            arch.latent_dim,
            vec![softplus_inv(1.0); arch.latent_dim],
        )?;
        Ok(CodecModel { arch, params })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let header = serde_json::json!({ "codec": self.arch });
        crate::checkpoint::save(dir, &self.params, &header)
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let (params, header) = crate::checkpoint::load(dir)?;
        let arch: CodecArch = serde_json::from_value(
            header
                .get("codec")
                .cloned()
                .ok_or_else(|| Error::invalid("checkpoint header lacks a codec entry"))?,
        )?;
        Ok(CodecModel { arch, params })
    }

    /// MLP stack `prefix` applied to `input`; tanh between layers, linear out.
    pub fn mlp_into(
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

    pub fn analysis_into(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: ValueId,
    ) -> Result<ValueId> {
        self.mlp_into(tape, ids, "enc", &self.arch.encoder_widths(), x)
    }

    pub fn synthesis_into(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        latent: ValueId,
    ) -> Result<ValueId> {
        self.mlp_into(tape, ids, "dec", &self.arch.decoder_widths(), latent)
    }

    /// Bits per sample assigned to `latent` by the factorized Gaussian prior:
    /// -log2 of the unit-interval mass around each coordinate, summed over
    /// latent dims, averaged over the batch.
    pub fn rate_total_into(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        latent: ValueId,
        rows: usize,
    ) -> Result<ValueId> {
        let raw = ids["prior.sigma_raw"];
        if tape
            .value(raw)
            .iter()
            .any(|&r| softplus(r) < SIGMA_FLOOR)
        {
            log::warn!("prior scale underflow: clamping at {SIGMA_FLOOR:e}");
        }
        let sp = tape.softplus(raw);
        let sigma = tape.clamp_min(sp, SIGMA_FLOOR);
        let mu = ids["prior.mu"];
        let centered = tape.sub(latent, mu)?;
        let hi = tape.add_scalar(centered, 0.5);
        let lo = tape.add_scalar(centered, -0.5);
        let hi_z = tape.div(hi, sigma)?;
        let lo_z = tape.div(lo, sigma)?;
        let cdf_hi = tape.normal_cdf(hi_z);
        let cdf_lo = tape.normal_cdf(lo_z);
        let mass = tape.sub(cdf_hi, cdf_lo)?;
        let mass = tape.clamp_min(mass, MASS_FLOOR);
        let ln_mass = tape.ln(mass);
        let bits = tape.scale(ln_mass, -1.0 / LN_2);
        let total = tape.sum_all(bits);
        Ok(tape.scale(total, 1.0 / rows as f64))
    }

    fn batch_constant(&self, tape: &mut Tape, x: &SourceBatch) -> Result<ValueId> {
        if x.dim != self.arch.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch dim {} vs codec input dim {}",
                x.dim, self.arch.input_dim
            )));
        }
        tape.constant(x.rows, x.dim, x.data.clone())
    }

    /// Differentiable training path: ytilde = T_A(x) + eps with eps uniform in
    /// [-0.5, 0.5); the noise enters as a constant so its Jacobian w.r.t. y is
    /// the identity. Rate is evaluated on the noisy latent.
    pub fn train_graph(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: &SourceBatch,
        noise: &mut NoiseSource,
    ) -> Result<CodecGraphNodes> {
        let x_id = self.batch_constant(tape, x)?;
        let y = self.analysis_into(tape, ids, x_id)?;
        let mut eps = vec![0.0; x.rows * self.arch.latent_dim];
        noise.fill(&mut eps);
        let eps_id = tape.constant(x.rows, self.arch.latent_dim, eps)?;
        let latent = tape.add(y, eps_id)?;
        let xhat = self.synthesis_into(tape, ids, latent)?;
        let rate_total = self.rate_total_into(tape, ids, latent, x.rows)?;
        let diff = tape.sub(xhat, x_id)?;
        let sq = tape.square(diff);
        let mse = tape.mean_all(sq);
        for &id in &[y, xhat] {
            if tape.value(id).iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged(
                    "non-finite activation in codec forward pass".to_string(),
                ));
            }
        }
        Ok(CodecGraphNodes {
            x: x_id,
            y,
            latent,
            xhat,
            rate_total,
            mse,
        })
    }

    /// Evaluation path: u = round-ties-even(T_A(x)), rate on the hard latent.
    /// Built on a frozen graph; the output is a pure function of (x, params).
    pub fn eval_graph(
        &self,
        tape: &mut Tape,
        ids: &BTreeMap<String, ValueId>,
        x: &SourceBatch,
    ) -> Result<CodecGraphNodes> {
        let x_id = self.batch_constant(tape, x)?;
        let y = self.analysis_into(tape, ids, x_id)?;
        let u_vals: Vec<f64> = tape.value(y).iter().map(|v| v.round_ties_even()).collect();
        let latent = tape.constant(x.rows, self.arch.latent_dim, u_vals)?;
        let xhat = self.synthesis_into(tape, ids, latent)?;
        let rate_total = self.rate_total_into(tape, ids, latent, x.rows)?;
        let diff = tape.sub(xhat, x_id)?;
        let sq = tape.square(diff);
        let mse = tape.mean_all(sq);
        for &id in &[y, xhat] {
            if tape.value(id).iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged(
                    "non-finite activation in codec forward pass".to_string(),
                ));
            }
        }
        Ok(CodecGraphNodes {
            x: x_id,
            y,
            latent,
            xhat,
            rate_total,
            mse,
        })
    }

    fn output_from(&self, tape: &Tape, nodes: &CodecGraphNodes, rows: usize, train: bool) -> CodecOutput {
        CodecOutput {
            rows,
            input_dim: self.arch.input_dim,
            latent_dim: self.arch.latent_dim,
            pre_quant: tape.value(nodes.y).to_vec(),
            latent: tape.value(nodes.latent).to_vec(),
            reconstruction: tape.value(nodes.xhat).to_vec(),
            rate_bits_per_dim: tape.scalar(nodes.rate_total) / self.arch.input_dim as f64,
            distortion_mse: tape.scalar(nodes.mse),
            train_mode: train,
        }
    }

    /// Noise-surrogate encode returning concrete values.
    pub fn encode_train(&self, x: &SourceBatch, noise: &mut NoiseSource) -> Result<CodecOutput> {
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape)?;
        let nodes = self.train_graph(&mut tape, &ids, x, noise)?;
        Ok(self.output_from(&tape, &nodes, x.rows, true))
    }

    /// Hard-quantized encode returning concrete values.
    pub fn encode_eval(&self, x: &SourceBatch) -> Result<CodecOutput> {
        let mut tape = Tape::new();
        let ids = self.params.bind_frozen(&mut tape)?;
        let nodes = self.eval_graph(&mut tape, &ids, x)?;
        Ok(self.output_from(&tape, &nodes, x.rows, false))
    }
}

/// Plain rate-distortion objective: total bits per sample plus lambda times
/// the per-coordinate mean squared error.
pub fn rd_loss(output: &CodecOutput, x: &SourceBatch, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if output.rows != x.rows || output.input_dim != x.dim {
        return Err(Error::ShapeMismatch(
            "codec output and source batch are misaligned".to_string(),
        ));
    }
    let mut mse = 0.0;
    for (r, v) in output.reconstruction.iter().zip(&x.data) {
        let d = r - v;
        mse += d * d;
    }
    mse /= x.data.len() as f64;
    Ok(output.rate_bits_per_dim * output.input_dim as f64 + lambda * mse)
}

/// Graph-side rd loss, shared by the trainer.
pub fn rd_loss_node(
    tape: &mut Tape,
    nodes: &CodecGraphNodes,
    lambda: f64,
) -> Result<ValueId> {
    if lambda <= 0.0 {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    let weighted = tape.scale(nodes.mse, lambda);
    tape.add(nodes.rate_total, weighted)
}
