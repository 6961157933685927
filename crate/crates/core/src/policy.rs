//! Desired-output network and its serialization.
//!
//! A small fully connected net with tanh hidden layers and a linear output
//! layer maps the reduced coordinates `z = (z1, z2)` to the two desired
//! joint angles. The architecture header carries affine input and output
//! transforms: inputs are badly scaled (an angle next to an angular
//! momentum), so the stored shift/scale normalizes them before the first
//! layer, and residual models reuse the output transform to de-standardize
//! their targets. Both transforms are part of the persisted format.

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Widest layer the stack-allocated forward pass supports.
pub const MAX_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl MlpArch {
    /// Identity input/output transforms.
    pub fn plain(inputs: usize, hidden: Vec<usize>, outputs: usize) -> Self {
        MlpArch {
            inputs,
            hidden,
            outputs,
            input_shift: vec![0.0; inputs],
            input_scale: vec![1.0; inputs],
            output_shift: vec![0.0; outputs],
            output_scale: vec![1.0; outputs],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths: Vec<usize> = self.layer_widths();
        if self.inputs == 0 || self.outputs == 0 {
            return Err(Error::InvalidConfig("network needs inputs and outputs".into()));
        }
        if widths.iter().any(|&w| w == 0 || w > MAX_WIDTH) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be in 1..={MAX_WIDTH}, got {widths:?}"
            )));
        }
        if self.input_shift.len() != self.inputs || self.input_scale.len() != self.inputs {
            return Err(Error::InvalidConfig("input transform length mismatch".into()));
        }
        if self.output_shift.len() != self.outputs || self.output_scale.len() != self.outputs {
            return Err(Error::InvalidConfig("output transform length mismatch".into()));
        }
        if self.input_scale.iter().chain(self.output_scale.iter()).any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidConfig("transform scales must be finite and non-zero".into()));
        }
        Ok(())
    }

    fn layer_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.inputs);
        w.extend_from_slice(&self.hidden);
        w.push(self.outputs);
        w
    }

    /// (fan_in, fan_out) per weight layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let w = self.layer_widths();
        w.windows(2).map(|p| (p[0], p[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: MlpArch,
    pub w: Vec<f64>,
}

/// Forward pass with weights produced by `w_at`, so the same code runs with
/// plain weights, tape variables, or jet-lifted tape variables. Weight
/// layout per layer: row-major `out x in` matrix, then the `out` biases.
pub(crate) fn forward_core<S: Scalar>(
    arch: &MlpArch,
    mut w_at: impl FnMut(usize) -> S,
    x: &[S],
    out: &mut [S],
) {
    debug_assert_eq!(x.len(), arch.inputs);
    debug_assert_eq!(out.len(), arch.outputs);
    let mut cur = [S::zero(); MAX_WIDTH];
    let mut nxt = [S::zero(); MAX_WIDTH];
    for i in 0..arch.inputs {
        cur[i] = (x[i] - S::from_f64(arch.input_shift[i])) * S::from_f64(1.0 / arch.input_scale[i]);
    }
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let mut idx = 0;
    for (l, (n_in, n_out)) in dims.into_iter().enumerate() {
        let bias_base = idx + n_in * n_out;
        for r in 0..n_out {
            let mut acc = w_at(bias_base + r);
            for c in 0..n_in {
                acc = acc + w_at(idx + r * n_in + c) * cur[c];
            }
            nxt[r] = if l == last { acc } else { acc.tanh() };
        }
        idx = bias_base + n_out;
        std::mem::swap(&mut cur, &mut nxt);
    }
    for i in 0..arch.outputs {
        out[i] = cur[i] * S::from_f64(arch.output_scale[i]) + S::from_f64(arch.output_shift[i]);
    }
}

impl MlpParams {
    /// Seeded initialization: zero biases, weights drawn from
    /// N(0, 1/fan_in) via Box-Muller on a counter-based ChaCha stream, layer
    /// by layer in storage order.
    pub fn init(arch: MlpArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let mut w = vec![0.0; arch.n_params()];
        let mut idx = 0;
        for (n_in, n_out) in arch.layer_dims() {
            let std = 1.0 / (n_in as f64).sqrt();
            for k in 0..n_in * n_out {
                w[idx + k] = std * normal();
            }
            idx += (n_in + 1) * n_out;
        }
        Ok(MlpParams { arch, w })
    }

    pub fn n_params(&self) -> usize {
        self.w.len()
    }

    pub fn eval(&self, z: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        forward_core(&self.arch, |i| self.w[i], &z, &mut out);
        out
    }

    /// Value and Jacobian d(out)/d(z) in one pass of 2-tangent jets.
    pub fn eval_with_jacobian(&self, z: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let x = [Jet::<f64, 2>::variable(z[0], 0), Jet::<f64, 2>::variable(z[1], 1)];
        let mut out = [Jet::<f64, 2>::zero(); 2];
        forward_core(&self.arch, |i| Jet::constant(self.w[i]), &x, &mut out);
        (
            [out[0].re, out[1].re],
            [[out[0].du[0], out[0].du[1]], [out[1].du[0], out[1].du[1]]],
        )
    }
}

/// Evaluates with an explicit weight slice of any scalar kind.
pub(crate) fn eval_plain<S: Scalar>(arch: &MlpArch, w: &[S], z: [S; 2]) -> [S; 2] {
    let mut out = [S::zero(); 2];
    forward_core(arch, |i| w[i], &z, &mut out);
    out
}

/// Evaluates on jet inputs while the weights stay jet-constants of the inner
/// scalar; this is the training path (`SW = Var`) where z-tangents flow
/// through the net but the weights remain reverse-mode leaves.
pub(crate) fn eval_jet_lift<SW: Scalar, const N: usize>(
    arch: &MlpArch,
    w: &[SW],
    z: [Jet<SW, N>; 2],
) -> [Jet<SW, N>; 2] {
    let mut out = [Jet::<SW, N>::zero(); 2];
    forward_core(arch, |i| Jet::constant(w[i]), &z, &mut out);
    out
}

/// Gradient of a scalar built from the policy weights on a fresh tape.
/// Returns the value and d(value)/d(w).
pub fn grad_scalar<F>(params: &MlpParams, f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::with_capacity(4096);
    let leaves: Vec<Var> = params.w.iter().map(|&x| tape.var(x)).collect();
    let out = f(&tape, &leaves)?;
    let grad = tape.gradient(out, leaves.len());
    Ok((out.val(), grad))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// "policy" or "residual".
    pub kind: String,
    pub seed: u64,
    pub trained_epochs: usize,
    pub final_loss: f64,
    pub arch: MlpArch,
    pub weights: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, params: &MlpParams, seed: u64, trained_epochs: usize, final_loss: f64) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            seed,
            trained_epochs,
            final_loss,
            arch: params.arch.clone(),
            weights: params.w.clone(),
        }
    }

    pub fn params(&self) -> MlpParams {
        MlpParams {
            arch: self.arch.clone(),
            w: self.weights.clone(),
        }
    }

    /// JSON with full round-trip float precision; rewriting an unchanged
    /// checkpoint is byte-identical.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.arch.validate()?;
        if ck.weights.len() != ck.arch.n_params() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} weights, architecture wants {}",
                ck.weights.len(),
                ck.arch.n_params()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hand_computed_single_neuron() {
        let arch = MlpArch::plain(2, vec![1], 1);
        // layer 1: w = [0.5, -0.25], b = 0.3; layer 2: w = [2.0], b = -0.1
        let params = MlpParams {
            arch,
            w: vec![0.5, -0.25, 0.3, 2.0, -0.1],
        };
        let z = [0.6, 0.8];
        let mut out = [0.0];
        forward_core(&params.arch, |i| params.w[i], &z, &mut out);
        let expect = 2.0 * (0.5 * 0.6 - 0.25 * 0.8 + 0.3).tanh() - 0.1;
        assert_relative_eq!(out[0], expect, max_relative = 1e-15);
    }

    #[test]
    fn input_and_output_transforms_apply() {
        let mut arch = MlpArch::plain(2, vec![], 2);
        arch.input_shift = vec![1.0, 2.0];
        arch.input_scale = vec![0.5, 4.0];
        arch.output_shift = vec![10.0, -1.0];
        arch.output_scale = vec![2.0, 3.0];
        // identity-ish weight matrix, zero bias
        let params = MlpParams {
            arch,
            w: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        };
        let out = params.eval([2.0, 10.0]);
        // normalized input: ((2-1)/0.5, (10-2)/4) = (2, 2); linear layer passes through
        assert_relative_eq!(out[0], 2.0 * 2.0 + 10.0);
        assert_relative_eq!(out[1], 2.0 * 3.0 - 1.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arch = MlpArch::plain(2, vec![16, 16], 2);
        let params = MlpParams::init(arch, 3).unwrap();
        let z = [0.2, -0.4];
        let (_, jac) = params.eval_with_jacobian(z);
        let h = 1e-6;
        for j in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let (yp, ym) = (params.eval(zp), params.eval(zm));
            for i in 0..2 {
                let fd = (yp[i] - ym[i]) / (2.0 * h);
                assert_relative_eq!(jac[i][j], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled_by_fan_in() {
        let arch = MlpArch::plain(2, vec![60], 50);
        let a = MlpParams::init(arch.clone(), 11).unwrap();
        let b = MlpParams::init(arch.clone(), 11).unwrap();
        let c = MlpParams::init(arch.clone(), 12).unwrap();
        assert_eq!(a.w, b.w);
        assert_ne!(a.w, c.w);

        // per-layer sample std within 10% of 1/sqrt(fan_in); biases zero
        let mut idx = 0;
        for (n_in, n_out) in a.arch.layer_dims() {
            let n = n_in * n_out;
            let ws = &a.w[idx..idx + n];
            let mean = ws.iter().sum::<f64>() / n as f64;
            let var = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            let target = 1.0 / (n_in as f64).sqrt();
            assert!(
                (std - target).abs() < 0.1 * target,
                "layer std {std} vs {target} over {n} draws"
            );
            for k in 0..n_out {
                assert_eq!(a.w[idx + n + k], 0.0);
            }
            idx += (n_in + 1) * n_out;
        }
    }

    #[test]
    fn grad_scalar_matches_jets() {
        let arch = MlpArch::plain(2, vec![4], 2);
        let params = MlpParams::init(arch, 5).unwrap();
        let z = [0.3, -0.7];
        // scalar: y0 * y1 at fixed z
        let (val, grad) = grad_scalar(&params, |_tape, w| {
            let out = eval_plain(&params.arch, w, [Var::constant(z[0]), Var::constant(z[1])]);
            Ok(out[0] * out[1])
        })
        .unwrap();
        let y = params.eval(z);
        assert_relative_eq!(val, y[0] * y[1], max_relative = 1e-13);

        let h = 1e-6;
        for k in [0usize, 3, 7, params.w.len() - 1] {
            let mut pp = params.clone();
            pp.w[k] += h;
            let mut pm = params.clone();
            pm.w[k] -= h;
            let (yp, ym) = (pp.eval(z), pm.eval(z));
            let fd = (yp[0] * yp[1] - ym[0] * ym[1]) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let arch = MlpArch::plain(2, vec![16, 16], 2);
        let params = MlpParams::init(arch, 42).unwrap();
        let ck = Checkpoint::new("policy", &params, 42, 0, 0.015625);
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.weights.len(), params.w.len());
        for (a, b) in loaded.weights.iter().zip(params.w.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "weight bits must survive json");
        }
        let bytes1 = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn checkpoint_rejects_mismatched_weight_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let arch = MlpArch::plain(2, vec![4], 2);
        let params = MlpParams::init(arch, 1).unwrap();
        let mut ck = Checkpoint::new("policy", &params, 1, 0, 0.0);
        ck.weights.pop();
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
