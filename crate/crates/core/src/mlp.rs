//! Fixed-topology MLPs over flat parameter vectors.
//!
//! A spec is a list of layer widths plus one activation applied to every
//! non-final layer; the final layer is always linear. Parameters live in a
//! single flat vector, laid out layer by layer as the `in x out` weight
//! matrix (row-major) followed by the bias. Backprop is written by hand
//! against that layout; `optim::grad_check` validates it.
//!
//! When `residual` is set, a hidden layer whose input and output widths match
//! adds an identity skip: `y = act(W x + b) + x`. Layers with unequal widths
//! and the final layer stay plain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Layer widths (input first) and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            widths,
            activation,
            residual: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "mlp spec needs at least 2 widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "mlp widths must be >= 1, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total parameter count: sum of `(w_i + 1) * w_{i+1}`.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Whether layer `l` carries an identity skip connection.
    /// Never on the final (linear) layer.
    fn skip(&self, l: usize) -> bool {
        self.residual && l < self.layer_count() - 1 && self.widths[l] == self.widths[l + 1]
    }

    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero.
    ///
    /// Draw order is fixed (layer by layer, weights row-major) so a seed
    /// pins the whole vector.
    pub fn init_params(&self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        let mut off = 0;
        for w in self.widths.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for v in &mut params[off..off + w[0] * w[1]] {
                *v = rng.normal() * scale;
            }
            off += (w[0] + 1) * w[1];
        }
        params
    }
}

fn check_params(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::ShapeMismatch {
            op: "mlp params",
            expected: format!("{} parameters for widths {:?}", spec.param_count(), spec.widths),
            got: format!("{}", params.len()),
        });
    }
    Ok(())
}

fn check_input(spec: &MlpSpec, input: &DenseMatrix) -> Result<()> {
    if input.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "mlp input",
            expected: format!("{} columns", spec.input_dim()),
            got: format!("{}", input.cols()),
        });
    }
    Ok(())
}

/// Intermediate values of a forward pass, kept for the backward pass.
pub struct ForwardTrace {
    /// `layer_inputs[l]` is the input to layer `l`; the last entry is the output.
    layer_inputs: Vec<DenseMatrix>,
    /// Activation outputs per layer before any skip connection is added.
    act_outputs: Vec<DenseMatrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DenseMatrix {
        self.layer_inputs.last().unwrap()
    }
}

/// One affine layer `X W + b` from the flat vector at `off`.
fn affine(params: &[f64], off: usize, w_in: usize, w_out: usize, x: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), w_out);
    let weights = &params[off..off + w_in * w_out];
    let bias = &params[off + w_in * w_out..off + (w_in + 1) * w_out];
    for r in 0..x.rows() {
        let x_row = x.row(r);
        let out_row = out.row_mut(r);
        out_row.copy_from_slice(bias);
        for (k, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w_row = &weights[k * w_out..(k + 1) * w_out];
            for (o, &w) in out_row.iter_mut().zip(w_row) {
                *o += xv * w;
            }
        }
    }
    out
}

/// Forward pass keeping the trace needed by [`mlp_backward`].
pub fn mlp_forward_trace(params: &[f64], spec: &MlpSpec, input: &DenseMatrix) -> Result<ForwardTrace> {
    spec.validate()?;
    check_params(spec, params)?;
    check_input(spec, input)?;

    let n_layers = spec.layer_count();
    let mut layer_inputs = Vec::with_capacity(n_layers + 1);
    let mut act_outputs = Vec::with_capacity(n_layers);
    layer_inputs.push(input.clone());
    let mut off = 0;
    for l in 0..n_layers {
        let (w_in, w_out) = (spec.widths[l], spec.widths[l + 1]);
        let x = layer_inputs.last().unwrap();
        let mut y = affine(params, off, w_in, w_out, x);
        off += (w_in + 1) * w_out;
        if l < n_layers - 1 {
            match spec.activation {
                Activation::Tanh => y.data_mut().iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Relu => y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        act_outputs.push(y.clone());
        if spec.skip(l) {
            y.add_assign(layer_inputs.last().unwrap());
        }
        layer_inputs.push(y);
    }
    Ok(ForwardTrace {
        layer_inputs,
        act_outputs,
    })
}

/// Pure forward evaluation; output has `spec.output_dim()` columns.
pub fn mlp_forward(params: &[f64], spec: &MlpSpec, input: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(mlp_forward_trace(params, spec, input)?
        .layer_inputs
        .pop()
        .unwrap())
}

/// Analytic gradients of the forward map.
///
/// `upstream` is dLoss/dOutput; returns (dLoss/dParams, dLoss/dInput).
pub fn mlp_backward(
    params: &[f64],
    spec: &MlpSpec,
    trace: &ForwardTrace,
    upstream: &DenseMatrix,
) -> Result<(Vec<f64>, DenseMatrix)> {
    check_params(spec, params)?;
    let out = trace.output();
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(Error::ShapeMismatch {
            op: "mlp upstream gradient",
            expected: format!("{}x{}", out.rows(), out.cols()),
            got: format!("{}x{}", upstream.rows(), upstream.cols()),
        });
    }

    let n_layers = spec.layer_count();
    let mut param_grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for w in spec.widths.windows(2) {
        offsets.push(off);
        off += (w[0] + 1) * w[1];
    }

    let mut g = upstream.clone();
    for l in (0..n_layers).rev() {
        let (w_in, w_out) = (spec.widths[l], spec.widths[l + 1]);
        let skip = spec.skip(l);
        let g_skip = if skip { Some(g.clone()) } else { None };

        // Through the activation (final layer is linear).
        let mut g_pre = g;
        if l < n_layers - 1 {
            let act = &trace.act_outputs[l];
            match spec.activation {
                Activation::Tanh => {
                    for (gv, &a) in g_pre.data_mut().iter_mut().zip(act.data()) {
                        *gv *= 1.0 - a * a;
                    }
                }
                Activation::Relu => {
                    for (gv, &a) in g_pre.data_mut().iter_mut().zip(act.data()) {
                        if a <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
        }

        let x = &trace.layer_inputs[l];
        // dW[k, j] = sum_r x[r, k] * g_pre[r, j]; db[j] = sum_r g_pre[r, j]
        let w_grad = &mut param_grad[offsets[l]..offsets[l] + (w_in + 1) * w_out];
        for r in 0..x.rows() {
            let x_row = x.row(r);
            let g_row = g_pre.row(r);
            for (k, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let dst = &mut w_grad[k * w_out..(k + 1) * w_out];
                for (d, &gv) in dst.iter_mut().zip(g_row) {
                    *d += xv * gv;
                }
            }
            let db = &mut w_grad[w_in * w_out..(w_in + 1) * w_out];
            for (d, &gv) in db.iter_mut().zip(g_row) {
                *d += gv;
            }
        }

        // dX = g_pre W^T (+ skip path)
        let weights =
            DenseMatrix::from_vec(w_in, w_out, params[offsets[l]..offsets[l] + w_in * w_out].to_vec())?;
        let mut g_in = g_pre.matmul_transpose(&weights)?;
        if let Some(s) = g_skip {
            g_in.add_assign(&s);
        }
        g = g_in;
    }
    Ok((param_grad, g))
}
