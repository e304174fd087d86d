//! Neural layers on top of the tape: dense layers, an attention-based graph
//! convolution, multi-layer encoders, and MLP heads.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, ParamId, ParamSet, Session, Var};
use crate::Result;

/// Glorot/Xavier uniform init: U(-a, a) with a = sqrt(6 / (rows + cols)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..=a))
}

/// Edge endpoints of a (batched) graph in tape-friendly form. Self-loops are
/// appended once at construction so every node attends to itself and no
/// attention destination is empty.
#[derive(Debug, Clone)]
pub struct EdgeEndpoints {
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub num_nodes: usize,
}

impl EdgeEndpoints {
    /// Build from an edge list, appending one self-loop per node.
    pub fn with_self_loops(edge_index: &[(usize, usize)], num_nodes: usize) -> Self {
        let mut src = Vec::with_capacity(edge_index.len() + num_nodes);
        let mut dst = Vec::with_capacity(edge_index.len() + num_nodes);
        for &(s, d) in edge_index {
            src.push(s);
            dst.push(d);
        }
        for i in 0..num_nodes {
            src.push(i);
            dst.push(i);
        }
        Self {
            src: Rc::new(src),
            dst: Rc::new(dst),
            num_nodes,
        }
    }
}

/// Fully connected layer: x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(format!("{name}.w"), glorot_uniform(in_dim, out_dim, rng));
        let b = params.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Self { w, b }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let xw = s.tape.matmul(x, w)?;
        s.tape.add_row(xw, b)
    }
}

/// Single-head attention graph convolution.
///
/// Per edge (src, dst): score = LeakyReLU(a_src . (W h)[src] + a_dst . (W h)[dst]),
/// attention = softmax of scores over each destination, output row =
/// sum over incoming edges of attention * (W h)[src], plus a bias. Assumes the
/// endpoint structure carries self-loops so every destination is non-empty.
#[derive(Debug, Clone)]
pub struct AttnConv {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub b: ParamId,
}

impl AttnConv {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            w: params.add(format!("{name}.w"), glorot_uniform(in_dim, out_dim, rng)),
            a_src: params.add(format!("{name}.a_src"), glorot_uniform(out_dim, 1, rng)),
            a_dst: params.add(format!("{name}.a_dst"), glorot_uniform(out_dim, 1, rng)),
            b: params.add(format!("{name}.b"), Array2::zeros((1, out_dim))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, edges: &EdgeEndpoints) -> Result<Var> {
        let w = s.param(self.w);
        let a_src = s.param(self.a_src);
        let a_dst = s.param(self.a_dst);
        let b = s.param(self.b);

        let hw = s.tape.matmul(x, w)?;
        let score_src = s.tape.matmul(hw, a_src)?;
        let score_dst = s.tape.matmul(hw, a_dst)?;
        let per_edge_src = s.tape.gather_rows(score_src, edges.src.clone())?;
        let per_edge_dst = s.tape.gather_rows(score_dst, edges.dst.clone())?;
        let raw = s.tape.add(per_edge_src, per_edge_dst)?;
        let scored = s.tape.activation(raw, Activation::LeakyRelu);
        let attn = s.tape.edge_softmax(scored, edges.dst.clone())?;
        let agg = s.tape.scatter_weighted_rows(
            hw,
            attn,
            edges.src.clone(),
            edges.dst.clone(),
            edges.num_nodes,
        )?;
        s.tape.add_row(agg, b)
    }
}

/// Shape of a message-passing encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Dropout rate applied after each hidden activation during training.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(crate::Error::InvalidArgument(
                "encoder needs at least one layer and a positive width".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Stack of attention convolutions producing node representations of width
/// `hidden_dim`. The activation sits between layers (not after the last);
/// dropout follows each activation when a training RNG is supplied.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub convs: Vec<AttnConv>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        config: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(config.layers);
        let mut d = in_dim;
        for l in 0..config.layers {
            convs.push(AttnConv::new(
                params,
                &format!("{name}.conv{l}"),
                d,
                config.hidden_dim,
                rng,
            ));
            d = config.hidden_dim;
        }
        Self { convs, config }
    }

    /// Node representations. `dropout_rng` switches training-mode dropout on;
    /// pass `None` for evaluation.
    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        edges: &EdgeEndpoints,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(s, h, edges)?;
            if l < last {
                h = s.tape.activation(h, self.config.activation);
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    if self.config.dropout > 0.0 {
                        h = apply_dropout(s, h, self.config.dropout, rng)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

/// Inverted dropout: zero entries with probability `rate`, scale survivors by
/// 1 / (1 - rate) so expectations match evaluation mode.
fn apply_dropout(s: &mut Session, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = (s.tape.value(x).nrows(), s.tape.value(x).ncols());
    let keep = 1.0 - rate;
    let mask = Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    });
    let m = s.tape.leaf(mask);
    s.tape.mul_elem(x, m)
}

/// Plain MLP: Linear layers with the activation between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` are layer widths including input and output, so `dims.len() - 1`
    /// linear layers.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| Linear::new(params, &format!("{name}.fc{l}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if l < last {
                h = s.tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }
}
