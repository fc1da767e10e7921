//! Layer library on top of [`crate::graph`]: linear maps, normalization,
//! attention, Conformer and Transformer blocks and the 1-D samplers.
//!
//! Every layer comes as a pair: `*_specs` lists the parameters it owns under
//! a name prefix, and a method on [`Net`] runs it.

use std::cell::RefCell;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::params::{Init, ParamSpec, ParameterSet};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass mode: dropout on or off, and position encodings on or off.
pub struct Ctx {
    pub train: bool,
    pub positions: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            positions: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            positions: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn without_positions(mut self) -> Self {
        self.positions = false;
        self
    }

    fn dropout_mask(&self, shape: (usize, usize), p: f64) -> Mat {
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
    }
}

/// Sinusoidal absolute position table, `t × d`.
pub fn positional_encoding(t: usize, d: usize) -> Mat {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn causal_mask(t: usize) -> Mat {
    Array2::from_shape_fn((t, t), |(i, j)| if j > i { -1e9 } else { 0.0 })
}

/// Row `j` of `x` repeated `d_j` times, in order.
pub fn regulate_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(j, &d)| std::iter::repeat_n(j, d))
        .collect()
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), (d_in, d_out), Init::FanIn(d_in)),
        ParamSpec::new(format!("{prefix}.bias"), (1, d_out), Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), (1, d), Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), (1, d), Init::Zeros),
    ]
}

pub fn embedding_specs(prefix: &str, n: usize, d: usize) -> Vec<ParamSpec> {
    vec![ParamSpec::new(format!("{prefix}.weight"), (n, d), Init::Uniform(1.0))]
}

pub fn mha_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["linear_q", "linear_k", "linear_v", "linear_out"]
        .iter()
        .flat_map(|n| linear_specs(&format!("{prefix}.{n}"), d, d))
        .collect()
}

pub fn ffn_specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.w_1"), d, d_ff);
    v.extend(linear_specs(&format!("{prefix}.w_2"), d_ff, d));
    v
}

pub fn conv_module_specs(prefix: &str, d: usize, kernel: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.pointwise_conv1"), d, 2 * d);
    v.push(ParamSpec::new(
        format!("{prefix}.depthwise_conv.weight"),
        (kernel, d),
        Init::FanIn(kernel),
    ));
    v.push(ParamSpec::new(
        format!("{prefix}.depthwise_conv.bias"),
        (1, d),
        Init::Zeros,
    ));
    v.extend(norm_specs(&format!("{prefix}.norm"), d));
    v.extend(linear_specs(&format!("{prefix}.pointwise_conv2"), d, d));
    v
}

pub fn conformer_layer_specs(prefix: &str, d: usize, d_ff: usize, kernel: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    v.extend(norm_specs(&format!("{prefix}.norm-ff-macaron"), d));
    v.extend(ffn_specs(&format!("{prefix}.feed_forward_macaron"), d, d_ff));
    v.extend(norm_specs(&format!("{prefix}.norm-mha"), d));
    v.extend(mha_specs(&format!("{prefix}.self_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.norm-conv"), d));
    v.extend(conv_module_specs(&format!("{prefix}.conv_module"), d, kernel));
    v.extend(norm_specs(&format!("{prefix}.norm-ff"), d));
    v.extend(ffn_specs(&format!("{prefix}.feed_forward"), d, d_ff));
    v.extend(norm_specs(&format!("{prefix}.norm-final"), d));
    v
}

pub fn transformer_layer_specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    v.extend(norm_specs(&format!("{prefix}.norm-mha"), d));
    v.extend(mha_specs(&format!("{prefix}.self_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.norm-ff"), d));
    v.extend(ffn_specs(&format!("{prefix}.feed_forward"), d, d_ff));
    v
}

pub fn decoder_layer_specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    v.extend(norm_specs(&format!("{prefix}.norm-mha"), d));
    v.extend(mha_specs(&format!("{prefix}.self_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.norm-src"), d));
    v.extend(mha_specs(&format!("{prefix}.src_attn"), d));
    v.extend(norm_specs(&format!("{prefix}.norm-ff"), d));
    v.extend(ffn_specs(&format!("{prefix}.feed_forward"), d, d_ff));
    v
}

pub fn conformer_stack_specs(prefix: &str, n: usize, d: usize, d_ff: usize, kernel: usize) -> Vec<ParamSpec> {
    (0..n)
        .flat_map(|i| conformer_layer_specs(&format!("{prefix}.layers.{i}"), d, d_ff, kernel))
        .collect()
}

/// Pre-norm Transformer stack with a closing LayerNorm.
pub fn transformer_stack_specs(prefix: &str, n: usize, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v: Vec<ParamSpec> = (0..n)
        .flat_map(|i| transformer_layer_specs(&format!("{prefix}.layers.{i}"), d, d_ff))
        .collect();
    v.extend(norm_specs(&format!("{prefix}.after_norm"), d));
    v
}

pub fn decoder_stack_specs(prefix: &str, n: usize, d: usize, d_ff: usize) -> Vec<ParamSpec> {
    let mut v: Vec<ParamSpec> = (0..n)
        .flat_map(|i| decoder_layer_specs(&format!("{prefix}.layers.{i}"), d, d_ff))
        .collect();
    v.extend(norm_specs(&format!("{prefix}.after_norm"), d));
    v
}

/// Strided convolution blocks (kernel 3, stride 2, padding 1).
pub fn downsampler_specs(prefix: &str, blocks: usize, d_in: usize, d: usize) -> Vec<ParamSpec> {
    (0..blocks)
        .flat_map(|i| {
            let c = if i == 0 { d_in } else { d };
            linear_specs(&format!("{prefix}.conv.{i}"), 3 * c, d)
        })
        .collect()
}

/// Transposed convolution blocks with kernel 2 and stride 2.
pub fn upsampler_specs(prefix: &str, blocks: usize, d: usize) -> Vec<ParamSpec> {
    (0..blocks)
        .flat_map(|i| linear_specs(&format!("{prefix}.deconv.{i}"), d, 2 * d))
        .collect()
}

/// Binds a graph, a parameter set and a forward mode.
pub struct Net<'a, 'g> {
    pub g: &'g Graph,
    pub p: &'a ParameterSet,
    pub ctx: &'a Ctx,
}

impl<'a, 'g> Net<'a, 'g> {
    pub fn new(g: &'g Graph, p: &'a ParameterSet, ctx: &'a Ctx) -> Self {
        Self { g, p, ctx }
    }

    pub fn param(&self, name: &str) -> Var<'g> {
        self.g.param(self.p, name)
    }

    pub fn linear(&self, prefix: &str, x: Var<'g>) -> Var<'g> {
        x.matmul(self.param(&format!("{prefix}.weight")))
            .add_row(self.param(&format!("{prefix}.bias")))
    }

    pub fn norm(&self, prefix: &str, x: Var<'g>) -> Var<'g> {
        x.layer_norm(LN_EPS)
            .mul_row(self.param(&format!("{prefix}.weight")))
            .add_row(self.param(&format!("{prefix}.bias")))
    }

    pub fn dropout(&self, x: Var<'g>, p: f64) -> Var<'g> {
        if !self.ctx.train || p <= 0.0 {
            return x;
        }
        let mask = self.ctx.dropout_mask(x.shape(), p);
        x.mul(self.g.constant(mask))
    }

    pub fn add_positions(&self, x: Var<'g>) -> Var<'g> {
        if !self.ctx.positions {
            return x;
        }
        let (t, d) = x.shape();
        x.add_const(&positional_encoding(t, d))
    }

    pub fn mha(&self, prefix: &str, xq: Var<'g>, xkv: Var<'g>, heads: usize, causal: bool, dropout: f64) -> Var<'g> {
        let q = self.linear(&format!("{prefix}.linear_q"), xq);
        let k = self.linear(&format!("{prefix}.linear_k"), xkv);
        let v = self.linear(&format!("{prefix}.linear_v"), xkv);
        let d = q.cols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mask = causal.then(|| causal_mask(q.rows()));
        let outs: Vec<Var<'g>> = (0..heads)
            .map(|h| {
                let qh = q.slice_cols(h * dk, dk);
                let kh = k.slice_cols(h * dk, dk);
                let vh = v.slice_cols(h * dk, dk);
                let mut scores = qh.matmul_t(kh).scale(scale);
                if let Some(m) = &mask {
                    scores = scores.add_const(m);
                }
                self.dropout(scores.softmax_rows(), dropout).matmul(vh)
            })
            .collect();
        let joined = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs) };
        self.linear(&format!("{prefix}.linear_out"), joined)
    }

    pub fn ffn(&self, prefix: &str, x: Var<'g>, dropout: f64) -> Var<'g> {
        let h = self.linear(&format!("{prefix}.w_1"), x).swish();
        self.linear(&format!("{prefix}.w_2"), self.dropout(h, dropout))
    }

    pub fn conv_module(&self, prefix: &str, x: Var<'g>) -> Var<'g> {
        let d = x.cols();
        let h = self.linear(&format!("{prefix}.pointwise_conv1"), x);
        let glu = h.slice_cols(0, d).mul(h.slice_cols(d, d).sigmoid());
        let w = self.param(&format!("{prefix}.depthwise_conv.weight"));
        let pad = (w.rows() - 1) / 2;
        let conv = glu
            .depthwise_conv(w, pad)
            .add_row(self.param(&format!("{prefix}.depthwise_conv.bias")));
        let act = self.norm(&format!("{prefix}.norm"), conv).swish();
        self.linear(&format!("{prefix}.pointwise_conv2"), act)
    }

    pub fn conformer_layer(&self, prefix: &str, x: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let f = self.ffn(
            &format!("{prefix}.feed_forward_macaron"),
            self.norm(&format!("{prefix}.norm-ff-macaron"), x),
            dropout,
        );
        let x = x.add(self.dropout(f, dropout).scale(0.5));
        let n = self.norm(&format!("{prefix}.norm-mha"), x);
        let a = self.mha(&format!("{prefix}.self_attn"), n, n, heads, false, dropout);
        let x = x.add(self.dropout(a, dropout));
        let c = self.conv_module(
            &format!("{prefix}.conv_module"),
            self.norm(&format!("{prefix}.norm-conv"), x),
        );
        let x = x.add(self.dropout(c, dropout));
        let f = self.ffn(
            &format!("{prefix}.feed_forward"),
            self.norm(&format!("{prefix}.norm-ff"), x),
            dropout,
        );
        let x = x.add(self.dropout(f, dropout).scale(0.5));
        self.norm(&format!("{prefix}.norm-final"), x)
    }

    pub fn transformer_layer(&self, prefix: &str, x: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let n = self.norm(&format!("{prefix}.norm-mha"), x);
        let a = self.mha(&format!("{prefix}.self_attn"), n, n, heads, false, dropout);
        let x = x.add(self.dropout(a, dropout));
        let f = self.ffn(
            &format!("{prefix}.feed_forward"),
            self.norm(&format!("{prefix}.norm-ff"), x),
            dropout,
        );
        x.add(self.dropout(f, dropout))
    }

    pub fn decoder_layer(&self, prefix: &str, x: Var<'g>, memory: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let n = self.norm(&format!("{prefix}.norm-mha"), x);
        let a = self.mha(&format!("{prefix}.self_attn"), n, n, heads, true, dropout);
        let x = x.add(self.dropout(a, dropout));
        let n = self.norm(&format!("{prefix}.norm-src"), x);
        let a = self.mha(&format!("{prefix}.src_attn"), n, memory, heads, false, dropout);
        let x = x.add(self.dropout(a, dropout));
        let f = self.ffn(
            &format!("{prefix}.feed_forward"),
            self.norm(&format!("{prefix}.norm-ff"), x),
            dropout,
        );
        x.add(self.dropout(f, dropout))
    }

    /// Position encoding followed by `n` Conformer layers.
    pub fn conformer_stack(&self, prefix: &str, n: usize, x: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let mut h = self.add_positions(x);
        for i in 0..n {
            h = self.conformer_layer(&format!("{prefix}.layers.{i}"), h, heads, dropout);
        }
        h
    }

    pub fn transformer_stack(&self, prefix: &str, n: usize, x: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let mut h = self.add_positions(x);
        for i in 0..n {
            h = self.transformer_layer(&format!("{prefix}.layers.{i}"), h, heads, dropout);
        }
        self.norm(&format!("{prefix}.after_norm"), h)
    }

    pub fn decoder_stack(&self, prefix: &str, n: usize, x: Var<'g>, memory: Var<'g>, heads: usize, dropout: f64) -> Var<'g> {
        let mut h = self.add_positions(x);
        for i in 0..n {
            h = self.decoder_layer(&format!("{prefix}.layers.{i}"), h, memory, heads, dropout);
        }
        self.norm(&format!("{prefix}.after_norm"), h)
    }

    /// `blocks` strided conv blocks with swish; each halves the row count
    /// (rounding up).
    pub fn downsample(&self, prefix: &str, blocks: usize, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..blocks {
            h = self
                .linear(&format!("{prefix}.conv.{i}"), h.unfold_rows(3, 2, 1))
                .swish();
        }
        h
    }

    /// `blocks` transposed conv blocks; each doubles the row count.
    pub fn upsample(&self, prefix: &str, blocks: usize, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..blocks {
            if i > 0 {
                h = h.swish();
            }
            let (t, d) = h.shape();
            h = self.linear(&format!("{prefix}.deconv.{i}"), h).reshape(2 * t, d);
        }
        h
    }
}

/// Trims, or pads by repeating the last row, to exactly `target` rows.
pub fn fit_rows<'g>(x: Var<'g>, target: usize, tolerance: usize) -> Result<Var<'g>> {
    let t = x.rows();
    if t.abs_diff(target) > tolerance {
        return Err(Error::LengthMismatch {
            what: "sequence alignment beyond tolerance",
            left: t,
            right: target,
        });
    }
    Ok(match t.cmp(&target) {
        std::cmp::Ordering::Equal => x,
        std::cmp::Ordering::Greater => x.slice_rows(0, target),
        std::cmp::Ordering::Less => {
            let idx: Vec<usize> = (0..target).map(|i| i.min(t - 1)).collect();
            x.gather_rows(&idx)
        }
    })
}

/// Number of rows after `blocks` stride-2 halvings.
pub fn downsampled_len(t: usize, blocks: usize) -> usize {
    (0..blocks).fold(t, |n, _| n.div_ceil(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::materialize;

    #[test]
    fn positional_encoding_rows_differ() {
        let pe = positional_encoding(4, 8);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert_ne!(pe.row(1), pe.row(2));
    }

    #[test]
    fn sampler_lengths() {
        let specs = [
            downsampler_specs("down", 2, 6, 4),
            upsampler_specs("up", 2, 4),
        ]
        .concat();
        let p = materialize(&specs, 1);
        let ctx = Ctx::eval();
        for t in [4, 5, 7, 8, 98, 100] {
            let g = Graph::new();
            let net = Net::new(&g, &p, &ctx);
            let x = g.constant(Array2::ones((t, 6)));
            let d = net.downsample("down", 2, x);
            assert_eq!(d.rows(), t.div_ceil(4));
            assert_eq!(d.rows(), downsampled_len(t, 2));
            let u = net.upsample("up", 2, d);
            assert_eq!(u.shape(), (4 * t.div_ceil(4), 4));
        }
    }

    #[test]
    fn fit_rows_pads_with_last_row() {
        let g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64));
        let y = fit_rows(x, 5, 3).unwrap().value();
        assert_eq!(y.row(4), x.value().row(2));
        assert_eq!(fit_rows(x, 2, 3).unwrap().rows(), 2);
        assert!(fit_rows(x, 7, 3).is_err());
    }

    #[test]
    fn causal_attention_ignores_future() {
        let specs = mha_specs("att", 4);
        let p = materialize(&specs, 3);
        let ctx = Ctx::eval();
        let g = Graph::new();
        let net = Net::new(&g, &p, &ctx);
        let a = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.1);
        let mut b = a.clone();
        b.row_mut(2).fill(5.0);
        let ya = net.mha("att", g.constant(a.clone()), g.constant(a), 2, true, 0.0).value();
        let yb = net.mha("att", g.constant(b.clone()), g.constant(b), 2, true, 0.0).value();
        assert_eq!(ya.row(0), yb.row(0));
        assert_eq!(ya.row(1), yb.row(1));
        assert_ne!(ya.row(2), yb.row(2));
    }
}
