//! MLP, GRU and LSTM cells, a small valid-padding convolution, and batched
//! coordinatewise application of per-scalar update rules.
//!
//! Weight matrices are stored `[fan_in, fan_out]` and applied as `x·W + b`, so a
//! batch of rows `[B, fan_in]` maps to `[B, fan_out]` with one matmul and each
//! output row depends only on its own input row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamTree, VarTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum NetSpec {
    /// Layer widths `[input, hidden.., output]`.
    Mlp { sizes: Vec<usize>, zero_final: bool },
    Gru { input: usize, hidden: usize },
    Lstm { input: usize, hidden: usize },
    /// Square `kernel`, stride 1, valid padding.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

fn uniform_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-bound..=bound))
}

pub const GRU_GATES: [&str; 3] = ["r", "z", "n"];
pub const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Fan-in uniform weights, zero biases.
pub fn init_with_rng(spec: &NetSpec, rng: &mut impl Rng) -> ParamTree {
    let mut p = ParamTree::new();
    match spec {
        NetSpec::Mlp { sizes, zero_final } => {
            let layers = sizes.len() - 1;
            for l in 0..layers {
                let (fi, fo) = (sizes[l], sizes[l + 1]);
                let w = if *zero_final && l + 1 == layers {
                    Tensor::zeros(&[fi, fo])
                } else {
                    uniform_weight(rng, fi, fo)
                };
                p.insert(format!("l{l}/w"), w);
                p.insert(format!("l{l}/b"), Tensor::zeros(&[fo]));
            }
        }
        NetSpec::Gru { input, hidden } => gates(&mut p, rng, &GRU_GATES, *input, *hidden),
        NetSpec::Lstm { input, hidden } => gates(&mut p, rng, &LSTM_GATES, *input, *hidden),
        NetSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            p.insert(
                "w",
                uniform_weight(rng, in_channels * kernel * kernel, *out_channels),
            );
            p.insert("b", Tensor::zeros(&[*out_channels]));
        }
    }
    p
}

fn gates(p: &mut ParamTree, rng: &mut impl Rng, names: &[&str], input: usize, hidden: usize) {
    for g in names {
        p.insert(format!("wx_{g}"), uniform_weight(rng, input, hidden));
        p.insert(format!("wh_{g}"), uniform_weight(rng, hidden, hidden));
        p.insert(format!("b_{g}"), Tensor::zeros(&[hidden]));
    }
}

/// Deterministic in `seed`.
pub fn init_params(spec: &NetSpec, seed: u64) -> ParamTree {
    init_with_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn affine(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Number of `l{i}/w` layers present.
fn mlp_depth(params: &VarTree) -> usize {
    (0..).take_while(|l| params.contains(&format!("l{l}/w"))).count()
}

/// Affine + relu for every layer but the last, which is affine only.
pub fn mlp_apply(tape: &mut Tape, params: &VarTree, x: Var) -> Result<Var> {
    let depth = mlp_depth(params);
    let mut h = x;
    for l in 0..depth {
        let w = params.get(&format!("l{l}/w"))?;
        let b = params.get(&format!("l{l}/b"))?;
        h = affine(tape, w, b, h)?;
        if l + 1 < depth {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn gate_pre(tape: &mut Tape, params: &VarTree, gate: &str, x: Var, h: Var) -> Result<Var> {
    let wx = params.get(&format!("wx_{gate}"))?;
    let wh = params.get(&format!("wh_{gate}"))?;
    let b = params.get(&format!("b_{gate}"))?;
    let a = tape.matmul(x, wx)?;
    let c = tape.matmul(h, wh)?;
    let s = tape.add(a, c)?;
    tape.add(s, b)
}

/// One GRU step. The candidate reads the reset-gated hidden state:
///
/// ```text
/// r  = σ(x·Wxr + h·Whr + br)
/// z  = σ(x·Wxz + h·Whz + bz)
/// n  = tanh(x·Wxn + (r⊙h)·Whn + bn)
/// h' = (1 − z)⊙n + z⊙h
/// ```
///
/// Returns `(h', y)` with `y = h'`.
pub fn gru_step(tape: &mut Tape, params: &VarTree, h: Var, x: Var) -> Result<(Var, Var)> {
    let r = gate_pre(tape, params, "r", x, h)?;
    let r = tape.sigmoid(r);
    let z = gate_pre(tape, params, "z", x, h)?;
    let z = tape.sigmoid(z);
    let rh = tape.mul(r, h)?;
    let n = gate_pre(tape, params, "n", x, rh)?;
    let n = tape.tanh(n);
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    let h_next = tape.add(n, zd)?;
    Ok((h_next, h_next))
}

/// One LSTM step; returns `((h', c'), y)` with `y = h'`.
pub fn lstm_step(
    tape: &mut Tape,
    params: &VarTree,
    (h, c): (Var, Var),
    x: Var,
) -> Result<((Var, Var), Var)> {
    let i = gate_pre(tape, params, "i", x, h)?;
    let i = tape.sigmoid(i);
    let f = gate_pre(tape, params, "f", x, h)?;
    let f = tape.sigmoid(f);
    let g = gate_pre(tape, params, "g", x, h)?;
    let g = tape.tanh(g);
    let o = gate_pre(tape, params, "o", x, h)?;
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok(((h_next, c_next), h_next))
}

/// Flat indices of every `kernel × kernel` patch of a `[batch, C, H, W]`
/// input, one row per (batch, output position), columns ordered (c, di, dj).
fn patch_indices(batch: usize, c: usize, h: usize, w: usize, kernel: usize) -> Vec<usize> {
    let (oh, ow) = (h - kernel + 1, w - kernel + 1);
    let mut idx = Vec::with_capacity(batch * oh * ow * c * kernel * kernel);
    for b in 0..batch {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            idx.push(((b * c + ch) * h + i + di) * w + j + dj);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Valid-padding, stride-1 convolution followed by relu and a flatten.
///
/// `x` is `[C, H, W]` (output `[OH·OW·F]`) or `[B, C, H, W]` (output
/// `[B, OH·OW·F]`). The flattened layout is position-major, feature-minor.
pub fn conv2d_apply(tape: &mut Tape, params: &VarTree, x: Var) -> Result<Var> {
    let w = params.get("w")?;
    let b = params.get("b")?;
    let shape = tape.value(x).shape().to_vec();
    let (batch, c, h, wd, batched) = match shape.as_slice() {
        [c, h, w] => (1, *c, *h, *w, false),
        [b, c, h, w] => (*b, *c, *h, *w, true),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    let wshape = tape.value(w).shape().to_vec();
    let features = wshape[1];
    let kernel = ((wshape[0] / c.max(1)) as f64).sqrt().round() as usize;
    if kernel * kernel * c != wshape[0] || h < kernel || wd < kernel {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: shape,
            rhs: wshape,
        });
    }
    let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
    let idx = patch_indices(batch, c, h, wd, kernel);
    let patches = tape.gather(x, idx, &[batch * oh * ow, c * kernel * kernel])?;
    let y = affine(tape, w, b, patches)?;
    let y = tape.relu(y);
    if batched {
        tape.reshape(y, &[batch, oh * ow * features])
    } else {
        tape.reshape(y, &[oh * ow * features])
    }
}

/// Per-coordinate recurrent state for learned optimizers: two `[coords, hidden]`
/// banks. Rules with a single recurrent branch leave `h2` untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateBank {
    pub h1: Tensor,
    pub h2: Tensor,
}

impl HiddenStateBank {
    pub fn zeros(coords: usize, hidden: usize) -> Self {
        Self {
            h1: Tensor::zeros(&[coords, hidden]),
            h2: Tensor::zeros(&[coords, hidden]),
        }
    }

    pub fn rows(&self) -> usize {
        self.h1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.h1.shape()[1]
    }

    pub fn reset(&mut self) {
        self.h1.data_mut().fill(0.0);
        self.h2.data_mut().fill(0.0);
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> BankVars {
        BankVars {
            h1: tape.constant(self.h1.clone()),
            h2: tape.constant(self.h2.clone()),
        }
    }

    pub fn from_vars(tape: &Tape, vars: BankVars) -> Self {
        Self {
            h1: tape.value(vars.h1).clone(),
            h2: tape.value(vars.h2).clone(),
        }
    }

    /// Rows `range` as their own bank.
    pub fn rows_slice(&self, start: usize, end: usize) -> Self {
        let hd = self.hidden();
        let cut = |t: &Tensor| {
            Tensor::new(vec![end - start, hd], t.data()[start * hd..end * hd].to_vec())
                .expect("row slice")
        };
        Self {
            h1: cut(&self.h1),
            h2: cut(&self.h2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BankVars {
    pub h1: Var,
    pub h2: Var,
}

/// A scalar update rule applied independently to every row of a batch.
pub trait CoordinateRule {
    /// `grads` is `[C]`; returns `Δθ` as `[C]` and the next hidden state.
    fn update(
        &self,
        tape: &mut Tape,
        grads: Var,
        state: BankVars,
        alpha: f64,
    ) -> Result<(Var, BankVars)>;
}

/// Apply `rule` to every coordinate of `grads` at once.
pub fn coordinatewise_apply(
    rule: &dyn CoordinateRule,
    grads: &ParamTree,
    bank: &HiddenStateBank,
    alpha: f64,
) -> Result<(ParamTree, HiddenStateBank)> {
    let coords = grads.numel();
    if bank.rows() != coords {
        return Err(Error::CoordinateCount {
            expected: coords,
            found: bank.rows(),
        });
    }
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::vector(grads.flatten()));
    let state = bank.bind_constant(&mut tape);
    let (delta, next) = rule.update(&mut tape, g, state, alpha)?;
    let updates = grads.unflatten(tape.value(delta).data())?;
    Ok((updates, HiddenStateBank::from_vars(&tape, next)))
}
