//! Scaled dot-product attention, windowed attention and multi-window
//! multi-head attention (MW-MHA).
//!
//! In MW-MHA every head `i` attends inside non-overlapping windows of its
//! own size `win_i` along the token axis; two heads stay global. Head
//! outputs are concatenated and mixed by a shared output projection,
//! which is where tokens from different windows interact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Per-head window sizes of one MW-MHA module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    n_p: usize,
    windows: Vec<usize>,
}

impl WindowSchedule {
    /// Divisors `d` of `n_p` with `1 < d < n_p` in ascending order,
    /// followed by two global heads of size `n_p`.
    pub fn for_patches(n_p: usize) -> Result<Self> {
        if n_p < 2 {
            return Err(Error::Contract(format!(
                "window schedule needs at least 2 patches, got {n_p}"
            )));
        }
        let mut windows: Vec<usize> = (2..n_p).filter(|d| n_p.is_multiple_of(*d)).collect();
        windows.extend([n_p, n_p]);
        Ok(Self { n_p, windows })
    }

    /// Every head attends over the whole sequence (standard MHA).
    pub fn global(n: usize, heads: usize) -> Self {
        Self {
            n_p: n,
            windows: vec![n; heads],
        }
    }

    /// Arbitrary schedule; every window must divide `n`.
    pub fn from_windows(n: usize, windows: Vec<usize>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Contract("schedule with no heads".into()));
        }
        for (head, &w) in windows.iter().enumerate() {
            if w == 0 || !n.is_multiple_of(w) {
                return Err(Error::WindowDivisibility {
                    head: Some(head),
                    window: w,
                    len: n,
                });
            }
        }
        Ok(Self { n_p: n, windows })
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn windows(&self) -> &[usize] {
        &self.windows
    }

    pub fn heads(&self) -> usize {
        self.windows.len()
    }

    pub fn is_global(&self, head: usize) -> bool {
        self.windows[head] == self.n_p
    }
}

/// Shorthand for [`WindowSchedule::for_patches`].
pub fn window_schedule(n_p: usize) -> Result<WindowSchedule> {
    WindowSchedule::for_patches(n_p)
}

/// Projection weights of a (multi-window) multi-head attention module.
///
/// Head `i` owns columns `i*d_k..(i+1)*d_k` of `wq`, `wk`, `wv` (each
/// `d_m x h*d_k`) and rows `i*d_k..(i+1)*d_k` of the shared output
/// projection `wo` (`h*d_k x d_m`), with `d_k = d_m / h`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    heads: usize,
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        let d_m = wq.shape()[0];
        check_head_split(d_m, heads)?;
        for (name, t, want) in [
            ("wq", &wq, [d_m, d_m]),
            ("wk", &wk, [d_m, d_m]),
            ("wv", &wv, [d_m, d_m]),
            ("wo", &wo, [d_m, d_m]),
        ] {
            if t.shape() != want {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    /// Xavier-uniform initialisation.
    pub fn init<R: Rng + ?Sized>(d_m: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_head_split(d_m, heads)?;
        let mut w = || xavier_uniform(d_m, d_m, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        Self::new(wq, wk, wv, wo, heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AttentionVars {
        AttentionVars {
            wq: g.leaf(self.wq.clone(), trainable),
            wk: g.leaf(self.wk.clone(), trainable),
            wv: g.leaf(self.wv.clone(), trainable),
            wo: g.leaf(self.wo.clone(), trainable),
            heads: self.heads,
        }
    }
}

fn check_head_split(d_m: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_m.is_multiple_of(heads) {
        return Err(Error::Contract(format!(
            "model width {d_m} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

pub(crate) fn xavier_uniform<R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

/// Graph handles for [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Intermediate values of one head, kept for analysis.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    pub window: usize,
    /// Attention probabilities, `[n / window, window, window]`.
    pub probs: Var,
    /// Head output before the output projection, `[n, d_k]`.
    pub output: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two dims; leading dims
/// act as independent batches.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_probs(g, q, k, v).map(|(out, _)| out)
}

fn attention_with_probs(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    if g.shape(q) != g.shape(k) || g.shape(q) != g.shape(v) {
        return Err(Error::Dimension(format!(
            "attention operands differ: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if g.value(q).rank() < 2 {
        return Err(Error::Dimension(
            "attention needs [.., n, d_k] operands".into(),
        ));
    }
    let d_k = g.value(q).cols();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let probs = g.softmax_lastdim(scores)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Attention restricted to non-overlapping windows of `win` consecutive
/// tokens. Inputs are `[n, d_k]` with `win | n`.
pub fn win_attention(g: &mut Graph, q: Var, k: Var, v: Var, win: usize) -> Result<Var> {
    win_attention_traced(g, q, k, v, win, None).map(|t| t.output)
}

fn win_attention_traced(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    win: usize,
    head: Option<usize>,
) -> Result<HeadTrace> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "windowed attention expects [n, d_k] inputs, got {shape:?}"
        )));
    }
    let (n, d_k) = (shape[0], shape[1]);
    if win == 0 || n % win != 0 {
        return Err(Error::WindowDivisibility {
            head,
            window: win,
            len: n,
        });
    }
    let blocks = [n / win, win, d_k];
    let qw = g.reshape(q, &blocks)?;
    let kw = g.reshape(k, &blocks)?;
    let vw = g.reshape(v, &blocks)?;
    let (out, probs) = attention_with_probs(g, qw, kw, vw)?;
    let output = g.reshape(out, &[n, d_k])?;
    Ok(HeadTrace {
        window: win,
        probs,
        output,
    })
}

/// Multi-window multi-head attention over `x: [n, d_m]`.
pub fn mw_mha(
    g: &mut Graph,
    x: Var,
    params: &AttentionVars,
    schedule: &WindowSchedule,
) -> Result<Var> {
    mw_mha_traced(g, x, params, schedule).map(|(out, _)| out)
}

/// Standard multi-head attention: MW-MHA with every head global.
pub fn mha(g: &mut Graph, x: Var, params: &AttentionVars) -> Result<Var> {
    let n = g.shape(x)[0];
    mw_mha(g, x, params, &WindowSchedule::global(n, params.heads))
}

pub(crate) fn mw_mha_traced(
    g: &mut Graph,
    x: Var,
    params: &AttentionVars,
    schedule: &WindowSchedule,
) -> Result<(Var, Vec<HeadTrace>)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "MW-MHA expects [n, d_m], got {shape:?}"
        )));
    }
    let (n, d_m) = (shape[0], shape[1]);
    if schedule.heads() != params.heads {
        return Err(Error::Contract(format!(
            "schedule has {} windows for {} heads",
            schedule.heads(),
            params.heads
        )));
    }
    check_head_split(d_m, params.heads)?;
    if let Some((head, &window)) = schedule
        .windows()
        .iter()
        .enumerate()
        .find(|(_, &w)| n % w != 0)
    {
        return Err(Error::WindowDivisibility {
            head: Some(head),
            window,
            len: n,
        });
    }
    let d_k = d_m / params.heads;
    let q_all = g.matmul(x, params.wq)?;
    let k_all = g.matmul(x, params.wk)?;
    let v_all = g.matmul(x, params.wv)?;
    let mut traces = Vec::with_capacity(params.heads);
    for (head, &win) in schedule.windows().iter().enumerate() {
        let q = g.slice_last(q_all, head * d_k, d_k)?;
        let k = g.slice_last(k_all, head * d_k, d_k)?;
        let v = g.slice_last(v_all, head * d_k, d_k)?;
        traces.push(win_attention_traced(g, q, k, v, win, Some(head))?);
    }
    let outs: Vec<Var> = traces.iter().map(|t| t.output).collect();
    let cat = g.concat_last(&outs)?;
    let out = g.matmul(cat, params.wo)?;
    Ok((out, traces))
}

/// Expands block-diagonal window probabilities `[m, win, win]` into the
/// dense `n x n` attention matrix (zeros outside each window).
pub fn dense_window_probs(probs: &Tensor) -> Result<Tensor> {
    let s = probs.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Dimension(format!(
            "expected [m, win, win] probabilities, got {s:?}"
        )));
    }
    let (m, win) = (s[0], s[1]);
    let n = m * win;
    let mut dense = vec![0.0; n * n];
    for b in 0..m {
        for i in 0..win {
            for j in 0..win {
                dense[(b * win + i) * n + b * win + j] = probs.data()[(b * win + i) * win + j];
            }
        }
    }
    Tensor::new(&[n, n], dense)
}
