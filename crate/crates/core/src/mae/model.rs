use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::MaeConfig;
use super::mask::{random_mask, MaskSet};
use super::patch::{patchify, sincos_pos_embed};
use crate::attention::{mw_mha_traced, xavier_uniform, AttentionVars, HeadTrace, WindowSchedule};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{
    grad_check_many, read_container, write_container, Gradients, Graph, NamedTensors, Tensor, Var,
};

pub const LN_EPS: f64 = 1e-6;
pub const MASK_TOKEN: &str = "decoder.mask_token";

/// Which transformer stack of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }
}

fn block_shapes(prefix: &str, d: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let mut push = |name: &str, shape: Vec<usize>| out.push((format!("{prefix}.{name}"), shape));
    push("norm1.weight", vec![d]);
    push("norm1.bias", vec![d]);
    for w in ["wq", "wk", "wv", "wo"] {
        push(&format!("attn.{w}"), vec![d, d]);
    }
    push("norm2.weight", vec![d]);
    push("norm2.bias", vec![d]);
    push("mlp.fc1.weight", vec![d, hidden]);
    push("mlp.fc1.bias", vec![hidden]);
    push("mlp.fc2.weight", vec![hidden, d]);
    push("mlp.fc2.bias", vec![d]);
}

/// Every parameter name with its shape, in initialisation order.
pub fn expected_shapes(cfg: &MaeConfig) -> Vec<(String, Vec<usize>)> {
    let (pd, ew, dw) = (cfg.patch_dim(), cfg.enc_width, cfg.dec_width);
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![pd, ew]),
        ("patch_embed.bias".to_string(), vec![ew]),
    ];
    for l in 0..cfg.enc_depth {
        block_shapes(
            &format!("encoder.blocks.{l}"),
            ew,
            ew * cfg.mlp_ratio,
            &mut out,
        );
    }
    out.push(("encoder.norm.weight".into(), vec![ew]));
    out.push(("encoder.norm.bias".into(), vec![ew]));
    out.push(("decoder.embed.weight".into(), vec![ew, dw]));
    out.push(("decoder.embed.bias".into(), vec![dw]));
    out.push((MASK_TOKEN.into(), vec![1, dw]));
    for l in 0..cfg.dec_depth {
        block_shapes(
            &format!("decoder.blocks.{l}"),
            dw,
            dw * cfg.mlp_ratio,
            &mut out,
        );
    }
    out.push(("decoder.norm.weight".into(), vec![dw]));
    out.push(("decoder.norm.bias".into(), vec![dw]));
    out.push(("decoder.head.weight".into(), vec![dw, pd]));
    out.push(("decoder.head.bias".into(), vec![pd]));
    out
}

/// Whether AdamW weight decay applies to the named parameter.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() > 1 && name != MASK_TOKEN
}

/// A masked autoencoder: its configuration plus every parameter by name.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel {
    config: MaeConfig,
    params: NamedTensors,
    enc_pos: Tensor,
    dec_pos: Tensor,
    schedule: WindowSchedule,
}

/// Result of one masked forward pass.
#[derive(Clone, Debug)]
pub struct MaeOutput {
    pub pred_patches: Tensor,
    pub loss: f64,
    pub latent: Tensor,
    pub mask: MaskSet,
}

/// Graph handles for all parameters of one bound model.
#[derive(Clone, Debug)]
pub struct MaeVars {
    vars: BTreeMap<String, Var>,
}

impl MaeVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Per-layer head traces of one stack, `traces[layer][head]`.
pub type StackTrace = Vec<Vec<HeadTrace>>;

impl MaeModel {
    /// Xavier-uniform weights, zero biases, unit norm gains and a
    /// `N(0, 0.02)` mask token, all drawn from `config.seed`.
    pub fn init(config: &MaeConfig) -> Result<Self> {
        config.validate()?;
        let mut params = NamedTensors::new();
        for (i, (name, shape)) in expected_shapes(config).into_iter().enumerate() {
            let mut rng = rng_from(config.seed, &[0x1417, i as u64]);
            let t = if name == MASK_TOKEN {
                Tensor::randn(&shape, 0.02, &mut rng)
            } else if shape.len() == 2 {
                xavier_uniform(shape[0], shape[1], &mut rng)
            } else if name.ends_with("norm.weight")
                || name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
            {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Self::from_params(config.clone(), params)
    }

    /// Wraps existing parameters after checking every name and shape.
    pub fn from_params(config: MaeConfig, params: NamedTensors) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Checkpoint(format!("tensor {name} is not finite")))
                }
                _ => {}
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let n_p = config.n_patches();
        Ok(Self {
            enc_pos: sincos_pos_embed(n_p, config.enc_width)?,
            dec_pos: sincos_pos_embed(n_p, config.dec_width)?,
            schedule: config.dec_schedule()?,
            config,
            params,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{name}: shape {:?} replaced by {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn dec_schedule(&self) -> &WindowSchedule {
        &self.schedule
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MaeVars {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        MaeVars { vars }
    }

    /// Splits a `[input_t, input_f]` spectrogram into patches.
    pub fn patchify(&self, spec: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if spec.shape() != [c.input_t, c.input_f] {
            return Err(Error::Dimension(format!(
                "model expects a {}x{} spectrogram, got {:?}",
                c.input_t,
                c.input_f,
                spec.shape()
            )));
        }
        patchify(spec, c.patch_t, c.patch_f)
    }

    fn check_patches(&self, g: &Graph, patches: Var) -> Result<()> {
        let want = [self.config.n_patches(), self.config.patch_dim()];
        if g.shape(patches) != want {
            return Err(Error::Dimension(format!(
                "patches have shape {:?}, expected {want:?}",
                g.shape(patches)
            )));
        }
        Ok(())
    }

    /// Encoder over the patches listed in `keep` (in that order):
    /// embedding plus positions, gather, pre-norm blocks, final norm.
    pub fn encode_rows(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        patches: Var,
        keep: &[usize],
        mut trace: Option<&mut StackTrace>,
    ) -> Result<Var> {
        self.check_patches(g, patches)?;
        let pos = g.constant(self.enc_pos.clone());
        let pos = g.gather_rows(pos, keep)?;
        let x = g.gather_rows(patches, keep)?;
        let x = linear(g, vars, "patch_embed", x)?;
        let mut x = g.add(x, pos)?;
        let schedule = WindowSchedule::global(keep.len(), self.config.enc_heads);
        for l in 0..self.config.enc_depth {
            let prefix = format!("encoder.blocks.{l}");
            let (y, heads) = block(g, vars, &prefix, x, self.config.enc_heads, &schedule)?;
            x = y;
            if let Some(t) = trace.as_deref_mut() {
                t.push(heads);
            }
        }
        layer_norm(g, vars, "encoder.norm", x)
    }

    /// Encoder over the visible patches of `mask`, in shuffled order.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        patches: Var,
        mask: &MaskSet,
    ) -> Result<Var> {
        mask.check_patches(self.config.n_patches())?;
        self.encode_rows(g, vars, patches, mask.keep_order(), None)
    }

    /// Decoder input: projected latent plus mask tokens, restored to patch
    /// order, plus decoder positions. `[n_p, dec_width]`.
    pub fn decoder_tokens(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        latent: Var,
        mask: &MaskSet,
    ) -> Result<Var> {
        mask.check_patches(self.config.n_patches())?;
        let n_vis = mask.visible().len();
        if g.shape(latent) != [n_vis, self.config.enc_width] {
            return Err(Error::Contract(format!(
                "latent has shape {:?} but the mask keeps {n_vis} patches",
                g.shape(latent)
            )));
        }
        let y = linear(g, vars, "decoder.embed", latent)?;
        let token = vars.get(MASK_TOKEN)?;
        let tokens = g.gather_rows(token, &vec![0; mask.masked().len()])?;
        let shuffled = g.concat_rows(&[y, tokens])?;
        let restored = g.gather_rows(shuffled, &mask.restore_order())?;
        let pos = g.constant(self.dec_pos.clone());
        g.add(restored, pos)
    }

    /// Decoder blocks over full-length tokens, then norm and linear head.
    pub fn decode_tokens(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        tokens: Var,
        mut trace: Option<&mut StackTrace>,
    ) -> Result<Var> {
        let heads = self.schedule.heads();
        let mut x = tokens;
        for l in 0..self.config.dec_depth {
            let prefix = format!("decoder.blocks.{l}");
            let (y, h) = block(g, vars, &prefix, x, heads, &self.schedule)?;
            x = y;
            if let Some(t) = trace.as_deref_mut() {
                t.push(h);
            }
        }
        let x = layer_norm(g, vars, "decoder.norm", x)?;
        linear(g, vars, "decoder.head", x)
    }

    /// Reconstructs all `n_p` patches from the visible-patch latent.
    pub fn decode(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        latent: Var,
        mask: &MaskSet,
    ) -> Result<Var> {
        let tokens = self.decoder_tokens(g, vars, latent, mask)?;
        self.decode_tokens(g, vars, tokens, None)
    }

    /// Builds the loss for one spectrogram under `mask`; returns
    /// `(loss, pred, latent)` handles.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        vars: &MaeVars,
        patches: &Tensor,
        mask: &MaskSet,
    ) -> Result<(Var, Var, Var)> {
        let p = g.constant(patches.clone());
        let latent = self.encode(g, vars, p, mask)?;
        let pred = self.decode(g, vars, latent, mask)?;
        let loss = masked_mse(g, pred, patches, mask)?;
        Ok((loss, pred, latent))
    }

    /// Masked forward pass with frozen parameters and a mask drawn from `seed`.
    pub fn forward(&self, spec: &Tensor, seed: u64) -> Result<MaeOutput> {
        let patches = self.patchify(spec)?;
        let mask = random_mask(self.config.n_patches(), self.config.mask_ratio, seed)?;
        self.forward_masked(&patches, mask)
    }

    pub fn forward_masked(&self, patches: &Tensor, mask: MaskSet) -> Result<MaeOutput> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (loss, pred, latent) = self.build_loss(&mut g, &vars, patches, &mask)?;
        Ok(MaeOutput {
            pred_patches: g.value(pred).clone(),
            loss: g.value(loss).data()[0],
            latent: g.value(latent).clone(),
            mask,
        })
    }

    /// Loss and the gradient of every parameter for one example.
    pub fn loss_and_grads(&self, patches: &Tensor, mask: &MaskSet) -> Result<(f64, NamedTensors)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let (loss, _, _) = self.build_loss(&mut g, &vars, patches, mask)?;
        let mut grads: Gradients = g.backward(loss)?;
        let mut out = NamedTensors::new();
        for (name, v) in vars.iter() {
            let grad = grads
                .take(v)
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            out.insert(name.to_string(), grad);
        }
        Ok((g.value(loss).data()[0], out))
    }

    /// Gradient check of the masked-MSE loss with respect to every
    /// parameter at once; returns the largest relative error.
    pub fn grad_check_loss(&self, patches: &Tensor, mask: &MaskSet, eps: f64) -> Result<f64> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        let values: Vec<Tensor> = self.params.values().cloned().collect();
        grad_check_many(
            |g, vs| {
                let vars = MaeVars {
                    vars: names.iter().cloned().zip(vs.iter().copied()).collect(),
                };
                self.build_loss(g, &vars, patches, mask)
                    .map(|(loss, _, _)| loss)
            },
            &values,
            eps,
        )
    }

    /// Token representations of every patch with no masking, `[n_p, enc_width]`.
    pub fn encode_all(&self, spec: &Tensor) -> Result<Tensor> {
        let patches = self.patchify(spec)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let p = g.constant(patches);
        let keep: Vec<usize> = (0..self.config.n_patches()).collect();
        let out = self.encode_rows(&mut g, &vars, p, &keep, None)?;
        Ok(g.value(out).clone())
    }

    /// Runs one stack with frozen parameters and returns the graph with
    /// per-layer head traces. The encoder sees every patch; the decoder
    /// runs on a mask drawn from `seed`.
    pub fn trace_stack(
        &self,
        spec: &Tensor,
        stack: Stack,
        seed: u64,
    ) -> Result<(Graph, StackTrace)> {
        let patches = self.patchify(spec)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let p = g.constant(patches);
        let mut trace = StackTrace::new();
        match stack {
            Stack::Encoder => {
                let keep: Vec<usize> = (0..self.config.n_patches()).collect();
                self.encode_rows(&mut g, &vars, p, &keep, Some(&mut trace))?;
            }
            Stack::Decoder => {
                let mask = random_mask(self.config.n_patches(), self.config.mask_ratio, seed)?;
                let latent = self.encode(&mut g, &vars, p, &mask)?;
                let tokens = self.decoder_tokens(&mut g, &vars, latent, &mask)?;
                self.decode_tokens(&mut g, &vars, tokens, Some(&mut trace))?;
            }
        }
        Ok((g, trace))
    }

    /// `(depth, heads)` of a stack.
    pub fn stack_dims(&self, stack: Stack) -> (usize, usize) {
        match stack {
            Stack::Encoder => (self.config.enc_depth, self.config.enc_heads),
            Stack::Decoder => (self.config.dec_depth, self.schedule.heads()),
        }
    }

    /// Window size of each head in a stack; encoder heads are global.
    pub fn stack_windows(&self, stack: Stack) -> Vec<usize> {
        match stack {
            Stack::Encoder => vec![self.config.n_patches(); self.config.enc_heads],
            Stack::Decoder => self.schedule.windows().to_vec(),
        }
    }

    pub fn stack_prefix(stack: Stack) -> &'static str {
        stack.prefix()
    }

    /// Writes the parameters and a `<path>.config.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.params)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let config: MaeConfig = serde_json::from_str(&text)?;
        let params = read_container(path)?;
        Self::from_params(config, params)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn linear(g: &mut Graph, vars: &MaeVars, prefix: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layer_norm(g: &mut Graph, vars: &MaeVars, prefix: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, w, b, LN_EPS)
}

fn block(
    g: &mut Graph,
    vars: &MaeVars,
    prefix: &str,
    x: Var,
    heads: usize,
    schedule: &WindowSchedule,
) -> Result<(Var, Vec<HeadTrace>)> {
    let attn = AttentionVars {
        wq: vars.get(&format!("{prefix}.attn.wq"))?,
        wk: vars.get(&format!("{prefix}.attn.wk"))?,
        wv: vars.get(&format!("{prefix}.attn.wv"))?,
        wo: vars.get(&format!("{prefix}.attn.wo"))?,
        heads,
    };
    let h = layer_norm(g, vars, &format!("{prefix}.norm1"), x)?;
    let (a, traces) = mw_mha_traced(g, h, &attn, schedule)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, vars, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, vars, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, vars, &format!("{prefix}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, traces))
}

/// Mean squared error over the masked patches only.
pub fn masked_mse(g: &mut Graph, pred: Var, target: &Tensor, mask: &MaskSet) -> Result<Var> {
    if g.shape(pred) != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    if mask.masked().is_empty() {
        return Err(Error::Contract("masked MSE over an empty mask".into()));
    }
    mask.check_patches(target.rows())?;
    let t = g.constant(target.clone());
    let p = g.gather_rows(pred, mask.masked())?;
    let t = g.gather_rows(t, mask.masked())?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Plain-tensor masked MSE.
pub fn masked_mse_value(pred: &Tensor, target: &Tensor, mask: &MaskSet) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = masked_mse(&mut g, p, target, mask)?;
    Ok(g.value(l).data()[0])
}
