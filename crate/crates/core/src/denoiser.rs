//! Transformer-decoder denoiser, its convolutional condition encoder and the
//! refinement wrapper.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use vsd_tensor::nn::{LayerNorm, Linear};
use vsd_tensor::{Conv2dGeometry, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::diffusion::{Denoiser, DEFAULT_STEPS};
use crate::error::{invalid, Result};
use crate::geometry::{NormalizedSketch, DEFAULT_STROKES, STROKE_DIM};
use crate::rasterizer::RasterGrid;
use crate::seeds;

/// Side length of the conditioning image.
pub const COND_RES: usize = 64;
/// Sinusoidal timestep feature width.
pub const TIME_FEATURES: usize = 128;
const TIME_SCALE: f64 = 1000.0;
const ENC_CHANNELS: [usize; 4] = [16, 32, 64, 64];
const ENC_STRIDES: [usize; 4] = [2, 2, 2, 1];
const ENC_KERNEL: usize = 3;
const EMBED_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_strokes: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub cond_tokens: usize,
    pub dropout: f64,
    /// Number of diffusion steps `T`, used to scale the timestep to [0, 1].
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_strokes: DEFAULT_STROKES,
            d_model: 128,
            n_layers: 8,
            n_heads: 4,
            ff_mult: 4,
            cond_tokens: encoder_tokens(),
            dropout: 0.0,
            timesteps: DEFAULT_STEPS,
        }
    }
}

fn encoder_tokens() -> usize {
    let side = ENC_STRIDES.iter().fold(COND_RES, |s, &st| (s + 2 - ENC_KERNEL) / st + 1);
    side * side
}

impl DenoiserConfig {
    /// A small configuration for tests and toy runs.
    pub fn tiny(d_model: usize, n_layers: usize) -> Self {
        DenoiserConfig { d_model, n_layers, n_heads: 2, ff_mult: 2, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_strokes == 0 {
            return invalid("n_strokes must be > 0");
        }
        if self.n_layers == 0 {
            return invalid("n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return invalid(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.ff_mult == 0 {
            return invalid("ff_mult must be >= 1");
        }
        if self.cond_tokens != encoder_tokens() {
            return invalid(format!("cond_tokens is fixed by the encoder at {}, got {}", encoder_tokens(), self.cond_tokens));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.timesteps == 0 {
            return invalid("timesteps must be >= 1");
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let lin = Linear::num_params;
        let mut convs = 0;
        let mut cin = 1;
        for &c in &ENC_CHANNELS {
            convs += lin(ENC_KERNEL * ENC_KERNEL * cin, c);
            cin = c;
        }
        let encoder = convs + lin(cin, d) + self.cond_tokens * d;
        let null = self.cond_tokens * d;
        let t_mlp = lin(TIME_FEATURES, d) + lin(d, d);
        let stroke = lin(STROKE_DIM, d) + self.n_strokes * d + lin(d, STROKE_DIM);
        let norms = 2 * d * 2;
        let ff = d * self.ff_mult;
        let block = 3 * 2 * d + 2 * 4 * lin(d, d) + lin(d, ff) + lin(ff, d);
        encoder + null + t_mlp + stroke + norms + self.n_layers * block
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Denoiser weights plus the condition encoder and the null-condition table.
#[derive(Clone, Debug)]
pub struct DenoiserModel<F: Scalar> {
    cfg: DenoiserConfig,
    store: ParamStore<F>,
    enc_convs: Vec<Linear>,
    enc_proj: Linear,
    enc_pos: ParamId,
    null_cond: ParamId,
    t_mlp: [Linear; 2],
    stroke_in: Linear,
    pos_embed: ParamId,
    mem_norm: LayerNorm,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    stroke_out: Linear,
}

fn attention<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut R) -> Attention {
    Attention {
        q: Linear::new(store, &format!("{name}.q"), d, d, rng),
        k: Linear::new(store, &format!("{name}.k"), d, d, rng),
        v: Linear::new(store, &format!("{name}.v"), d, d, rng),
        o: Linear::new(store, &format!("{name}.o"), d, d, rng),
    }
}

/// Sinusoidal features of `t/T`, `[len(t), TIME_FEATURES]`.
pub fn timestep_features(t: &[usize], steps: usize) -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &ti in t {
        let x = ti as f64 / steps as f64 * TIME_SCALE;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((x * w).sin(), (x * w).cos())).unzip();
        out.extend(sin);
        out.extend(cos);
    }
    out
}

fn to_tensor<F: Scalar>(data: &[f64], shape: &[usize]) -> Result<Tensor<F>> {
    Ok(Tensor::from_vec(data.iter().map(|&v| F::from_f64(v)).collect(), shape)?)
}

impl<F: Scalar> DenoiserModel<F> {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng_for(seed, "denoiser-init", 0);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let mut enc_convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in ENC_CHANNELS.iter().enumerate() {
            enc_convs.push(Linear::new(&mut store, &format!("enc.conv{i}"), ENC_KERNEL * ENC_KERNEL * cin, c, rng));
            cin = c;
        }
        let enc_proj = Linear::new(&mut store, "enc.proj", cin, d, rng);
        let enc_pos = store.add("enc.pos", Tensor::randn(&[cfg.cond_tokens, d], EMBED_STD, rng));
        let null_cond = store.add("null_cond", Tensor::randn(&[cfg.cond_tokens, d], EMBED_STD, rng));
        let t_mlp = [
            Linear::new(&mut store, "t_mlp.0", TIME_FEATURES, d, rng),
            Linear::new(&mut store, "t_mlp.1", d, d, rng),
        ];
        let stroke_in = Linear::new(&mut store, "stroke_in", STROKE_DIM, d, rng);
        let pos_embed = store.add("pos_embed", Tensor::randn(&[cfg.n_strokes, d], EMBED_STD, rng));
        let mem_norm = LayerNorm::new(&mut store, "mem_norm", d);
        let ff = d * cfg.ff_mult;
        let blocks = (0..cfg.n_layers)
            .map(|l| Block {
                ln_self: LayerNorm::new(&mut store, &format!("block{l}.ln_self"), d),
                self_attn: attention(&mut store, &format!("block{l}.self"), d, rng),
                ln_cross: LayerNorm::new(&mut store, &format!("block{l}.ln_cross"), d),
                cross_attn: attention(&mut store, &format!("block{l}.cross"), d, rng),
                ln_ff: LayerNorm::new(&mut store, &format!("block{l}.ln_ff"), d),
                ff_in: Linear::new(&mut store, &format!("block{l}.ff_in"), d, ff, rng),
                ff_out: Linear::new(&mut store, &format!("block{l}.ff_out"), ff, d, rng),
            })
            .collect();
        let out_norm = LayerNorm::new(&mut store, "out_norm", d);
        let stroke_out = Linear::new(&mut store, "stroke_out", d, STROKE_DIM, rng);
        Ok(DenoiserModel {
            cfg,
            store,
            enc_convs,
            enc_proj,
            enc_pos,
            null_cond,
            t_mlp,
            stroke_in,
            pos_embed,
            mem_norm,
            blocks,
            out_norm,
            stroke_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Same architecture and weights in another precision.
    pub fn cast<G: Scalar>(&self) -> DenoiserModel<G> {
        DenoiserModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            enc_convs: self.enc_convs.clone(),
            enc_proj: self.enc_proj,
            enc_pos: self.enc_pos,
            null_cond: self.null_cond,
            t_mlp: self.t_mlp,
            stroke_in: self.stroke_in,
            pos_embed: self.pos_embed,
            mem_norm: self.mem_norm,
            blocks: self.blocks.clone(),
            out_norm: self.out_norm,
            stroke_out: self.stroke_out,
        }
    }

    /// Condition tokens `[B, cond_tokens, d]` from images `[B, 64, 64]`.
    pub fn encode_var<'t>(&self, tape: &'t Tape<F>, images: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = images.shape();
        if shape.len() != 3 || shape[1] != COND_RES || shape[2] != COND_RES {
            return invalid(format!("condition encoder expects [batch, {COND_RES}, {COND_RES}], got {shape:?}"));
        }
        let batch = shape[0];
        let (mut side, mut channels) = (COND_RES, 1);
        let mut x = images.reshape(&[batch, side, side, 1])?;
        for (conv, &stride) in self.enc_convs.iter().zip(&ENC_STRIDES) {
            let geom = Conv2dGeometry { batch, height: side, width: side, channels, kernel: ENC_KERNEL, stride, padding: 1 };
            let out = geom.out_height();
            let cols = x.im2col(geom)?;
            x = conv.forward(tape, &self.store, cols)?.gelu().reshape(&[batch, out, out, conv.out_dim])?;
            side = out;
            channels = conv.out_dim;
        }
        let tokens = x.reshape(&[batch, side * side, channels])?;
        let tokens = self.enc_proj.forward(tape, &self.store, tokens)?;
        Ok(tokens.add(tape.param(&self.store, self.enc_pos).repeat(batch))?)
    }

    /// The null-condition table repeated `batch` times.
    pub fn null_var<'t>(&self, tape: &'t Tape<F>, batch: usize) -> Var<'t, F> {
        tape.param(&self.store, self.null_cond).repeat(batch)
    }

    fn attend<'t>(&self, tape: &'t Tape<F>, a: &Attention, x: Var<'t, F>, mem: Var<'t, F>) -> Result<Var<'t, F>> {
        let q = a.q.forward(tape, &self.store, x)?;
        let k = a.k.forward(tape, &self.store, mem)?;
        let v = a.v.forward(tape, &self.store, mem)?;
        let out = q.attention(k, v, self.cfg.n_heads)?;
        Ok(a.o.forward(tape, &self.store, out)?)
    }

    fn dropout<'t>(&self, tape: &'t Tape<F>, x: Var<'t, F>, rng: &mut Option<&mut dyn RngCore>) -> Result<Var<'t, F>> {
        let p = self.cfg.dropout;
        let Some(rng) = rng.as_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        Ok(x.mul(tape.constant(Tensor::from_vec(mask, &shape)?))?)
    }

    /// `Ŝ⁰` for a batch: `s_t` is `[B, n, 8]`, `cond` is `[B, cond_tokens, d]`.
    /// Passing a dropout generator enables training-mode dropout.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<F>,
        s_t: Var<'t, F>,
        t: &[usize],
        cond: Var<'t, F>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<'t, F>> {
        let (n, d) = (self.cfg.n_strokes, self.cfg.d_model);
        let shape = s_t.shape();
        if shape.len() != 3 || shape[1] != n || shape[2] != STROKE_DIM {
            return invalid(format!("denoiser expects strokes [batch, {n}, {STROKE_DIM}], got {shape:?}"));
        }
        let batch = shape[0];
        if t.len() != batch {
            return invalid(format!("{} timesteps for a batch of {batch}", t.len()));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti > self.cfg.timesteps) {
            return invalid(format!("timestep {bad} outside [0, {}]", self.cfg.timesteps));
        }
        let cshape = cond.shape();
        if cshape != [batch, self.cfg.cond_tokens, d] {
            return invalid(format!("condition tokens must be [{batch}, {}, {d}], got {cshape:?}", self.cfg.cond_tokens));
        }
        let feats = tape.constant(to_tensor(&timestep_features(t, self.cfg.timesteps), &[batch, TIME_FEATURES])?);
        let t_tok = self.t_mlp[0].forward(tape, &self.store, feats)?.gelu();
        let t_tok = self.t_mlp[1].forward(tape, &self.store, t_tok)?.reshape(&[batch, 1, d])?;
        let mem = self.mem_norm.forward(tape, &self.store, Var::concat(&[t_tok, cond], 1)?)?;

        let pos = tape.param(&self.store, self.pos_embed).repeat(batch);
        let mut x = self.stroke_in.forward(tape, &self.store, s_t)?.add(pos)?;
        for b in &self.blocks {
            let h = b.ln_self.forward(tape, &self.store, x)?;
            let h = self.attend(tape, &b.self_attn, h, h)?;
            x = x.add(self.dropout(tape, h, &mut dropout_rng)?)?;
            let h = b.ln_cross.forward(tape, &self.store, x)?;
            let h = self.attend(tape, &b.cross_attn, h, mem)?;
            x = x.add(self.dropout(tape, h, &mut dropout_rng)?)?;
            let h = b.ln_ff.forward(tape, &self.store, x)?;
            let h = b.ff_in.forward(tape, &self.store, h)?.gelu();
            let h = b.ff_out.forward(tape, &self.store, h)?;
            x = x.add(self.dropout(tape, h, &mut dropout_rng)?)?;
        }
        let x = self.out_norm.forward(tape, &self.store, x)?;
        Ok(self.stroke_out.forward(tape, &self.store, x)?)
    }

    /// Encoder tokens `[cond_tokens, d]` for one 64×64 image.
    pub fn encode_condition(&self, image: &RasterGrid) -> Result<Tensor<F>> {
        if image.height() != COND_RES || image.width() != COND_RES {
            return invalid(format!(
                "conditioning image must be {COND_RES}x{COND_RES}, got {}x{}",
                image.height(),
                image.width()
            ));
        }
        let tape = Tape::new();
        let img = tape.constant(image.to_tensor::<F>().reshape(&[1, COND_RES, COND_RES])?);
        let tokens = self.encode_var(&tape, img)?.value();
        Ok(tokens.reshape(&[self.cfg.cond_tokens, self.cfg.d_model])?)
    }

    /// Evaluation-mode predictions for several `(S^t, cond)` pairs at the same `t`
    /// in one batched pass. `None` selects the null condition.
    pub fn predict_batch(&self, s_t: &[&NormalizedSketch], t: usize, conds: &[Option<&Tensor<F>>]) -> Result<Vec<NormalizedSketch>> {
        if s_t.len() != conds.len() || s_t.is_empty() {
            return invalid("predict_batch needs matching, non-empty inputs");
        }
        let (n, d, c) = (self.cfg.n_strokes, self.cfg.d_model, self.cfg.cond_tokens);
        let batch = s_t.len();
        let mut coords = Vec::with_capacity(batch * n * STROKE_DIM);
        for s in s_t {
            if s.n_strokes() != n {
                return invalid(format!("model expects {n} strokes, got {}", s.n_strokes()));
            }
            coords.extend(s.coords().iter().map(|&v| F::from_f64(v)));
        }
        let mut tokens = Vec::with_capacity(batch * c * d);
        for cond in conds {
            let table = match cond {
                Some(tk) => *tk,
                None => self.store.value(self.null_cond),
            };
            if table.shape() != [c, d] {
                return invalid(format!("condition tokens must be [{c}, {d}], got {:?}", table.shape()));
            }
            tokens.extend_from_slice(table.data());
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(coords, &[batch, n, STROKE_DIM])?);
        let cond = tape.constant(Tensor::from_vec(tokens, &[batch, c, d])?);
        let out = self.forward(&tape, x, &vec![t; batch], cond, None)?.value();
        out.data()
            .chunks_exact(n * STROKE_DIM)
            .map(|ch| NormalizedSketch::from_coords(ch.iter().map(|v| v.as_f64()).collect()))
            .collect()
    }

    /// Deep copy whose forward is pinned to `t = 0`.
    pub fn clone_for_refinement(&self) -> Refiner<F> {
        Refiner { model: self.clone() }
    }

    /// Writes the weights to `path` and the config to the JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        vsd_tensor::save_checkpoint(path, &self.store)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side)
            .map_err(|e| crate::VsdError::Invalid(format!("cannot read model config {}: {e}", side.display())))?;
        let cfg: DenoiserConfig = serde_json::from_str(&text)?;
        let mut model = DenoiserModel::new(cfg, 0)?;
        vsd_tensor::load_checkpoint(path, &mut model.store)?;
        Ok(model)
    }
}

/// The JSON config file stored alongside a weight file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

impl<F: Scalar> Denoiser for DenoiserModel<F> {
    type Cond = Tensor<F>;

    fn n_strokes(&self) -> usize {
        self.cfg.n_strokes
    }

    fn encode(&self, image: &RasterGrid) -> Result<Tensor<F>> {
        self.encode_condition(image)
    }

    fn predict(&self, s_t: &NormalizedSketch, t: usize, cond: Option<&Tensor<F>>) -> Result<NormalizedSketch> {
        Ok(self.predict_batch(&[s_t], t, &[cond])?.remove(0))
    }

    fn predict_pair(&self, s_t: &NormalizedSketch, t: usize, cond: &Tensor<F>) -> Result<(NormalizedSketch, NormalizedSketch)> {
        let mut out = self.predict_batch(&[s_t, s_t], t, &[Some(cond), None])?;
        let u = out.pop().expect("two outputs");
        Ok((out.pop().expect("two outputs"), u))
    }
}

/// A denoiser copy that always runs at `t = 0`.
#[derive(Clone, Debug)]
pub struct Refiner<F: Scalar> {
    model: DenoiserModel<F>,
}

impl<F: Scalar> Refiner<F> {
    pub fn from_model(model: DenoiserModel<F>) -> Self {
        Refiner { model }
    }

    pub fn model(&self) -> &DenoiserModel<F> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DenoiserModel<F> {
        &mut self.model
    }

    pub fn into_model(self) -> DenoiserModel<F> {
        self.model
    }

    pub fn refine(&self, sketch: &NormalizedSketch, cond: Option<&Tensor<F>>) -> Result<NormalizedSketch> {
        self.model.predict(sketch, 0, cond)
    }
}

impl<F: Scalar> Denoiser for Refiner<F> {
    type Cond = Tensor<F>;

    fn n_strokes(&self) -> usize {
        self.model.cfg.n_strokes
    }

    fn encode(&self, image: &RasterGrid) -> Result<Tensor<F>> {
        self.model.encode_condition(image)
    }

    fn predict(&self, s_t: &NormalizedSketch, _t: usize, cond: Option<&Tensor<F>>) -> Result<NormalizedSketch> {
        self.refine(s_t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_is_pinned() {
        let cfg = DenoiserConfig::default();
        assert_eq!(cfg.param_count(), 2_241_352);
        let m = DenoiserModel::<f32>::new(cfg.clone(), 1).unwrap();
        assert_eq!(m.store().num_elements(), cfg.param_count());
        let tiny = DenoiserConfig::tiny(16, 2);
        assert_eq!(DenoiserModel::<f32>::new(tiny.clone(), 1).unwrap().store().num_elements(), tiny.param_count());
    }

    #[test]
    fn config_validation() {
        let bad = DenoiserConfig { n_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { n_layers: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig { cond_tokens: 16, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!(DenoiserConfig::default().cond_tokens, 64);
    }

    #[test]
    fn timestep_features_shape() {
        let f = timestep_features(&[0, 25], 50);
        assert_eq!(f.len(), 2 * TIME_FEATURES);
        assert!(f[..64].iter().all(|&v| v == 0.0));
        assert!(f[64..128].iter().all(|&v| v == 1.0));
    }
}
