//! The recurrent predictor.
//!
//! One step maps a frame `x_t` and state `(H_{t-1}, C_{t-1})` to a prediction
//! of the next frame:
//!
//! ```text
//! u    = patch_embed(x_t)
//! v    = attention_stack(u)
//! u_TL, C_t = lstm(v, H_{t-1}, C_{t-1})
//! u_CM = H_{t-1} + σ(u_TL) ⊙ (u_TL - H_{t-1})
//! ĥ    = fourier_stack(u_CM) + u_CM
//! H_t, g = adaptive_rk2(ĥ)
//! x̂    = decode(H_t)
//! ```

pub mod attention;
pub mod lstm;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat, Graph, Padding, Var};
use crate::error::{invalid_shape, Error, Result};
use crate::integrator::{adaptive_rk2_step, rk2_step, GateKind, GateParams, RkConfig, RkMode};
use crate::params::{ParamId, ParamStore};
use crate::physics::{moment_of, DerivativeBank};
use crate::spectral::{fourier_block, KernelInit, SpectralKernel};
use crate::tensor::Tensor;

pub use attention::{window_attention_block, window_attention_with_weights, AttentionBlock};
pub use lstm::{lstm_cell, LstmParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsampler {
    TransposedConv,
    Bilinear,
}

impl FromStr for Upsampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed_conv" => Ok(Upsampler::TransposedConv),
            "bilinear" => Ok(Upsampler::Bilinear),
            _ => Err(Error::Config(format!("unknown upsampler {s:?} (transposed_conv|bilinear)"))),
        }
    }
}

impl std::fmt::Display for Upsampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Upsampler::TransposedConv => "transposed_conv",
            Upsampler::Bilinear => "bilinear",
        })
    }
}

impl FromStr for GateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "element" => Ok(GateKind::PerElement),
            "scalar" => Ok(GateKind::Scalar),
            _ => Err(Error::Config(format!("unknown gate kind {s:?} (element|scalar)"))),
        }
    }
}

impl std::fmt::Display for GateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateKind::PerElement => "element",
            GateKind::Scalar => "scalar",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub transformer_blocks: usize,
    pub fourier_blocks: usize,
    pub window_size: usize,
    pub rk: RkConfig,
    pub gate: GateKind,
    pub k: usize,
    pub upsampler: Upsampler,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 1,
            height: 64,
            width: 64,
            patch_size: 4,
            embed_dim: 32,
            transformer_blocks: 2,
            fourier_blocks: 2,
            window_size: 4,
            rk: RkConfig::default(),
            gate: GateKind::PerElement,
            k: 3,
            upsampler: Upsampler::TransposedConv,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.embed_dim == 0 {
            return bad("channels and embed_dim must be positive".into());
        }
        if ![1, 2, 4, 8].contains(&self.patch_size) {
            return bad(format!("patch_size must be 1, 2, 4 or 8, got {}", self.patch_size));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return bad(format!(
                "frame {}×{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        let (gh, gw) = self.grid();
        if self.window_size == 0 || gh % self.window_size != 0 || gw % self.window_size != 0 {
            return bad(format!("token grid {gh}×{gw} not divisible by window {}", self.window_size));
        }
        if self.k.is_multiple_of(2) {
            return bad(format!("derivative order k must be odd, got {}", self.k));
        }
        if gh < self.k || gw < self.k {
            return bad(format!("token grid {gh}×{gw} smaller than the {0}×{0} derivative kernel", self.k));
        }
        self.rk.validate()
    }

    /// Token grid `(H/p, W/p)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (cf, c, p, k) = (self.channels, self.embed_dim, self.patch_size, self.k);
        let (gh, gw) = self.grid();
        let embed = c * cf * p * p + c;
        let blocks = self.transformer_blocks * AttentionBlock::num_params(c);
        let lstm = LstmParams::num_params(c);
        let fourier = self.fourier_blocks * 2 * c * gh * gw;
        let bank = k.pow(4) + c * k * k * c + c;
        let gate = match (self.rk.mode, self.gate) {
            (RkMode::Conventional, _) => 0,
            (RkMode::Adaptive, GateKind::PerElement) => 2 * c * c + c,
            (RkMode::Adaptive, GateKind::Scalar) => 1,
        };
        let decoder = match self.upsampler {
            Upsampler::TransposedConv => c * cf * p * p + cf,
            Upsampler::Bilinear => cf * c + cf,
        };
        embed + blocks + lstm + fourier + bank + gate + decoder
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    blocks: Vec<AttentionBlock>,
    lstm: LstmParams,
    fourier: Vec<SpectralKernel>,
    bank: DerivativeBank,
    gate: Option<GateParams>,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Recurrent state threaded through a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars<'g> {
    pub hidden: Var<'g>,
    pub cell: Var<'g>,
}

impl<'g> StateVars<'g> {
    pub fn constant(g: &'g Graph, s: &ModelState) -> Self {
        StateVars {
            hidden: g.constant(s.hidden.clone()),
            cell: g.constant(s.cell.clone()),
        }
    }

    pub fn values(&self) -> ModelState {
        ModelState {
            hidden: self.hidden.value().as_ref().clone(),
            cell: self.cell.value().as_ref().clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub gate_mean: f64,
    pub gate_min: f64,
    pub gate_max: f64,
    pub moment_loss: f64,
}

/// Intermediate latents of one step.
#[derive(Clone, Copy, Debug)]
pub struct Latents<'g> {
    pub u: Var<'g>,
    pub u_tl: Var<'g>,
    pub u_cm: Var<'g>,
    pub u_f: Var<'g>,
    pub h_hat: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput<'g> {
    pub prediction: Var<'g>,
    pub state: StateVars<'g>,
    pub latents: Latents<'g>,
    pub diagnostics: StepDiagnostics,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (cf, c, p) = (config.channels, config.embed_dim, config.patch_size);
        let (gh, gw) = config.grid();
        let embed_w = store.add(
            "embed.weight",
            Tensor::randn(&[c, cf, p, p], (1.0 / (cf * p * p) as f64).sqrt(), &mut rng),
        );
        let embed_b = store.add("embed.bias", Tensor::zeros(&[c]));
        let blocks = (0..config.transformer_blocks)
            .map(|i| AttentionBlock::new(&mut store, &format!("tb{i}"), c, config.window_size, i % 2 == 1, &mut rng))
            .collect();
        let lstm = LstmParams::new(&mut store, "lstm", c, &mut rng);
        let fourier = (0..config.fourier_blocks)
            .map(|i| {
                // The first block cancels its own residual so u_F starts at zero
                // and H_t starts as a convex blend of the gate inputs; with u_F = u_CM
                // the recurrence doubles u_CM every step and diverges.
                let init = if i == 0 { KernelInit::NegUnit } else { KernelInit::Zero };
                SpectralKernel::new(&mut store, &format!("fb{i}"), c, gh, gw, init)
            })
            .collect();
        let bank = DerivativeBank::new(&mut store, "arkm.f", c, config.k, &mut rng)?;
        let gate = match config.rk.mode {
            RkMode::Adaptive => Some(GateParams::new(&mut store, "arkm.gate", c, config.gate)),
            RkMode::Conventional => None,
        };
        let std = (1.0 / c as f64).sqrt();
        let (dec_w, dec_b) = match config.upsampler {
            Upsampler::TransposedConv => (
                store.add("decoder.weight", Tensor::randn(&[c, cf, p, p], std, &mut rng)),
                store.add("decoder.bias", Tensor::zeros(&[cf])),
            ),
            Upsampler::Bilinear => (
                store.add("decoder.weight", Tensor::randn(&[cf, c, 1, 1], std, &mut rng)),
                store.add("decoder.bias", Tensor::zeros(&[cf])),
            ),
        };
        Ok(Model {
            config,
            store,
            layout: Layout {
                embed_w,
                embed_b,
                blocks,
                lstm,
                fourier,
                bank,
                gate,
                dec_w,
                dec_b,
            },
        })
    }

    pub fn bank(&self) -> &DerivativeBank {
        &self.layout.bank
    }

    pub fn gate(&self) -> Option<&GateParams> {
        self.layout.gate.as_ref()
    }

    pub fn attention_blocks(&self) -> &[AttentionBlock] {
        &self.layout.blocks
    }

    pub fn lstm_params(&self) -> &LstmParams {
        &self.layout.lstm
    }

    pub fn fourier_kernels(&self) -> &[SpectralKernel] {
        &self.layout.fourier
    }

    pub fn embed_params(&self) -> (ParamId, ParamId) {
        (self.layout.embed_w, self.layout.embed_b)
    }

    pub fn decoder_params(&self) -> (ParamId, ParamId) {
        (self.layout.dec_w, self.layout.dec_b)
    }

    pub fn zero_state(&self, batch: usize) -> ModelState {
        let (gh, gw) = self.config.grid();
        let shape = [batch, self.config.embed_dim, gh, gw];
        ModelState {
            hidden: Tensor::zeros(&shape),
            cell: Tensor::zeros(&shape),
        }
    }

    fn check_frame(&self, op: &'static str, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1..] != [c.channels, c.height, c.width] {
            return Err(invalid_shape(
                op,
                &s,
                format!("expected [b, {}, {}, {}]", c.channels, c.height, c.width),
            ));
        }
        Ok(())
    }

    /// Non-overlapping `p×p` patches projected to `embed_dim` channels.
    pub fn patch_embed<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        self.check_frame("patch_embed", &x)?;
        x.conv2d(
            &g.param(store, self.layout.embed_w),
            Some(&g.param(store, self.layout.embed_b)),
            self.config.patch_size,
            Padding::Valid,
        )
    }

    pub fn transformer_stack<'g>(&self, g: &'g Graph, store: &ParamStore, u: Var<'g>) -> Result<Var<'g>> {
        let mut v = u;
        for blk in &self.layout.blocks {
            v = window_attention_block(g, store, blk, v)?;
        }
        Ok(v)
    }

    /// Returns `(u_CM, u_TL, new_cell)`.
    pub fn correction_module<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        u: Var<'g>,
        state: StateVars<'g>,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let v = self.transformer_stack(g, store, u)?;
        let (u_tl, cell) = lstm_cell(g, store, &self.layout.lstm, v, state.hidden, state.cell)?;
        let k = u_tl.sigmoid();
        let u_cm = state.hidden.add(&k.mul(&u_tl.sub(&state.hidden)?)?)?;
        Ok((u_cm, u_tl, cell))
    }

    pub fn decode<'g>(&self, g: &'g Graph, store: &ParamStore, h: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.layout.dec_w);
        let b = g.param(store, self.layout.dec_b);
        match self.config.upsampler {
            Upsampler::TransposedConv => h.conv_transpose2d(&w, Some(&b), self.config.patch_size),
            Upsampler::Bilinear => h
                .upsample_bilinear(self.config.patch_size)?
                .conv2d(&w, Some(&b), 1, Padding::Same),
        }
    }

    pub fn step<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, state: StateVars<'g>) -> Result<StepOutput<'g>> {
        let u = self.patch_embed(g, store, x)?;
        let (u_cm, u_tl, cell) = self.correction_module(g, store, u, state)?;
        let mut u_f = u_cm;
        for kernel in &self.layout.fourier {
            u_f = u_f.add(&fourier_block(g, store, u_f, kernel)?)?;
        }
        let h_hat = u_f.add(&u_cm)?;
        let (hidden, gate) = match &self.layout.gate {
            Some(gate) => {
                let (h, gv) = adaptive_rk2_step(g, store, &self.layout.bank, gate, h_hat)?;
                (h, Some(gv))
            }
            None => (rk2_step(g, store, &self.layout.bank, h_hat)?, None),
        };
        let prediction = self.decode(g, store, hidden)?;
        let mut diagnostics = StepDiagnostics {
            gate_mean: 0.5,
            gate_min: 0.5,
            gate_max: 0.5,
            moment_loss: bank_moment_loss(store, &self.layout.bank),
        };
        if let Some(gv) = gate {
            let v = gv.value();
            diagnostics.gate_mean = v.mean();
            diagnostics.gate_min = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
            diagnostics.gate_max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(StepOutput {
            prediction,
            state: StateVars { hidden, cell },
            latents: Latents {
                u,
                u_tl,
                u_cm,
                u_f,
                h_hat,
            },
            diagnostics,
        })
    }

    /// Warm-up over the `T_in` input frames `[b, T_in, C, H, W]`, then
    /// `horizon` autoregressive predictions. The prediction made from the last
    /// input frame is the first forecast.
    pub fn rollout<'g>(&self, g: &'g Graph, store: &ParamStore, inputs: Var<'g>, horizon: usize) -> Result<Var<'g>> {
        let s = inputs.shape();
        let c = &self.config;
        if horizon == 0 {
            return Err(Error::InvalidArgument("rollout horizon must be ≥ 1".into()));
        }
        if s.len() != 5 || s[1] == 0 || s[2..] != [c.channels, c.height, c.width] {
            return Err(invalid_shape(
                "rollout",
                &s,
                format!("expected [b, T, {}, {}, {}]", c.channels, c.height, c.width),
            ));
        }
        let (b, t_in) = (s[0], s[1]);
        let frame_shape = [b, c.channels, c.height, c.width];
        let out_shape = [b, 1, c.channels, c.height, c.width];
        let mut state = StateVars::constant(g, &self.zero_state(b));
        let mut pred = None;
        for t in 0..t_in {
            let x = inputs.narrow_axis1(t, 1)?.reshape(&frame_shape)?;
            let out = self.step(g, store, x, state)?;
            state = out.state;
            pred = Some(out.prediction);
        }
        let mut preds = vec![pred.expect("t_in ≥ 1")];
        for _ in 1..horizon {
            let out = self.step(g, store, *preds.last().expect("non-empty"), state)?;
            state = out.state;
            preds.push(out.prediction);
        }
        let framed = preds.iter().map(|p| p.reshape(&out_shape)).collect::<Result<Vec<_>>>()?;
        concat(&framed, 1)
    }

    /// Forward-only rollout on plain tensors.
    pub fn predict(&self, inputs: &Tensor, horizon: usize) -> Result<Tensor> {
        let g = Graph::new();
        let out = self.rollout(&g, &self.store, g.constant(inputs.clone()), horizon)?;
        Ok(out.value().as_ref().clone())
    }
}

/// Moment loss of a bank evaluated on values (no graph).
pub fn bank_moment_loss(store: &ParamStore, bank: &DerivativeBank) -> f64 {
    let filters = store.value(bank.filters);
    let k = bank.k;
    let mut total = 0.0;
    for (m, f) in filters.data().chunks(k * k).enumerate() {
        let w = Tensor::new(&[k, k], f.to_vec()).expect("filter shape");
        let moments = moment_of(&w).expect("odd order");
        for (idx, v) in moments.entries.data().iter().enumerate() {
            let target = if idx == m { 1.0 } else { 0.0 };
            total += (v - target).powi(2);
        }
    }
    total
}
