//! The forecasting network: Laplacian embedding, a residual stack of
//! periodic/spatial self-attention blocks, an LSTM encoder and a linear
//! decoder.
//!
//! Attention layout:
//! - periodic attention runs per station channel with the `num_periods` rows of
//!   the folded grid as tokens and the `period_len` positions as features,
//!   scaled by `sqrt(period_len)`;
//! - spatial attention uses stations as tokens and their length-`T` series as
//!   features, scaled by `sqrt(N)`, giving an `N × N` score matrix.
//!
//! Q/K/V come from zero-padded convolutions with the station axis as channels
//! (`N → N`), 2-D over the period grid and 1-D over time respectively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph::{fuse_embedding, LaplacianEmbedding, StationGraph};
use crate::params::{Gradients, ParamStore};
use crate::spectral::{
    adaptive_aggregate_with, aggregation_weights, dft_amplitudes, fold_to_periods, select_top_k,
    unfold_from_periods, PeriodDivision,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_stations: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub psa_kernel: (usize, usize),
    pub ssa_kernel: usize,
    pub embed_dim: usize,
    pub disable_psa: bool,
    pub disable_ssa: bool,
    pub differentiable_agg_weights: bool,
}

impl ModelConfig {
    /// Defaults for `n_stations` stations: 12 h in, 6 h out, two blocks, top-2
    /// periods, 85 hidden units, 3×3 / 3 kernels, `min(4, N − 1)` eigenvectors.
    pub fn new(n_stations: usize) -> Self {
        ModelConfig {
            n_stations,
            input_len: 12,
            horizon: 6,
            blocks: 2,
            top_k: 2,
            hidden: 85,
            psa_kernel: (3, 3),
            ssa_kernel: 3,
            embed_dim: 4.min(n_stations.saturating_sub(1)),
            disable_psa: false,
            disable_ssa: false,
            differentiable_agg_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_stations == 0 {
            return fail("n_stations must be >= 1".into());
        }
        if self.input_len < 2 {
            return fail(format!("input_len must be >= 2, got {}", self.input_len));
        }
        if self.horizon == 0 || self.top_k == 0 || self.hidden == 0 {
            return fail("horizon, top_k and hidden must be >= 1".into());
        }
        let (kh, kw) = self.psa_kernel;
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) || self.ssa_kernel.is_multiple_of(2) {
            return fail(format!(
                "kernel sizes must be odd (psa {kh}x{kw}, ssa {})",
                self.ssa_kernel
            ));
        }
        if self.embed_dim > self.n_stations.saturating_sub(1) {
            return fail(format!(
                "embed_dim {} exceeds N - 1 = {}",
                self.embed_dim,
                self.n_stations.saturating_sub(1)
            ));
        }
        Ok(())
    }
}

/// Q/K/V convolution weights and biases for one attention.
#[derive(Clone, Copy, Debug)]
pub struct QkvVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_f: Var,
    pub w_i: Var,
    pub w_o: Var,
    pub w_c: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_o: Var,
    pub b_c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w: Var,
    pub b: Var,
}

/// Periodic self-attention on a `[pn, pl, N]` grid. Returns the attended grid
/// and the `[N, pn, pn]` score tensor.
pub fn periodic_self_attention(tape: &mut Tape, x3: Var, p: &QkvVars) -> Result<(Var, Var)> {
    let s = tape.shape(x3).to_vec();
    if s.len() != 3 {
        return shape_err(format!("periodic attention expects [pn, pl, N], got {s:?}"));
    }
    let chans = tape.permute(x3, &[2, 0, 1])?;
    let q = tape.conv2d_same(chans, p.q_w, p.q_b)?;
    let k = tape.conv2d_same(chans, p.k_w, p.k_b)?;
    let v = tape.conv2d_same(chans, p.v_w, p.v_b)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (s[1] as f64).sqrt());
    let scores = tape.softmax(scaled, 2)?;
    let out = tape.matmul(scores, v)?;
    let out = tape.permute(out, &[1, 2, 0])?;
    Ok((out, scores))
}

/// Spatial self-attention on a `[T, N]` series. Returns the attended series
/// and the `[N, N]` station score matrix.
pub fn spatial_self_attention(tape: &mut Tape, x2: Var, p: &QkvVars) -> Result<(Var, Var)> {
    let s = tape.shape(x2).to_vec();
    if s.len() != 2 {
        return shape_err(format!("spatial attention expects [T, N], got {s:?}"));
    }
    let chans = tape.transpose(x2)?;
    let q = tape.conv1d_same(chans, p.q_w, p.q_b)?;
    let k = tape.conv1d_same(chans, p.k_w, p.k_b)?;
    let v = tape.conv1d_same(chans, p.v_w, p.v_b)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (s[1] as f64).sqrt());
    let scores = tape.softmax(scaled, 1)?;
    let out = tape.matmul(scores, v)?;
    let out = tape.transpose(out)?;
    Ok((out, scores))
}

/// One LSTM step on `[N]` input with `[hidden]` state. Gate weights are
/// `[hidden + N, hidden]` and act on the concatenation `[h_prev, x_t]`.
pub fn lstm_step(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.shape(h_prev)[0];
    let z = tape.concat(&[h_prev, x_t])?;
    let width = tape.shape(z)[0];
    let z = tape.reshape(z, &[1, width])?;
    let gate = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let a = tape.matmul(z, w)?;
        let a = tape.reshape(a, &[hidden])?;
        tape.add(a, b)
    };
    let f = gate(tape, p.w_f, p.b_f)?;
    let i = gate(tape, p.w_i, p.b_i)?;
    let o = gate(tape, p.w_o, p.b_o)?;
    let cand = gate(tape, p.w_c, p.b_c)?;
    let f = tape.sigmoid(f);
    let i = tape.sigmoid(i);
    let o = tape.sigmoid(o);
    let cand = tape.tanh(cand);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Runs the LSTM over the rows of `[T, N]` from zero state and returns `h_T`.
pub fn lstm_encode(tape: &mut Tape, x_seq: Var, p: &LstmVars, hidden: usize) -> Result<Var> {
    let s = tape.shape(x_seq).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return shape_err(format!("lstm expects [T, N], got {s:?}"));
    }
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    for t in 0..s[0] {
        let row = tape.narrow_rows(x_seq, t, 1)?;
        let x_t = tape.reshape(row, &[s[1]])?;
        (h, c) = lstm_step(tape, x_t, h, c, p)?;
    }
    Ok(h)
}

/// `h · W + b` → `[H]`.
pub fn decode(tape: &mut Tape, h: Var, d: &DecoderVars) -> Result<Var> {
    let hidden = tape.shape(h)[0];
    let row = tape.reshape(h, &[1, hidden])?;
    let y = tape.matmul(row, d.w)?;
    let horizon = tape.shape(y)[1];
    let y = tape.reshape(y, &[horizon])?;
    tape.add(y, d.b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct QkvIds {
    q_w: usize,
    q_b: usize,
    k_w: usize,
    k_b: usize,
    v_w: usize,
    v_b: usize,
}

impl QkvIds {
    fn vars(&self, v: &[Var]) -> QkvVars {
        QkvVars {
            q_w: v[self.q_w],
            q_b: v[self.q_b],
            k_w: v[self.k_w],
            k_b: v[self.k_b],
            v_w: v[self.v_w],
            v_b: v[self.v_b],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SlotIds {
    psa: QkvIds,
    ssa: QkvIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ParamIds {
    embed_w: usize,
    embed_b: usize,
    blocks: Vec<Vec<SlotIds>>,
    lstm: [usize; 8],
    dec_w: usize,
    dec_b: usize,
}

impl ParamIds {
    fn lstm_vars(&self, v: &[Var]) -> LstmVars {
        let l = self.lstm;
        LstmVars {
            w_f: v[l[0]],
            w_i: v[l[1]],
            w_o: v[l[2]],
            w_c: v[l[3]],
            b_f: v[l[4]],
            b_i: v[l[5]],
            b_o: v[l[6]],
            b_c: v[l[7]],
        }
    }
}

/// One parameter slot of the model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Weights are drawn from `U(±1/sqrt(fan_in))`; `None` marks a zero bias.
    pub fan_in: Option<usize>,
}

fn layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, ParamIds) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, fan_in: Option<usize>| {
        specs.push(ParamSpec { name, shape, fan_in });
        specs.len() - 1
    };
    let n = cfg.n_stations;
    let m = cfg.embed_dim;
    let embed_w = if m > 0 {
        add("embed.w".into(), vec![m], Some(m))
    } else {
        add("embed.w".into(), vec![1], None)
    };
    let embed_b = add("embed.b".into(), vec![1], None);
    let (kh, kw) = cfg.psa_kernel;
    let ks = cfg.ssa_kernel;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for l in 1..=cfg.blocks {
        let mut slots = Vec::with_capacity(cfg.top_k);
        for i in 1..=cfg.top_k {
            let mut qkv = |kind: &str, kshape: Vec<usize>, fan_in: usize| {
                let mut ids = [0usize; 6];
                for (j, part) in ["q", "k", "v"].iter().enumerate() {
                    let base = format!("block{l}.slot{i}.{kind}.{part}");
                    ids[2 * j] = add(format!("{base}.w"), kshape.clone(), Some(fan_in));
                    ids[2 * j + 1] = add(format!("{base}.b"), vec![n], None);
                }
                QkvIds {
                    q_w: ids[0],
                    q_b: ids[1],
                    k_w: ids[2],
                    k_b: ids[3],
                    v_w: ids[4],
                    v_b: ids[5],
                }
            };
            let psa = qkv("psa", vec![n, n, kh, kw], n * kh * kw);
            let ssa = qkv("ssa", vec![n, n, ks], n * ks);
            slots.push(SlotIds { psa, ssa });
        }
        blocks.push(slots);
    }
    let h = cfg.hidden;
    let mut lstm = [0usize; 8];
    for (j, g) in ["f", "i", "o", "c"].iter().enumerate() {
        lstm[j] = add(format!("lstm.w_{g}"), vec![h + n, h], Some(h + n));
    }
    for (j, g) in ["f", "i", "o", "c"].iter().enumerate() {
        lstm[4 + j] = add(format!("lstm.b_{g}"), vec![h], None);
    }
    let dec_w = add("decoder.w".into(), vec![h, cfg.horizon], Some(h));
    let dec_b = add("decoder.b".into(), vec![cfg.horizon], None);
    (
        specs,
        ParamIds {
            embed_w,
            embed_b,
            blocks,
            lstm,
            dec_w,
            dec_b,
        },
    )
}

/// Names and shapes of every learnable tensor for `cfg`, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    layout(cfg).0
}

/// Per-block, per-slot record of what the attention layers did on one input.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub blocks: Vec<Vec<SlotTrace>>,
}

#[derive(Clone, Debug)]
pub struct SlotTrace {
    pub division: PeriodDivision,
    pub weight: f64,
    /// `[N, pn, pn]`, absent when periodic attention is disabled.
    pub psa_scores: Option<Tensor>,
    /// `[N, N]`, absent when spatial attention is disabled.
    pub ssa_scores: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApsLstm {
    config: ModelConfig,
    seed: u64,
    laplacian: LaplacianEmbedding,
    params: ParamStore,
    ids: ParamIds,
}

impl ApsLstm {
    /// Builds the embedding from `graph` and draws every weight from a
    /// generator seeded with `seed`; biases start at zero.
    pub fn new(config: ModelConfig, graph: &StationGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.n_stations() != config.n_stations {
            return Err(Error::Config(format!(
                "config has {} stations, graph has {}",
                config.n_stations,
                graph.n_stations()
            )));
        }
        let laplacian = LaplacianEmbedding::new(graph, config.embed_dim)?;
        let (specs, ids) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data = match s.fan_in {
                Some(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound).collect()
                }
                None => vec![0.0; n],
            };
            params.push(s.name, Tensor::new(s.shape, data)?);
        }
        Ok(ApsLstm {
            config,
            seed,
            laplacian,
            params,
            ids,
        })
    }

    /// Reassembles a model from stored pieces, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, seed: u64, laplacian: LaplacianEmbedding, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (specs, ids) = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(params.iter()) {
            if s.name != name || s.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        if laplacian.dim() != config.embed_dim {
            return Err(Error::Checkpoint("laplacian embedding width mismatch".into()));
        }
        Ok(ApsLstm {
            config,
            seed,
            laplacian,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn laplacian(&self) -> &LaplacianEmbedding {
        &self.laplacian
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes every Q/K/V kernel and bias of every block.
    pub fn zero_attention(&mut self) {
        let ids: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params.name(i).starts_with("block"))
            .collect();
        for i in ids {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.input_len, self.config.n_stations];
        if x.shape() != want {
            return shape_err(format!("model input must be {want:?}, got {:?}", x.shape()));
        }
        Ok(())
    }

    /// Records the full forward pass for `x` (`[T, N]`) on `tape`, binding the
    /// parameters by reference. Returns the `[H]` forecast.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<Var> {
        self.check_input(x)?;
        let vars = self.params.bind(tape);
        let xv = tape.constant(x.clone());
        self.forward_with_vars(tape, &vars, xv, trace)
    }

    /// Forward pass with caller-supplied parameter nodes (`vars[id]` for every
    /// parameter id).
    pub fn forward_with_vars(&self, tape: &mut Tape, vars: &[Var], x: Var, trace: Option<&mut AttentionTrace>) -> Result<Var> {
        let h = self.blocks_with_vars(tape, vars, x, trace)?;
        let enc = lstm_encode(tape, h, &self.ids.lstm_vars(vars), self.config.hidden)?;
        decode(
            tape,
            enc,
            &DecoderVars {
                w: vars[self.ids.dec_w],
                b: vars[self.ids.dec_b],
            },
        )
    }

    /// Embedding plus the residual block chain: the LSTM's input sequence.
    fn blocks_with_vars(&self, tape: &mut Tape, vars: &[Var], x: Var, mut trace: Option<&mut AttentionTrace>) -> Result<Var> {
        let mut h = self.embed(tape, vars, x)?;
        for l in 0..self.config.blocks {
            let slot_trace = trace.as_deref_mut().map(|t| {
                t.blocks.push(Vec::new());
                t.blocks.last_mut().expect("pushed")
            });
            let out = self.aps_block(tape, vars, l, h, slot_trace)?;
            h = tape.add(out, h)?;
        }
        Ok(h)
    }

    fn embed(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let ev = self.laplacian.eigvecs.as_ref().map(|e| tape.constant(e.clone()));
        fuse_embedding(tape, x, ev, vars[self.ids.embed_w], vars[self.ids.embed_b])
    }

    /// One block without its residual connection.
    fn aps_block(&self, tape: &mut Tape, vars: &[Var], l: usize, x: Var, mut trace: Option<&mut Vec<SlotTrace>>) -> Result<Var> {
        let cfg = &self.config;
        let t_len = cfg.input_len;
        let spectrum = dft_amplitudes(tape.value(x))?;
        let divisions = select_top_k(&spectrum, cfg.top_k)?;
        let weights = aggregation_weights(&divisions);
        let mut outputs = Vec::with_capacity(divisions.len());
        for (i, d) in divisions.iter().enumerate() {
            let slot = &self.ids.blocks[l][i];
            let mut psa_scores = None;
            let mut ssa_scores = None;
            let xp = if cfg.disable_psa {
                x
            } else {
                let grid = fold_to_periods(tape, x, d)?;
                let (att, scores) = periodic_self_attention(tape, grid, &slot.psa.vars(vars))?;
                psa_scores = Some(scores);
                unfold_from_periods(tape, att, t_len)?
            };
            let xps = if cfg.disable_ssa {
                xp
            } else {
                let (att, scores) = spatial_self_attention(tape, xp, &slot.ssa.vars(vars))?;
                ssa_scores = Some(scores);
                att
            };
            outputs.push(xps);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(SlotTrace {
                    division: *d,
                    weight: weights[i],
                    psa_scores: psa_scores.map(|s| tape.value(s).clone()),
                    ssa_scores: ssa_scores.map(|s| tape.value(s).clone()),
                });
            }
        }
        let amps = if cfg.differentiable_agg_weights {
            let freqs: Vec<usize> = divisions.iter().map(|d| d.frequency).collect();
            tape.dft_amplitudes(x, &freqs)?
        } else {
            tape.constant(Tensor::from_vec(divisions.iter().map(|d| d.amplitude).collect()))
        };
        adaptive_aggregate_with(tape, &outputs, amps)
    }

    /// Input after adding the station embedding, i.e. what the first block sees.
    pub fn embedded_input(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let e = self.embed(&mut tape, &vars, xv)?;
        Ok(tape.value(e).clone())
    }

    /// Output of the residual block chain for `x`, i.e. what the LSTM reads.
    pub fn block_stack(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.blocks_with_vars(&mut tape, &vars, xv, None)?;
        Ok(tape.value(h).clone())
    }

    /// Forecast for one normalized `[T, N]` window.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, x, None)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Forecast plus the attention record for one window.
    pub fn trace(&self, x: &Tensor) -> Result<(Vec<f64>, AttentionTrace)> {
        let mut tape = Tape::new();
        let mut trace = AttentionTrace::default();
        let y = self.forward(&mut tape, x, Some(&mut trace))?;
        Ok((tape.value(y).data().to_vec(), trace))
    }

    /// MSE of the forecast against `target` and its parameter gradients, both
    /// multiplied by `weight` (use `1 / batch_len` to build a batch mean).
    pub fn loss_and_grads(&self, x: &Tensor, target: &[f64], weight: f64) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, x, None)?;
        let t = tape.constant(Tensor::from_vec(target.to_vec()));
        let loss = crate::train::mse_loss(&mut tape, y, t)?;
        let loss = tape.scale(loss, weight);
        tape.backward(loss)?;
        let mut grads = Gradients::zeros_like(&self.params);
        grads.accumulate_tape(&tape);
        Ok((tape.value(loss).item(), grads))
    }
}
