//! Single-layer LSTM over clip features with a fully-connected scalar head.
//!
//! Gate rows are stacked in the order input, forget, cell, output:
//!
//! ```text
//! z_t = W_ih x_t + W_hh h_{t-1} + b
//! i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ŷ   = w_fc · h_T + b_fc
//! ```
//!
//! with `h_0 = c_0 = 0`. The score is read from the final step only. There
//! are no peepholes and the forget bias gets no special initialization.
//!
//! Checkpoints (`.aqam`) are the magic `AQAM`, version byte `0x01`, `u32` H,
//! `u32` D, then `W_ih`, `W_hh`, `b`, `w_fc`, `b_fc` as little-endian `f64`.

use std::fs;
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{axpy, central_diff, dot, gaussian_fill, gemm_acc, Layout, Mat, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQAM";
pub const CHECKPOINT_VERSION: u8 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 1 + 4 + 4;

pub const BLOCK_NAMES: [&str; 5] = ["W_ih", "W_hh", "b", "w_fc", "b_fc"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// 4H×D input weights.
    pub w_ih: Mat,
    /// 4H×H recurrent weights.
    pub w_hh: Mat,
    /// 4H×1 gate bias.
    pub b: Mat,
    /// 1×H output weights.
    pub w_fc: Mat,
    pub b_fc: f64,
}

impl ModelParams {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w_ih: Mat::zeros(4 * hidden, dim),
            w_hh: Mat::zeros(4 * hidden, hidden),
            b: Mat::zeros(4 * hidden, 1),
            w_fc: Mat::zeros(1, hidden),
            b_fc: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_fc.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b.len() + self.w_fc.len() + 1
    }

    /// Parameter blocks in declaration order.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [
            self.w_ih.data(),
            self.w_hh.data(),
            self.b.data(),
            self.w_fc.data(),
            std::slice::from_ref(&self.b_fc),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w_ih.data_mut(),
            self.w_hh.data_mut(),
            self.b.data_mut(),
            self.w_fc.data_mut(),
            std::slice::from_mut(&mut self.b_fc),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.w_ih.shape() == other.w_ih.shape()
            && self.w_hh.shape() == other.w_hh.shape()
            && self.b.shape() == other.b.shape()
            && self.w_fc.shape() == other.w_fc.shape()
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.dim());
        let ok = self.w_ih.shape() == (4 * h, d)
            && self.w_hh.shape() == (4 * h, h)
            && self.b.shape() == (4 * h, 1)
            && self.w_fc.shape() == (1, h);
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: format!("shapes consistent with H={h}, D={d}"),
                found: format!(
                    "W_ih {:?}, W_hh {:?}, b {:?}, w_fc {:?}",
                    self.w_ih.shape(),
                    self.w_hh.shape(),
                    self.b.shape(),
                    self.w_fc.shape()
                ),
            })
        }
    }
}

/// Draws every weight and bias from N(0, std²), blocks in declaration order.
pub fn init_params(hidden: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<ModelParams> {
    if hidden == 0 || dim == 0 {
        return Err(Error::Argument(format!(
            "hidden size and feature dim must be positive (got H={hidden}, D={dim})"
        )));
    }
    let mut p = ModelParams::zeros(hidden, dim);
    gaussian_fill(&mut p.w_ih, std, rng)?;
    gaussian_fill(&mut p.w_hh, std, rng)?;
    gaussian_fill(&mut p.b, std, rng)?;
    gaussian_fill(&mut p.w_fc, std, rng)?;
    p.b_fc = std * rng.normal();
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Activated gates `[i, f, g, o]`, length 4H.
    pub gates: Vec<f64>,
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub steps: Vec<StepTrace>,
    /// Score in normalized units.
    pub prediction: f64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_input(params: &ModelParams, seq: &FeatureSequence) -> Result<()> {
    params.check_shapes()?;
    if seq.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature sequence",
            expected: format!("D={}", params.dim()),
            found: format!("D={}", seq.dim()),
        });
    }
    if seq.steps() == 0 {
        return Err(Error::Argument("sequence has no steps".into()));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, seq: &FeatureSequence) -> Result<ForwardTrace> {
    check_input(params, seq)?;
    let h = params.hidden();
    let mut steps: Vec<StepTrace> = Vec::with_capacity(seq.steps());
    let zeros = vec![0.0; h];
    for t in 0..seq.steps() {
        let (h_prev, c_prev) = match steps.last() {
            Some(s) => (s.hidden.as_slice(), s.cell.as_slice()),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        let mut z = params.b.data().to_vec();
        params.w_ih.matvec_acc(seq.step(t), &mut z);
        if t > 0 {
            params.w_hh.matvec_acc(h_prev, &mut z);
        }
        let (zi, rest) = z.split_at_mut(h);
        let (zf, rest) = rest.split_at_mut(h);
        let (zg, zo) = rest.split_at_mut(h);
        zi.iter_mut().for_each(|v| *v = sigmoid(*v));
        zf.iter_mut().for_each(|v| *v = sigmoid(*v));
        zg.iter_mut().for_each(|v| *v = v.tanh());
        zo.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut cell = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            cell[j] = zf[j] * c_prev[j] + zi[j] * zg[j];
            hidden[j] = zo[j] * cell[j].tanh();
        }
        steps.push(StepTrace {
            gates: z,
            cell,
            hidden,
        });
    }
    let last = &steps.last().unwrap().hidden;
    let prediction = dot(params.w_fc.data(), last) + params.b_fc;
    Ok(ForwardTrace { steps, prediction })
}

pub fn predict(params: &ModelParams, seq: &FeatureSequence) -> Result<f64> {
    forward(params, seq).map(|t| t.prediction)
}

/// Squared error of one prediction.
pub fn loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).powi(2)
}

/// Mean squared error over `(prediction, target)` pairs.
pub fn batch_loss(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(p, t)| loss(p, t)).sum::<f64>() / pairs.len() as f64
}

/// Parameter gradients plus the loss they were taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grad: ModelParams,
    pub loss: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            grad: ModelParams::zeros(params.hidden(), params.dim()),
            loss: 0.0,
        }
    }

    pub fn reset(&mut self) {
        for block in self.grad.blocks_mut() {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        self.loss = 0.0;
    }
}

/// Exact gradients of `(ŷ − target)²` by backpropagation through time.
pub fn backward(params: &ModelParams, seq: &FeatureSequence, target: f64) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    accumulate_gradients(params, seq, target, 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds `scale · ∇(ŷ − target)²` into `grads` and `scale · loss` into
/// `grads.loss`. Returns the prediction.
pub fn accumulate_gradients(
    params: &ModelParams,
    seq: &FeatureSequence,
    target: f64,
    scale: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    accumulate_batch_gradients(params, &[(seq, target)], scale, grads).map(|p| p[0])
}

/// [`accumulate_gradients`] over a batch of equal-length sequences, done as
/// matrix products over the whole batch. Returns the predictions in batch
/// order.
pub fn accumulate_batch_gradients(
    params: &ModelParams,
    batch: &[(&FeatureSequence, f64)],
    scale: f64,
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    let Some(&(first, _)) = batch.first() else {
        return Ok(Vec::new());
    };
    for &(seq, _) in batch {
        check_input(params, seq)?;
        if seq.steps() != first.steps() {
            return Err(Error::Argument(format!(
                "batch mixes sequence lengths {} and {}",
                first.steps(),
                seq.steps()
            )));
        }
    }
    if !grads.grad.same_shape(params) {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: format!("H={}, D={}", params.hidden(), params.dim()),
            found: format!("H={}, D={}", grads.grad.hidden(), grads.grad.dim()),
        });
    }
    let h = params.hidden();
    let d = params.dim();
    let g4 = 4 * h;
    let n = batch.len();
    let steps = first.steps();
    let rows = steps * n;

    // Row t·n + b of each buffer belongs to sample b at step t.
    let mut xs = vec![0.0; rows * d];
    for t in 0..steps {
        for (b, &(seq, _)) in batch.iter().enumerate() {
            let r = t * n + b;
            xs[r * d..(r + 1) * d].copy_from_slice(seq.step(t));
        }
    }
    let mut gates = vec![0.0; rows * g4];
    for row in gates.chunks_exact_mut(g4) {
        row.copy_from_slice(params.b.data());
    }
    gemm_acc(rows, d, g4, &xs, Layout::AsIs, params.w_ih.data(), Layout::Transposed, &mut gates);
    let mut cells = vec![0.0; rows * h];
    let mut hidden = vec![0.0; rows * h];
    let zeros = vec![0.0; h];
    for t in 0..steps {
        let block = t * n..(t + 1) * n;
        if t > 0 {
            gemm_acc(
                n,
                h,
                g4,
                &hidden[(t - 1) * n * h..t * n * h],
                Layout::AsIs,
                params.w_hh.data(),
                Layout::Transposed,
                &mut gates[block.start * g4..block.end * g4],
            );
        }
        for r in block {
            let z = &mut gates[r * g4..(r + 1) * g4];
            let (zi, rest) = z.split_at_mut(h);
            let (zf, rest) = rest.split_at_mut(h);
            let (zg, zo) = rest.split_at_mut(h);
            zi.iter_mut().for_each(|v| *v = sigmoid(*v));
            zf.iter_mut().for_each(|v| *v = sigmoid(*v));
            zg.iter_mut().for_each(|v| *v = v.tanh());
            zo.iter_mut().for_each(|v| *v = sigmoid(*v));
            let (done, cur) = cells.split_at_mut(r * h);
            let c_prev = if t > 0 { &done[(r - n) * h..(r - n + 1) * h] } else { &zeros[..] };
            let c = &mut cur[..h];
            let hv = &mut hidden[r * h..(r + 1) * h];
            for j in 0..h {
                c[j] = zf[j] * c_prev[j] + zi[j] * zg[j];
                hv[j] = zo[j] * c[j].tanh();
            }
        }
    }

    let g = &mut grads.grad;
    let mut preds = Vec::with_capacity(n);
    let mut dh = vec![0.0; n * h];
    let mut dc = vec![0.0; n * h];
    let last = (steps - 1) * n;
    for (b, &(_, target)) in batch.iter().enumerate() {
        let hv = &hidden[(last + b) * h..(last + b + 1) * h];
        let pred = dot(params.w_fc.data(), hv) + params.b_fc;
        let err = pred - target;
        grads.loss += scale * err * err;
        let dpred = scale * 2.0 * err;
        axpy(dpred, hv, g.w_fc.data_mut());
        g.b_fc += dpred;
        for (dhj, w) in dh[b * h..(b + 1) * h].iter_mut().zip(params.w_fc.data()) {
            *dhj = dpred * w;
        }
        preds.push(pred);
    }

    let mut dz = vec![0.0; rows * g4];
    for t in (0..steps).rev() {
        for b in 0..n {
            let r = t * n + b;
            let gs = &gates[r * g4..(r + 1) * g4];
            let (gi, rest) = gs.split_at(h);
            let (gf, rest) = rest.split_at(h);
            let (gg, go) = rest.split_at(h);
            let cell = &cells[r * h..(r + 1) * h];
            let c_prev = if t > 0 { &cells[(r - n) * h..(r - n + 1) * h] } else { &zeros[..] };
            let (dzi, rest) = dz[r * g4..(r + 1) * g4].split_at_mut(h);
            let (dzf, rest) = rest.split_at_mut(h);
            let (dzg, dzo) = rest.split_at_mut(h);
            let dhb = &dh[b * h..(b + 1) * h];
            let dcb = &mut dc[b * h..(b + 1) * h];
            for j in 0..h {
                let tc = cell[j].tanh();
                dzo[j] = dhb[j] * tc * go[j] * (1.0 - go[j]);
                dcb[j] += dhb[j] * go[j] * (1.0 - tc * tc);
                dzi[j] = dcb[j] * gg[j] * gi[j] * (1.0 - gi[j]);
                dzg[j] = dcb[j] * gi[j] * (1.0 - gg[j] * gg[j]);
                dzf[j] = dcb[j] * c_prev[j] * gf[j] * (1.0 - gf[j]);
                dcb[j] *= gf[j];
            }
        }
        if t > 0 {
            dh.fill(0.0);
            gemm_acc(
                n,
                g4,
                h,
                &dz[t * n * g4..(t + 1) * n * g4],
                Layout::AsIs,
                params.w_hh.data(),
                Layout::AsIs,
                &mut dh,
            );
        }
    }

    gemm_acc(g4, rows, d, &dz, Layout::Transposed, &xs, Layout::AsIs, g.w_ih.data_mut());
    gemm_acc(
        g4,
        rows - n,
        h,
        &dz[n * g4..],
        Layout::Transposed,
        &hidden[..(rows - n) * h],
        Layout::AsIs,
        g.w_hh.data_mut(),
    );
    let gb = g.b.data_mut();
    for row in dz.chunks_exact(g4) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(preds)
}

/// Identifies one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamEntry {
    pub block: usize,
    pub index: usize,
}

impl ParamEntry {
    pub fn block_name(&self) -> &'static str {
        BLOCK_NAMES[self.block]
    }
}

impl std::fmt::Display for ParamEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.block_name(), self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry with the largest relative error.
    pub worst: Option<ParamEntry>,
    /// Entries whose relative error exceeds the tolerance.
    pub failures: Vec<ParamEntry>,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients against central differences entrywise.
pub fn grad_check(params: &ModelParams, seq: &FeatureSequence, target: f64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let analytic = backward(params, seq, target)?;
    compare_gradients(params, seq, target, &analytic, h, tol)
}

/// Checks a supplied gradient against central differences of the loss.
pub fn compare_gradients(
    params: &ModelParams,
    seq: &FeatureSequence,
    target: f64,
    analytic: &Gradients,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    if !params.same_shape(&analytic.grad) {
        return Err(Error::DimensionMismatch {
            what: "gradient check",
            expected: "gradients shaped like parameters".into(),
            found: "different shapes".into(),
        });
    }
    let mut probe = params.clone();
    let p0 = predict(params, seq)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        entries_checked: 0,
        tolerance: tol,
    };
    let analytic_blocks = analytic.grad.blocks();
    for (block, grads) in analytic_blocks.iter().enumerate() {
        for (index, &a) in grads.iter().enumerate() {
            let base = params.blocks()[block][index];
            let numeric = central_diff(
                |x| {
                    probe.blocks_mut()[block][index] = x;
                    // loss(pred) − loss(p0), factored to avoid cancellation
                    let pred = predict(&probe, seq).expect("shapes validated");
                    (pred - p0) * (pred + p0 - 2.0 * target)
                },
                base,
                h,
            )?;
            probe.blocks_mut()[block][index] = base;
            let rel = relative_error(a, numeric);
            let entry = ParamEntry { block, index };
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(entry);
            }
            if !(rel < tol) {
                report.failures.push(entry);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(params.hidden() as u32).to_le_bytes());
    out.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    for block in params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(Error::format(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected `AQAM`"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let hidden = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if hidden == 0 || dim == 0 {
        return Err(Error::format(path, format!("invalid dimensions H={hidden}, D={dim}")));
    }
    let mut params = ModelParams::zeros(hidden, dim);
    let expected = 8 * params.num_params();
    let body = &bytes[CHECKPOINT_HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("body is {} bytes, expected {expected} for H={hidden}, D={dim}", body.len()),
        ));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for block in params.blocks_mut() {
        for v in block.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("{}: checkpoint parameters", path.display())));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}
