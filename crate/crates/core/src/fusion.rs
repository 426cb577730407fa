//! The hybrid block: the concept filter's global feature `h_t` is injected
//! into the SSM state through `P` and added to the readout through `F`.
//!
//! ```text
//! s_t = Λ s_{t-1} + g_t (B x_t + P h_t)
//! y_t = C s_t + F h_t
//! ```
//!
//! `h` is computed from the same block input `X` as the recurrence. Blocks
//! stack with residual connections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::concept::{self, AssignSource, AssignmentRecord, ConceptConfig, ConceptFilterParams, ConceptVars, Mixing};
use crate::error::{Error, Result};
use crate::numerics::{RealMatrix, SeededRng};
use crate::ssm::{ssm_scan, Injection, SsmInit, SsmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// State injection `[d_s x d_h]`.
    pub p: RealMatrix,
    /// Readout injection `[d x d_h]`.
    pub f: RealMatrix,
}

impl FusionParams {
    pub fn zeros(d_state: usize, d: usize, d_h: usize) -> Self {
        Self {
            p: RealMatrix::zeros(d_state, d_h),
            f: RealMatrix::zeros(d, d_h),
        }
    }

    pub fn sample(d_state: usize, d: usize, d_h: usize, rng: &mut SeededRng) -> Self {
        Self {
            p: rng.normal_matrix(d_state, d_h, 0.02),
            f: rng.normal_matrix(d, d_h, 0.02),
        }
    }
}

/// Parameters of one hybrid block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ssm: SsmParams,
    pub filter: ConceptFilterParams,
    pub fusion: FusionParams,
}

impl BlockParams {
    pub fn sample(concept: ConceptConfig, d_state: usize, init: SsmInit, rng: &mut SeededRng) -> Result<Self> {
        let d = concept.d;
        let ssm = SsmParams::sample(d, d_state, d, init, rng)?;
        let filter = ConceptFilterParams::sample(concept, rng)?;
        let fusion = FusionParams::sample(d_state, d, d, rng);
        let block = Self { ssm, filter, fusion };
        block.validate()?;
        Ok(block)
    }

    pub fn width(&self) -> usize {
        self.filter.config.d
    }

    pub fn validate(&self) -> Result<()> {
        self.ssm.validate()?;
        self.filter.validate()?;
        let d = self.width();
        let ds = self.ssm.state_dim();
        if self.ssm.input_dim() != d || self.ssm.output_dim() != d {
            return Err(Error::shape("SSM widths", d, self.ssm.input_dim()));
        }
        if self.fusion.p.shape() != (ds, d) {
            return Err(Error::shape("P", format!("{ds}x{d}"), format!("{:?}", self.fusion.p.shape())));
        }
        if self.fusion.f.shape() != (d, d) {
            return Err(Error::shape("F", format!("{d}x{d}"), format!("{:?}", self.fusion.f.shape())));
        }
        Ok(())
    }

    /// All-zero block: every output is zero, so a residual stack of these is
    /// the identity.
    pub fn zeroed(&self) -> Self {
        let z = |m: &RealMatrix| RealMatrix::zeros(m.rows(), m.cols());
        let mut b = self.clone();
        b.ssm.lambda.iter_mut().for_each(|l| *l = 0.0);
        b.ssm.b = z(&b.ssm.b);
        b.ssm.c = z(&b.ssm.c);
        b.filter.w_u = z(&b.filter.w_u);
        b.fusion = FusionParams::zeros(b.ssm.state_dim(), self.width(), self.width());
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockOutput {
    pub y: RealMatrix,
    pub s: RealMatrix,
    pub h: RealMatrix,
    /// Recurrent readout `C s_t`.
    pub r: RealMatrix,
    pub h_bar: Vec<f64>,
    pub r_bar: Vec<f64>,
    pub assignment: AssignmentRecord,
}

/// Mean over positions.
pub fn pool(seq: &RealMatrix) -> Vec<f64> {
    seq.mean_rows()
}

pub fn infomamba_block(
    ssm: &SsmParams,
    filt: &ConceptFilterParams,
    fus: &FusionParams,
    x: &RealMatrix,
    mixing: Mixing,
) -> Result<BlockOutput> {
    let (assignment, mix) = concept::filter_forward(filt, x, mixing)?;
    let h = mix.h;
    if fus.f.shape() != (ssm.output_dim(), h.cols()) {
        return Err(Error::shape("F", format!("{}x{}", ssm.output_dim(), h.cols()), format!("{:?}", fus.f.shape())));
    }
    let scan = ssm_scan(ssm, x, Some(Injection { h: &h, p: &fus.p }), true)?;
    let r = scan.outputs;
    let y = r.add(&h.matmul_t(&fus.f));
    Ok(BlockOutput {
        h_bar: pool(&h),
        r_bar: pool(&r),
        y,
        s: scan.states,
        h,
        r,
        assignment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackOutput {
    pub y: RealMatrix,
    pub taps: Vec<BlockOutput>,
}

/// Residual composition `x ← x + block(x)`.
pub fn stack_blocks(blocks: &[BlockParams], x: &RealMatrix, mixing: Mixing) -> Result<StackOutput> {
    if blocks.is_empty() {
        return Err(Error::invalid("need at least one block"));
    }
    let mut cur = x.clone();
    let mut taps = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        if b.width() != cur.cols() {
            return Err(Error::shape("block width", cur.cols(), format!("{} (block {i})", b.width())));
        }
        let out = infomamba_block(&b.ssm, &b.filter, &b.fusion, &cur, mixing)?;
        cur = cur.add(&out.y);
        taps.push(out);
    }
    Ok(StackOutput { y: cur, taps })
}

/// Tape handles for SSM parameters.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    /// `[1 x d_s]`
    pub lambda: Var,
    pub b: Var,
    pub c: Var,
    /// `[1 x d]`
    pub gate_w: Var,
    /// `[1 x 1]`
    pub gate_b: Var,
}

impl SsmVars {
    pub fn register(tape: &mut Tape, p: &SsmParams) -> Self {
        Self {
            lambda: tape.param(RealMatrix::row_vector(&p.lambda)),
            b: tape.param(p.b.clone()),
            c: tape.param(p.c.clone()),
            gate_w: tape.param(RealMatrix::row_vector(&p.gate_w)),
            gate_b: tape.param(RealMatrix::filled(1, 1, p.gate_b)),
        }
    }
}

/// Differentiable scan; returns `(states, C s)`.
pub fn tape_ssm(tape: &mut Tape, vars: &SsmVars, x: Var, injection: Option<(Var, Var)>, gated: bool) -> (Var, Var) {
    let mut drive = tape.matmul_t(x, vars.b);
    if let Some((h, p)) = injection {
        let ph = tape.matmul_t(h, p);
        drive = tape.add(drive, ph);
    }
    if gated {
        let logits = tape.matmul_t(x, vars.gate_w);
        let logits = tape.add_row(logits, vars.gate_b);
        let g = tape.sigmoid(logits);
        drive = tape.mul_col(drive, g);
    }
    let states = tape.diag_scan(vars.lambda, drive);
    let r = tape.matmul_t(states, vars.c);
    (states, r)
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ssm: SsmVars,
    pub concept: ConceptVars,
    pub p: Var,
    pub f: Var,
}

impl BlockVars {
    pub fn register(tape: &mut Tape, b: &BlockParams) -> Self {
        Self {
            ssm: SsmVars::register(tape, &b.ssm),
            concept: ConceptVars::register(tape, &b.filter),
            p: tape.param(b.fusion.p.clone()),
            f: tape.param(b.fusion.f.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TapeBlock {
    pub y: Var,
    pub h: Var,
    pub r: Var,
    pub u_hat: Var,
    pub buckets: Vec<usize>,
}

/// Differentiable counterpart of [`infomamba_block`].
pub fn tape_block(tape: &mut Tape, block: &BlockParams, vars: &BlockVars, x: Var, mixing: Mixing) -> Result<TapeBlock> {
    let (filt, buckets) = concept::tape_filter(tape, &block.filter, &vars.concept, x, AssignSource::Learned, mixing)?;
    let (_, r) = tape_ssm(tape, &vars.ssm, x, Some((filt.h, vars.p)), true);
    let fh = tape.matmul_t(filt.h, vars.f);
    let y = tape.add(r, fh);
    Ok(TapeBlock { y, h: filt.h, r, u_hat: filt.u_hat, buckets })
}
