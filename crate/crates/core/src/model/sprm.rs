//! The pattern branch: channel-sliced depthwise dilated convolutions
//! followed by cross-attention onto a learned prototype bank.

use super::{ModelConfig, SprmWeights};
use crate::error::{shape_err, Result};
use crate::tensor::flops::Kernel;
use crate::tensor::{RowMask, Scalar, Tape, Var};

pub struct SprmOutput {
    /// `[T × d]`.
    pub output: Var,
    /// Prototype attention weights per head, `[T × m]` each.
    pub attention: Vec<Var>,
}

/// Runs the branch on `x[T×d]`.
///
/// Branch `k` convolves channels `k·d/B .. (k+1)·d/B`; the concatenation
/// `H_p` queries the prototypes head by head (`d_k = d / heads`), and each
/// head's output is a convex combination of its slice of `P·W_V`.
pub fn sprm_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &SprmWeights<Var>, cfg: &ModelConfig) -> Result<SprmOutput> {
    let d = cfg.d_model;
    let (rows, cols) = {
        let v = tape.value(x);
        (v.rows(), v.cols())
    };
    if cols != d || w.kernels.len() != cfg.conv_branches.len() {
        return Err(shape_err(
            "sprm",
            format!(
                "input [{rows}x{cols}] with {} kernels for d={d} and {} branches",
                w.kernels.len(),
                cfg.conv_branches.len()
            ),
        ));
    }
    let m = tape.value(w.prototypes).rows();
    if m != cfg.prototypes || tape.value(w.prototypes).cols() != d {
        return Err(shape_err("sprm", format!("prototype bank {:?}", tape.value(w.prototypes).shape())));
    }

    let bw = cfg.branch_width();
    let mut parts = Vec::with_capacity(cfg.conv_branches.len());
    for (k, (branch, &kernel)) in cfg.conv_branches.iter().zip(&w.kernels).enumerate() {
        if tape.value(kernel).shape() != [branch.width, bw] {
            return Err(shape_err(
                "sprm",
                format!("kernel {k} has shape {:?}, expected [{}, {bw}]", tape.value(kernel).shape(), branch.width),
            ));
        }
        let slice = tape.slice_cols(x, k * bw, bw)?;
        parts.push(tape.depthwise_conv1d(slice, kernel, branch.dilation, cfg.causal_sprm)?);
    }
    let h_p = tape.concat_cols(&parts)?;

    let q = tape.matmul(h_p, w.w_q)?;
    let k = tape.matmul(w.prototypes, w.w_k)?;
    let v = tape.matmul(w.prototypes, w.w_v)?;
    let dk = cfg.head_dim();
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attention = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let s = tape.matmul_nt_as(Kernel::PrototypeAttention, qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, RowMask::None)?;
        heads.push(tape.matmul_as(Kernel::PrototypeAttention, a, vh)?);
        attention.push(a);
    }
    Ok(SprmOutput {
        output: tape.concat_cols(&heads)?,
        attention,
    })
}
