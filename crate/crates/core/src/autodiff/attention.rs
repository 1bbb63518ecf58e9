//! Multi-head scaled dot-product self-attention composed from tape ops.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Projection matrices, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl<T: Scalar> Tape<T> {
    fn split_heads(&mut self, x: Var, b: usize, t: usize, heads: usize, dh: usize) -> Result<Var> {
        if heads == 1 {
            return self.reshape(x, &[b, t, dh]);
        }
        let x = self.reshape(x, &[b, t, heads, dh])?;
        let x = self.permute(x, &[0, 2, 1, 3])?;
        self.reshape(x, &[b * heads, t, dh])
    }

    /// Self-attention over `x [b, t, d]` with softmax over keys and scale
    /// `1/sqrt(d/heads)`.
    pub fn attention(&mut self, x: Var, heads: usize, w: &AttentionWeights) -> Result<Var> {
        let (b, t, d) = match *self.shape(x) {
            [b, t, d] => (b, t, d),
            ref s => return Err(Error::shape("attention", format!("expected (b,t,d), got {s:?}"))),
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {d} channels not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let q = self.linear(x, w.wq, None)?;
        let k = self.linear(x, w.wk, None)?;
        let v = self.linear(x, w.wv, None)?;
        let q = self.split_heads(q, b, t, heads, dh)?;
        let k = self.split_heads(k, b, t, heads, dh)?;
        let v = self.split_heads(v, b, t, heads, dh)?;

        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, T::one() / T::from_usize_lossy(dh).sqrt())?;
        let probs = self.softmax(scores)?;
        let ctx = self.bmm(probs, v, false)?;

        let ctx = if heads == 1 {
            ctx
        } else {
            let c = self.reshape(ctx, &[b, heads, t, dh])?;
            self.permute(c, &[0, 2, 1, 3])?
        };
        let ctx = self.reshape(ctx, &[b, t, d])?;
        self.linear(ctx, w.wo, None)
    }
}
