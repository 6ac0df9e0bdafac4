//! Branch encoders: small stacks of [conv3x3 -> GELU -> stride-2 conv3x3 ->
//! GELU] stages. One halving per stage, so total stride is 2^stages.

use super::Bound;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, ValueId};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channel width after each stage; the last width is the output C.
    pub widths: Vec<usize>,
    pub c: usize,
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("bad backbone widths {:?}", self.widths)));
        }
        if *self.widths.last().unwrap() != self.c {
            return Err(Error::config(format!(
                "last backbone width {} must equal output channels {}",
                self.widths.last().unwrap(),
                self.c
            )));
        }
        Ok(())
    }
}

/// Adds one branch's weights under `prefix`: per stage, a stride-1 and a
/// stride-2 3x3 conv with bias. Kaiming fan-in init, zero biases.
pub fn init<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    cfg: &BackboneConfig,
    rng: &mut impl Rng,
) {
    let mut cin = in_channels;
    for (i, &width) in cfg.widths.iter().enumerate() {
        for (tag, ci, co) in [("a", cin, width), ("b", width, width)] {
            let std = (2.0 / (9.0 * ci as f64)).sqrt();
            store
                .add(format!("{prefix}.s{i}.{tag}.w"), Tensor::randn(vec![3, 3, ci, co], std, rng));
            store.add(format!("{prefix}.s{i}.{tag}.b"), Tensor::zeros(vec![co]));
        }
        cin = width;
    }
}

fn biased(tape: &mut Tape<impl Scalar>, x: ValueId, bias: ValueId) -> Result<ValueId> {
    let (h, w, c) = match tape.shape(x) {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape(format!("conv output must be [h,w,c], got {s:?}"))),
    };
    let flat = tape.reshape(x, vec![h * w, c])?;
    let add = tape.add_row(flat, bias)?;
    tape.reshape(add, vec![h, w, c])
}

/// image [H, W, C_in] -> feature [H/stride, W/stride, C].
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    prefix: &str,
    cfg: &BackboneConfig,
    image: ValueId,
) -> Result<ValueId> {
    let stride = cfg.stride();
    match tape.shape(image) {
        [h, w, _] if h % stride == 0 && w % stride == 0 => {}
        s => {
            return Err(Error::config(format!(
                "{prefix} input {s:?} not divisible by backbone stride {stride}"
            )))
        }
    }
    let mut x = image;
    for i in 0..cfg.widths.len() {
        for (tag, st) in [("a", 1), ("b", 2)] {
            let w = bound.get(&format!("{prefix}.s{i}.{tag}.w"))?;
            let b = bound.get(&format!("{prefix}.s{i}.{tag}.b"))?;
            x = tape.conv2d(x, w, (st, st), (1, 1))?;
            x = biased(tape, x, b)?;
            x = tape.gelu(x)?;
        }
    }
    Ok(x)
}
