//! Pre-norm transformer encoder: x + MSA(LN(x)), then + FFN(LN(.)).
//! Heads attend over d_k = D/heads column slices; attention is full
//! bidirectional over the whole sequence, no masking.

use super::{Bound, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tape, Tensor, ValueId};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Adds `depth` layers of weights: QKV and output projections, FFN, and two
/// layer-norm parameter sets per layer.
pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
    let (d, f) = (cfg.d, cfg.d * cfg.ffn_mult);
    for l in 0..cfg.depth {
        let p = |name: &str| format!("enc.l{l}.{name}");
        store.add(p("ln1.g"), Tensor::full(vec![d], lit::<T>(1.0)));
        store.add(p("ln1.b"), Tensor::zeros(vec![d]));
        for w in ["q.w", "k.w", "v.w"] {
            store.add(p(w), Tensor::randn(vec![d, d], 0.02, rng));
        }
        store.add(p("o.w"), Tensor::randn(vec![d, d], 0.02, rng));
        store.add(p("o.b"), Tensor::zeros(vec![d]));
        store.add(p("ln2.g"), Tensor::full(vec![d], lit::<T>(1.0)));
        store.add(p("ln2.b"), Tensor::zeros(vec![d]));
        store.add(p("f1.w"), Tensor::randn(vec![d, f], 0.02, rng));
        store.add(p("f1.b"), Tensor::zeros(vec![f]));
        store.add(p("f2.w"), Tensor::randn(vec![f, d], 0.02, rng));
        store.add(p("f2.b"), Tensor::zeros(vec![d]));
    }
}

/// One encoder layer. Pushes each head's attention matrix id onto `attn`.
fn layer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    l: usize,
    x: ValueId,
    attn: &mut Vec<ValueId>,
) -> Result<ValueId> {
    let p = |name: &str| format!("enc.l{l}.{name}");
    let dk = cfg.d / cfg.heads;
    let scale = lit::<T>(1.0 / (dk as f64).sqrt());

    let ln1 = {
        let g = bound.get(&p("ln1.g"))?;
        let b = bound.get(&p("ln1.b"))?;
        tape.layer_norm(x, g, b, lit::<T>(LN_EPS))?
    };
    let q = tape.matmul(ln1, bound.get(&p("q.w"))?)?;
    let k = tape.matmul(ln1, bound.get(&p("k.w"))?)?;
    let v = tape.matmul(ln1, bound.get(&p("v.w"))?)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for hh in 0..cfg.heads {
        let qh = tape.slice_cols(q, hh * dk, dk)?;
        let kh = tape.slice_cols(k, hh * dk, dk)?;
        let vh = tape.slice_cols(v, hh * dk, dk)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.softmax(scaled, 1)?;
        attn.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let proj = tape.matmul(cat, bound.get(&p("o.w"))?)?;
    let proj = tape.add_row(proj, bound.get(&p("o.b"))?)?;
    let x = tape.add(x, proj)?;

    let ln2 = {
        let g = bound.get(&p("ln2.g"))?;
        let b = bound.get(&p("ln2.b"))?;
        tape.layer_norm(x, g, b, lit::<T>(LN_EPS))?
    };
    let f = tape.matmul(ln2, bound.get(&p("f1.w"))?)?;
    let f = tape.add_row(f, bound.get(&p("f1.b"))?)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, bound.get(&p("f2.w"))?)?;
    let f = tape.add_row(f, bound.get(&p("f2.b"))?)?;
    tape.add(x, f)
}

/// Applies the whole stack. Depth 0 is the identity.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    mut x: ValueId,
    attn: &mut Vec<ValueId>,
) -> Result<ValueId> {
    match tape.shape(x) {
        [_, d] if *d == cfg.d => {}
        s => return Err(Error::shape(format!("encoder input must be [L,{}], got {s:?}", cfg.d))),
    }
    for l in 0..cfg.depth {
        x = layer(tape, bound, cfg, l, x, attn)?;
    }
    Ok(x)
}
