//! Feature maps to tokens: non-overlapping patches are flattened, linearly
//! projected to D, and given fixed 2D sine-cosine position codes plus a
//! learnable per-branch segment vector. Keypoint queries are learnable rows
//! with no positional term.

use super::{Bound, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tape, Tensor, ValueId};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Bu,
    Td,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Bu => "bu",
            Branch::Td => "td",
        }
    }
}

/// Which role a row of the assembled sequence plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Keypoint,
    Bu,
    Td,
}

/// Row layout of the assembled sequence: [keypoint queries ‖ BU ‖ TD].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub k: usize,
    pub n_bu: usize,
    pub n_td: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.k + self.n_bu + self.n_td
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, row: usize) -> Result<Segment> {
        if row < self.k {
            Ok(Segment::Keypoint)
        } else if row < self.k + self.n_bu {
            Ok(Segment::Bu)
        } else if row < self.len() {
            Ok(Segment::Td)
        } else {
            Err(Error::shape(format!("row {row} outside sequence of {}", self.len())))
        }
    }
}

/// Fixed 2D sine-cosine table for a (gh, gw) grid: rows enumerate grid cells
/// row-major; the first d/2 columns encode the cell row, the rest the cell
/// column, each as interleaved (sin, cos) pairs over a geometric frequency
/// ladder.
pub fn sincos_table<T: Scalar>(gh: usize, gw: usize, d: usize) -> Result<Tensor<T>> {
    if d % 4 != 0 || d == 0 {
        return Err(Error::config(format!("positional dim {d} must be divisible by 4")));
    }
    let half = d / 2;
    let pairs = half / 2;
    let mut data = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            for (pos, _) in [(r as f64, "row"), (c as f64, "col")] {
                for i in 0..pairs {
                    let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
                    data.push(lit::<T>((pos * omega).sin()));
                    data.push(lit::<T>((pos * omega).cos()));
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, d], data)
}

/// Adds the keypoint query table, per-branch patch projections, and segment
/// vectors. Query init std 0.02.
pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
    store.add("tok.kpt", Tensor::randn(vec![cfg.k, cfg.d], 0.02, rng));
    for branch in [Branch::Bu, Branch::Td] {
        let patch = match branch {
            Branch::Bu => cfg.bu_patch,
            Branch::Td => cfg.td_patch,
        };
        let patch_dim = patch.0 * patch.1 * cfg.c;
        store.add(
            format!("tok.{}.proj", branch.tag()),
            Tensor::randn(vec![patch_dim, cfg.d], 0.02, rng),
        );
        store.add(format!("tok.{}.seg", branch.tag()), Tensor::randn(vec![cfg.d], 0.02, rng));
    }
}

/// feature [H', W', C] -> tokens [N, D]: patches . proj + position + segment.
pub fn visual_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cfg: &ModelConfig,
    branch: Branch,
    feature: ValueId,
) -> Result<ValueId> {
    let patch = match branch {
        Branch::Bu => cfg.bu_patch,
        Branch::Td => cfg.td_patch,
    };
    let (gh, gw) = match tape.shape(feature) {
        [h, w, _] => (h / patch.0, w / patch.1),
        s => return Err(Error::shape(format!("feature must be [h,w,c], got {s:?}"))),
    };
    let patches = tape.gather_patches(feature, patch.0, patch.1)?;
    let proj = bound.get(&format!("tok.{}.proj", branch.tag()))?;
    let embedded = tape.matmul(patches, proj)?;
    let pos = tape.leaf(sincos_table::<T>(gh, gw, cfg.d)?, false);
    let placed = tape.add(embedded, pos)?;
    let seg = bound.get(&format!("tok.{}.seg", branch.tag()))?;
    tape.add_row(placed, seg)
}
