//! Gate-sharing levels: per sample, per mini-batch, or per group of a
//! shuffled mini-batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound for group sizes under [`GroupStrategy::Random`].
pub const RANDOM_MAX_GROUP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GroupStrategy {
    Sample,
    Batch,
    /// Recursive halving, see [`recursive_log2_split`].
    Recursive,
    /// Fixed-size groups of `k` plus a remainder.
    Avg(usize),
    /// Sizes drawn uniformly from `1..=64`.
    Random,
}

impl fmt::Display for GroupStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupStrategy::Sample => f.write_str("sample"),
            GroupStrategy::Batch => f.write_str("batch"),
            GroupStrategy::Recursive => f.write_str("recursive"),
            GroupStrategy::Avg(k) => write!(f, "avg-{k}"),
            GroupStrategy::Random => f.write_str("random"),
        }
    }
}

impl FromStr for GroupStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(GroupStrategy::Sample),
            "batch" => Ok(GroupStrategy::Batch),
            "recursive" | "group" => Ok(GroupStrategy::Recursive),
            "random" => Ok(GroupStrategy::Random),
            _ => {
                let k = s
                    .strip_prefix("avg-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown gate strategy {s:?}")))?;
                if k == 0 {
                    return Err(Error::Config("avg-k needs k >= 1".into()));
                }
                Ok(GroupStrategy::Avg(k))
            }
        }
    }
}

impl TryFrom<String> for GroupStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GroupStrategy> for String {
    fn from(s: GroupStrategy) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub permutation: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub strategy: GroupStrategy,
}

impl GroupPlan {
    pub fn batch_size(&self) -> usize {
        self.permutation.len()
    }

    /// Row indices of every group: consecutive runs of the permutation.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.group_sizes.len());
        let mut at = 0;
        for &s in &self.group_sizes {
            out.push(self.permutation[at..at + s].to_vec());
            at += s;
        }
        out
    }
}

/// Emits half the remaining size (rounded up) and recurses on the other
/// half until one sample remains: 8 gives `[4, 2, 1, 1]`, 6 gives
/// `[3, 2, 1]`.
pub fn recursive_log2_split(b: usize) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::Param("cannot split an empty batch".into()));
    }
    let mut out = Vec::new();
    let mut r = b;
    while r > 1 {
        out.push(r.div_ceil(2));
        r /= 2;
    }
    out.push(1);
    Ok(out)
}

pub fn build_plan(b: usize, strategy: GroupStrategy, rng: &mut RngState) -> Result<GroupPlan> {
    if b == 0 {
        return Err(Error::Param("cannot plan an empty batch".into()));
    }
    let identity: Vec<usize> = (0..b).collect();
    let (permutation, group_sizes) = match strategy {
        GroupStrategy::Sample => (identity, vec![1; b]),
        GroupStrategy::Batch => (identity, vec![b]),
        GroupStrategy::Recursive => (rng.permutation(b), recursive_log2_split(b)?),
        GroupStrategy::Avg(k) => {
            if k == 0 {
                return Err(Error::Param("avg-k needs k >= 1".into()));
            }
            let mut sizes = vec![k; b / k];
            if b % k != 0 {
                sizes.push(b % k);
            }
            (rng.permutation(b), sizes)
        }
        GroupStrategy::Random => {
            let perm = rng.permutation(b);
            let mut sizes = Vec::new();
            let mut left = b;
            while left > 0 {
                let s = rng.range_inclusive(1, RANDOM_MAX_GROUP).min(left);
                sizes.push(s);
                left -= s;
            }
            (perm, sizes)
        }
    };
    Ok(GroupPlan { permutation, group_sizes, strategy })
}

fn check_plan(plan: &GroupPlan, b: usize) -> Result<()> {
    if plan.batch_size() != b || plan.group_sizes.iter().sum::<usize>() != b {
        return Err(Error::Shape(format!("group plan covers {} rows, batch has {b}", plan.batch_size())));
    }
    Ok(())
}

/// Replaces each row of `logits` by the mean over its group.
pub fn apply_plan<T: Scalar>(tape: &mut Tape<T>, logits: Var, plan: &GroupPlan) -> Result<Var> {
    check_plan(plan, tape.shape(logits)[0])?;
    if plan.group_sizes.iter().all(|&s| s == 1) {
        return Ok(logits);
    }
    tape.group_mean(logits, &plan.groups())
}

/// [`apply_plan`] on a plain tensor.
pub fn apply_plan_tensor<T: Scalar>(logits: &Tensor<T>, plan: &GroupPlan) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let out = apply_plan(&mut tape, v, plan)?;
    Ok(tape.value(out).clone())
}
