use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::numcore::{Graph, NodeId};

/// Bitwidths a learned allocation may use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllowedBits {
    AnyInteger { min: u32, max: u32 },
    Set(Vec<u32>),
}

impl Default for AllowedBits {
    fn default() -> Self {
        AllowedBits::AnyInteger { min: 2, max: 8 }
    }
}

impl AllowedBits {
    /// Sorts and deduplicates a set; rejects empty sets and members below 2.
    pub fn set(mut members: Vec<u32>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        let a = AllowedBits::Set(members);
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AllowedBits::AnyInteger { min, max } if *min >= 2 && min <= max && *max <= 32 => Ok(()),
            AllowedBits::Set(m) if !m.is_empty() && m[0] >= 2 && *m.last().unwrap() <= 32 && m.windows(2).all(|w| w[0] < w[1]) => {
                Ok(())
            }
            other => Err(QuantError::Config(format!("invalid allowed bitwidths {other:?}"))),
        }
    }

    pub fn max(&self) -> u32 {
        match self {
            AllowedBits::AnyInteger { max, .. } => *max,
            AllowedBits::Set(m) => *m.last().expect("validated nonempty"),
        }
    }

    pub fn min(&self) -> u32 {
        match self {
            AllowedBits::AnyInteger { min, .. } => *min,
            AllowedBits::Set(m) => m[0],
        }
    }

    pub fn contains(&self, b: u32) -> bool {
        match self {
            AllowedBits::AnyInteger { min, max } => (*min..=*max).contains(&b),
            AllowedBits::Set(m) => m.contains(&b),
        }
    }

    /// Members in increasing order.
    pub fn members(&self) -> Vec<u32> {
        match self {
            AllowedBits::AnyInteger { min, max } => (*min..=*max).collect(),
            AllowedBits::Set(m) => m.clone(),
        }
    }
}

/// Projects a continuous bitwidth onto the allowed bitwidths: round half
/// away from zero and clamp for integer ranges, nearest member (ties to the
/// smaller one) for sets.
pub fn project_bits(b_cont: f64, allowed: &AllowedBits) -> u32 {
    match allowed {
        AllowedBits::AnyInteger { min, max } => b_cont.round().clamp(*min as f64, *max as f64) as u32,
        AllowedBits::Set(members) => {
            let mut best = members[0];
            for &m in &members[1..] {
                if (b_cont - m as f64).abs() < (b_cont - best as f64).abs() {
                    best = m;
                }
            }
            best
        }
    }
}

/// `project_bits` as a graph op with a straight-through backward pass.
pub fn project_bits_ste(g: &mut Graph, b_cont: NodeId, allowed: &AllowedBits) -> NodeId {
    let allowed = allowed.clone();
    g.discretize_ste(b_cont, "project_bits", move |v| project_bits(v, &allowed) as f64)
}

/// Size-weighted mean `Σ bits·size / Σ size`.
pub fn avg_bits(bits: &[f64], sizes: &[usize]) -> Result<f64> {
    check_sizes(bits.len(), sizes)?;
    let total: usize = sizes.iter().sum();
    Ok(bits.iter().zip(sizes).map(|(b, &s)| b * s as f64).sum::<f64>() / total as f64)
}

fn check_sizes(n: usize, sizes: &[usize]) -> Result<()> {
    if n != sizes.len() {
        return Err(QuantError::Dimension {
            op: "avg_bits",
            lhs: vec![n],
            rhs: vec![sizes.len()],
        });
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(QuantError::Contract("avg_bits needs nonempty, positive sizes".into()));
    }
    Ok(())
}

/// Differentiable `avg_bits` over scalar bitwidth nodes.
pub fn avg_bits_node(g: &mut Graph, bits: &[NodeId], sizes: &[usize]) -> Result<NodeId> {
    check_sizes(bits.len(), sizes)?;
    let total: usize = sizes.iter().sum();
    let mut acc: Option<NodeId> = None;
    for (&b, &s) in bits.iter().zip(sizes) {
        let term = g.scale(b, s as f64 / total as f64);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let node = acc.expect("nonempty");
    g.reshape(node, &[])
}

/// `λ·max(avg − target, 0)`; the subgradient at the kink is 0.
pub fn hinge_penalty(g: &mut Graph, avg: NodeId, target: f64, lambda: f64) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(QuantError::Config(format!("penalty weight {lambda} < 0")));
    }
    let over = g.add_scalar(avg, -target);
    let r = g.relu(over);
    Ok(g.scale(r, lambda))
}

/// Scalar form of [`hinge_penalty`].
pub fn hinge(avg: f64, target: f64, lambda: f64) -> f64 {
    lambda * (avg - target).max(0.0)
}
