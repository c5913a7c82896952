//! Forward metadata propagation: scale, polynomial count, rescale chain.
//!
//! These are the static semantics shared by the passes, the validator, parameter
//! selection and the executor's quantized mode.

use crate::error::{EvaError, Result};
use crate::ir::{ChainElem, NodeId, NodeKind, OpCode, Program, RescaleChain};

/// log2 of a Rescale node's divisor operand. The operand is a constant whose
/// first element is the divisor itself (e.g. 2^60).
pub fn divisor_log2(p: &Program, rescale: NodeId) -> Result<f64> {
    let n = p.node(rescale);
    let d = n.params.get(1).map(|&c| p.node(c)).and_then(|c| c.constant_values()).and_then(|v| v.first());
    match d {
        Some(&d) if d > 0.0 && d.is_finite() => {
            let l = d.log2();
            if l.fract() != 0.0 {
                return Err(EvaError::malformed(rescale, format!("divisor {d} is not a power of two")));
            }
            Ok(l)
        }
        _ => Err(EvaError::malformed(rescale, "rescale divisor must be a positive constant")),
    }
}

/// Scale (log2) of `id` given the already-computed scales of its operands.
pub fn node_scale(p: &Program, id: NodeId, scales: &[f64]) -> Result<f64> {
    let n = p.node(id);
    let s = |i: usize| scales[n.params[i].index()];
    Ok(match &n.kind {
        NodeKind::Input { scale, .. } | NodeKind::Constant { scale, .. } => *scale,
        NodeKind::Inst(op) => match op {
            OpCode::Multiply => s(0) + s(1),
            OpCode::Rescale => s(0) - divisor_log2(p, id)?,
            OpCode::Add | OpCode::Sub => {
                let (a, b) = (p.node(n.params[0]).ty.is_cipher(), p.node(n.params[1]).ty.is_cipher());
                match (a, b) {
                    // A plaintext operand is encoded at the ciphertext's scale.
                    (true, false) => s(0),
                    (false, true) => s(1),
                    _ => s(0).max(s(1)),
                }
            }
            _ => s(0),
        },
    })
}

pub fn scales(p: &Program) -> Result<Vec<f64>> {
    let mut out = vec![0.0; p.len()];
    for id in p.topo_order()? {
        out[id.index()] = node_scale(p, id, &out)?;
    }
    Ok(out)
}

/// Polynomial count of `id`; 0 for non-cipher values.
pub fn node_npoly(p: &Program, id: NodeId, npoly: &[u32]) -> u32 {
    let n = p.node(id);
    if !n.ty.is_cipher() {
        return 0;
    }
    let cipher: Vec<u32> =
        n.params.iter().filter(|q| p.node(**q).ty.is_cipher()).map(|q| npoly[q.index()]).collect();
    match n.kind {
        NodeKind::Input { .. } | NodeKind::Constant { .. } => 2,
        NodeKind::Inst(OpCode::Relinearize) => 2,
        NodeKind::Inst(OpCode::Multiply) if cipher.len() == 2 => cipher[0] + cipher[1] - 1,
        NodeKind::Inst(_) => cipher.into_iter().max().unwrap_or(2),
    }
}

pub fn npolys(p: &Program) -> Result<Vec<u32>> {
    let mut out = vec![0; p.len()];
    for id in p.topo_order()? {
        out[id.index()] = node_npoly(p, id, &out);
    }
    Ok(out)
}

/// Conforming rescale chains of every cipher node.
#[derive(Clone, Debug)]
pub struct Chains {
    /// `None` for non-cipher nodes.
    pub chain: Vec<Option<RescaleChain>>,
    /// Nodes whose cipher operands arrive with unequal chains, with both chains.
    pub conflicts: Vec<(NodeId, RescaleChain, RescaleChain)>,
}

impl Chains {
    pub fn level(&self, id: NodeId) -> usize {
        self.chain[id.index()].as_ref().map_or(0, |c| c.len())
    }
}

pub fn chains(p: &Program) -> Result<Chains> {
    let mut chain: Vec<Option<RescaleChain>> = vec![None; p.len()];
    let mut conflicts = Vec::new();
    for id in p.topo_order()? {
        let n = p.node(id);
        if !n.ty.is_cipher() {
            continue;
        }
        let c = match n.kind {
            NodeKind::Input { .. } | NodeKind::Constant { .. } => RescaleChain::default(),
            NodeKind::Inst(op) => {
                let mut operands = n.params.iter().filter_map(|q| chain[q.index()].as_ref());
                let mut acc = operands.next().cloned().unwrap_or_default();
                for other in operands {
                    if acc.conforms(other) {
                        acc = acc.merge(other);
                    } else {
                        conflicts.push((id, acc.clone(), other.clone()));
                    }
                }
                match op {
                    OpCode::Rescale => acc.pushed(ChainElem::Div(divisor_log2(p, id)?)),
                    OpCode::ModSwitch => acc.pushed(ChainElem::Inf),
                    _ => acc,
                }
            }
        };
        chain[id.index()] = Some(c);
    }
    Ok(Chains { chain, conflicts })
}

/// Chain length of every node (0 for plaintext).
pub fn levels(p: &Program) -> Result<Vec<usize>> {
    let c = chains(p)?;
    Ok(p.ids().map(|id| c.level(id)).collect())
}
