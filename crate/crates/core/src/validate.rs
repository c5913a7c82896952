//! Static checks for executable programs.
//!
//! | id | checks |
//! |----|--------|
//! | C1 | cipher operands of every instruction carry equal rescale chains |
//! | C2 | cipher operands of Add/Sub carry equal scales |
//! | C3 | Multiply/Rotate cipher operands and cipher outputs have 2 polynomials |
//! | C4 | every Rescale divides by at most s_f |
//! | C5 | waterline band, only when a waterline is supplied (see [`check_waterline`]) |
//!
//! Violations are collected exhaustively; [`crate::passes::compile`] turns a
//! non-empty list into an error.

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::ir::{multiplicative_depth, NodeId, OpCode, Program, Use};
use crate::meta;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: u8,
    pub node: NodeId,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{} node={} {}", self.constraint, self.node, self.detail)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidateOptions {
    pub sf: f64,
    pub waterline: Option<f64>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { sf: crate::passes::DEFAULT_SF, waterline: None }
    }
}

fn v(constraint: u8, node: NodeId, detail: String) -> Violation {
    Violation { constraint, node, detail }
}

/// C1: equal chains at every multi-operand cipher instruction.
pub fn check_chains(p: &Program) -> Result<Vec<Violation>> {
    let ch = meta::chains(p)?;
    Ok(ch
        .conflicts
        .into_iter()
        .map(|(id, a, b)| v(1, id, format!("{} operand chains {a} vs {b}", p.node(id).op().map_or("?", |o| o.name()))))
        .collect())
}

/// C2 (equal scales at cipher Add/Sub) and C4 (rescale divisor cap).
pub fn check_scales(p: &Program, sf: f64) -> Result<Vec<Violation>> {
    let s = meta::scales(p)?;
    let mut out = Vec::new();
    for id in p.ids() {
        let n = p.node(id);
        match n.op() {
            Some(OpCode::Add | OpCode::Sub) => {
                let (a, b) = (n.params[0], n.params[1]);
                let both = p.node(a).ty.is_cipher() && p.node(b).ty.is_cipher();
                if both && s[a.index()] != s[b.index()] {
                    out.push(v(2, id, format!("operand scales 2^{} vs 2^{}", s[a.index()], s[b.index()])));
                }
            }
            Some(OpCode::Rescale) => {
                let d = meta::divisor_log2(p, id)?;
                if d > sf {
                    out.push(v(4, id, format!("rescale by 2^{d} exceeds s_f = 2^{sf}")));
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// C3: operands of Multiply and Rotate, and outputs, must be linear ciphertexts.
pub fn check_npoly(p: &Program) -> Result<Vec<Violation>> {
    let np = meta::npolys(p)?;
    let mut out = Vec::new();
    for id in p.ids() {
        let n = p.node(id);
        let strict = match n.op() {
            Some(OpCode::Multiply) => &n.params[..],
            Some(op) if op.is_rotate() => &n.params[..1],
            _ => continue,
        };
        for q in strict {
            if p.node(*q).ty.is_cipher() && np[q.index()] != 2 {
                out.push(v(3, id, format!("operand {q} has {} polynomials", np[q.index()])));
            }
        }
    }
    for o in &p.outputs {
        if p.node(o.node).ty.is_cipher() && np[o.node.index()] != 2 {
            out.push(v(3, o.node, format!("output has {} polynomials", np[o.node.index()])));
        }
    }
    Ok(out)
}

/// C5: waterline band. Every Rescale result is at or above `sw`, and the value
/// leaving each cipher Multiply (after its trailing Relinearize/Rescale run) is
/// below `sw + sf` unless its chain already equals the Multiply's
/// multiplicative depth, i.e. it could not have been rescaled further.
pub fn check_waterline(p: &Program, sf: f64, sw: f64) -> Result<Vec<Violation>> {
    let s = meta::scales(p)?;
    let lv = meta::levels(p)?;
    let depth = multiplicative_depth(p);
    let uses = p.uses();
    let mut out = Vec::new();
    for id in p.ids() {
        let n = p.node(id);
        if n.is_op(OpCode::Rescale) && s[id.index()] < sw {
            out.push(v(5, id, format!("rescaled to 2^{} below waterline 2^{sw}", s[id.index()])));
        }
        if !(n.is_op(OpCode::Multiply) && n.ty.is_cipher()) {
            continue;
        }
        let mut end = id;
        while let [Use::Param { node, arg: 0 }] = uses[end.index()][..] {
            if !matches!(p.node(node).op(), Some(OpCode::Relinearize | OpCode::Rescale)) {
                break;
            }
            end = node;
        }
        let (se, le) = (s[end.index()], lv[end.index()]);
        if se >= sw + sf && le < depth[id.index()] {
            out.push(v(
                5,
                id,
                format!("product leaves at 2^{se} ≥ 2^{} with chain {le} < depth {}", sw + sf, depth[id.index()]),
            ));
        }
    }
    Ok(out)
}

pub fn validate(p: &Program, opts: &ValidateOptions) -> Result<Vec<Violation>> {
    p.check_structure()?;
    let mut out = check_chains(p)?;
    out.extend(check_scales(p, opts.sf)?);
    out.extend(check_npoly(p)?);
    if let Some(sw) = opts.waterline {
        out.extend(check_waterline(p, opts.sf, sw)?);
    }
    out.sort_by_key(|x| (x.constraint, x.node));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::ProgramBuilder;

    #[test]
    fn cube_without_relinearize() {
        let mut b = ProgramBuilder::new(4);
        let x = b.input(20.0);
        let xx = b.mul(x, x);
        let x3 = b.mul(xx, x);
        b.output(x3, 20.0);
        let p = b.build();
        let vs = check_npoly(&p).unwrap();
        assert_eq!(vs.len(), 2);
        assert_eq!((vs[0].constraint, vs[0].node), (3, x3));
        assert!(vs[1].detail.starts_with("output"));
    }

    #[test]
    fn rescale_cap() {
        let mut b = ProgramBuilder::new(4);
        let x = b.input(61.0);
        let xx = b.mul(x, x);
        let r = b.rescale(xx, 61.0);
        b.output(r, 20.0);
        let vs = check_scales(&b.build(), 60.0).unwrap();
        assert_eq!(vs, vec![Violation { constraint: 4, node: r, detail: "rescale by 2^61 exceeds s_f = 2^60".into() }]);
    }

    #[test]
    fn plaintext_only_program_is_clean() {
        let mut b = ProgramBuilder::new(4);
        let a = b.plain_input(30.0);
        let c = b.constant(10.0, 2.0);
        let m = b.mul(a, c);
        let s = b.add(m, a);
        b.output(s, 30.0);
        assert!(validate(&b.build(), &ValidateOptions { sf: 60.0, waterline: Some(30.0) }).unwrap().is_empty());
    }

    #[test]
    fn rendering() {
        let x = Violation { constraint: 1, node: NodeId(7), detail: "MULTIPLY operand chains [60] vs []".into() };
        assert_eq!(x.to_string(), "C1 node=7 MULTIPLY operand chains [60] vs []");
    }

    #[test]
    fn checks_are_pure() {
        let p = crate::gen::random_program(&crate::gen::GenConfig::default(), 3);
        let before = p.clone();
        let o = ValidateOptions::default();
        assert_eq!(validate(&p, &o).unwrap(), validate(&p, &o).unwrap());
        assert_eq!(p, before);
    }
}
