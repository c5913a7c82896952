//! Encryption-parameter and rotation-key selection for compiled programs.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{EvaError, Result};
use crate::ir::{ChainElem, OpCode, Program};
use crate::meta;

#[derive(Clone, Debug)]
pub struct CompilationResult {
    pub program: Program,
    /// Coefficient-modulus bit sizes, special prime first.
    pub bit_sizes: Vec<u32>,
    /// Left-rotation steps normalized into `[0, vec_size)`.
    pub rotation_steps: BTreeSet<i64>,
    /// Modulus chain length including the special prime.
    pub r: usize,
    /// Sum of bit sizes without the special prime.
    pub log_q: u64,
    /// Polynomial degree from [`poly_degree_stub`]; not a security claim.
    pub poly_degree: usize,
    pub sf: f64,
    pub waterline: f64,
}

/// Serializable summary, used for `.params` sidecars and json-lines output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSummary {
    pub bits: Vec<u32>,
    pub rotations: Vec<i64>,
    pub r: usize,
    #[serde(rename = "logQ")]
    pub log_q: u64,
    #[serde(rename = "N")]
    pub poly_degree: usize,
}

impl CompilationResult {
    pub fn summary(&self) -> ParamSummary {
        ParamSummary {
            bits: self.bit_sizes.clone(),
            rotations: self.rotation_steps.iter().copied().collect(),
            r: self.r,
            log_q: self.log_q,
            poly_degree: self.poly_degree,
        }
    }
}

impl ParamSummary {
    /// The three-line text form: `bits: [..]`, `rotations: {..}`, `r: .. logQ: ..`.
    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(", ");
        format!(
            "bits: [{}]\nrotations: {{{}}}\nr: {} logQ: {}\n",
            join(&self.bits.iter().map(|b| b.to_string()).collect::<Vec<_>>()),
            join(&self.rotations.iter().map(|b| b.to_string()).collect::<Vec<_>>()),
            self.r,
            self.log_q
        )
    }
}

/// Per-output requirement: resolved chain and log2 of scale(o)·s_o.
struct Need {
    chain: Vec<ChainElem>,
    total: f64,
}

fn needs(p: &Program) -> Result<Vec<Need>> {
    let scales = meta::scales(p)?;
    let chains = meta::chains(p)?;
    let mut out = Vec::new();
    for o in &p.outputs {
        let Some(c) = &chains.chain[o.node.index()] else { continue };
        let total = scales[o.node.index()] + o.scale;
        if total <= 0.0 {
            return Err(EvaError::Params(format!("output {} has scale 2^{total} below 1", o.node)));
        }
        if total.fract() != 0.0 {
            return Err(EvaError::Params(format!("output {} scale 2^{total} is not an integral power", o.node)));
        }
        out.push(Need { chain: c.0.clone(), total });
    }
    Ok(out)
}

fn check_sf(sf: f64) -> Result<()> {
    if sf <= 0.0 || sf.fract() != 0.0 {
        return Err(EvaError::Params(format!("s_f = 2^{sf} must be a positive integral power")));
    }
    Ok(())
}

/// Bit sizes of the coefficient modulus: special prime `sf`, the output chains
/// (∞ resolved to any concrete divisor at that position, else `sf`), then
/// `sf`-sized factors of scale(o)·s_o with a smaller last factor. The last
/// factor is as small as every output's remaining budget allows.
pub fn select_parameters(p: &Program, sf: f64) -> Result<Vec<u32>> {
    check_sf(sf)?;
    bits_for(&needs(p)?, sf)
}

fn bits_for(needs: &[Need], sf: f64) -> Result<Vec<u32>> {
    let longest = needs.iter().map(|n| n.chain.len()).max().unwrap_or(0);
    let mut q: Vec<f64> = (0..longest)
        .map(|i| {
            needs
                .iter()
                .filter_map(|n| match n.chain.get(i) {
                    Some(ChainElem::Div(d)) => Some(*d),
                    _ => None,
                })
                .next()
                .unwrap_or(sf)
        })
        .collect();
    let remaining = |q: &[f64], n: &Need| q[n.chain.len().min(q.len())..].iter().sum::<f64>();
    let target = needs.iter().map(|n| n.chain.len() + (n.total / sf).ceil() as usize).max().unwrap_or(0);
    while q.len() < target || needs.iter().any(|n| remaining(&q, n) < n.total) {
        q.push(sf);
    }
    if q.len() > longest {
        let head = &q[..q.len() - 1];
        let last = needs.iter().map(|n| n.total - remaining(head, n)).fold(1.0, f64::max);
        *q.last_mut().unwrap() = last.min(sf);
    }
    let mut bits = vec![sf as u32];
    for b in q {
        if b < 1.0 || b.fract() != 0.0 {
            return Err(EvaError::Params(format!("modulus factor 2^{b} is not a positive integral power")));
        }
        bits.push(b as u32);
    }
    Ok(bits)
}

/// r = max over outputs of 1 + |c_o| + ⌈log2(scale(o)·s_o) / log2(s_f)⌉.
pub fn chain_length_formula(p: &Program, sf: f64) -> Result<usize> {
    check_sf(sf)?;
    Ok(formula_for(&needs(p)?, sf))
}

fn formula_for(needs: &[Need], sf: f64) -> usize {
    needs.iter().map(|n| 1 + n.chain.len() + (n.total / sf).ceil() as usize).max().unwrap_or(1)
}

/// Distinct rotation steps as left rotations in `[0, vec_size)`.
pub fn select_rotation_steps(p: &Program) -> Result<BTreeSet<i64>> {
    let vs = p.vec_size() as i64;
    let mut out = BTreeSet::new();
    for (id, n) in p.nodes() {
        let Some(op) = n.op().filter(|o| o.is_rotate()) else { continue };
        let k = p.node(n.params[1]).constant_values().and_then(|v| v.first().copied()).unwrap_or(f64::NAN);
        if !k.is_finite() || k.fract() != 0.0 {
            return Err(EvaError::malformed(id, format!("rotation step {k} is not an integer")));
        }
        let k = k as i64;
        out.insert(match op {
            OpCode::RotateLeft => k.rem_euclid(vs),
            _ => (vs - k.rem_euclid(vs)).rem_euclid(vs),
        });
    }
    Ok(out)
}

/// Non-normative N table keyed by total modulus bits (special prime included),
/// following the usual 128-bit classical bounds, and at least twice vec_size.
pub fn poly_degree_stub(total_bits: u64, vec_size: usize) -> usize {
    const TABLE: [(u64, usize); 4] = [(218, 8192), (438, 16384), (881, 32768), (1761, 65536)];
    let by_bits = TABLE.iter().find(|(b, _)| total_bits <= *b).map_or(65536, |t| t.1);
    by_bits.max(2 * vec_size)
}

/// Parameter selection on a compiled program.
pub fn select(program: Program, sf: f64, waterline: f64) -> Result<CompilationResult> {
    check_sf(sf)?;
    let needs = needs(&program)?;
    let bit_sizes = bits_for(&needs, sf)?;
    let r = bit_sizes.len();
    let formula = formula_for(&needs, sf);
    let uniform = needs
        .iter()
        .all(|n| n.chain.iter().all(|e| matches!(e, ChainElem::Inf) || *e == ChainElem::Div(sf)));
    if uniform && r != formula {
        return Err(EvaError::Internal(format!("constructed r = {r} but closed form gives {formula}")));
    }
    let rotation_steps = select_rotation_steps(&program)?;
    let log_q: u64 = bit_sizes[1..].iter().map(|&b| b as u64).sum();
    let poly_degree = poly_degree_stub(log_q + bit_sizes[0] as u64, program.vec_size());
    Ok(CompilationResult { program, bit_sizes, rotation_steps, r, log_q, poly_degree, sf, waterline })
}
