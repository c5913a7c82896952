//! Graphviz export.

use std::fmt::Write;

use crate::error::Result;
use crate::ir::{NodeKind, Program};
use crate::meta;

/// Renders the program as a `digraph`, labelling each node with its opcode or
/// source kind and its scale; outputs are drawn as double octagons.
pub fn export_dot(p: &Program) -> Result<String> {
    let scales = meta::scales(p)?;
    let mut s = String::from("digraph eva {\n  rankdir=TB;\n");
    for (id, n) in p.nodes() {
        let (label, shape) = match &n.kind {
            NodeKind::Input { obj, .. } => (format!("input {}", obj.name()), "box"),
            NodeKind::Constant { obj, values, .. } if values.len() == 1 => {
                (format!("{} {}", obj.name(), values[0]), "ellipse")
            }
            NodeKind::Constant { obj, values, .. } => (format!("{} [{}]", obj.name(), values.len()), "ellipse"),
            NodeKind::Inst(op) => (op.name().to_string(), "oval"),
        };
        let shape = if p.outputs.iter().any(|o| o.node == id) { "doubleoctagon" } else { shape };
        let _ = writeln!(s, "  n{id} [label=\"{id}: {label}\\n2^{}\", shape={shape}];", scales[id.index()]);
    }
    for (id, n) in p.nodes() {
        for (i, q) in n.params.iter().enumerate() {
            let _ = writeln!(s, "  n{q} -> n{id} [label=\"{i}\"];");
        }
    }
    s.push_str("}\n");
    Ok(s)
}
