//! Program file format (JSON).
//!
//! ```json
//! {
//!   "version": 1,
//!   "vec_size": 4,
//!   "constants": [{"id": 2, "type": "INTEGER_CONST", "scale": 0, "elements": [1]}],
//!   "inputs": [{"id": 0, "type": "VECTOR_CIPHER", "scale": 30}],
//!   "outputs": [{"id": 3, "scale": 30}],
//!   "insts": [{"id": 3, "op_code": "ROTATE_LEFT", "args": [0, 2]}]
//! }
//! ```
//!
//! Scales are log2. Ids are arbitrary distinct integers on load; on save they
//! are dense arena indices and `insts` are written in topological order, so a
//! saved program reloads to an identical [`Program`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{EvaError, Result};
use crate::ir::{Node, NodeId, NodeKind, ObjectType, OpCode, Output, Program, ValueType};

pub const FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileProgram {
    #[serde(default = "default_version")]
    version: u32,
    vec_size: usize,
    #[serde(default)]
    constants: Vec<FileConstant>,
    #[serde(default)]
    inputs: Vec<FileInput>,
    #[serde(default)]
    outputs: Vec<FileOutput>,
    #[serde(default)]
    insts: Vec<FileInst>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConstant {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    scale: f64,
    elements: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileInput {
    id: u64,
    #[serde(rename = "type")]
    ty: String,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOutput {
    id: u64,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileInst {
    id: u64,
    op_code: String,
    args: Vec<u64>,
}

fn object_type(s: &str) -> Result<ObjectType> {
    ObjectType::from_name(s).ok_or_else(|| EvaError::Parse(format!("unknown object type {s:?}")))
}

pub fn load_program(text: &str) -> Result<Program> {
    let f: FileProgram = serde_json::from_str(text).map_err(|e| EvaError::Parse(e.to_string()))?;
    if f.version != FORMAT_VERSION {
        return Err(EvaError::Parse(format!("unsupported format version {}", f.version)));
    }
    enum Raw<'a> {
        C(&'a FileConstant),
        I(&'a FileInput),
        X(&'a FileInst),
    }
    let mut raw: Vec<(u64, Raw)> = Vec::new();
    raw.extend(f.constants.iter().map(|c| (c.id, Raw::C(c))));
    raw.extend(f.inputs.iter().map(|c| (c.id, Raw::I(c))));
    raw.extend(f.insts.iter().map(|c| (c.id, Raw::X(c))));
    raw.sort_by_key(|r| r.0);
    if let Some(w) = raw.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(EvaError::Parse(format!("duplicate node id {}", w[0].0)));
    }
    let index: HashMap<u64, NodeId> = raw.iter().enumerate().map(|(i, r)| (r.0, NodeId(i as u32))).collect();
    let mut nodes = Vec::with_capacity(raw.len());
    for (i, (_, r)) in raw.iter().enumerate() {
        let here = NodeId(i as u32);
        nodes.push(match r {
            Raw::C(c) => {
                let obj = object_type(&c.ty)?;
                if obj.value_type() == ValueType::Cipher {
                    return Err(EvaError::Parse(format!("constant {} cannot be {}", c.id, c.ty)));
                }
                Node {
                    kind: NodeKind::Constant { obj, scale: c.scale, values: c.elements.clone() },
                    params: vec![],
                    ty: obj.value_type(),
                }
            }
            Raw::I(c) => {
                let obj = object_type(&c.ty)?;
                Node { kind: NodeKind::Input { obj, scale: c.scale }, params: vec![], ty: obj.value_type() }
            }
            Raw::X(x) => {
                let op = OpCode::from_name(&x.op_code)?;
                let params = x
                    .args
                    .iter()
                    .map(|a| index.get(a).copied().ok_or(EvaError::DanglingReference { node: here, target: *a }))
                    .collect::<Result<Vec<_>>>()?;
                Node { kind: NodeKind::Inst(op), params, ty: ValueType::Cipher }
            }
        });
    }
    let outputs = f
        .outputs
        .iter()
        .map(|o| {
            let node = index.get(&o.id).copied().ok_or_else(|| EvaError::Parse(format!("output references undefined node {}", o.id)))?;
            Ok(Output { node, scale: o.scale })
        })
        .collect::<Result<Vec<_>>>()?;
    Program::from_nodes(f.vec_size, nodes, outputs)
}

pub fn save_program(p: &Program) -> Result<String> {
    let mut f = FileProgram {
        version: FORMAT_VERSION,
        vec_size: p.vec_size(),
        constants: vec![],
        inputs: vec![],
        outputs: p.outputs.iter().map(|o| FileOutput { id: o.node.0 as u64, scale: o.scale }).collect(),
        insts: vec![],
    };
    for (id, n) in p.nodes() {
        match &n.kind {
            NodeKind::Constant { obj, scale, values } => f.constants.push(FileConstant {
                id: id.0 as u64,
                ty: obj.name().to_string(),
                scale: *scale,
                elements: values.clone(),
            }),
            NodeKind::Input { obj, scale } => {
                f.inputs.push(FileInput { id: id.0 as u64, ty: obj.name().to_string(), scale: *scale })
            }
            NodeKind::Inst(_) => {}
        }
    }
    for id in p.topo_order()? {
        if let NodeKind::Inst(op) = p.node(id).kind {
            f.insts.push(FileInst {
                id: id.0 as u64,
                op_code: op.name().to_string(),
                args: p.node(id).params.iter().map(|a| a.0 as u64).collect(),
            });
        }
    }
    serde_json::to_string_pretty(&f).map_err(|e| EvaError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const X2Y3: &str = r#"{
      "vec_size": 4,
      "inputs": [{"id": 10, "type": "VECTOR_CIPHER", "scale": 60},
                 {"id": 20, "type": "VECTOR_CIPHER", "scale": 30}],
      "outputs": [{"id": 70, "scale": 30}],
      "insts": [{"id": 70, "op_code": "MULTIPLY", "args": [30, 50]},
                {"id": 30, "op_code": "MULTIPLY", "args": [10, 10]},
                {"id": 40, "op_code": "MULTIPLY", "args": [20, 20]},
                {"id": 50, "op_code": "MULTIPLY", "args": [40, 20]}]
    }"#;

    #[test]
    fn loads_sparse_unordered_ids() {
        let p = load_program(X2Y3).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.count_op(OpCode::Multiply), 4);
        assert_eq!(p.outputs[0].node, NodeId(5));
    }

    #[test]
    fn round_trip_is_exact() {
        let p = load_program(X2Y3).unwrap();
        let text = save_program(&p).unwrap();
        assert_eq!(load_program(&text).unwrap(), p);
        assert_eq!(save_program(&load_program(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn empty_program() {
        let p = Program::new(8).unwrap();
        let text = save_program(&p).unwrap();
        assert_eq!(load_program(&text).unwrap(), p);
    }

    #[test]
    fn rejections() {
        let dangling = X2Y3.replace("[30, 50]", "[30, 99]");
        assert!(matches!(load_program(&dangling), Err(EvaError::DanglingReference { target: 99, .. })));
        for op in ["SUM", "NORMALIZE_SCALE", "UNDEFINED"] {
            let t = X2Y3.replace(r#""op_code": "MULTIPLY", "args": [10, 10]"#, &format!(r#""op_code": "{op}", "args": [10, 10]"#));
            assert!(matches!(load_program(&t), Err(EvaError::UnsupportedOpcode(_))), "{op}");
        }
        let cyc = X2Y3.replace("[10, 10]", "[10, 70]");
        assert!(matches!(load_program(&cyc), Err(EvaError::Cycle(_))));
        assert!(matches!(load_program(&X2Y3.replace("\"vec_size\": 4", "\"vec_size\": 3")), Err(EvaError::VecSize(3))));
        assert!(matches!(load_program(&X2Y3.replace("[40, 20]", "[40]")), Err(EvaError::Arity { .. })));
        assert!(matches!(load_program("{"), Err(EvaError::Parse(_))));
        assert!(matches!(load_program(&X2Y3.replace("\"id\": 40", "\"id\": 30")), Err(EvaError::Parse(_))));
    }

    #[test]
    fn copy_is_accepted() {
        let t = X2Y3.replace(r#""op_code": "MULTIPLY", "args": [30, 50]"#, r#""op_code": "COPY", "args": [30]"#);
        let p = load_program(&t).unwrap();
        assert_eq!(p.count_op(OpCode::Copy), 1);
    }
}
