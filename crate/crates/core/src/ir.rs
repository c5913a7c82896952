//! Program graph: typed constant/input/instruction nodes over a fixed vector size.
//!
//! Nodes live in an arena indexed by [`NodeId`]. Passes only append nodes and
//! rewire edges, so ids stay stable across a compilation; the arena order is
//! not necessarily topological (use [`Program::topo_order`]).

use std::fmt;

use crate::error::{EvaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl serde::Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueType {
    Cipher,
    Vector,
    Scalar,
    Integer,
}

impl ValueType {
    pub fn is_cipher(self) -> bool {
        self == ValueType::Cipher
    }
}

/// Source-node type tag as it appears in program files. Kept on the node so
/// that files round-trip exactly (PLAIN and CONST behave identically).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectType {
    ScalarConst,
    ScalarPlain,
    ScalarCipher,
    VectorConst,
    VectorPlain,
    VectorCipher,
    IntegerConst,
}

impl ObjectType {
    pub const ALL: [ObjectType; 7] = [
        ObjectType::ScalarConst,
        ObjectType::ScalarPlain,
        ObjectType::ScalarCipher,
        ObjectType::VectorConst,
        ObjectType::VectorPlain,
        ObjectType::VectorCipher,
        ObjectType::IntegerConst,
    ];

    pub fn value_type(self) -> ValueType {
        use ObjectType::*;
        match self {
            ScalarCipher | VectorCipher => ValueType::Cipher,
            VectorConst | VectorPlain => ValueType::Vector,
            ScalarConst | ScalarPlain => ValueType::Scalar,
            IntegerConst => ValueType::Integer,
        }
    }

    pub fn name(self) -> &'static str {
        use ObjectType::*;
        match self {
            ScalarConst => "SCALAR_CONST",
            ScalarPlain => "SCALAR_PLAIN",
            ScalarCipher => "SCALAR_CIPHER",
            VectorConst => "VECTOR_CONST",
            VectorPlain => "VECTOR_PLAIN",
            VectorCipher => "VECTOR_CIPHER",
            IntegerConst => "INTEGER_CONST",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpCode {
    Negate,
    Add,
    Sub,
    Multiply,
    RotateLeft,
    RotateRight,
    Relinearize,
    ModSwitch,
    Rescale,
    /// Identity; accepted from files, never produced by the compiler.
    Copy,
}

impl OpCode {
    pub const ALL: [OpCode; 10] = [
        OpCode::Negate,
        OpCode::Add,
        OpCode::Sub,
        OpCode::Multiply,
        OpCode::RotateLeft,
        OpCode::RotateRight,
        OpCode::Relinearize,
        OpCode::ModSwitch,
        OpCode::Rescale,
        OpCode::Copy,
    ];

    pub fn arity(self) -> usize {
        use OpCode::*;
        match self {
            Negate | Relinearize | ModSwitch | Copy => 1,
            Add | Sub | Multiply | RotateLeft | RotateRight | Rescale => 2,
        }
    }

    /// Opcodes only the compiler may insert.
    pub fn is_compiler_only(self) -> bool {
        matches!(self, OpCode::Relinearize | OpCode::ModSwitch | OpCode::Rescale)
    }

    pub fn is_rotate(self) -> bool {
        matches!(self, OpCode::RotateLeft | OpCode::RotateRight)
    }

    pub fn name(self) -> &'static str {
        use OpCode::*;
        match self {
            Negate => "NEGATE",
            Add => "ADD",
            Sub => "SUB",
            Multiply => "MULTIPLY",
            RotateLeft => "ROTATE_LEFT",
            RotateRight => "ROTATE_RIGHT",
            Relinearize => "RELINEARIZE",
            ModSwitch => "MOD_SWITCH",
            Rescale => "RESCALE",
            Copy => "COPY",
        }
    }

    /// Parses a file opcode name. `SUM`, `NORMALIZE_SCALE` and `UNDEFINED`
    /// exist in the file schema but have no semantics and are rejected.
    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| EvaError::UnsupportedOpcode(s.to_string()))
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input { obj: ObjectType, scale: f64 },
    Constant { obj: ObjectType, scale: f64, values: Vec<f64> },
    Inst(OpCode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub params: Vec<NodeId>,
    pub ty: ValueType,
}

impl Node {
    pub fn op(&self) -> Option<OpCode> {
        match self.kind {
            NodeKind::Inst(op) => Some(op),
            _ => None,
        }
    }

    pub fn is_op(&self, op: OpCode) -> bool {
        self.op() == Some(op)
    }

    pub fn is_source(&self) -> bool {
        !matches!(self.kind, NodeKind::Inst(_))
    }

    /// Declared scale of an input or constant (log2).
    pub fn source_scale(&self) -> Option<f64> {
        match self.kind {
            NodeKind::Input { scale, .. } | NodeKind::Constant { scale, .. } => Some(scale),
            NodeKind::Inst(_) => None,
        }
    }

    pub fn constant_values(&self) -> Option<&[f64]> {
        match &self.kind {
            NodeKind::Constant { values, .. } => Some(values),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Output {
    pub node: NodeId,
    /// Desired output scale s_o (log2).
    pub scale: f64,
}

/// One consumer edge of a node: argument `arg` of `node`, or output slot `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Use {
    Param { node: NodeId, arg: usize },
    Output(usize),
}

/// Element of a rescale chain: a concrete divisor (log2) or the ModSwitch marker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChainElem {
    Div(f64),
    Inf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RescaleChain(pub Vec<ChainElem>);

impl RescaleChain {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pushed(&self, e: ChainElem) -> Self {
        let mut v = self.0.clone();
        v.push(e);
        RescaleChain(v)
    }

    /// Chain equality: same length, and each position matches or either side is ∞.
    pub fn conforms(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| match (a, b) {
                (ChainElem::Inf, _) | (_, ChainElem::Inf) => true,
                (ChainElem::Div(x), ChainElem::Div(y)) => x == y,
            })
    }

    /// Positionwise merge of two conforming chains, keeping concrete divisors over ∞.
    pub fn merge(&self, other: &Self) -> Self {
        RescaleChain(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| match a {
                    ChainElem::Inf => *b,
                    d => *d,
                })
                .collect(),
        )
    }
}

impl fmt::Display for RescaleChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match e {
                ChainElem::Div(d) => write!(f, "{d}")?,
                ChainElem::Inf => f.write_str("inf")?,
            }
        }
        f.write_str("]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    vec_size: usize,
    nodes: Vec<Node>,
    pub outputs: Vec<Output>,
}

impl Program {
    pub fn new(vec_size: usize) -> Result<Self> {
        if vec_size == 0 || !vec_size.is_power_of_two() {
            return Err(EvaError::VecSize(vec_size));
        }
        Ok(Program { vec_size, nodes: Vec::new(), outputs: Vec::new() })
    }

    /// Assembles a program from raw nodes, inferring instruction types and
    /// checking structure. Instruction `ty` fields are overwritten.
    pub fn from_nodes(vec_size: usize, nodes: Vec<Node>, outputs: Vec<Output>) -> Result<Self> {
        let mut p = Program::new(vec_size)?;
        p.nodes = nodes;
        p.outputs = outputs;
        p.check_structure()?;
        for id in p.topo_order()? {
            if let NodeKind::Inst(op) = p.nodes[id.index()].kind {
                let params = p.nodes[id.index()].params.clone();
                p.nodes[id.index()].ty = p.infer_type(op, &params);
            }
        }
        Ok(p)
    }

    pub fn vec_size(&self) -> usize {
        self.vec_size
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i as u32), n))
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(|(_, n)| matches!(n.kind, NodeKind::Input { .. })).map(|(id, _)| id)
    }

    pub fn constants(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(|(_, n)| matches!(n.kind, NodeKind::Constant { .. })).map(|(id, _)| id)
    }

    pub fn instructions(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(|(_, n)| !n.is_source()).map(|(id, _)| id)
    }

    pub fn count_op(&self, op: OpCode) -> usize {
        self.nodes.iter().filter(|n| n.is_op(op)).count()
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    pub fn add_input(&mut self, obj: ObjectType, scale: f64) -> NodeId {
        self.push(Node { kind: NodeKind::Input { obj, scale }, params: vec![], ty: obj.value_type() })
    }

    pub fn add_constant(&mut self, obj: ObjectType, scale: f64, values: Vec<f64>) -> NodeId {
        self.push(Node {
            kind: NodeKind::Constant { obj, scale, values },
            params: vec![],
            ty: obj.value_type(),
        })
    }

    /// Appends an instruction; checks arity and that referenced nodes exist.
    pub fn add_inst(&mut self, op: OpCode, params: Vec<NodeId>) -> Result<NodeId> {
        let id = NodeId(self.nodes.len() as u32);
        if params.len() != op.arity() {
            return Err(EvaError::Arity { node: id, op: op.name(), expected: op.arity(), got: params.len() });
        }
        if let Some(bad) = params.iter().find(|p| p.index() >= self.nodes.len()) {
            return Err(EvaError::DanglingReference { node: id, target: bad.0 as u64 });
        }
        let ty = self.infer_type(op, &params);
        Ok(self.push(Node { kind: NodeKind::Inst(op), params, ty }))
    }

    pub fn add_output(&mut self, node: NodeId, scale: f64) {
        self.outputs.push(Output { node, scale });
    }

    /// Result type of `op` over `params`: the "widest" operand type, where the
    /// step/divisor operand of Rotate/Rescale does not participate.
    pub(crate) fn infer_type(&self, op: OpCode, params: &[NodeId]) -> ValueType {
        let data_params = if op.is_rotate() || op == OpCode::Rescale { &params[..1] } else { params };
        let tys = data_params.iter().map(|p| self.nodes[p.index()].ty);
        let mut out = ValueType::Integer;
        for t in tys {
            out = match (out, t) {
                (ValueType::Cipher, _) | (_, ValueType::Cipher) => ValueType::Cipher,
                (ValueType::Vector, _) | (_, ValueType::Vector) => ValueType::Vector,
                (ValueType::Scalar, _) | (_, ValueType::Scalar) => ValueType::Scalar,
                _ => ValueType::Integer,
            };
        }
        out
    }

    /// Consumer edges of every node, including output slots.
    pub fn uses(&self) -> Vec<Vec<Use>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, n) in self.nodes() {
            for (arg, p) in n.params.iter().enumerate() {
                out[p.index()].push(Use::Param { node: id, arg });
            }
        }
        for (i, o) in self.outputs.iter().enumerate() {
            out[o.node.index()].push(Use::Output(i));
        }
        out
    }

    /// Distinct child instructions of each node (no output slots).
    pub fn children(&self) -> Vec<Vec<NodeId>> {
        let mut out: Vec<Vec<NodeId>> = vec![Vec::new(); self.nodes.len()];
        for (id, n) in self.nodes() {
            for p in &n.params {
                let c = &mut out[p.index()];
                if c.last() != Some(&id) {
                    c.push(id);
                }
            }
        }
        out
    }

    /// Topological order. Arena order when every edge already points backwards
    /// (true for freshly built programs); otherwise a DFS post-order that visits
    /// roots and operands in id order, so the result is deterministic.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        if self.nodes.iter().enumerate().all(|(i, node)| node.params.iter().all(|p| p.index() < i)) {
            return Ok(self.ids().collect());
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::new();
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            state[root] = 1;
            stack.push((root, 0));
            while let Some((v, next)) = stack.last_mut() {
                let v = *v;
                match self.nodes[v].params.get(*next) {
                    Some(p) => {
                        *next += 1;
                        let p = p.index();
                        if p >= n {
                            return Err(EvaError::DanglingReference { node: NodeId(v as u32), target: p as u64 });
                        }
                        match state[p] {
                            0 => {
                                state[p] = 1;
                                stack.push((p, 0));
                            }
                            1 => return Err(EvaError::Cycle(NodeId(p as u32))),
                            _ => {}
                        }
                    }
                    None => {
                        state[v] = 2;
                        order.push(NodeId(v as u32));
                        stack.pop();
                    }
                }
            }
        }
        Ok(order)
    }

    /// Structural checks: edges exist, arity, acyclicity, operand kinds, lengths.
    pub fn check_structure(&self) -> Result<()> {
        let n = self.nodes.len();
        for (id, node) in self.nodes() {
            for p in &node.params {
                if p.index() >= n {
                    return Err(EvaError::DanglingReference { node: id, target: p.0 as u64 });
                }
            }
            match &node.kind {
                NodeKind::Inst(op) => {
                    if node.params.len() != op.arity() {
                        return Err(EvaError::Arity {
                            node: id,
                            op: op.name(),
                            expected: op.arity(),
                            got: node.params.len(),
                        });
                    }
                    if op.is_rotate() || *op == OpCode::Rescale {
                        let k = self.node(node.params[1]);
                        if !matches!(k.kind, NodeKind::Constant { .. }) {
                            return Err(EvaError::malformed(id, format!("{op} operand 2 must be a constant")));
                        }
                    }
                }
                NodeKind::Constant { values, obj, .. } => {
                    if values.is_empty() {
                        return Err(EvaError::malformed(id, "constant without elements"));
                    }
                    let vector = obj.value_type() == ValueType::Vector;
                    if vector && (!values.len().is_power_of_two() || values.len() > self.vec_size) {
                        return Err(EvaError::malformed(
                            id,
                            format!("vector constant length {} must be a power of two ≤ vec_size", values.len()),
                        ));
                    }
                    if !vector && values.len() != 1 {
                        return Err(EvaError::malformed(id, "scalar constant must have exactly one element"));
                    }
                }
                NodeKind::Input { obj, .. } => {
                    if *obj == ObjectType::IntegerConst {
                        return Err(EvaError::malformed(id, "inputs cannot be INTEGER_CONST"));
                    }
                }
            }
        }
        for o in &self.outputs {
            if o.node.index() >= n {
                return Err(EvaError::DanglingReference { node: o.node, target: o.node.0 as u64 });
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Redirects one consumer edge to `to`.
    pub(crate) fn set_use(&mut self, u: Use, to: NodeId) {
        match u {
            Use::Param { node, arg } => self.nodes[node.index()].params[arg] = to,
            Use::Output(i) => self.outputs[i].node = to,
        }
    }

    /// Deletes a unary-passthrough instruction (e.g. a Rescale, ModSwitch or
    /// Relinearize) by rewiring its consumers to its first operand. Nodes left
    /// unreferenced are dropped and ids compacted.
    pub fn bypass(&self, id: NodeId) -> Result<Program> {
        let node = self.node(id);
        let src = *node
            .params
            .first()
            .ok_or_else(|| EvaError::malformed(id, "cannot bypass a node without operands"))?;
        let mut p = self.clone();
        for u in self.uses()[id.index()].clone() {
            p.set_use(u, src);
        }
        p.nodes[id.index()].params.clear();
        Ok(p.compact(|nid| nid != id))
    }

    /// Keeps nodes that pass `keep` and are still referenced (or are sources),
    /// renumbering densely in arena order.
    pub(crate) fn compact(&self, keep: impl Fn(NodeId) -> bool) -> Program {
        let uses = self.uses();
        let mut map = vec![None; self.nodes.len()];
        let mut nodes = Vec::new();
        for (id, n) in self.nodes() {
            let referenced = !uses[id.index()].is_empty() || matches!(n.kind, NodeKind::Input { .. });
            if keep(id) && (referenced || !n.is_source()) {
                map[id.index()] = Some(NodeId(nodes.len() as u32));
                nodes.push(n.clone());
            }
        }
        for n in &mut nodes {
            for p in &mut n.params {
                *p = map[p.index()].expect("kept node references a dropped node");
            }
        }
        let outputs = self
            .outputs
            .iter()
            .map(|o| Output { node: map[o.node.index()].expect("output dropped"), scale: o.scale })
            .collect();
        Program { vec_size: self.vec_size, nodes, outputs }
    }

    /// Replaces every Vector/Cipher source value shorter than vec_size by
    /// contiguous copies. Input lengths are checked by the executor; this only
    /// touches constants (inputs carry no data in the graph).
    pub fn replicate_constants(&mut self) -> Result<()> {
        let vs = self.vec_size;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let NodeKind::Constant { obj, values, .. } = &mut node.kind {
                if obj.value_type() == ValueType::Vector {
                    *values = replicate(values, vs).ok_or_else(|| {
                        EvaError::malformed(NodeId(i as u32), "constant length must be a power of two ≤ vec_size")
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Contiguous replication of a length-s_i vector to length `vec_size`; `None`
/// unless the length is a power of two no larger than `vec_size`.
pub fn replicate(values: &[f64], vec_size: usize) -> Option<Vec<f64>> {
    let len = values.len();
    if len == 0 || !len.is_power_of_two() || len > vec_size {
        return None;
    }
    Some(values.iter().copied().cycle().take(vec_size).collect())
}

/// Per-node multiplicative depth: the largest number of Multiply nodes with a
/// Cipher operand on any root-to-node path (the node itself included).
///
/// Multiplying by an all-ones constant is not counted. Those are the scale
/// adjusters inserted by scale matching, and excluding them keeps the depth of
/// a compiled program equal to the depth of its source.
pub fn multiplicative_depth(p: &Program) -> Vec<usize> {
    let mut depth = vec![0usize; p.len()];
    for id in p.topo_order().expect("acyclic program") {
        let n = p.node(id);
        let base = n.params.iter().map(|q| depth[q.index()]).max().unwrap_or(0);
        let unit = |q: &NodeId| p.node(*q).constant_values().is_some_and(|v| v.iter().all(|x| *x == 1.0));
        let counts = n.is_op(OpCode::Multiply)
            && n.params.iter().any(|q| p.node(*q).ty.is_cipher())
            && !n.params.iter().any(unit);
        depth[id.index()] = base + counts as usize;
    }
    depth
}
