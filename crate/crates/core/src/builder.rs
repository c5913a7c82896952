//! Convenience front door for constructing programs in Rust code.

use std::collections::HashMap;

use crate::ir::{NodeId, ObjectType, OpCode, Program};

/// Records instructions into a [`Program`]. Methods panic on ids that did not
/// come from this builder.
pub struct ProgramBuilder {
    p: Program,
    steps: HashMap<i64, NodeId>,
}

impl ProgramBuilder {
    /// # Panics
    /// If `vec_size` is not a power of two.
    pub fn new(vec_size: usize) -> Self {
        ProgramBuilder { p: Program::new(vec_size).expect("vec_size must be a power of two"), steps: HashMap::new() }
    }

    pub fn input(&mut self, scale: f64) -> NodeId {
        self.p.add_input(ObjectType::VectorCipher, scale)
    }

    pub fn plain_input(&mut self, scale: f64) -> NodeId {
        self.p.add_input(ObjectType::VectorPlain, scale)
    }

    pub fn constant(&mut self, scale: f64, value: f64) -> NodeId {
        self.p.add_constant(ObjectType::ScalarConst, scale, vec![value])
    }

    pub fn vector_constant(&mut self, scale: f64, values: Vec<f64>) -> NodeId {
        self.p.add_constant(ObjectType::VectorConst, scale, values)
    }

    fn inst(&mut self, op: OpCode, params: Vec<NodeId>) -> NodeId {
        self.p.add_inst(op, params).expect("operands come from this builder")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.inst(OpCode::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.inst(OpCode::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.inst(OpCode::Multiply, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.inst(OpCode::Negate, vec![a])
    }

    /// `a` multiplied by itself `k - 1` times, left-associated.
    pub fn pow(&mut self, a: NodeId, k: u32) -> NodeId {
        assert!(k >= 1, "power must be at least 1");
        (1..k).fold(a, |acc, _| self.mul(acc, a))
    }

    fn step(&mut self, k: i64) -> NodeId {
        let p = &mut self.p;
        *self.steps.entry(k).or_insert_with(|| p.add_constant(ObjectType::IntegerConst, 0.0, vec![k as f64]))
    }

    pub fn rotl(&mut self, a: NodeId, k: i64) -> NodeId {
        let s = self.step(k);
        self.inst(OpCode::RotateLeft, vec![a, s])
    }

    pub fn rotr(&mut self, a: NodeId, k: i64) -> NodeId {
        let s = self.step(k);
        self.inst(OpCode::RotateRight, vec![a, s])
    }

    /// Explicit Rescale by 2^`log2`; only for hand-built compiled programs.
    pub fn rescale(&mut self, a: NodeId, log2: f64) -> NodeId {
        let d = self.p.add_constant(ObjectType::ScalarConst, 0.0, vec![2f64.powf(log2)]);
        self.inst(OpCode::Rescale, vec![a, d])
    }

    pub fn output(&mut self, n: NodeId, scale: f64) {
        self.p.add_output(n, scale);
    }

    pub fn program(&self) -> &Program {
        &self.p
    }

    pub fn build(self) -> Program {
        self.p
    }
}
