//! Seeded random programs and inputs for property tests and the `gen` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::{InputValue, Inputs};
use crate::ir::{NodeId, NodeKind, ObjectType, OpCode, Program};

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub vec_size: usize,
    pub insts: usize,
    pub cipher_inputs: usize,
    pub plain_inputs: usize,
    /// Candidate log2 scales for inputs; each input draws one.
    pub input_scales: Vec<f64>,
    /// Candidate log2 scales for scalar constants.
    pub constant_scales: Vec<f64>,
    /// Probability that a binary operand is a fresh scalar constant.
    pub constant_rate: f64,
    pub ops: Vec<OpCode>,
    pub output_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vec_size: 8,
            insts: 10,
            cipher_inputs: 2,
            plain_inputs: 1,
            input_scales: vec![20.0, 30.0, 40.0],
            constant_scales: vec![10.0, 20.0, 30.0],
            constant_rate: 0.15,
            ops: vec![
                OpCode::Add,
                OpCode::Sub,
                OpCode::Multiply,
                OpCode::Multiply,
                OpCode::Negate,
                OpCode::RotateLeft,
                OpCode::RotateRight,
            ],
            output_scale: 30.0,
        }
    }
}

pub fn random_program(cfg: &GenConfig, seed: u64) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Program::new(cfg.vec_size).expect("vec_size must be a power of two");
    let mut pool: Vec<NodeId> = Vec::new();
    for i in 0..cfg.cipher_inputs + cfg.plain_inputs {
        let obj = if i < cfg.cipher_inputs { ObjectType::VectorCipher } else { ObjectType::VectorPlain };
        let s = *cfg.input_scales.choose(&mut rng).expect("input_scales is empty");
        pool.push(p.add_input(obj, s));
    }
    let operand = |rng: &mut ChaCha8Rng, pool: &[NodeId]| -> NodeId {
        // Lean towards recent nodes so programs grow deep as well as wide.
        if rng.gen_bool(0.4) {
            pool[pool.len() - 1 - rng.gen_range(0..pool.len().min(3))]
        } else {
            *pool.choose(rng).unwrap()
        }
    };
    for _ in 0..cfg.insts {
        let op = *cfg.ops.choose(&mut rng).expect("ops is empty");
        let a = operand(&mut rng, &pool);
        let params = match op.arity() {
            1 => vec![a],
            _ if op.is_rotate() => {
                let k = rng.gen_range(0..2 * cfg.vec_size as i64);
                vec![a, p.add_constant(ObjectType::IntegerConst, 0.0, vec![k as f64])]
            }
            _ => {
                let b = if rng.gen_bool(cfg.constant_rate) {
                    let s = *cfg.constant_scales.choose(&mut rng).expect("constant_scales is empty");
                    let v = rng.gen_range(-2.0..2.0f64);
                    p.add_constant(ObjectType::ScalarConst, s, vec![(v * 64.0).round() / 64.0])
                } else {
                    operand(&mut rng, &pool)
                };
                vec![a, b]
            }
        };
        pool.push(p.add_inst(op, params).expect("generated operands exist"));
    }
    let uses = p.uses();
    let sinks: Vec<NodeId> = p
        .nodes()
        .filter(|(id, n)| !n.is_source() && uses[id.index()].is_empty())
        .map(|(id, _)| id)
        .collect();
    for s in sinks {
        p.add_output(s, cfg.output_scale);
    }
    p
}

/// Uniform inputs in [-1, 1] quantized to 1/1024, at full or half length (the
/// executor replicates short inputs).
pub fn random_inputs(p: &Program, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1234);
    let mut out = Inputs::new();
    for id in p.inputs() {
        let NodeKind::Input { obj, .. } = p.node(id).kind else { unreachable!() };
        let scalar = matches!(obj, ObjectType::ScalarCipher | ObjectType::ScalarPlain | ObjectType::ScalarConst);
        let len = if scalar {
            1
        } else if p.vec_size() > 1 && rng.gen_bool(0.25) {
            p.vec_size() / 2
        } else {
            p.vec_size()
        };
        let data = (0..len).map(|_| (rng.gen_range(-1.0..1.0f64) * 1024.0).round() / 1024.0).collect();
        out.insert(id, InputValue { data, scale: None });
    }
    out
}
