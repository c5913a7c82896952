//! Forward/backward traversal and the local rewriting framework the passes use.
//!
//! A rule sees one node at a time and may only touch that node, its operands
//! and its consumers. Insertions splice a new node between a node and a subset
//! of its consumer edges; argument order of the consumers is preserved.

use crate::error::{EvaError, Result};
use crate::ir::{NodeId, ObjectType, OpCode, Program, Use};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Operands before consumers.
    Forward,
    /// Consumers before operands.
    Backward,
}

fn order(p: &Program, dir: Direction) -> Result<Vec<NodeId>> {
    let mut o = p.topo_order()?;
    if dir == Direction::Backward {
        o.reverse();
    }
    Ok(o)
}

/// Visits every node once in dependency order. `visit` receives the states of
/// all nodes visited so far; its result becomes the node's state.
pub fn traverse<S>(
    p: &Program,
    dir: Direction,
    mut visit: impl FnMut(NodeId, &[Option<S>]) -> Result<S>,
) -> Result<Vec<Option<S>>> {
    let mut states: Vec<Option<S>> = std::iter::repeat_with(|| None).take(p.len()).collect();
    let children = p.children();
    for id in order(p, dir)? {
        let deps: &[NodeId] = match dir {
            Direction::Forward => &p.node(id).params,
            Direction::Backward => &children[id.index()],
        };
        debug_assert!(deps.iter().all(|d| states[d.index()].is_some()), "dependency of {id} not visited");
        let s = visit(id, &states)?;
        states[id.index()] = Some(s);
    }
    Ok(states)
}

/// Mutable view handed to rules: the program plus an incrementally maintained
/// consumer index.
pub struct RewriteCtx<'a> {
    program: &'a mut Program,
    uses: Vec<Vec<Use>>,
    inserted: usize,
}

impl<'a> RewriteCtx<'a> {
    pub fn new(program: &'a mut Program) -> Self {
        let uses = program.uses();
        RewriteCtx { program, uses, inserted: 0 }
    }

    pub fn program(&self) -> &Program {
        self.program
    }

    pub fn uses(&self, id: NodeId) -> &[Use] {
        &self.uses[id.index()]
    }

    /// The consumer node of a use, if it is an instruction argument.
    pub fn user(&self, u: Use) -> Option<NodeId> {
        match u {
            Use::Param { node, .. } => Some(node),
            Use::Output(_) => None,
        }
    }

    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn add_constant(&mut self, obj: ObjectType, scale: f64, values: Vec<f64>) -> NodeId {
        let id = self.program.add_constant(obj, scale, values);
        self.uses.push(Vec::new());
        self.inserted += 1;
        id
    }

    /// Inserts `op(n, extra..)` and moves the edges `which` (all currently
    /// consuming `n`) onto the new node.
    pub fn splice(&mut self, n: NodeId, op: OpCode, extra: &[NodeId], which: &[Use]) -> Result<NodeId> {
        let mut params = vec![n];
        params.extend_from_slice(extra);
        let new = self.program.add_inst(op, params.clone())?;
        self.uses.push(Vec::new());
        self.inserted += 1;
        for u in which {
            let pos = self.uses[n.index()]
                .iter()
                .position(|x| x == u)
                .ok_or_else(|| EvaError::Internal(format!("splice: {u:?} is not a use of {n}")))?;
            self.uses[n.index()].swap_remove(pos);
            self.program.set_use(*u, new);
            self.uses[new.index()].push(*u);
        }
        for (arg, p) in params.iter().enumerate() {
            self.uses[p.index()].push(Use::Param { node: new, arg });
        }
        Ok(new)
    }

    /// Splices `count` copies of `op` in sequence; returns the inserted ids
    /// from nearest-to-`n` outward.
    pub fn splice_chain(
        &mut self,
        n: NodeId,
        op: OpCode,
        extra: &[NodeId],
        count: usize,
        which: &[Use],
    ) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(count);
        let mut at = n;
        for _ in 0..count {
            // The targeted edges always hang off the newest node.
            at = self.splice(at, op, extra, which)?;
            out.push(at);
        }
        Ok(out)
    }
}

/// A local rewrite rule applied once per node in its declared direction.
pub trait Rule {
    fn direction(&self) -> Direction;
    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()>;
}

/// Applies `rule` at every node of the original graph in dependency order.
/// Nodes the rule inserts are not revisited. Returns the number of inserted nodes.
pub fn rewrite(p: &mut Program, rule: &mut dyn Rule) -> Result<usize> {
    let visit_order = order(p, rule.direction())?;
    let mut ctx = RewriteCtx::new(p);
    for id in visit_order {
        rule.visit(&mut ctx, id)?;
    }
    let inserted = ctx.inserted();
    if let Err(e) = p.check_structure() {
        return Err(EvaError::Internal(format!("rewrite left an invalid graph: {e}")));
    }
    Ok(inserted)
}

/// Re-applies freshly built rules until one inserts nothing.
pub fn rewrite_to_fixpoint<R: Rule>(
    p: &mut Program,
    mut make: impl FnMut(&Program) -> Result<R>,
    max_rounds: usize,
) -> Result<usize> {
    let mut total = 0;
    for _ in 0..max_rounds {
        let mut rule = make(p)?;
        let n = rewrite(p, &mut rule)?;
        if n == 0 {
            return Ok(total);
        }
        total += n;
    }
    Err(EvaError::Internal(format!("no fixpoint after {max_rounds} rounds")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain3() -> (Program, NodeId, NodeId, NodeId) {
        let mut p = Program::new(4).unwrap();
        let a = p.add_input(ObjectType::VectorCipher, 30.0);
        let b = p.add_inst(OpCode::Negate, vec![a]).unwrap();
        let c = p.add_inst(OpCode::Negate, vec![b]).unwrap();
        p.add_output(c, 30.0);
        (p, a, b, c)
    }

    #[test]
    fn backward_order_on_chain() {
        let (p, a, b, c) = chain3();
        let mut seen = vec![];
        traverse(&p, Direction::Backward, |id, _| {
            seen.push(id);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![c, b, a]);
    }

    #[test]
    fn empty_program_has_no_visits() {
        let p = Program::new(8).unwrap();
        assert!(traverse(&p, Direction::Forward, |_, _| Ok(())).unwrap().is_empty());
    }

    struct Never;
    impl Rule for Never {
        fn direction(&self) -> Direction {
            Direction::Forward
        }
        fn visit(&mut self, _: &mut RewriteCtx<'_>, _: NodeId) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn false_rule_is_identity() {
        let (mut p, ..) = chain3();
        let before = p.clone();
        assert_eq!(rewrite(&mut p, &mut Never).unwrap(), 0);
        assert_eq!(p, before);
    }

    #[test]
    fn splice_preserves_argument_order() {
        let mut p = Program::new(4).unwrap();
        let x = p.add_input(ObjectType::VectorCipher, 30.0);
        let y = p.add_input(ObjectType::VectorCipher, 30.0);
        let s = p.add_inst(OpCode::Sub, vec![y, x]).unwrap();
        p.add_output(x, 30.0);
        let mut ctx = RewriteCtx::new(&mut p);
        let arg1 = Use::Param { node: s, arg: 1 };
        let ms = ctx.splice_chain(x, OpCode::ModSwitch, &[], 2, &[arg1]).unwrap();
        assert_eq!(ctx.uses(x).len(), 2, "output use and the first ModSwitch");
        assert_eq!(p.node(s).params, vec![y, ms[1]]);
        assert_eq!(p.node(ms[1]).params, vec![ms[0]]);
        assert_eq!(p.outputs[0].node, x);
        p.check_structure().unwrap();
    }

    struct NegateOnce;
    impl Rule for NegateOnce {
        fn direction(&self) -> Direction {
            Direction::Forward
        }
        fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
            let p = ctx.program();
            if p.node(id).is_source() && !ctx.uses(id).iter().any(|u| ctx.user(*u).is_some_and(|c| p.node(c).is_op(OpCode::Copy))) {
                let which = ctx.uses(id).to_vec();
                ctx.splice(id, OpCode::Copy, &[], &which)?;
            }
            Ok(())
        }
    }

    #[test]
    fn fixpoint_terminates() {
        let (mut p, ..) = chain3();
        let n = rewrite_to_fixpoint(&mut p, |_| Ok(NegateOnce), 4).unwrap();
        assert_eq!(n, 1);
        assert_eq!(p.count_op(OpCode::Copy), 1);
    }
}
