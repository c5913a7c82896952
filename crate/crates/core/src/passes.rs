//! Rescale, modulus-switch, scale-matching and relinearization passes, and the
//! compile driver that chains them.
//!
//! All scales are log2 values. Each pass is a single [`Rule`] run once by the
//! rewrite engine; each is idempotent on its own output.

use std::collections::HashMap;

use crate::error::{EvaError, Result};
use crate::ir::{multiplicative_depth, NodeId, NodeKind, ObjectType, OpCode, Program, Use, ValueType};
use crate::meta;
use crate::params::{self, CompilationResult};
use crate::rewrite::{rewrite, Direction, RewriteCtx, Rule};
use crate::validate::{self, ValidateOptions};

pub const DEFAULT_SF: f64 = 60.0;

/// How many s_f rescales the waterline rule may stack after one Multiply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WaterlineMode {
    /// At most one Rescale per Multiply.
    Single,
    /// Rescale while the result stays at or above the waterline.
    Loop,
    /// As `Loop`, but never past the node's multiplicative depth.
    #[default]
    DepthCapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RescalePolicy {
    #[default]
    Waterline,
    /// Baseline: rescale by the smaller operand scale after every cipher Multiply.
    Always,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModSwitchPolicy {
    #[default]
    Eager,
    /// Eager with every node of a component aligned to one level; may lift
    /// shallow outputs.
    EagerAligned,
    Lazy,
}

/// Extends a per-node table to cover nodes inserted since it was built.
fn grow<T: Clone>(v: &mut Vec<T>, len: usize, fill: T) {
    if v.len() < len {
        v.resize(len, fill);
    }
}

fn is_cipher(p: &Program, id: NodeId) -> bool {
    p.node(id).ty.is_cipher()
}

fn cipher_operands(p: &Program, id: NodeId) -> usize {
    p.node(id).params.iter().filter(|q| is_cipher(p, **q)).count()
}

/// Follows the single-consumer run of Relinearize/Rescale/ModSwitch nodes that
/// directly trails `n`; rescales are appended after its end.
fn trailing_tail(ctx: &RewriteCtx<'_>, n: NodeId) -> Vec<NodeId> {
    let mut tail = vec![n];
    loop {
        let at = *tail.last().unwrap();
        match ctx.uses(at) {
            [Use::Param { node, arg: 0 }]
                if matches!(
                    ctx.program().node(*node).op(),
                    Some(OpCode::Relinearize | OpCode::Rescale | OpCode::ModSwitch)
                ) =>
            {
                tail.push(*node)
            }
            _ => return tail,
        }
    }
}

/// Shared divisor constants, one per distinct divisor.
#[derive(Default)]
struct Divisors(HashMap<u64, NodeId>);

impl Divisors {
    fn get(&mut self, ctx: &mut RewriteCtx<'_>, log2: f64) -> NodeId {
        *self
            .0
            .entry(log2.to_bits())
            .or_insert_with(|| ctx.add_constant(ObjectType::ScalarConst, 0.0, vec![2f64.powf(log2)]))
    }
}

/// Running scale/level bookkeeping for forward passes.
struct Tracker {
    scale: Vec<f64>,
    level: Vec<usize>,
}

impl Tracker {
    fn new(p: &Program) -> Result<Self> {
        Ok(Tracker { scale: meta::scales(p)?, level: meta::levels(p)? })
    }

    /// Recomputes a node from its operands' tracked values.
    fn update(&mut self, p: &Program, id: NodeId) -> Result<()> {
        grow(&mut self.scale, p.len(), 0.0);
        grow(&mut self.level, p.len(), 0);
        self.scale[id.index()] = meta::node_scale(p, id, &self.scale)?;
        let n = p.node(id);
        let base = n.params.iter().filter(|q| is_cipher(p, **q)).map(|q| self.level[q.index()]).max().unwrap_or(0);
        let bump = matches!(n.op(), Some(OpCode::Rescale | OpCode::ModSwitch)) as usize;
        self.level[id.index()] = if n.ty.is_cipher() { base + bump } else { 0 };
        Ok(())
    }
}

struct WaterlineRule {
    sf: f64,
    sw: f64,
    mode: WaterlineMode,
    depth: Vec<usize>,
    t: Tracker,
    divisors: Divisors,
}

impl Rule for WaterlineRule {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        self.t.update(ctx.program(), id)?;
        let p = ctx.program();
        if !(p.node(id).is_op(OpCode::Multiply) && p.node(id).ty.is_cipher()) {
            return Ok(());
        }
        let tail = trailing_tail(ctx, id);
        for &t in &tail[1..] {
            self.t.update(ctx.program(), t)?;
        }
        let end = *tail.last().unwrap();
        let already = tail.len() - 1 - tail[1..].iter().filter(|t| ctx.program().node(**t).is_op(OpCode::Relinearize)).count();
        let (mut s, mut lvl) = (self.t.scale[end.index()], self.t.level[end.index()]);
        let mut k = 0;
        while s - self.sf >= self.sw {
            let allowed = match self.mode {
                WaterlineMode::Single => already + k == 0,
                WaterlineMode::Loop => true,
                WaterlineMode::DepthCapped => lvl < self.depth[id.index()],
            };
            if !allowed {
                break;
            }
            s -= self.sf;
            lvl += 1;
            k += 1;
        }
        if k > 0 {
            let d = self.divisors.get(ctx, self.sf);
            let which = ctx.uses(end).to_vec();
            for r in ctx.splice_chain(end, OpCode::Rescale, &[d], k, &which)? {
                self.t.update(ctx.program(), r)?;
            }
        }
        Ok(())
    }
}

/// Default waterline: the largest scale among inputs and non-integer constants.
pub fn default_waterline(p: &Program) -> f64 {
    p.nodes()
        .filter(|(_, n)| n.ty != ValueType::Integer)
        .filter_map(|(_, n)| n.source_scale())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
}

pub fn waterline_rescale(p: &mut Program, sf: f64, sw: f64, mode: WaterlineMode) -> Result<usize> {
    let mut rule = WaterlineRule {
        sf,
        sw,
        mode,
        depth: multiplicative_depth(p),
        t: Tracker::new(p)?,
        divisors: Divisors::default(),
    };
    rewrite(p, &mut rule)
}

struct AlwaysRule {
    sf: f64,
    t: Tracker,
    divisors: Divisors,
}

impl Rule for AlwaysRule {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        self.t.update(ctx.program(), id)?;
        let p = ctx.program();
        let n = p.node(id);
        if !(n.is_op(OpCode::Multiply) && n.ty.is_cipher()) {
            return Ok(());
        }
        let tail = trailing_tail(ctx, id);
        if tail[1..].iter().any(|t| ctx.program().node(*t).is_op(OpCode::Rescale)) {
            return Ok(());
        }
        let p = ctx.program();
        let n = p.node(id);
        let d = self.t.scale[n.params[0].index()].min(self.t.scale[n.params[1].index()]).min(self.sf);
        if d <= 0.0 {
            return Ok(());
        }
        let end = *tail.last().unwrap();
        let c = self.divisors.get(ctx, d);
        let which = ctx.uses(end).to_vec();
        let r = ctx.splice(end, OpCode::Rescale, &[c], &which)?;
        self.t.update(ctx.program(), r)
    }
}

/// Baseline rescaling: one Rescale after every cipher Multiply, dividing by the
/// smaller operand scale (capped at s_f).
pub fn always_rescale(p: &mut Program, sf: f64) -> Result<usize> {
    let mut rule = AlwaysRule { sf, t: Tracker::new(p)?, divisors: Divisors::default() };
    rewrite(p, &mut rule)
}

struct EagerRule {
    /// Rescale/ModSwitch count on every path from the node down to a leaf.
    rlevel: Vec<usize>,
}

fn is_level_op(p: &Program, id: NodeId) -> bool {
    matches!(p.node(id).op(), Some(OpCode::Rescale | OpCode::ModSwitch))
}

impl Rule for EagerRule {
    fn direction(&self) -> Direction {
        Direction::Backward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        grow(&mut self.rlevel, ctx.program().len(), 0);
        if !is_cipher(ctx.program(), id) {
            return Ok(());
        }
        let through = |u: &Use| match u {
            Use::Output(_) => 0,
            Use::Param { node, .. } => self.rlevel[node.index()] + is_level_op(ctx.program(), *node) as usize,
        };
        let gaps: Vec<(Use, usize)> = ctx.uses(id).iter().map(|u| (*u, through(u))).collect();
        let top = gaps.iter().map(|g| g.1).max().unwrap_or(0);
        let max_gap = gaps.iter().map(|g| top - g.1).max().unwrap_or(0);
        if max_gap > 0 {
            // One shared ModSwitch chain; an edge short by g levels hangs off its g-th link.
            let mut at = id;
            for g in 1..=max_gap {
                let which: Vec<Use> = gaps.iter().filter(|(_, t)| top - t >= g).map(|(u, _)| *u).collect();
                at = ctx.splice(at, OpCode::ModSwitch, &[], &which)?;
                grow(&mut self.rlevel, ctx.program().len(), 0);
                self.rlevel[at.index()] = top - g;
            }
        }
        self.rlevel[id.index()] = top;
        Ok(())
    }
}

/// Literal rlevel rule: every node of a cipher component ends up with the same
/// level + rlevel. In programs with several outputs this lifts shallow outputs
/// to the level of the deepest one.
pub fn eager_aligned_modswitch(p: &mut Program) -> Result<usize> {
    let mut rule = EagerRule { rlevel: vec![0; p.len()] };
    let mut inserted = rewrite(p, &mut rule)?;
    inserted += root_fixup(p, &rule.rlevel)?;
    Ok(inserted)
}

/// Inserts ModSwitch as close to the roots as possible so every
/// Add/Sub/Multiply sees operands at equal levels, without lifting any output.
///
/// Starts from the lazy edge counts (each operand edge short by the gap to its
/// consumer's highest operand), then walks consumers before producers: when
/// every outgoing edge of a node carries at least `h` switches, `h` of them move
/// onto the node's incoming cipher edges. Output uses carry none, so a node that
/// is itself an output never moves.
pub fn eager_modswitch(p: &mut Program) -> Result<usize> {
    let order = p.topo_order()?;
    let n = p.len();
    let mut level = vec![0usize; n];
    // Switches owed on each (consumer, arg) edge.
    let mut owed: HashMap<(NodeId, usize), usize> = HashMap::new();
    for &id in &order {
        let node = p.node(id);
        if !node.ty.is_cipher() {
            continue;
        }
        let top = node.params.iter().filter(|q| is_cipher(p, **q)).map(|q| level[q.index()]).max().unwrap_or(0);
        for (arg, q) in node.params.iter().enumerate() {
            if is_cipher(p, *q) && level[q.index()] < top {
                owed.insert((id, arg), top - level[q.index()]);
            }
        }
        level[id.index()] = top + is_level_op(p, id) as usize;
    }
    let mut ctx = RewriteCtx::new(p);
    for &id in order.iter().rev() {
        let p = ctx.program();
        let node = p.node(id);
        if !node.ty.is_cipher() || node.is_source() || cipher_operands(p, id) == 0 {
            continue;
        }
        let uses = ctx.uses(id);
        let h = uses
            .iter()
            .map(|u| match u {
                Use::Output(_) => 0,
                Use::Param { node, arg } => owed.get(&(*node, *arg)).copied().unwrap_or(0),
            })
            .min()
            .unwrap_or(0);
        if h == 0 {
            continue;
        }
        for u in uses {
            if let Use::Param { node, arg } = u {
                *owed.get_mut(&(*node, *arg)).unwrap() -= h;
            }
        }
        for (arg, q) in node.params.iter().enumerate() {
            if is_cipher(p, *q) {
                *owed.entry((id, arg)).or_insert(0) += h;
            }
        }
    }
    for &id in &order {
        let gaps: Vec<(Use, usize)> = ctx
            .uses(id)
            .iter()
            .filter_map(|u| match u {
                Use::Param { node, arg } => owed.get(&(*node, *arg)).filter(|g| **g > 0).map(|g| (*u, *g)),
                Use::Output(_) => None,
            })
            .collect();
        let longest = gaps.iter().map(|g| g.1).max().unwrap_or(0);
        // One shared chain; an edge owed g switches hangs off its g-th link.
        let mut at = id;
        for g in 1..=longest {
            let which: Vec<Use> = gaps.iter().filter(|(_, k)| *k >= g).map(|(u, _)| *u).collect();
            at = ctx.splice(at, OpCode::ModSwitch, &[], &which)?;
        }
    }
    Ok(ctx.inserted())
}

/// Roots that share a cipher component must start at the same rlevel; lower
/// roots get a ModSwitch chain in front of all their consumers.
fn root_fixup(p: &mut Program, rlevel: &[usize]) -> Result<usize> {
    let n = p.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (id, node) in p.nodes() {
        if !node.ty.is_cipher() {
            continue;
        }
        for q in &node.params {
            if is_cipher(p, *q) {
                let (a, b) = (find(&mut parent, id.index()), find(&mut parent, q.index()));
                parent[a] = b;
            }
        }
    }
    let roots: Vec<NodeId> = p.nodes().filter(|(_, n)| n.is_source() && n.ty.is_cipher()).map(|(id, _)| id).collect();
    let mut top: HashMap<usize, usize> = HashMap::new();
    for r in &roots {
        let c = find(&mut parent, r.index());
        let e = top.entry(c).or_insert(0);
        *e = (*e).max(rlevel[r.index()]);
    }
    let mut ctx = RewriteCtx::new(p);
    for r in roots {
        let c = find(&mut parent, r.index());
        let gap = top[&c] - rlevel[r.index()];
        if gap > 0 {
            let which = ctx.uses(r).to_vec();
            ctx.splice_chain(r, OpCode::ModSwitch, &[], gap, &which)?;
        }
    }
    Ok(ctx.inserted())
}

struct LazyRule {
    t: Tracker,
}

impl Rule for LazyRule {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        let p = ctx.program();
        let n = p.node(id);
        if matches!(n.op(), Some(OpCode::Add | OpCode::Sub | OpCode::Multiply)) && cipher_operands(p, id) == 2 {
            let (a, b) = (n.params[0], n.params[1]);
            let (la, lb) = (self.t.level[a.index()], self.t.level[b.index()]);
            if la != lb {
                let (low, arg, gap) = if la < lb { (a, 0, lb - la) } else { (b, 1, la - lb) };
                let which = [Use::Param { node: id, arg }];
                for m in ctx.splice_chain(low, OpCode::ModSwitch, &[], gap, &which)? {
                    self.t.update(ctx.program(), m)?;
                }
            }
        }
        self.t.update(ctx.program(), id)
    }
}

/// Inserts ModSwitch on the lower-level operand edge right where levels meet.
pub fn lazy_modswitch(p: &mut Program) -> Result<usize> {
    let mut rule = LazyRule { t: Tracker::new(p)? };
    rewrite(p, &mut rule)
}

struct MatchScaleRule {
    sf: f64,
    t: Tracker,
    ones: HashMap<u64, NodeId>,
}

impl Rule for MatchScaleRule {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        let p = ctx.program();
        let n = p.node(id);
        if matches!(n.op(), Some(OpCode::Add | OpCode::Sub)) && cipher_operands(p, id) == 2 {
            let (a, b) = (n.params[0], n.params[1]);
            let (sa, sb) = (self.t.scale[a.index()], self.t.scale[b.index()]);
            if sa != sb {
                let (low, arg, ratio) = if sa < sb { (a, 0, sb - sa) } else { (b, 1, sa - sb) };
                if ratio > self.sf {
                    return Err(EvaError::ScaleRatio { node: id, ratio, sf: self.sf });
                }
                let one = *self
                    .ones
                    .entry(ratio.to_bits())
                    .or_insert_with(|| ctx.add_constant(ObjectType::ScalarConst, ratio, vec![1.0]));
                let m = ctx.splice(low, OpCode::Multiply, &[one], &[Use::Param { node: id, arg }])?;
                self.t.update(ctx.program(), one)?;
                self.t.update(ctx.program(), m)?;
            }
        }
        self.t.update(ctx.program(), id)
    }
}

/// Raises the lower-scale operand of each cipher Add/Sub by multiplying with
/// 1.0 encoded at the scale ratio.
pub fn match_scale(p: &mut Program, sf: f64) -> Result<usize> {
    let mut rule = MatchScaleRule { sf, t: Tracker::new(p)?, ones: HashMap::new() };
    rewrite(p, &mut rule)
}

struct RelinRule;

impl Rule for RelinRule {
    fn direction(&self) -> Direction {
        Direction::Forward
    }

    fn visit(&mut self, ctx: &mut RewriteCtx<'_>, id: NodeId) -> Result<()> {
        let p = ctx.program();
        if !(p.node(id).is_op(OpCode::Multiply) && cipher_operands(p, id) == 2) {
            return Ok(());
        }
        let uses = ctx.uses(id).to_vec();
        let done = !uses.is_empty()
            && uses.iter().all(|u| ctx.user(*u).is_some_and(|c| ctx.program().node(c).is_op(OpCode::Relinearize)));
        if !done {
            ctx.splice(id, OpCode::Relinearize, &[], &uses)?;
        }
        Ok(())
    }
}

/// Relinearizes the result of every ciphertext-ciphertext Multiply.
pub fn relinearize(p: &mut Program) -> Result<usize> {
    rewrite(p, &mut RelinRule)
}

#[derive(Clone, Debug)]
pub struct CompileOptions {
    /// log2 of the maximum rescale divisor.
    pub sf: f64,
    /// Waterline override (log2); defaults to [`default_waterline`].
    pub waterline: Option<f64>,
    /// Desired-scale overrides keyed by the output's node id.
    pub output_scales: Vec<(NodeId, f64)>,
    pub rescale: RescalePolicy,
    pub waterline_mode: WaterlineMode,
    pub modswitch: ModSwitchPolicy,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            sf: DEFAULT_SF,
            waterline: None,
            output_scales: Vec::new(),
            rescale: RescalePolicy::default(),
            waterline_mode: WaterlineMode::default(),
            modswitch: ModSwitchPolicy::default(),
        }
    }
}

/// Rejects programs that already contain compiler-only instructions.
pub fn check_input_program(p: &Program) -> Result<()> {
    p.check_structure()?;
    for (_, n) in p.nodes() {
        if let NodeKind::Inst(op) = n.kind {
            if op.is_compiler_only() {
                return Err(EvaError::UnsupportedOpcode(format!("{op} in input program")));
            }
        }
    }
    Ok(())
}

/// Transforms, validates and selects parameters for an input program.
pub fn compile(input: &Program, opts: &CompileOptions) -> Result<CompilationResult> {
    check_input_program(input)?;
    let mut p = input.clone();
    for &(node, scale) in &opts.output_scales {
        let mut hit = false;
        for o in p.outputs.iter_mut().filter(|o| o.node == node) {
            o.scale = scale;
            hit = true;
        }
        if !hit {
            return Err(EvaError::malformed(node, "output scale override names a node that is not an output"));
        }
    }
    let sw = opts.waterline.unwrap_or_else(|| default_waterline(&p));
    match opts.rescale {
        RescalePolicy::Waterline => waterline_rescale(&mut p, opts.sf, sw, opts.waterline_mode)?,
        RescalePolicy::Always => always_rescale(&mut p, opts.sf)?,
    };
    match opts.modswitch {
        ModSwitchPolicy::Eager => eager_modswitch(&mut p)?,
        ModSwitchPolicy::EagerAligned => eager_aligned_modswitch(&mut p)?,
        ModSwitchPolicy::Lazy => lazy_modswitch(&mut p)?,
    };
    match_scale(&mut p, opts.sf)?;
    relinearize(&mut p)?;

    let vopts = ValidateOptions {
        sf: opts.sf,
        waterline: (opts.rescale == RescalePolicy::Waterline).then_some(sw),
    };
    let violations = validate::validate(&p, &vopts)?;
    if !violations.is_empty() {
        return Err(EvaError::Validation(violations));
    }
    params::select(p, opts.sf, sw)
}
