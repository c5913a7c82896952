//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance harness. The oracles recompute scales, levels and chain lengths
//! from first principles rather than reading compiler metadata.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use eva::builder::ProgramBuilder;
use eva::ir::{NodeId, ObjectType, OpCode, Program};

pub const SF: f64 = 60.0;

/// x²y³ built as (x·x)·((y·y)·y).
pub fn x2y3(sx: f64, sy: f64, so: f64) -> (Program, [NodeId; 6]) {
    let mut b = ProgramBuilder::new(8);
    let x = b.input(sx);
    let y = b.input(sy);
    let xx = b.mul(x, x);
    let yy = b.mul(y, y);
    let yyy = b.mul(yy, y);
    let o = b.mul(xx, yyy);
    b.output(o, so);
    (b.build(), [x, y, xx, yy, yyy, o])
}

/// x² + x.
pub fn x2_plus_x(sx: f64, so: f64) -> (Program, [NodeId; 3]) {
    let mut b = ProgramBuilder::new(8);
    let x = b.input(sx);
    let xx = b.mul(x, x);
    let o = b.add(xx, x);
    b.output(o, so);
    (b.build(), [x, xx, o])
}

/// x² + (x + x).
pub fn x2_plus_x_plus_x(sx: f64, so: f64) -> (Program, [NodeId; 4]) {
    let mut b = ProgramBuilder::new(8);
    let x = b.input(sx);
    let xx = b.mul(x, x);
    let inner = b.add(x, x);
    let o = b.add(xx, inner);
    b.output(o, so);
    (b.build(), [x, xx, inner, o])
}

// ---------------------------------------------------------------------------
// Shape enumeration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ins {
    Add(usize, usize),
    Mul(usize, usize),
    Rot(usize),
}

impl Ins {
    fn operands(self) -> impl Iterator<Item = usize> {
        let (a, b) = match self {
            Ins::Add(a, b) | Ins::Mul(a, b) => (a, Some(b)),
            Ins::Rot(a) => (a, None),
        };
        std::iter::once(a).chain(b)
    }
}

/// Straight-line program over two cipher inputs (slots 0 and 1); instruction
/// `i` defines slot `i + 2` and the last instruction is the single output.
pub type Shape = Vec<Ins>;

/// Hash-conses expressions so structurally equal DAGs get equal keys.
#[derive(Default)]
struct Interner {
    table: HashMap<(u8, u32, u32), u32>,
}

impl Interner {
    fn key(&mut self, tag: u8, a: u32, b: u32) -> u32 {
        let (a, b) = if tag != 2 && b < a { (b, a) } else { (a, b) };
        let next = self.table.len() as u32 + 2;
        *self.table.entry((tag, a, b)).or_insert(next)
    }
}

/// Every single-sink DAG with 1..=`max_insts` instructions over {Add, Multiply,
/// Rotate} and two inputs, up to commutativity and instruction order. Each
/// instruction is distinct and every non-final instruction is used.
pub fn enumerate_shapes(max_insts: usize) -> Vec<Shape> {
    let mut out = Vec::new();
    for_each_shape(max_insts, |s| out.push(s.to_vec()));
    out
}

/// Streaming form of [`enumerate_shapes`].
pub fn for_each_shape(max_insts: usize, mut f: impl FnMut(&[Ins])) {
    struct St<'f> {
        max: usize,
        intern: Interner,
        seen: HashSet<u32>,
        f: &'f mut dyn FnMut(&[Ins]),
    }
    fn rec(st: &mut St<'_>, ins: &mut Vec<Ins>, keys: &mut Vec<u32>, uses: &mut Vec<u32>) {
        let n = keys.len();
        if !ins.is_empty() && (2..n - 1).all(|i| uses[i] > 0) && st.seen.insert(keys[n - 1]) {
            (st.f)(ins);
        }
        if ins.len() == st.max {
            return;
        }
        let unused = (2..n).filter(|&i| uses[i] == 0).count();
        // Each remaining instruction can consume at most two dangling values,
        // and the final one must itself remain as the sink.
        if unused > 0 && unused - 1 > 2 * (st.max - ins.len()) {
            return;
        }
        let mut cand = Vec::new();
        for a in 0..n {
            cand.push(Ins::Rot(a));
            for b in a..n {
                cand.push(Ins::Add(a, b));
                cand.push(Ins::Mul(a, b));
            }
        }
        for c in cand {
            let k = match c {
                Ins::Add(a, b) => st.intern.key(0, keys[a], keys[b]),
                Ins::Mul(a, b) => st.intern.key(1, keys[a], keys[b]),
                Ins::Rot(a) => st.intern.key(2, keys[a], 0),
            };
            if keys.contains(&k) {
                continue;
            }
            for o in c.operands() {
                uses[o] += 1;
            }
            ins.push(c);
            keys.push(k);
            uses.push(0);
            rec(st, ins, keys, uses);
            ins.pop();
            keys.pop();
            uses.pop();
            for o in c.operands() {
                uses[o] -= 1;
            }
        }
    }
    let mut st = St { max: max_insts, intern: Interner::default(), seen: HashSet::new(), f: &mut f };
    rec(&mut st, &mut Vec::new(), &mut vec![0, 1], &mut vec![0, 0]);
}

/// Human-readable expression for a shape, e.g. `(x*x)+x`.
pub fn shape_expr(shape: &[Ins]) -> String {
    let mut e = vec!["x".to_string(), "y".to_string()];
    for &i in shape {
        let s = match i {
            Ins::Add(a, b) => format!("({}+{})", e[a], e[b]),
            Ins::Mul(a, b) => format!("({}*{})", e[a], e[b]),
            Ins::Rot(a) => format!("rot({})", e[a]),
        };
        e.push(s);
    }
    let last = e.pop().unwrap();
    last.strip_prefix('(').and_then(|s| s.strip_suffix(')')).map_or(last.clone(), str::to_string)
}

/// Seeded random single-sink shape with exactly `n` instructions.
pub fn random_shape(n: usize, rng: &mut impl rand::Rng) -> Shape {
    loop {
        let mut ins = Vec::with_capacity(n);
        for i in 0..n {
            let slots = i + 2;
            // Prefer the newest value so most programs end up connected.
            let a = if rng.gen_bool(0.5) { slots - 1 } else { rng.gen_range(0..slots) };
            let b = rng.gen_range(0..slots);
            ins.push(match rng.gen_range(0..5) {
                0 => Ins::Rot(a),
                1 | 2 => Ins::Add(a, b),
                _ => Ins::Mul(a, b),
            });
        }
        let mut used = vec![false; n + 2];
        for i in &ins {
            for o in i.operands() {
                used[o] = true;
            }
        }
        if (2..n + 1).all(|i| used[i]) {
            return ins;
        }
    }
}

/// Materializes a shape with cipher inputs at scales `sx`, `sy`.
pub fn shape_program(shape: &[Ins], sx: f64, sy: f64, so: f64) -> Program {
    let mut b = ProgramBuilder::new(8);
    let mut slot = vec![b.input(sx), b.input(sy)];
    for &i in shape {
        slot.push(match i {
            Ins::Add(a, c) => b.add(slot[a], slot[c]),
            Ins::Mul(a, c) => b.mul(slot[a], slot[c]),
            Ins::Rot(a) => b.rotl(slot[a], 1),
        });
    }
    b.output(*slot.last().unwrap(), so);
    b.build()
}

// ---------------------------------------------------------------------------
// Placement oracle

/// Best legal placement found by exhaustive search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub r: usize,
    /// Rescales by s_f stacked after each instruction.
    pub rescales: Vec<u32>,
}

/// Closed-form chain length for a single output at (log2 scale, level).
pub fn formula_r(scale: f64, level: usize, so: f64, sf: f64) -> usize {
    1 + level + ((scale + so) / sf).ceil() as usize
}

/// Exhaustive minimum r over all placements of s_f-Rescales after any
/// instruction such that no Rescale result drops below the waterline `sw` and
/// every Add can be scale-matched by a multiplier of at most 2^sf. ModSwitch
/// placement follows from the rescales: the lower-level operand of an Add or
/// Multiply is switched up, which costs nothing in chain length.
pub fn oracle(shape: &[Ins], sx: f64, sy: f64, so: f64, sf: f64, sw: f64) -> Option<Placement> {
    struct Search<'a> {
        shape: &'a [Ins],
        so: f64,
        sf: f64,
        sw: f64,
        scale: Vec<f64>,
        level: Vec<usize>,
        ks: Vec<u32>,
        best: Option<Placement>,
    }
    fn go(s: &mut Search<'_>, i: usize) {
        if i == s.shape.len() {
            let r = formula_r(*s.scale.last().unwrap(), *s.level.last().unwrap(), s.so, s.sf);
            if s.best.as_ref().is_none_or(|b| r < b.r) {
                s.best = Some(Placement { r, rescales: s.ks.clone() });
            }
            return;
        }
        let (sc, lv) = match s.shape[i] {
            Ins::Rot(a) => (s.scale[a], s.level[a]),
            Ins::Add(a, b) => {
                if (s.scale[a] - s.scale[b]).abs() > s.sf {
                    return;
                }
                (s.scale[a].max(s.scale[b]), s.level[a].max(s.level[b]))
            }
            Ins::Mul(a, b) => (s.scale[a] + s.scale[b], s.level[a].max(s.level[b])),
        };
        let mut k = 0u32;
        loop {
            let v = sc - s.sf * k as f64;
            if k > 0 && v < s.sw {
                break;
            }
            s.scale.push(v);
            s.level.push(lv + k as usize);
            s.ks.push(k);
            go(s, i + 1);
            s.scale.pop();
            s.level.pop();
            s.ks.pop();
            k += 1;
        }
    }
    let mut s = Search {
        shape,
        so,
        sf,
        sw,
        scale: vec![sx, sy],
        level: vec![0, 0],
        ks: Vec::new(),
        best: None,
    };
    go(&mut s, 0);
    s.best
}

/// The oracle's placement as a concrete program: Rescale nodes spliced after
/// the chosen instructions, before any other pass has run.
pub fn with_rescales(shape: &[Ins], sx: f64, sy: f64, so: f64, sf: f64, ks: &[u32]) -> Program {
    let mut b = ProgramBuilder::new(8);
    let mut slot = vec![b.input(sx), b.input(sy)];
    for (&i, &k) in shape.iter().zip(ks) {
        let mut v = match i {
            Ins::Add(a, c) => b.add(slot[a], slot[c]),
            Ins::Mul(a, c) => b.mul(slot[a], slot[c]),
            Ins::Rot(a) => b.rotl(slot[a], 1),
        };
        for _ in 0..k {
            v = b.rescale(v, sf);
        }
        slot.push(v);
    }
    b.output(*slot.last().unwrap(), so);
    b.build()
}

/// Multiplicative depth of the sink, recomputed independently.
pub fn shape_depth(shape: &[Ins]) -> usize {
    let mut d = vec![0usize, 0];
    for &i in shape {
        d.push(match i {
            Ins::Rot(a) => d[a],
            Ins::Add(a, b) => d[a].max(d[b]),
            Ins::Mul(a, b) => d[a].max(d[b]) + 1,
        });
    }
    *d.last().unwrap()
}

pub fn count_op(p: &Program, op: OpCode) -> usize {
    p.nodes().filter(|(_, n)| n.is_op(op)).count()
}

pub fn is_integer_const(p: &Program, id: NodeId) -> bool {
    matches!(p.node(id).kind, eva::ir::NodeKind::Constant { obj: ObjectType::IntegerConst, .. })
}

// ---------------------------------------------------------------------------
// Path-based recomputation on arbitrary programs

/// Per node: (min, max) number of Rescale/ModSwitch nodes on any path from a
/// source. A conforming program has min == max at every cipher node.
pub fn path_levels(p: &Program) -> Vec<(usize, usize)> {
    let order = p.topo_order().unwrap();
    let mut lv = vec![(0usize, 0usize); p.len()];
    for id in order {
        let n = p.node(id);
        let cipher: Vec<NodeId> = n.params.iter().copied().filter(|q| p.node(*q).ty.is_cipher()).collect();
        let bump = (n.is_op(OpCode::Rescale) || n.is_op(OpCode::ModSwitch)) as usize;
        if cipher.is_empty() {
            continue;
        }
        let lo = cipher.iter().map(|q| lv[q.index()].0).min().unwrap();
        let hi = cipher.iter().map(|q| lv[q.index()].1).max().unwrap();
        lv[id.index()] = (lo + bump, hi + bump);
    }
    lv
}

/// Multiplicative depth: Multiply nodes with a ciphertext operand on the
/// longest path.
pub fn mult_depth(p: &Program) -> Vec<usize> {
    let mut d = vec![0usize; p.len()];
    for id in p.topo_order().unwrap() {
        let n = p.node(id);
        let m = n.params.iter().map(|q| d[q.index()]).max().unwrap_or(0);
        let counts = n.is_op(OpCode::Multiply) && n.params.iter().any(|q| p.node(*q).ty.is_cipher());
        d[id.index()] = m + counts as usize;
    }
    d
}

/// Log2 scale of every node, recomputed from the typing rules.
pub fn path_scales(p: &Program) -> Vec<f64> {
    let mut s = vec![0f64; p.len()];
    for id in p.topo_order().unwrap() {
        let n = p.node(id);
        s[id.index()] = match (&n.kind, n.op()) {
            (eva::ir::NodeKind::Input { scale, .. } | eva::ir::NodeKind::Constant { scale, .. }, _) => *scale,
            (_, Some(OpCode::Multiply)) => s[n.params[0].index()] + s[n.params[1].index()],
            (_, Some(OpCode::Rescale)) => {
                let d = p.node(n.params[1]).constant_values().unwrap()[0];
                s[n.params[0].index()] - d.log2()
            }
            (_, Some(OpCode::Add | OpCode::Sub)) => {
                let (a, b) = (n.params[0], n.params[1]);
                match (p.node(a).ty.is_cipher(), p.node(b).ty.is_cipher()) {
                    (true, false) => s[a.index()],
                    (false, true) => s[b.index()],
                    _ => s[a.index()].max(s[b.index()]),
                }
            }
            _ => s[n.params[0].index()],
        };
    }
    s
}

// ---------------------------------------------------------------------------
// Figure checks. Each returns a one-line summary or the first discrepancy.

use eva::passes::{compile, CompileOptions, ModSwitchPolicy};
use eva::validate::{validate, ValidateOptions};
use eva::CompilationResult;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Instruction that `id` consumes, looking through Relinearize nodes.
fn through_relin(p: &Program, mut id: NodeId) -> NodeId {
    while p.node(id).is_op(OpCode::Relinearize) {
        id = p.node(id).params[0];
    }
    id
}

fn full_violations(res: &CompilationResult) -> usize {
    validate(&res.program, &ValidateOptions { sf: res.sf, waterline: Some(res.waterline) }).unwrap().len()
}

pub fn fig1_options() -> CompileOptions {
    CompileOptions { waterline: Some(30.0), ..CompileOptions::default() }
}

/// x²y³ with x at 2^60, y at 2^30, waterline 2^30.
pub fn check_fig1() -> Check {
    let (input, [_x, _y, xx, yy, yyy, o]) = x2y3(60.0, 30.0, 30.0);
    let res = compile(&input, &fig1_options()).map_err(|e| e.to_string())?;
    let p = &res.program;
    let mut rescaled: Vec<NodeId> =
        p.nodes().filter(|(_, n)| n.is_op(OpCode::Rescale)).map(|(_, n)| through_relin(p, n.params[0])).collect();
    rescaled.sort();
    ensure!(rescaled == vec![xx, yyy, o], "rescales follow {rescaled:?}, expected {:?}", [xx, yyy, o]);
    ensure!(!rescaled.contains(&yy), "y·y must not be rescaled");
    ensure!(count_op(p, OpCode::ModSwitch) == 0, "unexpected ModSwitch");
    for m in [xx, yy, yyy, o] {
        let users: Vec<NodeId> = p.nodes().filter(|(_, n)| n.params.contains(&m)).map(|(id, _)| id).collect();
        ensure!(
            users.len() == 1 && p.node(users[0]).is_op(OpCode::Relinearize),
            "multiply {m} is consumed by {users:?}, expected a single Relinearize"
        );
    }
    ensure!(count_op(p, OpCode::Relinearize) == 4, "expected 4 Relinearize nodes");
    let out = p.outputs[0].node;
    let lv = path_levels(p)[out.index()];
    ensure!(lv == (2, 2), "output path levels {lv:?}, expected a conforming chain of length 2");
    let v = full_violations(&res);
    ensure!(v == 0, "{v} validator violations");
    ensure!(res.bit_sizes == vec![60, 60, 60, 60], "bits {:?}", res.bit_sizes);
    Ok(format!("rescales after x·x, y²·y, x²·y³; 4 relinearize; |c_o| = 2; bits {:?}", res.bit_sizes))
}

/// x² + x with x at 2^30 and s_o = 2^30.
pub fn check_fig2() -> Check {
    let (input, [x, xx, o]) = x2_plus_x(30.0, 30.0);
    let res = compile(&input, &CompileOptions::default()).map_err(|e| e.to_string())?;
    let p = &res.program;
    let add = p.node(o);
    ensure!(add.is_op(OpCode::Add), "output is no longer the Add");
    let lhs = through_relin(p, add.params[0]);
    ensure!(lhs == xx, "Add lhs is {lhs}, expected x·x");
    let m = p.node(add.params[1]);
    ensure!(m.is_op(OpCode::Multiply) && m.params[0] == x, "Add rhs is not a multiply of x");
    match &p.node(m.params[1]).kind {
        eva::ir::NodeKind::Constant { scale, values, .. } => {
            ensure!(*scale == 30.0 && values == &vec![1.0], "multiplier is {values:?} at 2^{scale}")
        }
        k => return Err(format!("multiplier operand is {k:?}")),
    }
    ensure!(count_op(p, OpCode::Rescale) == 0 && count_op(p, OpCode::ModSwitch) == 0, "unexpected rescale/modswitch");
    ensure!(full_violations(&res) == 0, "validator violations");
    // Special prime 2^60, then q = {2^60, s_o}.
    ensure!(res.bit_sizes == vec![60, 60, 30], "bits {:?}", res.bit_sizes);
    Ok(format!("x·(1 @ 2^30) feeds the Add; bits {:?} (q = {{2^60, 2^30}}), r = {}", res.bit_sizes, res.r))
}

/// Longest path from any source, in edges.
pub fn node_depths(p: &Program) -> Vec<usize> {
    let mut d = vec![0usize; p.len()];
    for id in p.topo_order().unwrap() {
        d[id.index()] = p.node(id).params.iter().map(|q| d[q.index()] + 1).max().unwrap_or(0);
    }
    d
}

pub fn fig3(policy: ModSwitchPolicy) -> Result<(CompilationResult, [NodeId; 4]), String> {
    let (input, ids) = x2_plus_x_plus_x(60.0, 30.0);
    let res = compile(&input, &CompileOptions { modswitch: policy, ..CompileOptions::default() })
        .map_err(|e| e.to_string())?;
    Ok((res, ids))
}

/// x² + (x + x) at 2^60: eager switches x before the inner Add, lazy switches
/// the inner Add's result before the outer one.
pub fn check_fig3() -> Check {
    let (eager, [x, xx, inner, o]) = fig3(ModSwitchPolicy::Eager)?;
    let (lazy, _) = fig3(ModSwitchPolicy::Lazy)?;
    let ms = |p: &Program| -> Vec<NodeId> {
        p.nodes().filter(|(_, n)| n.is_op(OpCode::ModSwitch)).map(|(id, _)| id).collect()
    };
    let (pe, pl) = (&eager.program, &lazy.program);
    let (me, ml) = (ms(pe), ms(pl));
    ensure!(me.len() == 1 && ml.len() == 1, "ModSwitch counts eager {} lazy {}", me.len(), ml.len());
    ensure!(pe.node(me[0]).params[0] == x, "eager ModSwitch does not switch x");
    ensure!(pe.node(inner).params == vec![me[0], me[0]], "eager inner Add does not read the switched x twice");
    ensure!(pe.node(xx).params == vec![x, x], "eager must leave x·x on the fresh x");
    ensure!(pl.node(ml[0]).params[0] == inner, "lazy ModSwitch does not switch the inner Add");
    ensure!(pl.node(o).params.contains(&ml[0]), "lazy ModSwitch does not feed the outer Add");
    ensure!(pl.node(inner).params == vec![x, x], "lazy inner Add must read x directly");
    ensure!(full_violations(&eager) == 0 && full_violations(&lazy) == 0, "validator violations");
    let (de, dl) = (node_depths(pe)[me[0].index()], node_depths(pl)[ml[0].index()]);
    ensure!(de < dl, "eager ModSwitch depth {de} not below lazy {dl}");
    ensure!(eager.r == lazy.r, "r differs: eager {} lazy {}", eager.r, lazy.r);
    Ok(format!("eager ModSwitch at depth {de} (on x), lazy at depth {dl} (on x+x); both r = {}", eager.r))
}
