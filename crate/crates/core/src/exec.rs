//! Reference execution under the identity scheme: encryption and decryption are
//! the identity, ciphertexts are plain `f64` vectors, and Rescale, ModSwitch and
//! Relinearize only change metadata.
//!
//! Scheduling is dynamic: every node holds an atomic count of unfinished
//! operand edges and is spawned onto the rayon pool the moment it reaches zero.
//! A node's buffer retires to a free pool once all of its consumers have run.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::error::{EvaError, Result};
use crate::ir::{replicate, NodeId, NodeKind, ObjectType, OpCode, Program};
use crate::meta;

#[derive(Clone, Debug, PartialEq)]
pub struct InputValue {
    pub data: Vec<f64>,
    /// Overrides the declared input scale (only observable in quantized mode).
    pub scale: Option<f64>,
}

pub type Inputs = BTreeMap<NodeId, InputValue>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Exact,
    /// Snaps every value to the fixed-point grid of its scale: round(v·2^s)/2^s.
    Quantized,
}

#[derive(Clone, Debug)]
pub struct ExecOptions {
    pub threads: usize,
    pub mode: Mode,
    /// Return retired buffers to a pool; off keeps every value alive.
    pub reuse: bool,
    pub trace: bool,
    /// Artificial per-instruction delay, for observing concurrency.
    pub op_latency: Option<Duration>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { threads: 1, mode: Mode::Exact, reuse: true, trace: false, op_latency: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputValue {
    pub node: NodeId,
    pub data: Vec<f64>,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub node: NodeId,
    pub thread: usize,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outputs: Vec<OutputValue>,
    pub wall: Duration,
    pub peak_live_buffers: usize,
    pub executed: usize,
    /// Sorted by start time; empty unless tracing was requested.
    pub trace: Vec<TraceEvent>,
}

type Buf = Arc<Vec<f64>>;

struct Shared<'a> {
    p: &'a Program,
    opts: &'a ExecOptions,
    scales: Vec<f64>,
    /// Consumers per operand edge (a node used twice appears twice).
    consumers: Vec<Vec<NodeId>>,
    pending: Vec<AtomicUsize>,
    remaining: Vec<AtomicUsize>,
    pinned: Vec<bool>,
    sources: Vec<Mutex<Option<Vec<f64>>>>,
    slots: Vec<Mutex<Option<Buf>>>,
    free: Mutex<Vec<Vec<f64>>>,
    live: AtomicUsize,
    peak: AtomicUsize,
    executed: AtomicUsize,
    error: Mutex<Option<EvaError>>,
    trace: Mutex<Vec<TraceEvent>>,
    start: Instant,
}

fn thread_pool(threads: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS.get_or_init(Default::default).lock().unwrap();
    pools
        .entry(threads)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("eva-exec-{i}"))
                    .build()
                    .expect("failed to start executor threads"),
            )
        })
        .clone()
}

fn is_scalar(obj: ObjectType) -> bool {
    matches!(obj, ObjectType::ScalarConst | ObjectType::ScalarPlain | ObjectType::ScalarCipher | ObjectType::IntegerConst)
}

/// Broadcasts scalars and replicates short vectors to `vec_size`.
fn materialize(id: NodeId, obj: ObjectType, data: &[f64], vec_size: usize) -> Result<Vec<f64>> {
    if is_scalar(obj) {
        return match data {
            [v] => Ok(vec![*v; vec_size]),
            _ => Err(EvaError::InputLength { id, len: data.len(), vec_size }),
        };
    }
    replicate(data, vec_size).ok_or(EvaError::InputLength { id, len: data.len(), vec_size })
}

fn eval(op: OpCode, args: &[Buf], out: &mut [f64]) {
    let n = out.len();
    let a = &args[0];
    match op {
        OpCode::Negate => out.iter_mut().zip(a.iter()).for_each(|(o, x)| *o = -x),
        OpCode::Add => out.iter_mut().zip(a.iter().zip(args[1].iter())).for_each(|(o, (x, y))| *o = x + y),
        OpCode::Sub => out.iter_mut().zip(a.iter().zip(args[1].iter())).for_each(|(o, (x, y))| *o = x - y),
        OpCode::Multiply => out.iter_mut().zip(a.iter().zip(args[1].iter())).for_each(|(o, (x, y))| *o = x * y),
        OpCode::RotateLeft | OpCode::RotateRight => {
            let k = (args[1][0] as i64).rem_euclid(n as i64) as usize;
            let k = if op == OpCode::RotateLeft { k } else { (n - k) % n };
            for (i, o) in out.iter_mut().enumerate() {
                *o = a[(i + k) % n];
            }
        }
        OpCode::Relinearize | OpCode::ModSwitch | OpCode::Rescale | OpCode::Copy => out.copy_from_slice(a),
    }
}

impl Shared<'_> {
    fn fail(&self, e: EvaError) {
        let mut slot = self.error.lock().unwrap();
        if slot.is_none() {
            *slot = Some(e);
        }
    }

    fn failed(&self) -> bool {
        self.error.lock().unwrap().is_some()
    }

    fn buffer(&self) -> Vec<f64> {
        let recycled = if self.opts.reuse { self.free.lock().unwrap().pop() } else { None };
        recycled.unwrap_or_else(|| vec![0.0; self.p.vec_size()])
    }

    fn retire(&self, id: NodeId) {
        if self.pinned[id.index()] || !self.opts.reuse {
            return;
        }
        if let Some(buf) = self.slots[id.index()].lock().unwrap().take() {
            self.live.fetch_sub(1, Ordering::SeqCst);
            if let Ok(v) = Arc::try_unwrap(buf) {
                self.free.lock().unwrap().push(v);
            }
        }
    }

    fn compute(&self, id: NodeId) -> Result<Vec<f64>> {
        let node = self.p.node(id);
        let mut data = match node.kind {
            NodeKind::Input { .. } | NodeKind::Constant { .. } => {
                self.sources[id.index()].lock().unwrap().take().expect("source materialized once")
            }
            NodeKind::Inst(op) => {
                let args: Vec<Buf> = node
                    .params
                    .iter()
                    .map(|q| self.slots[q.index()].lock().unwrap().clone().expect("operand retired early"))
                    .collect();
                let mut out = self.buffer();
                eval(op, &args, &mut out);
                if let Some(d) = self.opts.op_latency {
                    std::thread::sleep(d);
                }
                out
            }
        };
        if self.opts.mode == Mode::Quantized && !matches!(node.ty, crate::ir::ValueType::Integer) {
            let f = self.scales[id.index()].exp2();
            data.iter_mut().for_each(|v| *v = (*v * f).round() / f);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EvaError::NonFinite(id));
        }
        Ok(data)
    }

    fn run<'s>(&'s self, scope: &rayon::Scope<'s>, id: NodeId) {
        if self.failed() {
            return;
        }
        let t0 = self.start.elapsed();
        let data = match self.compute(id) {
            Ok(d) => d,
            Err(e) => return self.fail(e),
        };
        let live = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(live, Ordering::SeqCst);
        *self.slots[id.index()].lock().unwrap() = Some(Arc::new(data));
        if self.opts.trace {
            let t1 = self.start.elapsed();
            self.trace.lock().unwrap().push(TraceEvent {
                node: id,
                thread: rayon::current_thread_index().unwrap_or(0),
                start_ns: t0.as_nanos() as u64,
                end_ns: t1.as_nanos() as u64,
            });
        }
        self.executed.fetch_add(1, Ordering::SeqCst);
        for q in &self.p.node(id).params {
            if self.remaining[q.index()].fetch_sub(1, Ordering::SeqCst) == 1 {
                self.retire(*q);
            }
        }
        if self.remaining[id.index()].load(Ordering::SeqCst) == 0 {
            self.retire(id);
        }
        for &c in &self.consumers[id.index()] {
            if self.pending[c.index()].fetch_sub(1, Ordering::SeqCst) == 1 {
                scope.spawn(move |s| self.run(s, c));
            }
        }
    }
}

/// Evaluates `p` on `inputs`. Results do not depend on the thread count.
pub fn execute(p: &Program, inputs: &Inputs, opts: &ExecOptions) -> Result<RunReport> {
    p.check_structure()?;
    let n = p.len();
    let mut meta_prog = None;
    let mut sources: Vec<Mutex<Option<Vec<f64>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    for (id, node) in p.nodes() {
        let data = match &node.kind {
            NodeKind::Input { obj, .. } => {
                let v = inputs.get(&id).ok_or(EvaError::MissingInput(id))?;
                if let Some(s) = v.scale {
                    let q: &mut Program = meta_prog.get_or_insert_with(|| p.clone());
                    if let NodeKind::Input { scale, .. } = &mut q.node_mut(id).kind {
                        *scale = s;
                    }
                }
                materialize(id, *obj, &v.data, p.vec_size())?
            }
            NodeKind::Constant { obj, values, .. } => materialize(id, *obj, values, p.vec_size())?,
            NodeKind::Inst(_) => continue,
        };
        sources[id.index()] = Mutex::new(Some(data));
    }
    let scales = meta::scales(meta_prog.as_ref().unwrap_or(p))?;

    let mut consumers = vec![Vec::new(); n];
    let mut remaining = vec![0usize; n];
    for (id, node) in p.nodes() {
        for q in &node.params {
            consumers[q.index()].push(id);
            remaining[q.index()] += 1;
        }
    }
    let mut pinned = vec![false; n];
    for o in &p.outputs {
        pinned[o.node.index()] = true;
    }
    let sh = Shared {
        p,
        opts,
        scales,
        consumers,
        pending: p.nodes().map(|(_, node)| AtomicUsize::new(node.params.len())).collect(),
        remaining: remaining.into_iter().map(AtomicUsize::new).collect(),
        pinned,
        sources,
        slots: (0..n).map(|_| Mutex::new(None)).collect(),
        free: Mutex::new(Vec::new()),
        live: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
        executed: AtomicUsize::new(0),
        error: Mutex::new(None),
        trace: Mutex::new(Vec::new()),
        start: Instant::now(),
    };
    let roots: Vec<NodeId> = p.nodes().filter(|(_, node)| node.params.is_empty()).map(|(id, _)| id).collect();
    thread_pool(opts.threads.max(1)).scope(|s| {
        for r in roots {
            let sh = &sh;
            s.spawn(move |s| sh.run(s, r));
        }
    });
    let wall = sh.start.elapsed();
    if let Some(e) = sh.error.into_inner().unwrap() {
        return Err(e);
    }
    let executed = sh.executed.load(Ordering::SeqCst);
    if executed != n {
        return Err(EvaError::Internal(format!("executed {executed} of {n} nodes")));
    }
    let outputs = p
        .outputs
        .iter()
        .map(|o| OutputValue {
            node: o.node,
            data: sh.slots[o.node.index()].lock().unwrap().as_ref().expect("outputs are pinned").to_vec(),
            scale: sh.scales[o.node.index()],
        })
        .collect();
    let mut trace = sh.trace.into_inner().unwrap();
    trace.sort_by_key(|t| (t.start_ns, t.node));
    Ok(RunReport { outputs, wall, peak_live_buffers: sh.peak.load(Ordering::SeqCst), executed, trace })
}

/// Parses `id: [v1, v2, ...]` lines, each optionally followed by `scale=<log2>`.
/// Blank lines and `#` comments are ignored.
pub fn parse_inputs(text: &str) -> Result<Inputs> {
    let mut out = Inputs::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| EvaError::Parse(format!("inputs line {}: {m}", lineno + 1));
        let (id, rest) = line.split_once(':').ok_or_else(|| bad("expected `id: [values]`"))?;
        let id: u32 = id.trim().parse().map_err(|_| bad("node id must be a non-negative integer"))?;
        let close = rest.rfind(']').ok_or_else(|| bad("missing `]`"))?;
        let data: Vec<f64> = serde_json::from_str(&rest[..=close]).map_err(|e| bad(&e.to_string()))?;
        let tail = rest[close + 1..].trim();
        let scale = match tail {
            "" => None,
            t => Some(
                t.strip_prefix("scale=")
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| bad("trailing text must be `scale=<log2>`"))?,
            ),
        };
        if out.insert(NodeId(id), InputValue { data, scale }).is_some() {
            return Err(bad("duplicate input id"));
        }
    }
    Ok(out)
}

/// Renders values in the same `id: [..]` line format the inputs use.
pub fn format_values<'a>(values: impl IntoIterator<Item = (NodeId, &'a [f64])>) -> String {
    let mut s = String::new();
    for (id, data) in values {
        s.push_str(&format!("{id}: {}\n", serde_json::to_string(data).expect("finite values")));
    }
    s
}
