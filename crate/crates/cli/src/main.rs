//! `eva`: compile, validate, run and inspect EVA programs.
//!
//! Exit codes: 0 success, 1 validation or compile failure, 2 I/O or parse
//! error, 3 internal error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use eva::exec::{format_values, parse_inputs};
use eva::gen::{random_inputs, random_program, GenConfig};
use eva::ir::{NodeKind, Program};
use eva::params::{self, CompilationResult, ParamSummary};
use eva::passes::{compile, CompileOptions, ModSwitchPolicy, RescalePolicy, WaterlineMode};
use eva::validate::{validate, ValidateOptions, Violation};
use eva::{load_program, save_program, EvaError, ExecOptions, Mode, NodeId};

#[derive(Parser)]
#[command(name = "eva", version, about = "Compiler toolchain for EVA vector programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    JsonLines,
}

#[derive(Args)]
struct Common {
    /// log2 of the maximum rescale divisor s_f.
    #[arg(long, env = "EVA_SF", default_value_t = 60.0, global = true)]
    sf: f64,
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum RescaleArg {
    Waterline,
    Always,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModSwitchArg {
    Eager,
    EagerAligned,
    Lazy,
}

#[derive(Clone, Copy, ValueEnum)]
enum WaterlineModeArg {
    DepthCapped,
    Loop,
    Single,
}

#[derive(Subcommand)]
enum Command {
    /// Insert Rescale/ModSwitch/Relinearize, validate and select parameters.
    /// Writes the compiled program and a `<out>.params` JSON sidecar.
    Compile {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Desired output scale override, `<id>=<log2>`; repeatable.
        #[arg(long = "so", value_parser = parse_so)]
        so: Vec<(NodeId, f64)>,
        /// Waterline override (log2).
        #[arg(long)]
        sw: Option<f64>,
        #[arg(long, value_enum, default_value_t = RescaleArg::Waterline)]
        rescale: RescaleArg,
        #[arg(long, value_enum, default_value_t = ModSwitchArg::Eager)]
        modswitch: ModSwitchArg,
        #[arg(long, value_enum, default_value_t = WaterlineModeArg::DepthCapped)]
        waterline_mode: WaterlineModeArg,
        #[command(flatten)]
        common: Common,
    },
    /// Check constraints C1–C4 (and the waterline band with `--sw`).
    Validate {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        sw: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Execute under the plaintext reference scheme.
    Run {
        #[arg(short, long)]
        input: PathBuf,
        /// Lines of `<id>: [v, ...] [scale=<log2>]`.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Snap every value to round(v·2^scale)/2^scale.
        #[arg(long)]
        quantize: bool,
        /// Keep every node's buffer alive until the end.
        #[arg(long)]
        no_reuse: bool,
        /// Write per-node start/end timestamps as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print encryption parameters (compiling first if the program is a source program).
    Params {
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the rotation and relinearization keys a program needs.
    Keys {
        #[arg(short, long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emit a Graphviz description of the program.
    ExportDot {
        #[arg(short, long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a random source program (and optionally matching inputs).
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        insts: usize,
        #[arg(long, default_value_t = 8)]
        vec_size: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write random inputs for the program here.
        #[arg(long)]
        inputs_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_so(s: &str) -> Result<(NodeId, f64), String> {
    let (id, scale) = s.split_once('=').ok_or("expected <id>=<log2>")?;
    let id: u32 = id.trim().parse().map_err(|e| format!("bad node id {id:?}: {e}"))?;
    let scale: f64 = scale.trim().parse().map_err(|e| format!("bad scale {scale:?}: {e}"))?;
    Ok((NodeId(id), scale))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

fn exit_code(e: &EvaError) -> u8 {
    match e {
        EvaError::Validation(_) | EvaError::ScaleRatio { .. } | EvaError::Params(_) | EvaError::NonFinite(_) => 1,
        EvaError::Internal(_) => 3,
        _ => 2,
    }
}

impl From<EvaError> for Failure {
    fn from(e: EvaError) -> Self {
        Failure { code: exit_code(&e), msg: e.to_string() }
    }
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 2, msg: format!("{}: {e}", path.display()) }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn load(path: &Path) -> Result<Program, Failure> {
    load_program(&read(path)?).map_err(|e| Failure { code: exit_code(&e), msg: format!("{}: {e}", path.display()) })
}

fn is_compiled(p: &Program) -> bool {
    p.nodes().any(|(_, n)| matches!(n.kind, NodeKind::Inst(op) if op.is_compiler_only()))
}

fn violations_out(vs: &[Violation], format: Format) -> String {
    let mut s = String::new();
    for v in vs {
        match format {
            Format::Text => writeln!(s, "{v}"),
            Format::JsonLines => writeln!(s, "{}", json!(v)),
        }
        .unwrap();
    }
    s
}

fn params_out(summary: &ParamSummary, format: Format) -> String {
    match format {
        Format::Text => summary.to_text(),
        Format::JsonLines => format!("{}\n", json!(summary)),
    }
}

/// Compiled programs are used as-is; source programs go through the default pipeline.
fn selection(p: Program, sf: f64) -> Result<CompilationResult, Failure> {
    if is_compiled(&p) {
        Ok(params::select(p, sf, f64::NAN)?)
    } else {
        Ok(compile(&p, &CompileOptions { sf, ..Default::default() })?)
    }
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.cmd {
        Command::Compile { input, output, so, sw, rescale, modswitch, waterline_mode, common } => {
            let p = load(&input)?;
            let opts = CompileOptions {
                sf: common.sf,
                waterline: sw,
                output_scales: so,
                rescale: match rescale {
                    RescaleArg::Waterline => RescalePolicy::Waterline,
                    RescaleArg::Always => RescalePolicy::Always,
                },
                waterline_mode: match waterline_mode {
                    WaterlineModeArg::DepthCapped => WaterlineMode::DepthCapped,
                    WaterlineModeArg::Loop => WaterlineMode::Loop,
                    WaterlineModeArg::Single => WaterlineMode::Single,
                },
                modswitch: match modswitch {
                    ModSwitchArg::Eager => ModSwitchPolicy::Eager,
                    ModSwitchArg::EagerAligned => ModSwitchPolicy::EagerAligned,
                    ModSwitchArg::Lazy => ModSwitchPolicy::Lazy,
                },
            };
            let res = match compile(&p, &opts) {
                Ok(r) => r,
                Err(EvaError::Validation(vs)) => {
                    print!("{}", violations_out(&vs, common.format));
                    return Err(Failure { code: 1, msg: format!("compiled program has {} violation(s)", vs.len()) });
                }
                Err(e) => return Err(e.into()),
            };
            write(&output, &save_program(&res.program)?)?;
            let summary = res.summary();
            let sidecar = json!({
                "bits": summary.bits,
                "rotations": summary.rotations,
                "r": summary.r,
                "logQ": summary.log_q,
                "N": summary.poly_degree,
                "sf": res.sf,
                "waterline": res.waterline,
            });
            let mut path = output.into_os_string();
            path.push(".params");
            write(Path::new(&path), &format!("{}\n", serde_json::to_string_pretty(&sidecar).unwrap()))?;
            Ok(params_out(&summary, common.format))
        }
        Command::Validate { input, sw, common } => {
            let p = load(&input)?;
            let vs = validate(&p, &ValidateOptions { sf: common.sf, waterline: sw })?;
            let out = violations_out(&vs, common.format);
            if vs.is_empty() {
                Ok(out)
            } else {
                print!("{out}");
                Err(Failure { code: 1, msg: format!("{} violation(s)", vs.len()) })
            }
        }
        Command::Run { input, inputs, threads, quantize, no_reuse, trace, common } => {
            let p = load(&input)?;
            if is_compiled(&p) {
                let vs = validate(&p, &ValidateOptions { sf: common.sf, waterline: None })?;
                if !vs.is_empty() {
                    eprint!("{}", violations_out(&vs, Format::Text));
                    return Err(Failure { code: 1, msg: format!("program has {} violation(s)", vs.len()) });
                }
            }
            let values = parse_inputs(&read(&inputs)?)
                .map_err(|e| Failure { code: 2, msg: format!("{}: {e}", inputs.display()) })?;
            let opts = ExecOptions {
                threads: threads.max(1),
                mode: if quantize { Mode::Quantized } else { Mode::Exact },
                reuse: !no_reuse,
                trace: trace.is_some(),
                op_latency: None,
            };
            let report = eva::execute(&p, &values, &opts)?;
            if let Some(path) = trace {
                let mut csv = String::from("node,op,thread,start_ns,end_ns\n");
                for ev in &report.trace {
                    let node = p.node(ev.node);
                    let op = node.op().map_or("source", |o| o.name());
                    writeln!(csv, "{},{op},{},{},{}", ev.node, ev.thread, ev.start_ns, ev.end_ns).unwrap();
                }
                write(&path, &csv)?;
            }
            Ok(match common.format {
                Format::Text => format_values(report.outputs.iter().map(|o| (o.node, o.data.as_slice()))),
                Format::JsonLines => report
                    .outputs
                    .iter()
                    .map(|o| format!("{}\n", json!({"node": o.node, "scale": o.scale, "data": o.data})))
                    .collect(),
            })
        }
        Command::Params { input, common } => {
            let res = selection(load(&input)?, common.sf)?;
            Ok(params_out(&res.summary(), common.format))
        }
        Command::Keys { input, common } => {
            let res = selection(load(&input)?, common.sf)?;
            let rotations: Vec<i64> = res.rotation_steps.iter().copied().collect();
            let relin = res.program.count_op(eva::OpCode::Relinearize) > 0;
            Ok(match common.format {
                Format::Text => format!(
                    "rotations: {{{}}}\nrelinearization: {relin}\n",
                    rotations.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", ")
                ),
                Format::JsonLines => format!("{}\n", json!({"rotations": rotations, "relinearization": relin})),
            })
        }
        Command::ExportDot { input, output, common: _ } => {
            let dot = eva::dot::export_dot(&load(&input)?)?;
            match output {
                Some(path) => write(&path, &dot).map(|_| String::new()),
                None => Ok(dot),
            }
        }
        Command::Gen { seed, insts, vec_size, output, inputs_out, common: _ } => {
            if !vec_size.is_power_of_two() {
                return Err(EvaError::VecSize(vec_size).into());
            }
            let p = random_program(&GenConfig { insts, vec_size, ..Default::default() }, seed);
            write(&output, &save_program(&p)?)?;
            if let Some(path) = inputs_out {
                let values = random_inputs(&p, seed);
                write(&path, &format_values(values.iter().map(|(id, v)| (*id, v.data.as_slice()))))?;
            }
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(out)) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Ok(Err(f)) => {
            eprintln!("eva: {}", f.msg);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(3),
    }
}
