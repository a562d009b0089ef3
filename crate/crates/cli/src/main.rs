use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser};
use inwin_core::pipeline::{bench_report, parse_config, run_pipeline, PipelineConfig, Report};
use toml::{Table, Value};

/// Directory for reports when neither `--report` nor the config names a path.
const REPORT_DIR_ENV: &str = "INWIN_REPORT_DIR";

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Coarse-to-fine generation with inward sliding-window attention on a toy
/// diffusion transformer. All grids are in tokens.
#[derive(Debug, Parser)]
#[command(name = "inwin", version)]
struct Cli {
    /// Flat TOML config file; flags override its keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Native grid as FxHxW.
    #[arg(long, value_name = "FxHxW")]
    native_grid: Option<String>,
    /// Target grid as FxHxW.
    #[arg(long, value_name = "FxHxW")]
    target_grid: Option<String>,
    /// Window extents as WxH (even).
    #[arg(long, value_name = "WxH")]
    window: Option<String>,

    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    flow_shift: Option<f64>,

    /// Cross-attention override weight in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Steps between full-branch refreshes.
    #[arg(long)]
    cache_period: Option<u64>,
    /// Also run the unconditional pass through the dual path.
    #[arg(long, action = ArgAction::SetTrue)]
    dual_path_on_uncond: bool,
    /// inverse-sqrt-d or entropy.
    #[arg(long)]
    scale_mode: Option<String>,
    /// Native token count for entropy scaling (defaults to native H*W).
    #[arg(long)]
    native_tokens: Option<u64>,

    #[arg(long)]
    model_dim: Option<u64>,
    #[arg(long)]
    heads: Option<u64>,
    #[arg(long)]
    head_dim: Option<u64>,
    #[arg(long)]
    blocks: Option<u64>,
    #[arg(long)]
    ff_dim: Option<u64>,
    #[arg(long)]
    text_len: Option<u64>,
    #[arg(long)]
    text_dim: Option<u64>,
    #[arg(long)]
    channels: Option<u64>,

    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    noise_seed: Option<u64>,
    /// nearest or trilinear.
    #[arg(long)]
    upsample: Option<String>,

    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Only compute mask statistics and FLOPs; no denoising.
    #[arg(long, action = ArgAction::SetTrue)]
    bench_only: bool,
}

impl Cli {
    fn overrides(&self) -> Result<Table, String> {
        let mut t = Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_string(), v);
            }
        };
        let s = |v: &Option<String>| v.clone().map(Value::String);
        let f = |v: Option<f64>| v.map(Value::Float);
        let flag = |b: bool| b.then_some(Value::Boolean(true));

        put("native_grid", s(&self.native_grid));
        put("target_grid", s(&self.target_grid));
        put("window", s(&self.window));
        put("strength", f(self.strength));
        put("guidance_scale", f(self.guidance_scale));
        put("flow_shift", f(self.flow_shift));
        put("lambda", f(self.lambda));
        put("dual_path_on_uncond", flag(self.dual_path_on_uncond));
        put("scale_mode", s(&self.scale_mode));
        put("upsample", s(&self.upsample));
        put("bench_only", flag(self.bench_only));
        if let Some(p) = &self.report {
            put("report", Some(Value::String(p.display().to_string())));
        }

        for (key, value) in [
            ("steps", self.steps),
            ("cache_period", self.cache_period),
            ("native_tokens", self.native_tokens),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("blocks", self.blocks),
            ("ff_dim", self.ff_dim),
            ("text_len", self.text_len),
            ("text_dim", self.text_dim),
            ("channels", self.channels),
            ("weight_seed", self.weight_seed),
            ("noise_seed", self.noise_seed),
        ] {
            if let Some(v) = value {
                let v = i64::try_from(v)
                    .map_err(|_| format!("--{} is too large", key.replace('_', "-")))?;
                put(key, Some(Value::Integer(v)));
            }
        }
        Ok(t)
    }
}

fn fail(code: u8, kind: &str, message: impl std::fmt::Display) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.to_string() });
    eprintln!("{line}");
    ExitCode::from(code)
}

/// Writes via a temporary file in the destination directory and renames it
/// into place, so a failed run never leaves a partial report behind.
fn write_atomically(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn report_in_dir(dir: &Path, contents: &str) -> std::io::Result<PathBuf> {
    let mut tmp = tempfile::Builder::new()
        .prefix("inwin-report-")
        .suffix(".json")
        .tempfile_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    let (_, path) = tmp.keep().map_err(|e| e.error)?;
    Ok(path)
}

fn emit(config: &PipelineConfig, report: &Report) -> std::io::Result<()> {
    let json = report.to_json() + "\n";
    if let Some(path) = &config.report {
        return write_atomically(path, &json);
    }
    if let Some(dir) = std::env::var_os(REPORT_DIR_ENV) {
        let path = report_in_dir(Path::new(&dir), &json)?;
        println!("{}", path.display());
        return Ok(());
    }
    std::io::stdout().write_all(json.as_bytes())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail(EXIT_CONFIG, "config", first.trim_start_matches("error: "));
        }
    };
    let overrides = match cli.overrides() {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, "config", e),
    };
    let config = match parse_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, "config", e),
    };

    let report = if config.bench_only {
        bench_report(&config)
    } else {
        run_pipeline(&config).map(|run| run.report)
    };
    let report = match report {
        Ok(r) => r,
        Err(e) => return fail(EXIT_RUNTIME, "runtime", e),
    };
    match emit(&config, &report) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_RUNTIME, "io", e),
    }
}
