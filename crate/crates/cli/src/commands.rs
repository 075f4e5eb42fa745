use std::fs;
use std::path::{Path, PathBuf};

use lclab::harness::{compress, sweep_csv, synthetic_corpus, CompressionSpec};
use lclab::model::{gen_toy_model_with, load_checkpoint, load_token_file, save_checkpoint, ModelConfig, ToyModelOptions};
use lclab::noise::{
    compare_interpretations, comparison_table, noise_csv, Interpretation, NoiseSimConfig, NoiseTarget, VectorDist,
};
use lclab::prune::PruneMethod;
use lclab::report::{
    noise_chart, parse_report_input, run_experiment, slope_csv, slope_table, slope_text, sweep_chart,
    CalibrationSetup, ExperimentConfig, OutputLock,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::CliError;
use crate::{Cli, Command, CompressArgs, GenModelArgs, GlobalArgs, ReportArgs};

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    let g = &cli.global;
    match &cli.command {
        Command::GenModel(a) => gen_model(g, a),
        Command::Compress(a) => compress_cmd(g, a),
        Command::Sweep => sweep(g),
        Command::Simulate => simulate(g),
        Command::Report(a) => report(g, a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> CliResult<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("{cmd} needs --{flag}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenModelFile {
    #[serde(default)]
    config: ModelConfig,
    #[serde(default)]
    options: ToyModelOptions,
    #[serde(default)]
    seed: Option<u64>,
}

fn gen_model(g: &GlobalArgs, a: &GenModelArgs) -> CliResult<()> {
    let out = require(&g.out, "out", "gen-model")?;
    let mut file: GenModelFile = match &g.config {
        Some(p) => read_json(p)?,
        None => GenModelFile::default(),
    };
    let c = &mut file.config;
    let overrides = [
        (&mut c.n_layers, a.n_layers),
        (&mut c.d_model, a.d_model),
        (&mut c.n_heads, a.n_heads),
        (&mut c.d_ff, a.d_ff),
        (&mut c.vocab_size, a.vocab_size),
        (&mut c.max_context, a.max_context),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if a.d_model.is_some() || a.n_heads.is_some() {
        c.d_head = c.d_model / c.n_heads.max(1);
    }
    c.validate()?;
    let seed = g.seed.or(file.seed).unwrap_or(0);
    let ckpt = gen_toy_model_with(&file.config, seed, &file.options);
    save_checkpoint(&ckpt, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CompressFile {
    #[serde(flatten)]
    spec: CompressionSpec,
    /// Calibration sequences for Wanda; synthetic when no token file is given.
    #[serde(default)]
    calibration: CalibrationSetup,
    #[serde(default)]
    calibration_tokens: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
}

fn compress_cmd(g: &GlobalArgs, a: &CompressArgs) -> CliResult<()> {
    let cfg_path = require(&g.config, "config", "compress")?;
    let out = require(&g.out, "out", "compress")?;
    let mut file: CompressFile = read_json(cfg_path)?;
    let seed = g.seed.or(file.seed).unwrap_or(0);
    if let CompressionSpec::Prune(p) = &mut file.spec {
        if p.method == PruneMethod::Random && p.seed.is_none() {
            p.seed = Some(seed);
        }
    }
    file.spec.validate()?;
    let base = load_checkpoint(&a.model)?;
    let mc = base.config();
    let calib = if !file.spec.needs_calibration() {
        Vec::new()
    } else {
        let len = file.calibration.length.min(mc.max_context);
        match &file.calibration_tokens {
            Some(p) => {
                let p = cfg_path.parent().unwrap_or(Path::new(".")).join(p);
                load_token_file(&p, mc.vocab_size)?
                    .into_iter()
                    .take(file.calibration.n_sequences)
                    .map(|s| s.prefix(len.min(s.len())).unwrap())
                    .collect()
            }
            None => synthetic_corpus(seed, 0, file.calibration.n_sequences, len, mc.vocab_size),
        }
    };
    let compressed = compress(&base, &file.spec, &calib)?;
    save_checkpoint(&compressed, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(g: &GlobalArgs) -> CliResult<()> {
    let cfg_path = require(&g.config, "config", "sweep")?;
    let mut cfg = ExperimentConfig::load(cfg_path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let dir = g
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("sweep needs --out or output_dir in the config".into()))?;
    cfg.validate()?;
    let _lock = OutputLock::acquire(&dir)?;
    let records = run_experiment(&cfg)?;
    let csv = dir.join("sweep.csv");
    write(&csv, sweep_csv(&records))?;
    write(&dir.join("sweep.svg"), sweep_chart(&records))?;
    println!("wrote {} and sweep.svg ({} rows)", csv.display(), records.len());
    Ok(())
}

fn all_interpretations() -> Vec<Interpretation> {
    Interpretation::ALL.to_vec()
}

fn default_d_k() -> usize {
    1
}

/// Simulation settings shared by every listed interpretation.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    t_max: usize,
    sigma: f64,
    #[serde(default = "default_d_k")]
    d_k: usize,
    trials: usize,
    #[serde(default = "all_interpretations")]
    interpretations: Vec<Interpretation>,
    #[serde(default)]
    vector_dist: VectorDist,
    #[serde(default)]
    noise_target: NoiseTarget,
    #[serde(default)]
    eval_points: Option<Vec<usize>>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn simulate(g: &GlobalArgs) -> CliResult<()> {
    let cfg_path = require(&g.config, "config", "simulate")?;
    let f: SimulateFile = read_json(cfg_path)?;
    if f.interpretations.is_empty() {
        return Err(CliError::Usage("interpretations must not be empty".into()));
    }
    let dir = match (&g.out, &f.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => cfg_path.parent().unwrap_or(Path::new(".")).join(d),
        (None, None) => return Err(CliError::Usage("simulate needs --out or output_dir in the config".into())),
    };
    let base = NoiseSimConfig {
        t_max: f.t_max,
        sigma: f.sigma,
        d_k: f.d_k,
        trials: f.trials,
        interpretation: f.interpretations[0],
        vector_dist: f.vector_dist,
        noise_target: f.noise_target,
        eval_points: f.eval_points,
        seed: g.seed.unwrap_or(f.seed),
    };
    base.validate()?;
    let _lock = OutputLock::acquire(&dir)?;
    let results = compare_interpretations(&base, &f.interpretations)?;
    let curves: Vec<_> = results.iter().map(|r| r.curve.clone()).collect();
    write(&dir.join("noise.csv"), noise_csv(&curves))?;
    write(&dir.join("noise.svg"), noise_chart(&curves))?;
    print!("{}", comparison_table(&results));
    Ok(())
}

fn report(g: &GlobalArgs, a: &ReportArgs) -> CliResult<()> {
    let mut inputs = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        inputs.push(parse_report_input(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?);
    }
    let rows = slope_table(&inputs);
    let text = slope_text(&rows);
    if let Some(dir) = &g.out {
        let _lock = OutputLock::acquire(dir)?;
        write(&dir.join("slopes.csv"), slope_csv(&rows))?;
        write(&dir.join("slopes.txt"), &text)?;
    }
    print!("{text}");
    Ok(())
}
