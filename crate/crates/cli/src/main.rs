//! `spikemoe`: train, evaluate and inspect spiking mixture-of-experts
//! models from the command line.
//!
//! Subcommands: `train`, `eval`, `routing-stats`, `attn-export`, `profile`,
//! `gen-data`. Options come from flags or an optional JSON config file;
//! flags win. Unknown flags exit with code 2, runtime failures with 1.
//! `SPIKEMOE_THREADS` caps the worker pool.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use spikemoe_core::checkpoint::{write_array, Checkpoint};
use spikemoe_core::data::{
    gen_synthetic_events, gen_synthetic_static, load_cifar10, load_dataset, save_dataset, DataKind,
    Dataset,
};
use spikemoe_core::energy::{profile_forward, E_AC_PJ, E_MAC_PJ};
use spikemoe_core::model::{LossMode, ModelConfig, ModelInput};
use spikemoe_core::moe::RoutingRecord;
use spikemoe_core::train::{entropy_of_loads, evaluate, timestep_sweep, train, TrainSettings, TrainSinks};
use spikemoe_core::{Error, Graph32, Real, Result};

#[derive(Parser)]
#[command(name = "spikemoe", version, about = "Spike-driven transformer with mixture-of-experts routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and routing logs.
    Train(TrainArgs),
    /// Report top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Aggregate a routing log into per-expert load tables and entropy.
    RoutingStats(RoutingStatsArgs),
    /// Export per-head attention gate maps as portable arrays.
    AttnExport(AttnExportArgs),
    /// Count accumulate/multiply-accumulate operations and estimate energy.
    Profile(ProfileArgs),
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train once per timestep setting and report the accuracy trend.
    TimestepSweep(SweepArgs),
}

#[derive(Args, Clone)]
struct DataOpts {
    /// cifar10-binary | synthetic-static | synthetic-events
    #[arg(long, default_value = "synthetic-static")]
    data_kind: String,
    /// Dataset file (or CIFAR-10 binary file/directory).
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Sample count: generation size for synthetic data, truncation for files.
    #[arg(long)]
    count: Option<usize>,
    /// Class count for generated synthetic data.
    #[arg(long)]
    classes: Option<usize>,
    /// Image side for generated synthetic data.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Clone)]
struct ModelOpts {
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Embedding width D.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Expert count K.
    #[arg(long)]
    experts: Option<usize>,
    /// Active experts per token.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    alpha_aux: Option<f64>,
    /// ce | tet
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
}

#[derive(Args, Clone)]
struct OptimOpts {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    optim: OptimOpts,
    /// Checkpoint output path; metrics/routing logs are written next to it.
    #[arg(long, default_value = "model.smoe")]
    out: PathBuf,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct RoutingStatsArgs {
    /// Line-delimited routing log written during training.
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct AttnExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the .sarr files.
    #[arg(long, default_value = "attn_maps")]
    out: PathBuf,
    /// Samples to run through the model.
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Energy per accumulate, pJ.
    #[arg(long, default_value_t = E_AC_PJ)]
    e_ac: f64,
    /// Energy per multiply-accumulate, pJ.
    #[arg(long, default_value_t = E_MAC_PJ)]
    e_mac: f64,
}

#[derive(Args)]
struct GenDataArgs {
    /// synthetic-static | synthetic-events
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    timesteps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    optim: OptimOpts,
    /// Comma-separated timestep settings.
    #[arg(long, default_value = "1,2,4,8")]
    steps: String,
    /// Report file (one JSON line per timestep setting).
    #[arg(long, default_value = "timestep_sweep.jsonl")]
    out: PathBuf,
}

/// Optional JSON config file with the same knobs as the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    timesteps: Option<usize>,
    layers: Option<usize>,
    dim: Option<usize>,
    heads: Option<usize>,
    experts: Option<usize>,
    topk: Option<usize>,
    alpha_aux: Option<f64>,
    loss: Option<String>,
    patch_size: Option<usize>,
    label_smoothing: Option<f64>,
    expert_hidden: Option<usize>,
    shared_expert_always_on: Option<bool>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    weight_decay: Option<f64>,
    warmup_epochs: Option<usize>,
    train_fraction: Option<f64>,
    augment: Option<bool>,
}

fn main() -> ExitCode {
    spikemoe_core::threads::init_from_env();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::RoutingStats(args) => cmd_routing_stats(args),
        Command::AttnExport(args) => cmd_attn_export(args),
        Command::Profile(args) => cmd_profile(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::TimestepSweep(args) => cmd_sweep(args),
    }
}

fn read_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::contract(format!("bad config file {}: {e}", p.display())))
        }
    }
}

fn load_data(opts: &DataOpts, seed: u64) -> Result<Dataset<Real>> {
    let kind = DataKind::from_str(&opts.data_kind)?;
    let mut data = match (&kind, &opts.data_path) {
        (DataKind::Cifar10Binary, Some(p)) => load_cifar10::<Real>(p)?,
        (DataKind::Cifar10Binary, None) => {
            return Err(Error::contract("cifar10-binary needs --data-path"));
        }
        (_, Some(p)) => {
            let data = load_dataset::<Real>(p)?;
            if data.kind != kind {
                return Err(Error::contract(format!(
                    "file {} holds {:?} data, not {:?}",
                    p.display(),
                    data.kind,
                    kind
                )));
            }
            data
        }
        (DataKind::SyntheticStatic, None) => gen_synthetic_static(
            seed,
            opts.count.unwrap_or(512),
            opts.classes.unwrap_or(10),
            opts.image_size.unwrap_or(32),
        ),
        (DataKind::SyntheticEvents, None) => gen_synthetic_events(
            seed,
            opts.count.unwrap_or(512),
            opts.classes.unwrap_or(10),
            opts.image_size.unwrap_or(32),
            4,
        ),
    };
    if opts.data_path.is_some() {
        if let Some(limit) = opts.count {
            data.truncate(limit);
        }
    }
    Ok(data)
}

fn build_settings(
    data: &Dataset<Real>,
    file: &FileConfig,
    model: &ModelOpts,
    optim: &OptimOpts,
    no_augment: bool,
) -> Result<TrainSettings> {
    let defaults = ModelConfig::default();
    let dim = model.dim.or(file.dim).unwrap_or(defaults.embed_dim);
    let (in_channels, image_size, timesteps_from_data) = if data.is_events() {
        (data.sample_shape[1], data.sample_shape[2], Some(data.sample_shape[0]))
    } else {
        (data.sample_shape[0], data.sample_shape[1], None)
    };
    let timesteps = timesteps_from_data
        .or(model.timesteps)
        .or(file.timesteps)
        .unwrap_or(defaults.timesteps);
    let loss_mode = match model.loss.as_deref().or(file.loss.as_deref()) {
        None => defaults.loss_mode,
        Some("ce") => LossMode::Ce,
        Some("tet") => LossMode::Tet,
        Some(other) => return Err(Error::contract(format!("unknown loss mode '{other}'"))),
    };
    let cfg = ModelConfig {
        layers: model.layers.or(file.layers).unwrap_or(defaults.layers),
        embed_dim: dim,
        heads: model.heads.or(file.heads).unwrap_or(defaults.heads),
        num_experts: model.experts.or(file.experts).unwrap_or(defaults.num_experts),
        top_k: model.topk.or(file.topk).unwrap_or(defaults.top_k),
        timesteps,
        num_classes: data.num_classes,
        image_size,
        patch_size: model.patch_size.or(file.patch_size).unwrap_or(defaults.patch_size),
        in_channels,
        expert_hidden: file.expert_hidden.unwrap_or(dim * 4),
        prompt_len: defaults.prompt_len,
        lif: defaults.lif,
        alpha_aux: model.alpha_aux.or(file.alpha_aux).unwrap_or(defaults.alpha_aux),
        label_smoothing: file.label_smoothing.unwrap_or(defaults.label_smoothing),
        loss_mode,
        shared_expert_always_on: file.shared_expert_always_on.unwrap_or(false),
    };
    let odefaults = spikemoe_core::optim::OptimConfig::default();
    let total_epochs = optim.epochs.or(file.epochs).unwrap_or(odefaults.total_epochs);
    let ocfg = spikemoe_core::optim::OptimConfig {
        lr: optim.lr.or(file.lr).unwrap_or(odefaults.lr),
        weight_decay: optim.weight_decay.or(file.weight_decay).unwrap_or(odefaults.weight_decay),
        warmup_epochs: optim
            .warmup_epochs
            .or(file.warmup_epochs)
            .unwrap_or_else(|| odefaults.warmup_epochs.min(total_epochs / 10)),
        total_epochs,
        seed: optim.seed.or(file.seed).unwrap_or(odefaults.seed),
        batch_size: optim.batch_size.or(file.batch_size).unwrap_or(odefaults.batch_size),
        ..odefaults
    };
    Ok(TrainSettings {
        model: cfg,
        optim: ocfg,
        augment: if no_augment { false } else { file.augment.unwrap_or(!data.is_events()) },
        train_fraction: file.train_fraction.unwrap_or(0.9),
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let seed = args.optim.seed.or(file.seed).unwrap_or(0);
    let data = load_data(&args.data, seed)?;
    let settings = build_settings(&data, &file, &args.model, &args.optim, args.no_augment)?;

    let metrics_path = sibling(&args.out, "metrics.jsonl");
    let routing_path = sibling(&args.out, "routing.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    let mut routing = BufWriter::new(fs::File::create(&routing_path)?);

    println!(
        "training: {} samples, {} classes, L={} D={} T={} K={} k={} epochs={}",
        data.len(),
        data.num_classes,
        settings.model.layers,
        settings.model.embed_dim,
        settings.model.timesteps,
        settings.model.num_experts,
        settings.model.top_k,
        settings.optim.total_epochs
    );
    let outcome = train(
        &settings,
        &data,
        TrainSinks { metrics: Some(&mut metrics), routing: Some(&mut routing) },
    )?;
    metrics.flush()?;
    routing.flush()?;
    for rec in &outcome.history {
        println!(
            "epoch {:>3}: loss {:.4} acc {:.3} val {:.3} aux {:.4}",
            rec.epoch, rec.train_loss, rec.train_acc, rec.val_acc, rec.aux_loss
        );
    }
    outcome.best_checkpoint.save(&args.out)?;
    println!("best val accuracy {:.1}", outcome.best_val_acc * 100.0);
    println!("checkpoint: {}", args.out.display());
    println!("metrics: {}", metrics_path.display());
    println!("routing log: {}", routing_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.build_model::<Real>()?;
    let data = load_data(&args.data, args.seed.unwrap_or(0))?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let acc = evaluate(&model, &data, &idxs, args.batch_size.unwrap_or(64))?;
    println!("accuracy {:.1}", acc * 100.0);
    Ok(())
}

fn cmd_routing_stats(args: RoutingStatsArgs) -> Result<()> {
    let file = fs::File::open(&args.log)?;
    let reader = std::io::BufReader::new(file);
    let mut per_layer: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut records = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RoutingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(0, format!("bad routing record: {e}")))?;
        let entry = per_layer.entry(record.layer.clone()).or_insert_with(|| vec![0; record.loads.len()]);
        for (e, &c) in record.loads.iter().enumerate() {
            entry[e] += c;
        }
        records += 1;
    }
    if records == 0 {
        return Err(Error::contract("routing log holds no records"));
    }
    println!("records: {records}");
    let mut overall: Vec<u64> = Vec::new();
    for (layer, loads) in &per_layer {
        if overall.len() < loads.len() {
            overall.resize(loads.len(), 0);
        }
        for (e, &c) in loads.iter().enumerate() {
            overall[e] += c;
        }
        println!("{layer}: load table {} entropy {:.4}", format_loads(loads), entropy_of_loads(loads));
    }
    println!("overall: load table {} entropy {:.4}", format_loads(&overall), entropy_of_loads(&overall));
    Ok(())
}

fn format_loads(loads: &[u64]) -> String {
    let total: u64 = loads.iter().sum();
    let fractions: Vec<String> = loads
        .iter()
        .map(|&c| {
            if total == 0 {
                "0".to_string()
            } else {
                format!("{:.3}", c as f64 / total as f64)
            }
        })
        .collect();
    format!("[{}]", fractions.join(", "))
}

fn cmd_attn_export(args: AttnExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.build_model::<Real>()?;
    let data = load_data(&args.data, args.seed.unwrap_or(0))?;
    let batch: Vec<usize> = (0..args.batch.min(data.len())).collect();
    if batch.is_empty() {
        return Err(Error::contract("attention export needs at least one sample"));
    }
    let values = if data.is_events() { data.batch_events(&batch) } else { data.batch_static(&batch) };
    let mut g = Graph32::new();
    let input = if data.is_events() {
        ModelInput::Events { frames: &values, batch: batch.len() }
    } else {
        ModelInput::Static { pixels: &values, batch: batch.len() }
    };
    let out = model.forward(&mut g, input, false, true, &mut spikemoe_core::energy::Recorder::off())?;
    let gates = out.attn_gates.expect("attention gates were requested");
    fs::create_dir_all(&args.out)?;
    let mut written = 0usize;
    for (l, node) in gates.iter().enumerate() {
        let shape = g.shape(*node).to_vec(); // (T, B, N, heads)
        let data_all = g.data(*node);
        let (t_len, b_len, n_len, heads) = (shape[0], shape[1], shape[2], shape[3]);
        for h in 0..heads {
            let mut head_map = Vec::with_capacity(t_len * b_len * n_len);
            for t in 0..t_len {
                for b in 0..b_len {
                    for n in 0..n_len {
                        head_map.push(data_all[((t * b_len + b) * n_len + n) * heads + h]);
                    }
                }
            }
            let path = args.out.join(format!("attn_l{l}_h{h}.sarr"));
            write_array(&path, &[t_len, b_len, n_len], &head_map)?;
            written += 1;
        }
    }
    println!("wrote {written} gate maps to {}", args.out.display());
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.build_model::<Real>()?;
    let data = load_data(&args.data, args.seed.unwrap_or(0))?;
    let batch: Vec<usize> = (0..args.batch.min(data.len())).collect();
    if batch.is_empty() {
        return Err(Error::contract("profiling needs at least one sample"));
    }
    let values = if data.is_events() { data.batch_events(&batch) } else { data.batch_static(&batch) };
    let ledger = if data.is_events() {
        profile_forward(&model, ModelInput::Events { frames: &values, batch: batch.len() })?
    } else {
        profile_forward(&model, ModelInput::Static { pixels: &values, batch: batch.len() })?
    };
    print!("{}", ledger.report(args.e_ac, args.e_mac));
    println!("interior mac count: {}", ledger.interior_mac());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let kind = DataKind::from_str(&args.kind)?;
    let data: Dataset<Real> = match kind {
        DataKind::SyntheticStatic => {
            gen_synthetic_static(args.seed, args.count, args.classes, args.image_size)
        }
        DataKind::SyntheticEvents => {
            gen_synthetic_events(args.seed, args.count, args.classes, args.image_size, args.timesteps)
        }
        DataKind::Cifar10Binary => {
            return Err(Error::contract("cifar10-binary is an external dataset; nothing to generate"));
        }
    };
    save_dataset(&data, &args.out)?;
    println!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let file = read_file_config(&args.config)?;
    let seed = args.optim.seed.or(file.seed).unwrap_or(0);
    let data = load_data(&args.data, seed)?;
    let settings = build_settings(&data, &file, &args.model, &args.optim, false)?;
    let steps: Vec<usize> = args
        .steps
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::contract(format!("bad timestep '{s}'"))))
        .collect::<Result<_>>()?;
    let mut report = BufWriter::new(fs::File::create(&args.out)?);
    let entries = timestep_sweep(&settings, &data, &steps, Some(&mut report))?;
    report.flush()?;
    for e in &entries {
        println!("T={}: accuracy {:.3}", e.timesteps, e.accuracy);
    }
    println!("report: {}", args.out.display());
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.{suffix}"))
}
