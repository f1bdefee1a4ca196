//! `lmc` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lmc::checkpoint::{load_checkpoint, save_checkpoint};
use lmc::config::{parse_assignment, read_config_file, RunConfig};
use lmc::io::{is_patch_file, read_patch, write_patch};
use lmc::manifold::{
    generate_synthetic_dataset, load_patch_dataset, patch_rng, sample_alphas, write_pair_manifest,
    Alphas, AugmentationRange, PatchDataset, LABELS_FILE,
};
use lmc::metrics::{
    batch_separation_report, export_embeddings, linear_probe_eval, linear_probe_train,
    read_embeddings_csv, EmbeddingSet, ProbeConfig,
};
use lmc::stain_math::{
    augment, estimate_stain_basis_rgb, fit_macenko_target, macenko_normalize_to_target,
    MacenkoTarget, StainBasis, StainEstimationConfig, DEFAULT_BACKGROUND,
};
use lmc::trainer::{write_loss_log, Trainer, TrainingSet};
use lmc::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "lmc", version, about = "Latent manifold compaction for H&E patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rescale hematoxylin/eosin concentrations of every patch in a directory.
    Augment(AugmentArgs),
    /// Macenko-normalize every patch to a target stain appearance.
    Macenko(MacenkoArgs),
    /// Train an encoder on a patch directory.
    Train(TrainArgs),
    /// Embed one or more patch directories with a trained encoder.
    Embed(EmbedArgs),
    /// Gaussian W2 between the two batches of an embedding CSV.
    EvalSeparation(EvalArgs),
    /// Train a linear probe on one embedding CSV and evaluate on another.
    Probe(ProbeArgs),
    /// Write a labelled synthetic H&E-like dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct AugmentArgs {
    /// Input directory of PNG/PPM patches.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    output: PathBuf,
    /// Fixed hematoxylin scale.
    #[arg(long, requires = "alpha_e", conflicts_with = "random")]
    alpha_h: Option<f64>,
    /// Fixed eosin scale.
    #[arg(long, requires = "alpha_h", conflicts_with = "random")]
    alpha_e: Option<f64>,
    /// Sample scales uniformly from the range, per patch.
    #[arg(long, requires = "seed")]
    random: bool,
    /// Seed for --random.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    range_min: f64,
    #[arg(long, default_value_t = 2.0)]
    range_max: f64,
    /// Write two independent random views per patch (`<stem>_v1`, `<stem>_v2`).
    #[arg(long, requires = "random")]
    pairs: bool,
}

#[derive(Args)]
struct MacenkoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Reference image whose stain basis and concentration scale become the target.
    #[arg(long, conflicts_with_all = ["target_h", "target_e", "target_max_conc"])]
    target: Option<PathBuf>,
    /// Target hematoxylin OD vector, `r,g,b`.
    #[arg(long, default_value = "0.65,0.704,0.286")]
    target_h: String,
    /// Target eosin OD vector, `r,g,b`.
    #[arg(long, default_value = "0.072,0.99,0.105")]
    target_e: String,
    /// Target 99th-percentile H and E concentrations, `h,e`.
    #[arg(long, default_value = "1.9705,1.0308")]
    target_max_conc: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Training patch directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file; command-line values take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set total_steps=N`.
    #[arg(long)]
    steps: Option<usize>,
    /// Use the small test encoder (depth 2, 1 head, width 16, 32-pixel inputs).
    #[arg(long)]
    tiny: bool,
    /// Continue from a training checkpoint; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "set", "seed", "steps", "tiny"])]
    resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation (the checkpoint stays resumable).
    #[arg(long)]
    max_steps: Option<usize>,
    /// Loss log CSV (step, invariance, redundancy, total, lr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patch directory; repeat for several batches. The batch id is the directory name.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional fixed stain shift applied after rendering, `alpha_h,alpha_e`.
    #[arg(long)]
    shift: Option<String>,
}

fn print_resolved(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn parse_reals<const N: usize>(key: &str, s: &str) -> lmc::Result<[f64; N]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config {
            key: key.into(),
            message: format!("cannot parse `{s}`: {e}"),
        })?;
    v.try_into().map_err(|v: Vec<f64>| Error::Config {
        key: key.into(),
        message: format!("expected {N} comma-separated values, got {}", v.len()),
    })
}

fn patch_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_patch_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()).into());
    }
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().and_then(OsStr::to_str).unwrap_or_default().to_owned()
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn copy_labels(input: &Path, output: &Path) -> anyhow::Result<()> {
    let src = input.join(LABELS_FILE);
    if src.is_file() {
        fs::copy(&src, output.join(LABELS_FILE)).map_err(|e| Error::Io { path: src, source: e })?;
    }
    Ok(())
}

/// Applies `f` to every patch file in parallel; failures are logged per file
/// and the command fails only if nothing succeeded.
fn process_files<T: Send>(
    files: &[PathBuf],
    f: impl Fn(&Path) -> lmc::Result<T> + Sync,
) -> anyhow::Result<Vec<(PathBuf, T)>> {
    let results: Vec<_> = files.par_iter().map(|p| (p, f(p))).collect();
    let mut ok = Vec::new();
    let mut last_err = None;
    for (p, r) in results {
        match r {
            Ok(v) => ok.push((p.clone(), v)),
            Err(e) => {
                log::warn!("{}: {e}", p.display());
                last_err = Some(e);
            }
        }
    }
    match (ok.is_empty(), last_err) {
        (true, Some(e)) => Err(anyhow::Error::new(e).context("every input file failed")),
        _ => Ok(ok),
    }
}

fn cmd_augment(a: AugmentArgs) -> anyhow::Result<()> {
    let range = AugmentationRange::new(a.range_min, a.range_max).map_err(|e| Error::Config {
        key: "range".into(),
        message: e.to_string(),
    })?;
    let fixed = match (a.alpha_h, a.alpha_e, a.random) {
        (Some(h), Some(e), false) => Some(Alphas { h, e }),
        (None, None, true) => None,
        _ => {
            return Err(Error::Config {
                key: "alpha".into(),
                message: "pass --alpha-h and --alpha-e, or --random --seed N".into(),
            }
            .into())
        }
    };
    let seed = a.seed.unwrap_or(0);
    print_resolved(&[
        ("mode", if fixed.is_some() { "fixed".into() } else { "random".into() }),
        ("alpha_h", fixed.map_or("sampled".into(), |f| f.h.to_string())),
        ("alpha_e", fixed.map_or("sampled".into(), |f| f.e.to_string())),
        ("range_min", range.min.to_string()),
        ("range_max", range.max.to_string()),
        ("pairs", a.pairs.to_string()),
        ("seed", seed.to_string()),
    ]);
    let files = patch_files(&a.input)?;
    create_dir(&a.output)?;
    let est = StainEstimationConfig::default();
    let views = if a.pairs { 2 } else { 1 };
    let done = process_files(&files, |path| {
        let id = file_name(path);
        let patch = read_patch(path)?;
        let basis = estimate_stain_basis_rgb(&patch, &est)?;
        let mut rng = patch_rng(seed, &id, 0);
        let mut out = Vec::with_capacity(views);
        for v in 0..views {
            let al = fixed.unwrap_or_else(|| sample_alphas(&mut rng, &range));
            let img = augment(&patch, &basis, al.h, al.e, DEFAULT_BACKGROUND)?;
            let name = if a.pairs {
                let p = Path::new(&id);
                let stem = p.file_stem().and_then(OsStr::to_str).unwrap_or("patch");
                let ext = p.extension().and_then(OsStr::to_str).unwrap_or("png");
                format!("{stem}_v{}.{ext}", v + 1)
            } else {
                id.clone()
            };
            write_patch(&a.output.join(name), &img)?;
            out.push(al);
        }
        Ok(out)
    })?;
    let manifest = a.output.join("manifest.csv");
    if a.pairs {
        let rows: Vec<(String, Alphas, Alphas)> = done
            .iter()
            .map(|(p, al)| (file_name(p), al[0], al[1]))
            .collect();
        write_pair_manifest(&manifest, &rows)?;
    } else {
        let mut text = String::from("identifier,alpha_h,alpha_e\n");
        for (p, al) in &done {
            text.push_str(&format!("{},{},{}\n", file_name(p), al[0].h, al[0].e));
        }
        fs::write(&manifest, text).map_err(|e| Error::Io { path: manifest.clone(), source: e })?;
    }
    copy_labels(&a.input, &a.output)?;
    log::info!("augmented {} of {} file(s)", done.len(), files.len());
    Ok(())
}

fn cmd_macenko(a: MacenkoArgs) -> anyhow::Result<()> {
    let est = StainEstimationConfig::default();
    let target = match &a.target {
        Some(p) => fit_macenko_target(&read_patch(p)?, &est)
            .with_context(|| format!("fitting target from {}", p.display()))?,
        None => {
            let basis = StainBasis::from_unnormalized(
                parse_reals::<3>("target_h", &a.target_h)?,
                parse_reals::<3>("target_e", &a.target_e)?,
            )
            .map_err(|e| Error::Config {
                key: "target_h".into(),
                message: e.to_string(),
            })?;
            MacenkoTarget {
                basis,
                max_concentration: parse_reals::<2>("target_max_conc", &a.target_max_conc)?,
            }
        }
    };
    let (h, e) = (target.basis.h(), target.basis.e());
    print_resolved(&[
        ("target_source", a.target.as_ref().map_or("vectors".into(), |p| p.display().to_string())),
        ("target_h", format!("{},{},{}", h[0], h[1], h[2])),
        ("target_e", format!("{},{},{}", e[0], e[1], e[2])),
        ("target_max_conc", format!("{},{}", target.max_concentration[0], target.max_concentration[1])),
        ("seed", "none (deterministic)".into()),
    ]);
    let files = patch_files(&a.input)?;
    create_dir(&a.output)?;
    let done = process_files(&files, |path| {
        let patch = read_patch(path)?;
        let out = macenko_normalize_to_target(&patch, &target.basis, target.max_concentration, &est)?;
        write_patch(&a.output.join(file_name(path)), &out)
    })?;
    copy_labels(&a.input, &a.output)?;
    log::info!("normalized {} of {} file(s)", done.len(), files.len());
    Ok(())
}

fn load_dataset(dir: &Path, patch_size: usize) -> anyhow::Result<PatchDataset> {
    let (ds, skipped) = load_patch_dataset(dir, patch_size)
        .with_context(|| format!("loading patches from {}", dir.display()))?;
    for s in &skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    Ok(ds)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut kv = Vec::new();
            if a.tiny {
                for (k, v) in [("depth", "2"), ("heads", "1"), ("embed_dim", "16"), ("patch_size_tokens", "8"), ("input_side", "32")] {
                    kv.push((k.to_owned(), v.to_owned()));
                }
            }
            if let Some(p) = &a.config {
                kv.extend(read_config_file(p)?);
            }
            if let Some(s) = a.steps {
                kv.push(("total_steps".into(), s.to_string()));
            }
            if let Some(s) = a.seed {
                kv.push(("seed".into(), s.to_string()));
            }
            for s in &a.set {
                kv.push(parse_assignment(s)?);
            }
            let rc = RunConfig::resolve(&kv)?;
            Trainer::new(&rc.encoder, &rc.train)?
        }
    };
    let rc = RunConfig {
        encoder: *trainer.params().config(),
        train: *trainer.config(),
    };
    print!("{}", rc.to_text());
    println!("# parameters = {}", trainer.params().param_count());
    println!("# starting step = {}", trainer.step());

    let ds = load_dataset(&a.data, rc.encoder.input_side)?;
    let data = TrainingSet::prepare(&ds, &rc.train)?;
    if data.len() < rc.train.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} usable patch(es) is fewer than batch_size {}",
            data.len(),
            rc.train.batch_size
        ))
        .into());
    }
    let remaining = rc.train.total_steps - trainer.step();
    let steps = a.max_steps.map_or(remaining, |m| m.min(remaining));
    let log_rows = trainer.run(&data, steps)?;
    if let Some(last) = log_rows.last() {
        log::info!("step {} loss {:.6}", last.step, last.loss.total);
    }
    if let Some(p) = &a.log {
        write_loss_log(p, &log_rows)?;
    }
    save_checkpoint(&a.out, &trainer.checkpoint())?;
    log::info!("wrote {} after step {}", a.out.display(), trainer.step());
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let cfg = *ck.params.config();
    let names: Vec<String> = a.data.iter().map(|d| file_name(d)).collect();
    print_resolved(&[
        ("checkpoint", a.checkpoint.display().to_string()),
        ("input_side", cfg.input_side.to_string()),
        ("embed_dim", cfg.output_dim().to_string()),
        ("batches", names.join(",")),
        ("seed", cfg.seed.to_string()),
    ]);
    let mut sets = Vec::new();
    for d in &a.data {
        sets.push(load_dataset(d, cfg.input_side)?);
    }
    let batches: Vec<(&str, &PatchDataset)> = names.iter().map(String::as_str).zip(&sets).collect();
    let n = export_embeddings(&ck.params, &batches, &a.out)?;
    log::info!("wrote {n} embedding(s) to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    print_resolved(&[("embeddings", a.embeddings.display().to_string()), ("estimator", "gaussian".into())]);
    let (_, set) = read_embeddings_csv(&a.embeddings)?;
    let report = batch_separation_report(&set)?;
    let csv = report.to_csv();
    fs::write(&a.out, &csv).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    println!("overall W2 ({} vs {}) = {}", report.batches[0], report.batches[1], report.overall);
    Ok(())
}

fn labelled(set: &EmbeddingSet, path: &Path) -> anyhow::Result<(Vec<Vec<f64>>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, l) in set.rows().iter().zip(set.labels()) {
        if let Some(l) = l {
            rows.push(r.clone());
            labels.push(l.clone());
        }
    }
    if rows.is_empty() {
        return Err(anyhow!(Error::InvalidArgument(format!("{} has no labelled rows", path.display()))));
    }
    Ok((rows, labels))
}

fn cmd_probe(a: ProbeArgs) -> anyhow::Result<()> {
    let cfg = ProbeConfig { epochs: a.epochs, lr: a.lr };
    print_resolved(&[
        ("epochs", cfg.epochs.to_string()),
        ("lr", cfg.lr.to_string()),
        ("seed", "none (deterministic)".into()),
    ]);
    let (_, train) = read_embeddings_csv(&a.train)?;
    let (_, test) = read_embeddings_csv(&a.test)?;
    let (tr, tl) = labelled(&train, &a.train)?;
    let (er, el) = labelled(&test, &a.test)?;
    let probe = linear_probe_train(&tr, &tl, &cfg)?;
    let ev = linear_probe_eval(&probe, &er, &el)?;
    fs::write(&a.out, ev.to_csv()).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    println!("accuracy = {}", ev.accuracy);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let shift = a.shift.as_deref().map(|s| parse_reals::<2>("shift", s)).transpose()?;
    print_resolved(&[
        ("n", a.n.to_string()),
        ("classes", a.classes.to_string()),
        ("size", a.size.to_string()),
        ("shift", shift.map_or("none".into(), |s| format!("{},{}", s[0], s[1]))),
        ("seed", a.seed.to_string()),
    ]);
    let basis = StainBasis::reference();
    let mut ds = generate_synthetic_dataset(a.seed, a.n, a.size, &basis, a.classes)?;
    if let Some([h, e]) = shift {
        ds = ds.map_patches(|it| augment(&it.patch, &basis, h, e, DEFAULT_BACKGROUND))?;
    }
    create_dir(&a.out)?;
    ds.write_dir(&a.out)?;
    log::info!("wrote {} patch(es) to {}", ds.len(), a.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numeric) => 4,
        Some(ErrorKind::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Augment(a) => cmd_augment(a),
        Command::Macenko(a) => cmd_macenko(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::EvalSeparation(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
