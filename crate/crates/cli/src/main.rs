mod args;
mod pnm;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use hierseg::arch::{build_network, NetworkSpec, ParamStore};
use hierseg::config::{parse_config, parse_lines, EvalParams, RunConfig};
use hierseg::data::{generate_phantom, load_case, normalize, read_manifest, write_bvol, write_manifest, PhantomConfig};
use hierseg::train::{
    evaluate_cases, evaluate_volume, load_training_pool, read_checkpoint, read_loss_csv, write_checkpoint,
    write_loss_csv, Checkpoint, Trainer,
};

const RUN_CONFIG: &str = "run_config.txt";

fn main() -> ExitCode {
    let matches = args::command().get_matches();
    let result = match matches.subcommand() {
        Some(("gen", m)) => gen(m),
        Some(("train", m)) => train(m),
        Some(("eval", m)) => eval(m),
        Some(("report", m)) => report(m),
        _ => unreachable!("clap requires a subcommand"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `base` text, then the `--config` file, then flags.
fn resolve(m: &ArgMatches, base: &str) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(file) = args::path(m, "config") {
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        overrides = parse_lines(&text).with_context(|| format!("in {}", file.display()))?;
    }
    overrides.extend(args::overrides(m));
    Ok(parse_config(base, &overrides)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn gen(m: &ArgMatches) -> Result<()> {
    let cfg = resolve(m, "")?;
    let out = args::path(m, "out").expect("required");
    create_dir(&out)?;
    let mut entries = Vec::with_capacity(cfg.count);
    let mut totals = [0usize; 5];
    for i in 0..cfg.count {
        let pc = PhantomConfig { seed: cfg.phantom.seed.wrapping_add(i as u64), ..cfg.phantom.clone() };
        let (vol, labels) = generate_phantom(&pc).with_context(|| format!("generating case {i}"))?;
        let (vname, lname) = (format!("case_{i:03}_vol.bvol"), format!("case_{i:03}_seg.bvol"));
        write_bvol(&out.join(&vname), &vol.to_bvol())?;
        write_bvol(&out.join(&lname), &labels.to_bvol())?;
        for (t, h) in totals.iter_mut().zip(labels.histogram()) {
            *t += h;
        }
        entries.push((vname, lname));
    }
    write_manifest(&out.join("manifest.tsv"), &entries)?;
    write_run_config(&out.join(RUN_CONFIG), &cfg)?;
    let hist = totals.iter().map(ToString::to_string).collect::<Vec<_>>().join(":");
    println!("wrote {} cases to {} (label counts {hist})", cfg.count, out.display());
    Ok(())
}

fn train(m: &ArgMatches) -> Result<()> {
    let out = args::path(m, "out").expect("defaulted");
    let manifest = args::path(m, "manifest").expect("defaulted");
    let resumed = args::path(m, "resume").map(|p| read_checkpoint(&p).with_context(|| format!("reading {}", p.display()))).transpose()?;
    let cfg = resolve(m, resumed.as_ref().map_or("", |c| c.config.as_str()))?;
    let pool = load_training_pool(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    create_dir(&out)?;
    write_run_config(&out.join(RUN_CONFIG), &cfg)?;
    let config_text = cfg.to_text();
    let loss_path = out.join("loss.csv");
    let (mut trainer, mut history) = match resumed {
        Some(ckpt) => {
            let start = ckpt.state.iteration;
            let earlier = if loss_path.exists() { read_loss_csv(&loss_path)? } else { Vec::new() };
            let history = earlier.into_iter().filter(|r| r.iteration < start).collect();
            (Trainer::resume(cfg.train.clone(), &pool, ckpt.state)?, history)
        }
        None => (Trainer::new(cfg.train.clone(), &pool)?, Vec::new()),
    };
    let log_every = *m.get_one::<u64>("log-every").expect("defaulted");
    let every = cfg.train.checkpoint_every;
    eprintln!("training {} on {} slices, {}", cfg.fingerprint(), pool.len(), cfg.digest());
    trainer.run(|t, r| {
        if log_every > 0 && (r.iteration + 1) % log_every == 0 {
            eprintln!("iter {:>6}  loss {:.6}  lr {:.3e}{}", r.iteration + 1, r.loss, r.lr, if r.skipped { "  (skipped)" } else { "" });
        }
        if every > 0 && t.state.iteration % every == 0 {
            let ckpt = Checkpoint { state: t.state.clone(), config: config_text.clone() };
            write_checkpoint(&out.join(format!("checkpoint_{:06}.hnck", t.state.iteration)), &ckpt)?;
        }
        Ok(())
    })?;
    history.extend_from_slice(&trainer.history);
    write_loss_csv(&loss_path, &history)?;
    let final_path = out.join("checkpoint.hnck");
    write_checkpoint(&final_path, &Checkpoint { state: trainer.state, config: config_text })?;
    println!("wrote {} and {}", final_path.display(), loss_path.display());
    Ok(())
}

/// Network, scoring parameters and resolved config of a checkpoint.
fn load_model(m: &ArgMatches, path: &Path) -> Result<(NetworkSpec, ParamStore<f32>, RunConfig)> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = resolve(m, &ckpt.config)?;
    let spec = build_network(&cfg.train.net)?;
    let store = match cfg.eval_params {
        EvalParams::Ema => ckpt.state.eval_store(),
        EvalParams::Raw => ckpt.state.store,
    };
    store.check(&spec).context("checkpoint does not match the configured network")?;
    Ok((spec, store, cfg))
}

fn eval(m: &ArgMatches) -> Result<()> {
    let ckpt = args::path(m, "checkpoint").expect("required");
    let manifest = args::path(m, "manifest").expect("required");
    let (spec, store, cfg) = load_model(m, &ckpt)?;
    let cases = read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let table = evaluate_cases(&spec, &store, &cases, cfg.decision_rule(), cfg.eval_slices)?;
    let csv = table.to_csv();
    match args::path(m, "out") {
        Some(out) => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            write_run_config(&sibling(&out, "config.txt"), &cfg)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// `dir/name.csv` -> `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

const FLAIR: usize = 3;

fn report(m: &ArgMatches) -> Result<()> {
    let out = args::path(m, "out").expect("required");
    let loss_csv = args::path(m, "loss-csv");
    let model = args::path(m, "checkpoint");
    let manifest = args::path(m, "manifest");
    if loss_csv.is_none() && model.is_none() {
        bail!("nothing to render: give --loss-csv and/or --checkpoint with --manifest");
    }
    create_dir(&out)?;
    if let Some(csv) = loss_csv {
        let history = read_loss_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
        let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
        let path = out.join("loss_curve.pgm");
        pnm::write_pgm(&path, &pnm::loss_curve(&losses, 600, 200)?)?;
        println!("wrote {}", path.display());
    }
    let Some(ckpt) = model else { return Ok(()) };
    let Some(manifest) = manifest else { bail!("--checkpoint needs --manifest") };
    let (spec, store, cfg) = load_model(m, &ckpt)?;
    let limit = *m.get_one::<usize>("cases").expect("defaulted");
    for (i, case) in read_manifest(&manifest)?.iter().take(limit).enumerate() {
        let (vol, labels) = load_case(case)?;
        let pred = evaluate_volume(&spec, &store, &vol, &labels, cfg.decision_rule(), cfg.eval_slices)?;
        let [_, h, w] = vol.dims();
        let plane = h * w;
        // The scored slice with the most tumor.
        let tumor = |z: usize| labels.labels()[z * plane..(z + 1) * plane].iter().filter(|&&l| l != 0).count();
        let k = (0..pred.slices.len()).max_by_key(|&k| (tumor(pred.slices[k]), std::cmp::Reverse(k))).expect("at least one slice");
        let z = pred.slices[k];
        let norm = normalize(&vol);
        let channel: Vec<f32> = norm.data()[z * plane * 4..(z + 1) * plane * 4].chunks(4).map(|px| px[FLAIR]).collect();
        let img = pnm::comparison(&channel, &labels.labels()[z * plane..(z + 1) * plane], &pred.predicted[k], w, h)?;
        let path = out.join(format!("case_{i:03}_z{z:03}.ppm"));
        pnm::write_ppm(&path, &img)?;
        println!("wrote {}", path.display());
    }
    write_run_config(&out.join(RUN_CONFIG), &cfg)?;
    Ok(())
}
