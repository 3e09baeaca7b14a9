use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use otrack_core::config::parse_kv;
use otrack_core::embedder::{eval_retrieval, init_model, loss_csv, train, EmbedderModel, TrainConfig};
use otrack_core::geometry::{BBox, SigmaRule};
use otrack_core::heatmap::{render_targets, to_pgm};
use otrack_core::mot::{self, clear_mot, format_table, MetricsReport};
use otrack_core::pipeline::{read_sequence_dir, track_sequence, write_sequence_dir, FeatureSource, SequenceData};
use otrack_core::simulator::{generate, occlusion_channel, ChannelParams, SimConfig};
use otrack_core::tracker::TrackerConfig;

use crate::manifest::Manifest;
use crate::{parse_recorded, Command, EvalArgs, RenderArgs, ReplayArgs, SimulateArgs, Switch, TrackArgs, TrainArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_VAR: &str = "OTRACK_THREADS";

/// Runs `command`. `config` replaces the `--config` file (used by replay).
pub fn run(command: Command, config: Option<String>) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(&a, config),
        Command::Track(a) => track(&a, config),
        Command::Eval(a) => eval(&a),
        Command::TrainReid(a) => train_reid(&a, config),
        Command::Render(a) => render(&a),
        Command::Replay(a) => replay(&a),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn path_arg(p: &Path) -> Result<String> {
    Ok(absolute(p)?.display().to_string())
}

fn config_text(path: Option<&Path>, snapshot: Option<String>) -> Result<String> {
    match (snapshot, path) {
        (Some(text), _) => Ok(text),
        (None, Some(p)) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())),
        (None, None) => Ok(String::new()),
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        ensure!(dir.is_dir(), "{} is not a directory", dir.display());
        let busy = fs::read_dir(dir)?.next().is_some();
        if busy && !force {
            bail!("output directory {} is not empty (use --force to overwrite)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn simulate(a: &SimulateArgs, snapshot: Option<String>) -> Result<()> {
    let mut cfg = SimConfig::from_kv(&config_text(a.config.as_deref(), snapshot)?)?;
    cfg.seed = a.seed;
    cfg.validate()?;
    let out = absolute(&a.out.out)?;
    prepare_out(&out, a.out.force)?;
    Manifest {
        command: "simulate".into(),
        version: VERSION.into(),
        seed: Some(a.seed),
        args: vec![
            "simulate".into(),
            "--seed".into(),
            a.seed.to_string(),
            "--name".into(),
            a.name.clone(),
            "--out".into(),
            out.display().to_string(),
        ],
        config: cfg.to_kv(),
        outputs: ["gt.txt", "det.txt", "descriptors.bin", "oracle_features.bin", "det_truth.txt", "occ.txt", "seqinfo.ini"]
            .map(String::from)
            .to_vec(),
    }
    .write(&out)?;

    let seq = generate(&cfg)?;
    let centers = occlusion_channel(&seq, &ChannelParams::from_config(&cfg));
    let data = SequenceData::from_synthetic(&a.name, &seq, &centers);
    write_sequence_dir(&out, &data)?;
    info!(
        "{} frames, {} identities, {} detections",
        data.frames.len(),
        seq.identity_count(),
        data.frames.iter().map(|f| f.detections.len()).sum::<usize>()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<EmbedderModel> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    EmbedderModel::from_bytes(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn track(a: &TrackArgs, snapshot: Option<String>) -> Result<()> {
    let mut cfg = TrackerConfig::default();
    for (k, v) in parse_kv(&config_text(a.config.as_deref(), snapshot)?)? {
        cfg.set(&k, &v)?;
    }
    cfg.refind = a.refind == Switch::On;
    if let Some(v) = a.iou_gate {
        cfg.association.iou_gate = v;
    }
    if let Some(v) = a.cos_gate {
        cfg.association.cos_gate = v;
    }
    if let Some(v) = a.refind_tau {
        cfg.refind_tau = v;
    }
    if let Some(v) = a.new_track_conf {
        cfg.new_track_conf = v;
    }
    if let Some(v) = a.max_lost {
        cfg.max_lost = v;
    }
    cfg.validate()?;

    let sequence = absolute(&a.sequence)?;
    let embedder = match a.embedder.as_str() {
        "oracle" | "raw" => a.embedder.clone(),
        path => path_arg(Path::new(path))?,
    };
    let out = absolute(&a.out.out)?;
    let mut args = vec![
        "track".to_string(),
        sequence.display().to_string(),
        "--refind".into(),
        if cfg.refind { "on" } else { "off" }.into(),
        "--embedder".into(),
        embedder.clone(),
        "--out".into(),
        out.display().to_string(),
    ];
    let overrides = [
        ("--iou-gate", a.iou_gate.map(|v| v.to_string())),
        ("--cos-gate", a.cos_gate.map(|v| v.to_string())),
        ("--refind-tau", a.refind_tau.map(|v| v.to_string())),
        ("--new-track-conf", a.new_track_conf.map(|v| v.to_string())),
        ("--max-lost", a.max_lost.map(|v| v.to_string())),
    ];
    for (flag, v) in overrides {
        if let Some(v) = v {
            args.push(flag.into());
            args.push(v);
        }
    }

    let seq = read_sequence_dir(&sequence)?;
    let model = match embedder.as_str() {
        "oracle" | "raw" => None,
        path => Some(load_model(Path::new(path))?),
    };
    let source = match (&model, embedder.as_str()) {
        (Some(m), _) => FeatureSource::Model(m),
        (None, "raw") => FeatureSource::Descriptors,
        _ => FeatureSource::Oracle,
    };

    prepare_out(&out, a.out.force)?;
    Manifest {
        command: "track".into(),
        version: VERSION.into(),
        seed: None,
        args,
        config: cfg.to_kv(),
        outputs: vec!["results.txt".into()],
    }
    .write(&out)?;
    let results = track_sequence(&seq, source, &cfg)?;
    write(&out.join("results.txt"), mot::write(&results))?;
    println!("wrote {}", out.join("results.txt").display());
    Ok(())
}

fn thread_cap() -> usize {
    let default = thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                warn!("ignoring {THREADS_VAR}={v}: expected a positive integer");
                default
            }
        },
        Err(_) => default,
    }
}

fn score(gt: &Path, results: &Path, iou: f64) -> Result<MetricsReport> {
    let read = |p: &Path| -> Result<Vec<mot::MotRecord>> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        mot::parse(&text).with_context(|| format!("parsing {}", p.display()))
    };
    clear_mot(&read(gt)?, &read(results)?, iou).with_context(|| format!("scoring {}", results.display()))
}

/// Scores every pair on at most `threads` workers; order follows input.
fn score_all(pairs: &[(PathBuf, PathBuf)], iou: f64, threads: usize) -> Result<Vec<MetricsReport>> {
    let workers = threads.clamp(1, pairs.len().max(1));
    let mut slots: Vec<Option<Result<MetricsReport>>> = (0..pairs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..pairs.len())
                        .step_by(workers)
                        .map(|k| (k, score(&pairs[k].0, &pairs[k].1, iou)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("scoring thread panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every pair scored")).collect()
}

fn eval(a: &EvalArgs) -> Result<()> {
    ensure!(
        a.gt.len() == a.results.len(),
        "{} --gt files but {} --results files",
        a.gt.len(),
        a.results.len()
    );
    ensure!(
        a.name.is_empty() || a.name.len() == a.gt.len(),
        "--name must be given once per --gt or not at all"
    );
    let pairs: Vec<(PathBuf, PathBuf)> = a
        .gt
        .iter()
        .zip(&a.results)
        .map(|(g, r)| Ok((absolute(g)?, absolute(r)?)))
        .collect::<Result<_>>()?;
    let names: Vec<String> = if a.name.is_empty() {
        pairs
            .iter()
            .map(|(g, _)| {
                g.parent()
                    .and_then(|p| p.file_name())
                    .map_or_else(|| g.display().to_string(), |n| n.to_string_lossy().into_owned())
            })
            .collect()
    } else {
        a.name.clone()
    };

    if let Some(out) = &a.out {
        let out = absolute(out)?;
        prepare_out(&out, a.force)?;
        let mut args = vec!["eval".to_string()];
        for (k, (g, r)) in pairs.iter().enumerate() {
            args.extend(["--gt".into(), g.display().to_string(), "--results".into(), r.display().to_string()]);
            args.extend(["--name".into(), names[k].clone()]);
        }
        args.extend(["--iou".into(), a.iou.to_string(), "--out".into(), out.display().to_string()]);
        Manifest {
            command: "eval".into(),
            version: VERSION.into(),
            seed: None,
            args,
            config: String::new(),
            outputs: vec!["report.csv".into()],
        }
        .write(&out)?;
    }

    let reports = score_all(&pairs, a.iou, thread_cap())?;
    let mut rows: Vec<(String, MetricsReport)> = names.into_iter().zip(reports).collect();
    if rows.len() > 1 {
        let mut total = MetricsReport::default();
        for (_, r) in &rows {
            total.merge(r);
        }
        rows.push(("OVERALL".into(), total));
    }
    print!("{}", format_table(&rows));
    if let Some(out) = &a.out {
        let mut csv = format!("{}\n", MetricsReport::CSV_HEADER);
        for (name, r) in &rows {
            csv.push_str(&r.csv_row(name));
            csv.push('\n');
        }
        write(&absolute(out)?.join("report.csv"), csv)?;
    }
    Ok(())
}

fn train_reid(a: &TrainArgs, snapshot: Option<String>) -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in parse_kv(&config_text(a.config.as_deref(), snapshot)?)? {
        cfg.set(&k, &v)?;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    let datasets: Vec<PathBuf> = a.datasets.iter().map(|d| absolute(d)).collect::<Result<_>>()?;
    let eval_dir = absolute(a.eval.as_deref().unwrap_or(&datasets[0]))?;
    let out = absolute(&a.out.out)?;

    let mut data = Vec::with_capacity(datasets.len());
    for d in &datasets {
        let seq = read_sequence_dir(d).with_context(|| format!("reading dataset {}", d.display()))?;
        ensure!(seq.has_descriptors, "{} has no descriptors.bin", d.display());
        data.push(seq.descriptor_sequence());
    }
    let d_in = data
        .iter()
        .find_map(|s| s.dim())
        .context("training datasets contain no detections")?;

    prepare_out(&out, a.out.force)?;
    let mut args = vec!["train-reid".to_string()];
    args.extend(datasets.iter().map(|d| d.display().to_string()));
    args.extend([
        "--seed".into(),
        a.seed.to_string(),
        "--eval".into(),
        eval_dir.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]);
    Manifest {
        command: "train-reid".into(),
        version: VERSION.into(),
        seed: Some(a.seed),
        args,
        config: cfg.to_kv(),
        outputs: vec!["model.otem".into(), "loss.csv".into(), "retrieval.csv".into()],
    }
    .write(&out)?;

    let (model_path, loss_path) = (out.join("model.otem"), out.join("loss.csv"));
    let start = init_model(&cfg, d_in)?;
    let (model, history) = match train(&start, &data, &cfg) {
        Ok(r) => r,
        Err(e) => {
            for p in [&model_path, &loss_path] {
                if p.exists() {
                    fs::remove_file(p).with_context(|| format!("removing partial {}", p.display()))?;
                }
            }
            return Err(e).context("training aborted");
        }
    };
    let tmp = out.join("model.otem.partial");
    write(&tmp, model.to_bytes())?;
    fs::rename(&tmp, &model_path).with_context(|| format!("writing {}", model_path.display()))?;
    write(&loss_path, loss_csv(&history))?;

    let eval_seq = read_sequence_dir(&eval_dir)?.descriptor_sequence();
    let r = eval_retrieval(&model, &eval_seq)?;
    let name = eval_dir.file_name().map_or_else(|| "eval".into(), |n| n.to_string_lossy().into_owned());
    let csv = format!("name,R1,mAP,queries\n{name},{:.6},{:.6},{}\n", r.rank1, r.map, r.queries);
    write(&out.join("retrieval.csv"), &csv)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!("loss {first:.4} -> {last:.4} over {} steps", history.len());
    }
    print!("{csv}");
    Ok(())
}

fn render(a: &RenderArgs) -> Result<()> {
    let sequence = absolute(&a.sequence)?;
    let seq = read_sequence_dir(&sequence)?;
    ensure!(
        a.frame >= 1 && a.frame as usize <= seq.frames.len(),
        "frame {} out of range 1..={}",
        a.frame,
        seq.frames.len()
    );
    ensure!(seq.width > 0 && seq.height > 0, "{} lacks imWidth/imHeight in seqinfo.ini", sequence.display());
    ensure!(a.stride >= 1, "--stride must be at least 1");
    let out = absolute(&a.out.out)?;
    prepare_out(&out, a.out.force)?;
    Manifest {
        command: "render".into(),
        version: VERSION.into(),
        seed: None,
        args: vec![
            "render".into(),
            sequence.display().to_string(),
            "--frame".into(),
            a.frame.to_string(),
            "--tau".into(),
            a.tau.to_string(),
            "--stride".into(),
            a.stride.to_string(),
            "--out".into(),
            out.display().to_string(),
        ],
        config: String::new(),
        outputs: vec!["heatmap.pgm".into()],
    }
    .write(&out)?;
    let boxes: Vec<BBox> = seq.gt.iter().filter(|r| r.frame == a.frame).map(|r| r.bbox).collect();
    let (heatmap, _, events) = render_targets(&boxes, a.tau, (seq.width, seq.height), a.stride, &SigmaRule::default());
    write(&out.join("heatmap.pgm"), to_pgm(&heatmap))?;
    println!("frame {}: {} occlusions -> {}", a.frame, events, out.join("heatmap.pgm").display());
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = Manifest::read(&a.manifest)?;
    if m.version != VERSION {
        warn!("manifest written by version {}, running {VERSION}", m.version);
    }
    let mut args = m.args.clone();
    if let Some(out) = &a.out {
        let out = path_arg(out)?;
        match args.iter().position(|x| x == "--out") {
            Some(k) if k + 1 < args.len() => args[k + 1] = out,
            _ => args.extend(["--out".into(), out]),
        }
    }
    args.push("--force".into());
    let command = parse_recorded(&args).map_err(|e| anyhow::anyhow!("manifest arguments: {e}"))?;
    if matches!(command, Command::Replay(_)) {
        bail!("a manifest cannot replay another manifest");
    }
    let config = (!m.config.is_empty()).then(|| m.config.clone());
    run(command, config)
}
