use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use synchrodaq_core::align::{
    align_session, export_dataset, mask_clutch, read_labels_csv, resample, AlignOptions,
    AlignedTrial, ExportFormat,
};
use synchrodaq_core::calib::mlp::TrainingConfig;
use synchrodaq_core::io::read_json;
use synchrodaq_core::metrics::write_report;
use synchrodaq_core::model::FrameId;
use synchrodaq_core::pipeline::{
    calibrate as fit_calibration, evaluate, labels_path, load_truth, read_calibration,
    write_calibration, CalibrationOptions, EvalOptions, SensorSource, TrialWithTruth,
    LABELS_SUFFIX,
};
use synchrodaq_core::recording::{find_sessions, read_session, RecordedSession};
use synchrodaq_core::sim::{generate_scenario, ScenarioConfig};
use synchrodaq_server::client::{run_trial, sim_meta, ClientMode};
use synchrodaq_server::clock::SystemClock;
use synchrodaq_server::net::{DEFAULT_CONTROL_PORT, DEFAULT_INGEST_PORT, DEFAULT_WS_PORT};
use synchrodaq_server::{spawn, Endpoints, Server, ServerConfig, ServerError};

use crate::config::{pick, FileConfig, CALIB_DIR, GROUND_TRUTH_DIR, REPORTS_DIR};
use crate::{AlignArgs, CalibrateArgs, CliError, EvalArgs, ExportArgs, ServeArgs, SimArgs};

type Result<T> = std::result::Result<T, CliError>;

/// Sets `flag` on SIGINT/SIGTERM.
fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = Arc::clone(&flag);
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn resolve(addr: &str, default_port: u16) -> Result<SocketAddr> {
    let with_port = if addr.contains(':') {
        addr.to_string()
    } else {
        format!("{addr}:{default_port}")
    };
    with_port
        .to_socket_addrs()
        .map_err(|e| CliError::Usage(format!("bad address `{addr}`: {e}")))?
        .next()
        .ok_or_else(|| CliError::Usage(format!("address `{addr}` did not resolve")))
}

pub fn serve(a: ServeArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let addr = |port: u16| {
        resolve(&a.bind, port).map(|mut s| {
            s.set_port(port);
            s
        })
    };
    let endpoints = Endpoints {
        control: addr(pick(a.port, file.port, DEFAULT_CONTROL_PORT))?,
        ingest: addr(pick(a.ingest_port, file.ingest_port, DEFAULT_INGEST_PORT))?,
        ws: if a.no_ws {
            None
        } else {
            Some(addr(pick(a.ws_port, file.ws_port, DEFAULT_WS_PORT))?)
        },
    };
    synchrodaq_core::io::create_dir_all(data_dir)?;
    let server = Server::new(ServerConfig::new(data_dir), Arc::new(SystemClock::new()));
    let stop = interrupt_flag();
    let handle = spawn(server, endpoints)?;
    let e = handle.endpoints;
    println!(
        "listening control={} ingest={} ws={} data_dir={}",
        e.control,
        e.ingest,
        e.ws.map_or("off".to_string(), |w| w.to_string()),
        data_dir.display()
    );
    let _ = std::io::stdout().flush();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    log::info!("interrupted, shutting down");
    match handle.shutdown() {
        Some(Ok(s)) => {
            for st in &s.streams {
                log::info!(
                    "{}: {} samples ({} dropped)",
                    st.stream_id,
                    st.samples,
                    st.dropped
                );
            }
            // stdout may be gone by now; the log line above already has the counts.
            let _ = writeln!(
                std::io::stdout(),
                "flushed session {} ({} bytes)",
                s.session,
                s.total_bytes
            );
            Ok(())
        }
        Some(Err(e)) => Err(e.into()),
        None => Ok(()),
    }
}

fn load_scenario_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = match path {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gt_dir(flag: Option<PathBuf>, file: &FileConfig, data_dir: &Path) -> PathBuf {
    flag.or_else(|| file.gt.clone())
        .unwrap_or_else(|| data_dir.join(GROUND_TRUTH_DIR))
}

pub fn sim(a: SimArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let cfg = load_scenario_config(a.scenario.as_deref())?;
    let server = pick(a.server.clone(), file.server.clone(), "127.0.0.1".into());
    let control = resolve(&server, pick(None, file.port, DEFAULT_CONTROL_PORT))?;
    let ingest = match &a.ingest {
        Some(i) => resolve(i, DEFAULT_INGEST_PORT)?,
        None => SocketAddr::new(
            control.ip(),
            pick(None, file.ingest_port, DEFAULT_INGEST_PORT),
        ),
    };
    let mode = if a.realtime {
        ClientMode::Realtime
    } else {
        ClientMode::Replay
    };
    let seed = pick(a.seed, file.seed, cfg.seed);
    let trials = pick(a.trials, file.trials, 1);
    if trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let gt = gt_dir(a.gt, file, data_dir);
    let cancel = interrupt_flag();
    for k in 0..trials {
        let scenario = generate_scenario(&cfg, seed + u64::from(k))?;
        let meta = sim_meta(&scenario, &a.subject, &a.task, a.first_trial + k);
        let run = run_trial(
            control,
            ingest,
            &scenario,
            &meta,
            mode,
            Some(&gt),
            Some(&cancel),
        )
        .map_err(|e| match e {
            // An unreachable server is a wrong address, not a disk problem.
            ServerError::Io { ref source, .. }
                if source.kind() == std::io::ErrorKind::ConnectionRefused =>
            {
                CliError::Usage(e.to_string())
            }
            other => other.into(),
        })?;
        let counts: Vec<String> = run.sent.iter().map(|(id, n)| format!("{id}={n}")).collect();
        println!("{} sent {}", run.summary.session, counts.join(" "));
        if cancel.load(Ordering::SeqCst) {
            return Err(CliError::Usage("interrupted".into()));
        }
    }
    Ok(())
}

/// Session directories named by `--session`, or every session under the data dir.
fn session_dirs(args: &[PathBuf], data_dir: &Path) -> Result<Vec<PathBuf>> {
    let roots: Vec<PathBuf> = if args.is_empty() {
        vec![data_dir.to_path_buf()]
    } else {
        args.iter()
            .map(|p| {
                if p.exists() {
                    Ok(p.clone())
                } else if data_dir.join(p).exists() {
                    Ok(data_dir.join(p))
                } else {
                    Err(CliError::Validation(format!(
                        "session {} not found",
                        p.display()
                    )))
                }
            })
            .collect::<Result<_>>()?
    };
    let mut out = Vec::new();
    for r in roots {
        if !r.is_dir() {
            return Err(CliError::Validation(format!(
                "{} is not a directory",
                r.display()
            )));
        }
        out.extend(find_sessions(&r)?);
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Validation("no recorded sessions found".into()));
    }
    Ok(out)
}

struct AlignSettings {
    labels: Option<PathBuf>,
    rate: Option<f64>,
    mask_clutch: bool,
    calib: Option<PathBuf>,
}

fn labels_for(
    labels: Option<&Path>,
    session: &str,
) -> Result<Vec<synchrodaq_core::model::GestureSegment>> {
    match labels {
        None => Ok(Vec::new()),
        Some(p) if p.is_dir() => {
            let f = labels_path(p, session);
            if f.exists() {
                Ok(read_labels_csv(&f)?)
            } else {
                log::warn!("{session}: no {session}{LABELS_SUFFIX} in {}", p.display());
                Ok(Vec::new())
            }
        }
        Some(p) => Ok(read_labels_csv(p)?),
    }
}

fn align_one(
    rec: &RecordedSession,
    s: &AlignSettings,
    opts: &AlignOptions,
) -> Result<AlignedTrial> {
    let name = rec.name();
    let opts = AlignOptions {
        labels: labels_for(s.labels.as_deref(), &name)?,
        ..opts.clone()
    };
    let mut trial = align_session(rec, &opts)?;
    if s.mask_clutch {
        let ch = rec.manifest.meta().clutch_channel().ok_or_else(|| {
            CliError::Validation(format!("{name}: pedal mapping has no clutch channel"))
        })?;
        trial = mask_clutch(&trial, ch)?;
    }
    if let Some(r) = s.rate {
        trial = resample(&trial, r)?;
    }
    Ok(trial)
}

fn base_align_options(calib: Option<&Path>) -> Result<AlignOptions> {
    let mut opts = AlignOptions::default();
    if let Some(dir) = calib {
        opts.pedal_thresholds = read_calibration(dir)?.pss_thresholds();
    }
    Ok(opts)
}

fn write_aligned(
    sessions: &[PathBuf],
    s: &AlignSettings,
    out: Option<&Path>,
    format: ExportFormat,
) -> Result<()> {
    let opts = base_align_options(s.calib.as_deref())?;
    for dir in sessions {
        let rec = read_session(dir)?;
        let trial = align_one(&rec, s, &opts)?;
        let target = out.map_or_else(|| dir.join("aligned"), Path::to_path_buf);
        let files = export_dataset(&trial, &target, format)?;
        println!(
            "{}: {} rows -> {}",
            trial.name,
            trial.len(),
            files[0].display()
        );
    }
    Ok(())
}

pub fn align(a: AlignArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let sessions = session_dirs(&a.session, data_dir)?;
    let s = AlignSettings {
        labels: a.labels,
        rate: a.rate.or(file.rate),
        mask_clutch: a.mask_clutch,
        calib: a.calib,
    };
    write_aligned(&sessions, &s, a.out.as_deref(), ExportFormat::Csv)
}

pub fn export(a: ExportArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let format: ExportFormat = a
        .format
        .parse()
        .map_err(|e: synchrodaq_core::Error| CliError::Usage(e.to_string()))?;
    let sessions = session_dirs(&a.session, data_dir)?;
    let s = AlignSettings {
        labels: a.labels,
        rate: a.rate.or(file.rate),
        mask_clutch: a.mask_clutch,
        calib: a.calib,
    };
    write_aligned(&sessions, &s, Some(&a.out), format)
}

/// Aligned sessions paired with their ground truth.
fn trials_with_truth(
    sessions: &[PathBuf],
    gt: &Path,
    opts: &AlignOptions,
) -> Result<Vec<(TrialWithTruth, RecordedSession)>> {
    if !gt.is_dir() {
        return Err(CliError::Validation(format!(
            "ground-truth directory {} not found",
            gt.display()
        )));
    }
    let settings = AlignSettings {
        labels: Some(gt.to_path_buf()),
        rate: None,
        mask_clutch: false,
        calib: None,
    };
    sessions
        .iter()
        .map(|dir| {
            let rec = read_session(dir)?;
            let truth = load_truth(gt, &rec.name())?;
            let trial = align_one(&rec, &settings, opts)?;
            Ok((TrialWithTruth::new(trial, truth)?, rec))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|e: T::Err| CliError::Usage(format!("{what}: {e}")))
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{what}: empty list")));
    }
    Ok(items)
}

pub fn calibrate(a: CalibrateArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let mut with_pss = false;
    let mut pairs = Vec::new();
    for p in parse_list::<String>(&a.pairs, "--pairs")? {
        if p.eq_ignore_ascii_case("pss") {
            with_pss = true;
        } else {
            pairs.push(
                p.parse::<SensorSource>()
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            );
        }
    }
    let targets: Vec<FrameId> = parse_list(&a.target, "--target")?;
    if let Some(t) = targets
        .iter()
        .find(|t| !matches!(t, FrameId::Mtm | FrameId::Psm))
    {
        return Err(CliError::Usage(format!("--target must be M or P, got {t}")));
    }
    let mut training = TrainingConfig::default();
    training.epochs = pick(a.epochs, file.epochs, training.epochs);
    training.seed = pick(a.seed, file.seed, training.seed);
    let opts = CalibrationOptions {
        pairs,
        targets,
        training,
        folds: a.folds.or(file.folds),
        ..CalibrationOptions::default()
    };
    let sessions = session_dirs(&a.session, data_dir)?;
    let gt = gt_dir(a.gt, file, data_dir);
    let trials: Vec<TrialWithTruth> = trials_with_truth(&sessions, &gt, &AlignOptions::default())?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    let mut calib = fit_calibration(&trials, &opts)?;
    if !with_pss {
        calib.pss.clear();
    }
    let out = a.out.unwrap_or_else(|| data_dir.join(CALIB_DIR));
    let files = write_calibration(&calib, &out)?;
    for (key, cv) in &calib.cv {
        println!(
            "{key}: {} folds, rigid RMSE {:.3} cm, rigid+MLP RMSE {:.3} cm",
            cv.folds.len(),
            cv.mean_rigid_rmse_cm,
            cv.mean_corrected_rmse_cm
        );
    }
    for (ch, fit) in &calib.pss {
        println!(
            "pedal channel {ch}: threshold {:.3} V (F1 {:.3})",
            fit.threshold, fit.f1
        );
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

pub fn eval(a: EvalArgs, file: &FileConfig, data_dir: &Path) -> Result<()> {
    let calib_dir = a.calib.unwrap_or_else(|| data_dir.join(CALIB_DIR));
    let calib = read_calibration(&calib_dir)?;
    let sessions = session_dirs(&a.session, data_dir)?;
    let gt = gt_dir(a.gt, file, data_dir);
    let align_opts = AlignOptions {
        pedal_thresholds: calib.pss_thresholds(),
        ..AlignOptions::default()
    };
    let trials: Vec<_> = trials_with_truth(&sessions, &gt, &align_opts)?
        .into_iter()
        .map(|(t, rec)| (t, rec.manifest.meta().pedal_mapping))
        .collect();
    let mut opts = EvalOptions::default();
    if let Some(th) = a.grasper_threshold {
        opts.grasper.threshold_cm = th;
    }
    let (_, report) = evaluate(&trials, &calib, &opts)?;
    let out = a.out.unwrap_or_else(|| data_dir.join(REPORTS_DIR));
    write_report(&report, &out)?;
    if let Some(text) = report.file("report.txt") {
        print!("{text}");
    }
    println!(
        "wrote {} report files to {}",
        report.files.len(),
        out.display()
    );
    Ok(())
}
