use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aam_core::area::{Area, AreaDefinition};
use aam_core::monitor::{ChannelMap, MonitorConfig};
use aam_core::netgen::random_cutset_system;
use aam_core::netmodel::{BranchId, BusId, NetworkModel, Outage};
use aam_core::pac::{compute_pac_table, PacTable};
use aam_core::replay::{read_replay_csv, write_replay_csv, Scenario};
use aam_core::study::{
    compensate_thresholds, contingency_sweep, default_candidates, PatternFile, ThresholdSet, TransferPattern,
    DEFAULT_MVA_BASE, DEFAULT_TAU,
};
use aam_core::update::{fast_thresholds, original_thresholds, TopologyChange, UpdateMethod};
use aam_core::wire::PhasorFrame;
use aam_server::api::{serve_api, AppState};
use aam_server::pipeline::{run_from_streams, Hub, Pipeline, DEFAULT_HISTORY};
use aam_server::stream::{parse_endpoint, ServeOptions, StreamServer};
use aam_server::whatif::WhatIf;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "aam", version, about = "Area angle monitoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    area: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// DC power flow; prints `id,value` CSV of bus angles (degrees) or
    /// branch flows (per unit)
    Solve {
        #[arg(long)]
        model: PathBuf,
        /// JSON object of bus id to injection, per unit
        #[arg(long)]
        injections: PathBuf,
        /// Branches out of service
        #[arg(long, value_delimiter = ',')]
        outage: Vec<String>,
        #[arg(long)]
        flows: bool,
    },
    /// Boundary weights as `bus_id,weight` CSV; b_mod goes to stderr
    Weights {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        outage: Vec<String>,
    },
    /// Offline contingency sweep; writes sweep.csv and thresholds.json
    Study {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Candidate branches; default every eligible internal branch
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        /// Model-frame area angle in normal operation, degrees
        #[arg(long, requires = "theta_ope_normal")]
        theta_mod_normal: Option<f64>,
        /// Measured area angle in normal operation, degrees
        #[arg(long, requires = "theta_mod_normal")]
        theta_ope_normal: Option<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Thresholds after a topology change
    UpdateThresholds {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long, default_value = "fast")]
        method: UpdateMethod,
        /// JSON `{"removed_branches": [...]}`
        #[arg(long)]
        change: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 0.0)]
        delta_com: f64,
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[arg(long, default_value = "thresholds.json")]
        out: PathBuf,
    },
    /// Phase angle compensation table for unmeasured boundary buses
    Pac {
        #[command(flatten)]
        m: ModelArgs,
        /// Base case injections come from this pattern
        #[arg(long)]
        pattern: PathBuf,
        /// Buses with a PMU
        #[arg(long, value_delimiter = ',', required = true)]
        pmu: Vec<String>,
        #[arg(long, default_value = "pac.json")]
        out: PathBuf,
    },
    /// Load-shed plan and its predicted effect, as JSON
    Mitigate {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        pattern: PathBuf,
        #[arg(long)]
        total_mw: f64,
        #[arg(long, value_delimiter = ',')]
        outage: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MVA_BASE)]
        mva_base: f64,
    },
    /// Monitor configuration and channel map for a model and area
    MonitorConfig {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        pac: Option<PathBuf>,
        /// Measured boundary buses, streamed in this order; default all
        #[arg(long, value_delimiter = ',')]
        pmu: Vec<String>,
        #[arg(long, default_value_t = 1)]
        stream_id: u16,
        #[arg(long, default_value_t = 5.0)]
        t_area: f64,
        #[arg(long, default_value_t = 30.0)]
        frame_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        stale_limit: f64,
        #[arg(long, default_value = "monitor.json")]
        out: PathBuf,
        #[arg(long, default_value = "map.json")]
        map_out: PathBuf,
    },
    /// Scenario to replay CSV
    Synthesize {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a scenario or a recorded CSV as a phasor stream
    Replay {
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        scenario: Option<PathBuf>,
        /// Replay CSV recording
        #[arg(long)]
        file: Option<PathBuf>,
        /// Stream id for frames read from a CSV
        #[arg(long, default_value_t = 1)]
        stream_id: u16,
        #[arg(long, default_value = ":7733")]
        listen: String,
        /// Playback multiplier; `inf` for as fast as possible
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Hold the stream until this many clients connect
        #[arg(long, default_value_t = 1)]
        wait_clients: usize,
        /// Per-client queue length in frames
        #[arg(long, default_value_t = 4096)]
        capacity: usize,
    },
    /// Run the monitor on live streams or a recording
    Monitor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// Stream server to read, repeatable
        #[arg(long, required_unless_present = "file")]
        connect: Vec<String>,
        /// Replay CSV to process offline instead
        #[arg(long, conflicts_with = "connect")]
        file: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stream_id: u16,
        #[arg(long)]
        status_log: Option<PathBuf>,
        /// Serve the HTTP/WebSocket API here
        #[arg(long)]
        api: Option<String>,
        /// Keep the API up after the streams end, until Ctrl-C
        #[arg(long, requires = "api")]
        hold: bool,
        /// Ticks kept for /api/history
        #[arg(long, default_value_t = DEFAULT_HISTORY)]
        history: usize,
        /// Model, area and pattern for /api/whatif
        #[arg(long, requires_all = ["whatif_area", "whatif_pattern"])]
        whatif_model: Option<PathBuf>,
        #[arg(long)]
        whatif_area: Option<PathBuf>,
        #[arg(long)]
        whatif_pattern: Option<PathBuf>,
    },
    /// Random cutset test system: model.json, area.json, pattern.json
    Generate {
        #[arg(long, default_value_t = 30)]
        buses: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_area(m: &ModelArgs) -> Result<(NetworkModel, Area)> {
    let model = NetworkModel::load(&m.model).with_context(|| format!("loading {}", m.model.display()))?;
    let def = AreaDefinition::load(&m.area).with_context(|| format!("loading {}", m.area.display()))?;
    let area = Area::new(&model, def)?;
    Ok((model, area))
}

fn candidates(model: &NetworkModel, area: &Area, given: Vec<String>, change: &Outage) -> Vec<BranchId> {
    if given.is_empty() {
        default_candidates(model, area, change)
    } else {
        given.into_iter().map(Into::into).collect()
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Solve {
            model,
            injections,
            outage,
            flows,
        } => {
            let model = NetworkModel::load(&model)?;
            let inj: BTreeMap<BusId, f64> = read_json(&injections)?;
            let p = model.injections(inj.iter().map(|(k, v)| (k.as_str(), *v)))?;
            let out = model.outage(&outage)?;
            let th = model.solve_dc(&p, &out)?;
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["id", "value"])?;
            if flows {
                for (br, f) in model.branches().iter().zip(model.line_flows(&th, &out)) {
                    if let Some(f) = f {
                        w.write_record([br.id.as_str(), &f.to_string()])?;
                    }
                }
            } else {
                for (bus, a) in model.buses().iter().zip(th.degrees()) {
                    w.write_record([bus.id.as_str(), &a.to_string()])?;
                }
            }
            w.flush()?;
        }
        Command::Weights { m, outage } => {
            let (model, area) = load_area(&m)?;
            let w = area.weights(&model, &model.outage(&outage)?)?;
            let mut out = csv::Writer::from_writer(std::io::stdout());
            out.write_record(["bus_id", "weight"])?;
            for (id, v) in area.boundary_ids().iter().zip(&w.weights) {
                out.write_record([id.as_str(), &v.to_string()])?;
            }
            out.flush()?;
            eprintln!("b_mod = {}", w.b_mod);
        }
        Command::Study {
            m,
            pattern,
            tau,
            candidates: given,
            theta_mod_normal,
            theta_ope_normal,
            out_dir,
        } => {
            let (model, area) = load_area(&m)?;
            let pattern = TransferPattern::load(&model, &pattern)?;
            let none = Outage::none(&model);
            let cands = candidates(&model, &area, given, &none);
            let sweep = contingency_sweep(&model, &area, &pattern, &cands, &none)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
            for r in &sweep.results {
                w.serialize(r)?;
            }
            w.flush()?;
            let thr = compensate_thresholds(
                sweep.thresholds(tau)?,
                theta_mod_normal.unwrap_or(0.0),
                theta_ope_normal.unwrap_or(0.0),
            );
            write_json(&out_dir.join("thresholds.json"), &thr)?;
            println!("{}", serde_json::to_string_pretty(&thr)?);
        }
        Command::UpdateThresholds {
            m,
            pattern,
            method,
            change,
            tau,
            delta_com,
            candidates: given,
            out,
        } => {
            let (model, area) = load_area(&m)?;
            let pattern = TransferPattern::load(&model, &pattern)?;
            let change = TopologyChange::load(&change)?;
            let cands = candidates(&model, &area, given, &change.outage(&model)?);
            let result = match method {
                UpdateMethod::Fast => fast_thresholds(&model, &area, &pattern, &change, &cands)?,
                UpdateMethod::Original => original_thresholds(&model, &area, &pattern, &change, &cands, tau)?,
            };
            let thr = ThresholdSet::with_delta(result.thresholds, delta_com);
            write_json(&out, &thr)?;
            eprintln!("max-transfer evaluations: {}", result.max_transfer_evaluations);
            println!("{}", serde_json::to_string_pretty(&thr)?);
        }
        Command::Pac { m, pattern, pmu, out } => {
            let (model, area) = load_area(&m)?;
            let pattern = TransferPattern::load(&model, &pattern)?;
            let pmu: BTreeSet<BusId> = pmu.into_iter().map(Into::into).collect();
            let table = compute_pac_table(&model, &area, &pmu, &pattern.base)?;
            write_json(&out, &table)?;
        }
        Command::Mitigate {
            m,
            pattern,
            total_mw,
            outage,
            mva_base,
        } => {
            let (model, area) = load_area(&m)?;
            let pattern = TransferPattern::load(&model, &pattern)?;
            let out = model.outage(&outage)?;
            let ctx = WhatIf::new(model, area, pattern.base, pattern.direction, out, mva_base)?;
            let r = ctx.run(total_mw)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::MonitorConfig {
            m,
            thresholds,
            pac,
            pmu,
            stream_id,
            t_area,
            frame_rate,
            stale_limit,
            out,
            map_out,
        } => {
            let (model, area) = load_area(&m)?;
            let weights = area.weights(&model, &Outage::none(&model))?;
            let pac: PacTable = match pac {
                Some(p) => PacTable::load(p)?,
                None => PacTable::default(),
            };
            let measured: Vec<BusId> = if pmu.is_empty() {
                area.boundary_ids().to_vec()
            } else {
                pmu.into_iter().map(Into::into).collect()
            };
            let config = MonitorConfig {
                boundary: area.boundary_ids().to_vec(),
                weights,
                thresholds: ThresholdSet::load(&thresholds)?,
                pac,
                t_area,
                frame_rate,
                stale_limit,
            };
            config.validate()?;
            write_json(&out, &config)?;
            write_json(&map_out, &ChannelMap::sequential(stream_id, &measured))?;
        }
        Command::Synthesize { scenario, out } => {
            let frames = Scenario::load(&scenario)?.synthesize()?;
            write_replay_csv(File::create(&out)?, &frames)?;
            eprintln!("{} frames", frames.len());
        }
        Command::Replay {
            scenario,
            file,
            stream_id,
            listen,
            speed,
            wait_clients,
            capacity,
        } => {
            let frames: Vec<PhasorFrame> = match (scenario, file) {
                (Some(s), _) => Scenario::load(&s)?.synthesize()?,
                (None, Some(f)) => {
                    let load = read_replay_csv(File::open(&f)?, stream_id)?;
                    if load.malformed > 0 {
                        tracing::warn!("{} malformed rows skipped", load.malformed);
                    }
                    load.frames
                }
                (None, None) => bail!("give --scenario or --file"),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let server = StreamServer::bind(parse_endpoint(&listen)).await?;
                tracing::info!("streaming {} frames on {}", frames.len(), server.local_addr());
                let stats = server
                    .serve(
                        &frames,
                        ServeOptions {
                            speed,
                            wait_for_clients: wait_clients,
                            capacity,
                        },
                    )
                    .await?;
                tracing::info!(
                    "sent {} frames to {} clients, {} dropped",
                    stats.sent,
                    stats.clients,
                    stats.dropped
                );
                anyhow::Ok(())
            })?;
        }
        Command::Monitor {
            config,
            map,
            connect,
            file,
            stream_id,
            status_log,
            api,
            hold,
            history,
            whatif_model,
            whatif_area,
            whatif_pattern,
        } => {
            let config = MonitorConfig::load(&config)?;
            let map = ChannelMap::load(&map)?;
            let hub = Arc::new(Hub::new(config.thresholds, history, 1024));
            let mut pipeline = Pipeline::new(config, map, hub.clone())?;
            if let Some(path) = &status_log {
                pipeline = pipeline.with_status_log(Box::new(BufWriter::new(File::create(path)?)))?;
            }
            let whatif = match (whatif_model, whatif_area, whatif_pattern) {
                (Some(m), Some(a), Some(p)) => Some(Arc::new(WhatIf::load(&m, &a, &p, &[])?)),
                _ => None,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
                let api_task = match &api {
                    Some(addr) => {
                        let listener = tokio::net::TcpListener::bind(parse_endpoint(addr)).await?;
                        tracing::info!("API on http://{}", listener.local_addr()?);
                        let state = AppState {
                            hub: hub.clone(),
                            whatif,
                        };
                        Some(tokio::spawn(serve_api(listener, state, async {
                            let _ = stop_rx.await;
                        })))
                    }
                    None => None,
                };
                let stats = match file {
                    Some(f) => {
                        let load = read_replay_csv(File::open(&f)?, stream_id)?;
                        for fr in load.frames {
                            pipeline.push_frame(fr)?;
                        }
                        pipeline.finish()?;
                        let mut s = pipeline.stats();
                        s.rejected = load.malformed as u64;
                        s
                    }
                    None => {
                        let eps: Vec<String> = connect.iter().map(|c| parse_endpoint(c)).collect();
                        run_from_streams(pipeline, &eps).await?
                    }
                };
                tracing::info!(
                    "{} frames, {} ticks, {} out of order, {} late, {} rejected",
                    stats.frames,
                    stats.ticks,
                    stats.out_of_order,
                    stats.late,
                    stats.rejected
                );
                if let Some(snap) = hub.snapshot() {
                    println!("{}", serde_json::to_string(&*snap)?);
                }
                if let Some(task) = api_task {
                    if hold {
                        tokio::signal::ctrl_c().await?;
                    }
                    let _ = stop_tx.send(());
                    task.await??;
                }
                anyhow::Ok(())
            })?;
        }
        Command::Generate { buses, seed, out_dir } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sys = random_cutset_system(&mut rng, buses);
            std::fs::create_dir_all(&out_dir)?;
            write_json(&out_dir.join("model.json"), &sys.model.to_file())?;
            write_json(&out_dir.join("area.json"), &sys.area)?;
            let pattern: PatternFile = sys.uniform_pattern();
            write_json(&out_dir.join("pattern.json"), &pattern)?;
            eprintln!("wrote {} buses to {}", sys.model.bus_count(), out_dir.display());
        }
    }
    Ok(())
}
