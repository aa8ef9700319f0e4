//! Argument parsing and dispatch for the `uring-engine` binary.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use uring_engine::fiber::DEFAULT_MAX_FIBERS;
use uring_engine::perfmodel::{CalibrationConfig, CostProfile};
use uring_engine::rt::{Backend, RingConfig};
use uring_engine::workload::{RunLength, Variant, WorkloadConfig};
use uring_shuffle::{parse_peers, NetBackend, ShuffleConfig};

use crate::commands::{self, YcsbTarget};
use crate::error::{BenchError, Result};
use crate::net::{self, MsgPath, MsgsizeConfig, PingMode, PingpongConfig, Transport};
use crate::nop::{self, NopConfig};
use crate::rows::{self, Rows};
use crate::storage::{self, BlockMode, BlocksizeConfig, DurableConfig, DurableVariant, Rw, WriteLatencyConfig};
use crate::util::parse_size;

#[derive(Debug, Parser)]
#[command(name = "uring-engine", version, about = "Storage engine, shuffle and I/O microbenchmarks")]
pub struct Cli {
    /// Flat `key=value` file; each entry overrides the matching `--key` flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write result rows as CSV to this file.
    #[arg(long, global = true, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Print result rows as JSON.
    #[arg(long, global = true, conflicts_with = "csv")]
    pub json: bool,
    /// Print result rows as CSV (the default without --output).
    #[arg(long, global = true)]
    pub csv: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// YCSB-style load and run against the B+tree engine.
    Ycsb {
        #[command(subcommand)]
        cmd: YcsbCmd,
    },
    /// Distributed all-to-all shuffle; run one process per node.
    Shuffle(ShuffleArgs),
    /// Throughput models.
    Predict {
        #[command(subcommand)]
        cmd: PredictCmd,
    },
    /// I/O microbenchmarks.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Report host ring, NVMe and network capabilities.
    Doctor,
}

#[derive(Debug, clap::Args)]
pub struct DbArgs {
    /// Database file or block device.
    #[arg(long, default_value = "uring-engine.db")]
    pub path: PathBuf,
    /// Open with direct I/O.
    #[arg(long)]
    pub direct: bool,
    /// Use the simulated device instead of the kernel.
    #[arg(long)]
    pub sim: bool,
    #[arg(long, default_value_t = 70)]
    pub sim_read_us: u64,
    #[arg(long, default_value_t = 12)]
    pub sim_write_us: u64,
    #[arg(long, default_value_t = 10_000_000)]
    pub tuples: u64,
    #[arg(long, default_value_t = 128)]
    pub value_width: usize,
    #[arg(long, default_value_t = 4096)]
    pub page_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

impl DbArgs {
    fn target(&self) -> YcsbTarget {
        YcsbTarget {
            path: self.path.clone(),
            direct: self.direct,
            sim: self.sim.then(|| commands::sim_device(self.sim_read_us, self.sim_write_us)),
        }
    }

    fn workload(&self) -> WorkloadConfig {
        WorkloadConfig {
            tuples: self.tuples,
            value_width: self.value_width,
            page_size: self.page_size,
            seed: self.seed,
            ..WorkloadConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum YcsbCmd {
    /// Bulk-load the database.
    Load(DbArgs),
    /// Run transactions on a loaded database.
    Run(YcsbRunArgs),
}

#[derive(Debug, clap::Args)]
pub struct YcsbRunArgs {
    #[command(flatten)]
    pub db: DbArgs,
    /// Engine variants to run, in order.
    #[arg(long, value_delimiter = ',', default_value = "posix-sync,uring-sync,+batch-evict,+fibers,+batch-submit,+reg-bufs,+passthru,+iopoll,+sqpoll")]
    pub variants: Vec<Variant>,
    /// Transactions to run; overrides --duration-s.
    #[arg(long)]
    pub ops: Option<u64>,
    #[arg(long, default_value_t = 10.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_FIBERS)]
    pub fibers: usize,
    /// Buffer pool size, e.g. `1G`.
    #[arg(long, value_parser = parse_size, default_value = "1G")]
    pub pool_bytes: u64,
    /// Size the pool for this page-fault rate instead of --pool-bytes.
    #[arg(long)]
    pub fault_rate: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub update_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub compute_cycles: u64,
    /// Measure from the first transaction instead of after the pool fills.
    #[arg(long)]
    pub no_warmup: bool,
}

#[derive(Debug, clap::Args)]
pub struct ShuffleArgs {
    #[arg(long, default_value_t = 1)]
    pub nodes: usize,
    #[arg(long, default_value_t = 0)]
    pub node_id: usize,
    /// Listen address of every node, `host:port,...`, indexed by node id.
    #[arg(long, default_value = "")]
    pub peers: String,
    #[arg(long, default_value_t = 64)]
    pub tuple_width: usize,
    #[arg(long)]
    pub zc_send: bool,
    #[arg(long)]
    pub zc_recv: bool,
    #[arg(long)]
    pub multishot: bool,
    #[arg(long)]
    pub poll_first: bool,
    #[arg(long, default_value = "ring")]
    pub backend: NetBackend,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Input generated on each node.
    #[arg(long, value_parser = parse_size, default_value = "64M")]
    pub table_bytes: u64,
    /// Input across all nodes; overrides --table-bytes.
    #[arg(long, value_parser = parse_size)]
    pub total_bytes: Option<u64>,
    #[arg(long, value_parser = parse_size, default_value = "1M")]
    pub chunk_bytes: u64,
    #[arg(long, default_value_t = 4)]
    pub max_inflight: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Build the partitioned probe table after the shuffle.
    #[arg(long)]
    pub build_table: bool,
    /// Pin worker threads round-robin to these CPUs.
    #[arg(long, value_delimiter = ',')]
    pub cpus: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    pub idle_timeout_s: u64,
    /// Write this node's full report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

impl ShuffleArgs {
    pub fn config(&self) -> Result<ShuffleConfig> {
        let table_bytes = match self.total_bytes {
            Some(t) => t / self.nodes.max(1) as u64,
            None => self.table_bytes,
        };
        let cfg = ShuffleConfig {
            nodes: self.nodes,
            node_id: self.node_id,
            peers: parse_peers(&self.peers)?,
            workers: self.workers,
            tuple_width: self.tuple_width,
            chunk_bytes: self.chunk_bytes as usize,
            table_bytes,
            backend: self.backend,
            zero_copy_send: self.zc_send,
            zero_copy_recv: self.zc_recv,
            multishot_recv: self.multishot,
            poll_first: self.poll_first,
            build_probe_table: self.build_table,
            seed: self.seed,
            max_inflight: self.max_inflight,
            cpus: self.cpus.clone(),
            idle_timeout: Duration::from_secs(self.idle_timeout_s),
            ..ShuffleConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum PredictCmd {
    /// 1 / (r_pf × (L_read + L_write)).
    Latency {
        #[arg(long, default_value_t = CostProfile::REFERENCE.r_pf)]
        r_pf: f64,
        #[arg(long, default_value_t = CostProfile::REFERENCE.l_read_us)]
        l_read_us: f64,
        #[arg(long, default_value_t = CostProfile::REFERENCE.l_write_us)]
        l_write_us: f64,
        /// Batched write-back keeps writes off the critical path.
        #[arg(long)]
        writes_amortized: bool,
    },
    /// clock_hz / (c_tx + r_pf × c_io).
    Cycles {
        #[arg(long, default_value_t = CostProfile::REFERENCE.clock_hz)]
        clock_hz: f64,
        #[arg(long, default_value_t = CostProfile::REFERENCE.c_tx)]
        c_tx: f64,
        #[arg(long, default_value_t = CostProfile::REFERENCE.r_pf)]
        r_pf: f64,
        /// I/O cycles per fault; defaults to the reference profile.
        #[arg(long)]
        c_io: Option<f64>,
        /// Use batched read costs for the default c_io.
        #[arg(long)]
        batched: bool,
    },
    /// Measure a cost profile on this host or the simulator.
    Calibrate {
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long)]
        sim: bool,
        #[arg(long)]
        buffered: bool,
        #[arg(long, default_value_t = uring_engine::perfmodel::MIN_SAMPLES)]
        samples: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Cycles per no-op request across batch sizes.
    Nop {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        iterations: u64,
        #[arg(long, default_value = "uring-default")]
        backend: Backend,
    },
    /// Paced write latency per batch size.
    WriteLatency {
        #[arg(long, value_delimiter = ',', default_value = "1,8,32,64,128")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1_500_000)]
        target_iops: u64,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        workers: usize,
        #[arg(long, default_value_t = 400_000)]
        requests: u64,
        #[arg(long, value_parser = parse_size, default_value = "4K")]
        block: u64,
    },
    /// CPU cost and bandwidth across block sizes.
    Blocksize {
        #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "4K,8K,16K,32K,64K,128K,256K,512K,1M,2M,4M,8M")]
        block_sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "default,+reg-bufs,+passthru,+iopoll")]
        modes: Vec<BlockMode>,
        #[arg(long, default_value = "read")]
        rw: Rw,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long, value_parser = parse_size, default_value = "1G")]
        bytes_per_point: u64,
        #[arg(long, default_value_t = 16)]
        depth: usize,
    },
    /// Latency of durable writes.
    Durable {
        #[arg(long, value_delimiter = ',', default_value = "write-then-fsync,linked-write-fsync,osync-write,passthru-write-flush,passthru-iopoll-write")]
        variants: Vec<DurableVariant>,
        #[arg(long)]
        device: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, value_parser = parse_size, default_value = "4K")]
        block: u64,
    },
    /// Round-trip latency of small messages.
    Pingpong {
        #[arg(long, default_value = "tcp")]
        transport: Transport,
        #[arg(long, value_delimiter = ',', default_value = "defer-tr,defer-tr+reg-files,defer-tr+reg-bufs,defer-tr+napi,sqpoll,sqpoll+reg-files,sqpoll+reg-bufs,sqpoll+napi")]
        modes: Vec<PingMode>,
        #[arg(long, default_value_t = 8)]
        msg_bytes: usize,
        #[arg(long, default_value_t = 10_000)]
        exchanges: usize,
        #[arg(long, default_value_t = 50)]
        napi_busy_poll_us: u32,
        /// Remote echo server; a loopback one is started otherwise.
        #[arg(long)]
        peer: Option<SocketAddr>,
    },
    /// Echo server for a remote ping-pong client.
    Echo {
        #[arg(long, default_value = "tcp")]
        transport: Transport,
        #[arg(long, default_value = "0.0.0.0:7878")]
        listen: SocketAddr,
    },
    /// CPU cost per byte across message sizes, with crossover detection.
    Msgsize {
        #[arg(long, default_value = "send")]
        path: MsgPath,
        #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "64,128,256,512,1K,2K,4K,8K,16K,32K,64K")]
        msg_sizes: Vec<u64>,
        #[arg(long, value_parser = parse_size, default_value = "64M")]
        bytes_per_point: u64,
        #[arg(long, default_value_t = 4096)]
        min_messages: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        depth: usize,
    },
}

/// Appends the entries of every `--config` file as `--key=value` flags.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut files = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            if let Some(f) = it.next() {
                files.push(PathBuf::from(f));
            }
        } else if let Some(f) = s.strip_prefix("--config=") {
            files.push(PathBuf::from(f));
        }
    }
    let mut out = args;
    for f in files {
        out.extend(config_flags(&f)?);
    }
    Ok(out)
}

fn config_flags(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BenchError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BenchError::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let key = k.trim().replace('_', "-");
        if key == "config" {
            return Err(BenchError::Config(format!("{}:{}: nested config files are not supported", path.display(), n + 1)));
        }
        match v.trim() {
            "true" => flags.push(format!("--{key}").into()),
            "false" => {}
            v => flags.push(format!("--{key}={v}").into()),
        }
    }
    Ok(flags)
}

fn command() -> clap::Command {
    fn all_override(c: clap::Command) -> clap::Command {
        c.args_override_self(true).mut_subcommands(all_override)
    }
    all_override(Cli::command())
}

/// Parses `args` (program name first), after config expansion.
pub fn parse(args: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let args = expand_config(args).map_err(|e| clap::Error::raw(clap::error::ErrorKind::Io, format!("{e}\n")))?;
    let m = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&m)
}

/// Runs one command, collecting its rows.
pub fn execute(cmd: &Command, rows: &mut Rows) -> Result<()> {
    match cmd {
        Command::Doctor => crate::doctor::probe().to_rows(rows),
        Command::Ycsb { cmd: YcsbCmd::Load(db) } => commands::ycsb_load(&db.workload(), &db.target(), rows)?,
        Command::Ycsb { cmd: YcsbCmd::Run(a) } => {
            let mut cfg = WorkloadConfig {
                ops: match a.ops {
                    Some(n) => RunLength::Ops(n),
                    None => RunLength::Duration(Duration::from_secs_f64(a.duration_s.max(0.0))),
                },
                fibers: a.fibers,
                pool_bytes: a.pool_bytes,
                update_fraction: a.update_fraction,
                compute_cycles_per_tx: a.compute_cycles,
                warmup: !a.no_warmup,
                ..a.db.workload()
            };
            if let Some(r) = a.fault_rate {
                cfg.pool_bytes = cfg.pool_bytes_for_fault_rate(r);
            }
            commands::ycsb_run(&cfg, &a.variants, &a.db.target(), rows)?;
        }
        Command::Shuffle(a) => {
            let cfg = a.config()?;
            let report = uring_shuffle::shuffle_run(&cfg)?;
            for note in &report.notes {
                log::info!("{note}");
            }
            if let Some(p) = &a.report {
                let json = serde_json::to_vec_pretty(&report).map_err(std::io::Error::from)?;
                std::fs::write(p, json)?;
            }
            commands::shuffle_rows(&report, rows);
        }
        Command::Predict { cmd } => {
            let line = match *cmd {
                PredictCmd::Latency { r_pf, l_read_us, l_write_us, writes_amortized } => {
                    commands::predict_latency(r_pf, l_read_us, l_write_us, writes_amortized, rows)?
                }
                PredictCmd::Cycles { clock_hz, c_tx, r_pf, c_io, batched } => {
                    let p = CostProfile::REFERENCE;
                    let c_io = c_io.unwrap_or(if batched { p.c_io_batched() } else { p.c_io_unbatched() });
                    commands::predict_cycles(clock_hz, c_tx, r_pf, c_io, rows)?
                }
                PredictCmd::Calibrate { ref path, sim, buffered, samples } => {
                    let mut cfg = CalibrationConfig {
                        direct: !buffered,
                        sim: sim.then(|| commands::sim_device(70, 12)),
                        samples,
                        ..CalibrationConfig::default()
                    };
                    if let Some(p) = path {
                        cfg.path = p.clone();
                    }
                    let p = commands::calibrate_rows(&cfg, rows)?;
                    format!("{p:?}")
                }
            };
            eprintln!("{line}");
        }
        Command::Bench { cmd } => bench(cmd, rows)?,
    }
    Ok(())
}

fn bench(cmd: &BenchCmd, rows: &mut Rows) -> Result<()> {
    match cmd {
        BenchCmd::Nop { batch_sizes, iterations, backend } => {
            let cfg = NopConfig {
                batch_sizes: batch_sizes.clone(),
                iterations: *iterations,
                ring: RingConfig::with_backend(*backend),
            };
            nop::bench_nop(&cfg, rows)
        }
        BenchCmd::WriteLatency { batch_sizes, target_iops, device, workers, requests, block } => {
            let cfg = WriteLatencyConfig {
                batch_sizes: batch_sizes.clone(),
                target_iops: *target_iops,
                device: device.clone(),
                workers: *workers,
                requests: *requests,
                block: *block as usize,
                ..WriteLatencyConfig::default()
            };
            storage::bench_write_latency(&cfg, rows)
        }
        BenchCmd::Blocksize { block_sizes, modes, rw, device, bytes_per_point, depth } => {
            let cfg = BlocksizeConfig {
                block_sizes: block_sizes.clone(),
                modes: modes.clone(),
                rw: *rw,
                device: device.clone(),
                bytes_per_point: *bytes_per_point,
                depth: *depth,
                ..BlocksizeConfig::default()
            };
            storage::bench_blocksize(&cfg, rows)
        }
        BenchCmd::Durable { variants, device, samples, block } => {
            let cfg = DurableConfig {
                variants: variants.clone(),
                device: device.clone(),
                samples: *samples,
                block: *block as usize,
                ..DurableConfig::default()
            };
            storage::bench_durable(&cfg, rows)
        }
        BenchCmd::Pingpong { transport, modes, msg_bytes, exchanges, napi_busy_poll_us, peer } => {
            let cfg = PingpongConfig {
                transport: *transport,
                modes: modes.clone(),
                msg_bytes: *msg_bytes,
                exchanges: *exchanges,
                napi_busy_poll_us: *napi_busy_poll_us,
                peer: *peer,
                ..PingpongConfig::default()
            };
            net::bench_pingpong(&cfg, rows)
        }
        BenchCmd::Echo { transport, listen } => {
            let server = net::EchoServer::bind(*transport, *listen)?;
            eprintln!("echoing {transport} on {}", server.addr);
            loop {
                std::thread::park();
            }
        }
        BenchCmd::Msgsize { path, msg_sizes, bytes_per_point, min_messages, reps, depth } => {
            let cfg = MsgsizeConfig {
                path: *path,
                msg_sizes: msg_sizes.iter().map(|&s| s as usize).collect(),
                bytes_per_point: *bytes_per_point,
                min_messages: *min_messages,
                reps: *reps,
                depth: *depth,
            };
            net::bench_msgsize(&cfg, rows)
        }
    }
}

fn emit(cli: &Cli, rows: &Rows) -> std::io::Result<()> {
    if let Some(p) = &cli.output {
        rows::write_csv(std::fs::File::create(p)?, &rows.rows)?;
    }
    let stdout = std::io::stdout().lock();
    if cli.json {
        rows::write_json(stdout, &rows.rows)
    } else if cli.csv || cli.output.is_none() {
        rows::write_csv(stdout, &rows.rows)
    } else {
        Ok(())
    }
}

/// Entry point of the binary. Returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let cli = match parse(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut rows = Rows::default();
    let res = execute(&cli.command, &mut rows);
    // Rows gathered before a failure are still reported.
    if let Err(e) = emit(&cli, &rows) {
        eprintln!("error: writing results: {e}");
        return 1;
    }
    let _ = std::io::stdout().flush();
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<OsString> {
        std::iter::once("uring-engine").chain(s.split_whitespace()).map(OsString::from).collect()
    }

    #[test]
    fn grammar() {
        let c = parse(args("bench nop --batch-sizes 1,16 --iterations 10")).unwrap();
        assert!(matches!(c.command, Command::Bench { cmd: BenchCmd::Nop { ref batch_sizes, iterations: 10, .. } } if batch_sizes == &[1, 16]));
        let c = parse(args("shuffle --nodes 3 --node-id 1 --peers 127.0.0.1:1,127.0.0.1:2,127.0.0.1:3 --zc-send --backend readiness --json")).unwrap();
        assert!(c.json);
        let Command::Shuffle(a) = c.command else { panic!() };
        let cfg = a.config().unwrap();
        assert_eq!((cfg.nodes, cfg.node_id, cfg.peers.len()), (3, 1, 3));
        assert!(cfg.zero_copy_send && !cfg.multishot_recv);
        assert_eq!(cfg.backend, NetBackend::Readiness);
        assert!(parse(args("bench blocksize --block-sizes 4K,1M --modes default,+passthru")).is_ok());
        assert!(parse(args("bench blocksize --modes bogus")).is_err());
        assert!(parse(args("ycsb run --variants uring-sync,+fibers --fault-rate 0.7 --sim")).is_ok());
        assert!(parse(args("predict latency --json --csv")).is_err());
        assert!(parse(args("frobnicate")).is_err());
    }

    #[test]
    fn config_file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cfg");
        std::fs::write(&f, "# sweep\nbatch_sizes = 2,4\niterations=7\n\njson=true\ncsv=false\n").unwrap();
        let c = parse(args(&format!("bench nop --iterations 99 --config {}", f.display()))).unwrap();
        assert!(c.json);
        let Command::Bench { cmd: BenchCmd::Nop { batch_sizes, iterations, .. } } = c.command else { panic!() };
        assert_eq!(batch_sizes, [2, 4]);
        assert_eq!(iterations, 7);

        std::fs::write(&f, "iterations\n").unwrap();
        assert!(parse(args(&format!("bench nop --config={}", f.display()))).is_err());
        assert!(parse(args("bench nop --config /nonexistent/cfg")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(args("predict latency --output /dev/null")), 0);
        assert_eq!(main_with_args(args("predict latency --r-pf 2 --output /dev/null")), 1);
        assert_eq!(main_with_args(args("bench write-latency --target-iops 0 --output /dev/null")), 1);
        assert_eq!(main_with_args(args("bench nop --batch-sizes 1 --iterations 100 --backend simulated --output /dev/null")), 0);
    }
}
