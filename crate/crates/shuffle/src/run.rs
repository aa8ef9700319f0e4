use std::net::TcpListener;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::mesh::{self, Summary};
use crate::morsel::MorselSource;
use crate::table::{tref, tref_parts, ProbeTable};
use crate::tuple::{key_of, Checksum};
use crate::worker::{Worker, WorkerOutput};
use crate::{readiness, ring, NetBackend, ShuffleConfig, ShuffleError};

const INSERT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub node_id: usize,
    pub nodes: usize,
    pub workers: usize,
    pub tuple_width: usize,
    pub backend: NetBackend,
    pub zero_copy_send: bool,
    pub zero_copy_recv: bool,
    pub multishot_recv: bool,
    pub poll_first: bool,
    /// Bytes sent to and received from each node, framing included.
    pub egress_bytes: Vec<u64>,
    pub ingress_bytes: Vec<u64>,
    #[serde(with = "secs")]
    pub runtime: Duration,
    pub tuples_generated: u64,
    /// Tuples this node produced for each partition.
    pub sent_checksums: Vec<Checksum>,
    /// Tuples this node's partition received from each source node.
    pub received_checksums: Vec<Checksum>,
    /// Everything this node's partition received.
    pub partition_checksum: Checksum,
    pub tuples_sent: u64,
    pub tuples_local: u64,
    pub tuples_received: u64,
    pub chunks_sent: u64,
    pub producer_stalls: u64,
    pub table_entries: Option<u64>,
    /// Degraded or ignored settings.
    pub notes: Vec<String>,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl ShuffleReport {
    pub fn egress_total(&self) -> u64 {
        self.egress_bytes.iter().sum()
    }

    pub fn ingress_total(&self) -> u64 {
        self.ingress_bytes.iter().sum()
    }

    pub fn egress_gib_per_s(&self) -> f64 {
        self.egress_total() as f64 / (1u64 << 30) as f64 / self.runtime.as_secs_f64().max(1e-9)
    }
}

/// Probe table built over the tuples a node received.
#[derive(Debug)]
pub struct BuiltTable {
    pub table: ProbeTable,
    pub chunks: Vec<Vec<u8>>,
    pub tuple_width: usize,
}

impl BuiltTable {
    pub fn tuple(&self, t: u64) -> &[u8] {
        let (c, i) = tref_parts(t);
        let w = self.tuple_width;
        &self.chunks[c as usize][i as usize * w..(i as usize + 1) * w]
    }

    /// Tuples stored under `key`.
    pub fn get(&self, key: u64) -> Vec<&[u8]> {
        self.table.lookup(key).into_iter().map(|t| self.tuple(t)).collect()
    }
}

#[derive(Debug)]
pub struct ShuffleOutput {
    pub report: ShuffleReport,
    pub table: Option<BuiltTable>,
}

/// Runs one node of the shuffle, listening on its configured address.
pub fn shuffle_run(cfg: &ShuffleConfig) -> Result<ShuffleReport, ShuffleError> {
    cfg.validate()?;
    let listener = match cfg.nodes {
        1 => None,
        _ => Some(TcpListener::bind(cfg.peers[cfg.node_id])?),
    };
    Ok(shuffle_run_on(cfg, listener)?.report)
}

/// Like [`shuffle_run`] with an already bound listener.
pub fn shuffle_run_on(cfg: &ShuffleConfig, listener: Option<TcpListener>) -> Result<ShuffleOutput, ShuffleError> {
    cfg.validate()?;
    let me = cfg.node_id;
    let mut mesh = match &listener {
        Some(l) => mesh::connect(cfg, l)?,
        None if cfg.nodes == 1 => mesh::Mesh {
            control: vec![None],
            data: (0..cfg.workers).map(|_| vec![None]).collect(),
        },
        None => return Err(ShuffleError::Config("a multi-node run needs a listener".into())),
    };
    drop(listener);

    let morsels = MorselSource::new(cfg.tuples_per_node(), cfg.morsel_tuples);
    let data = std::mem::take(&mut mesh.data);
    let start = Instant::now();
    let results: Vec<Result<(WorkerOutput, Vec<String>), ShuffleError>> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .into_iter()
            .enumerate()
            .map(|(id, socks)| {
                let morsels = &morsels;
                s.spawn(move || {
                    let mut notes = Vec::new();
                    if !cfg.cpus.is_empty() {
                        if let Err(e) = pin(cfg.cpus[id % cfg.cpus.len()]) {
                            notes.push(format!("worker {id} not pinned: {e}"));
                        }
                    }
                    let mut w = Worker::new(cfg, id, morsels, socks);
                    match cfg.backend {
                        NetBackend::Ring => ring::drive(&mut w, &mut notes)?,
                        NetBackend::Readiness => readiness::drive(&mut w, &mut notes)?,
                    }
                    Ok((w.into_output(), notes))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let runtime = start.elapsed();

    let mut sent = vec![Checksum::default(); cfg.nodes];
    let mut received = vec![Checksum::default(); cfg.nodes];
    let mut egress = vec![0u64; cfg.nodes];
    let mut ingress = vec![0u64; cfg.nodes];
    let mut notes = Vec::new();
    let mut chunks = Vec::new();
    let (mut chunks_sent, mut stalls) = (0, 0);
    for r in results {
        let (out, n) = r?;
        notes.extend(n);
        for i in 0..cfg.nodes {
            sent[i].merge(&out.sent[i]);
            received[i].merge(&out.received[i]);
            egress[i] += out.egress[i];
            ingress[i] += out.ingress[i];
        }
        chunks_sent += out.chunks_sent;
        stalls += out.stalls;
        chunks.extend(out.stored);
    }

    let ours: Vec<Summary> = (0..cfg.nodes)
        .map(|n| Summary {
            from: me,
            sent: sent[n],
            egress_bytes: egress[n],
        })
        .collect();
    let theirs = mesh::exchange(cfg, &mut mesh.control, &ours)?;
    for (n, t) in theirs.iter().enumerate() {
        let expected = match t {
            Some(t) => t.sent,
            None => sent[me],
        };
        if expected != received[n] {
            return Err(ShuffleError::ChecksumMismatch {
                source_node: n,
                partition: me,
                expected,
                received: received[n],
            });
        }
    }

    let table = if cfg.build_probe_table {
        Some(build_table(cfg, chunks)?)
    } else {
        None
    };
    let mut partition_checksum = Checksum::default();
    received.iter().for_each(|c| partition_checksum.merge(c));
    let remote = |v: &[Checksum]| -> u64 { v.iter().enumerate().filter(|(n, _)| *n != me).map(|(_, c)| c.tuples).sum() };
    let report = ShuffleReport {
        node_id: me,
        nodes: cfg.nodes,
        workers: cfg.workers,
        tuple_width: cfg.tuple_width,
        backend: cfg.backend,
        zero_copy_send: cfg.zero_copy_send,
        zero_copy_recv: cfg.zero_copy_recv,
        multishot_recv: cfg.multishot_recv,
        poll_first: cfg.poll_first,
        egress_bytes: egress,
        ingress_bytes: ingress,
        runtime,
        tuples_generated: morsels.total(),
        tuples_sent: remote(&sent),
        tuples_local: sent[me].tuples,
        tuples_received: partition_checksum.tuples,
        sent_checksums: sent,
        received_checksums: received,
        partition_checksum,
        chunks_sent,
        producer_stalls: stalls,
        table_entries: table.as_ref().map(|t| t.table.len() as u64),
        notes,
    };
    Ok(ShuffleOutput { report, table })
}

/// Parallel build: every worker scans all received tuples and inserts the
/// ones whose table partition it owns.
fn build_table(cfg: &ShuffleConfig, chunks: Vec<Vec<u8>>) -> Result<BuiltTable, ShuffleError> {
    let w = cfg.tuple_width;
    let total: usize = chunks.iter().map(|c| c.len() / w).sum();
    let partitions = cfg.workers * 8;
    let capacity = total / partitions + total / partitions / 4 + 64;
    let shards = ProbeTable::shards(partitions, cfg.workers, capacity);
    let built: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = shards
            .into_iter()
            .map(|mut shard| {
                let chunks = &chunks;
                s.spawn(move || {
                    let mut batch = Vec::with_capacity(INSERT_BATCH);
                    for (ci, c) in chunks.iter().enumerate() {
                        for (ti, t) in c.chunks_exact(w).enumerate() {
                            let key = key_of(t);
                            if !shard.owns(key) {
                                continue;
                            }
                            batch.push((key, tref(ci as u32, ti as u32)));
                            if batch.len() == INSERT_BATCH {
                                shard.probe_insert_batch(&batch)?;
                                batch.clear();
                            }
                        }
                    }
                    shard.probe_insert_batch(&batch)?;
                    Ok::<_, ShuffleError>(shard)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("build worker panicked")).collect()
    });
    let shards = built.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(BuiltTable {
        table: ProbeTable::from_shards(shards),
        chunks,
        tuple_width: w,
    })
}

fn pin(cpu: usize) -> std::io::Result<()> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}
