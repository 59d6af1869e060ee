//! Data-parallel execution: worker threads joined in a ring, rank-0
//! parameter broadcast, ring all-reduce averaging, synchronous training
//! and a scaling benchmark.
//!
//! Workers own their replicas and communicate only through bounded
//! channels arranged in a ring. The all-reduce splits the vector into `W`
//! chunks (zero-padded), runs `W − 1` scatter-reduce phases and `W − 1`
//! all-gather phases, then divides by `W`. Every chunk's sum is formed once
//! and copied, so all ranks end bitwise identical.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;
use std::time::Instant;

use crate::checksum::fnv1a_f64;
use crate::error::{Error, Result};

/// One worker's view of the ring.
pub struct RingEndpoint {
    rank: usize,
    world: usize,
    to_next: Option<SyncSender<Vec<f64>>>,
    from_prev: Option<Receiver<Vec<f64>>>,
}

/// `world` connected endpoints; endpoint `r` sends to `r + 1 mod world`.
pub fn ring(world: usize) -> Result<Vec<RingEndpoint>> {
    if world == 0 {
        return Err(Error::invalid("world size must be at least 1"));
    }
    if world == 1 {
        return Ok(vec![RingEndpoint {
            rank: 0,
            world: 1,
            to_next: None,
            from_prev: None,
        }]);
    }
    let mut senders = Vec::with_capacity(world);
    let mut receivers = Vec::with_capacity(world);
    for _ in 0..world {
        let (s, r) = sync_channel(1);
        senders.push(Some(s));
        receivers.push(Some(r));
    }
    // channel r carries messages from rank r to rank r + 1
    Ok((0..world)
        .map(|r| RingEndpoint {
            rank: r,
            world,
            to_next: senders[r].take(),
            from_prev: receivers[(r + world - 1) % world].take(),
        })
        .collect())
}

impl RingEndpoint {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world(&self) -> usize {
        self.world
    }

    fn send(&self, v: Vec<f64>) -> Result<()> {
        self.to_next
            .as_ref()
            .expect("ring of more than one worker")
            .send(v)
            .map_err(|_| Error::Worker {
                rank: (self.rank + 1) % self.world,
                reason: "peer hung up".into(),
            })
    }

    fn recv(&self) -> Result<Vec<f64>> {
        self.from_prev
            .as_ref()
            .expect("ring of more than one worker")
            .recv()
            .map_err(|_| Error::Worker {
                rank: (self.rank + self.world - 1) % self.world,
                reason: "peer hung up".into(),
            })
    }

    /// Every rank learns the smallest and largest length in the ring, so a
    /// mismatch is reported by all ranks rather than deadlocking some.
    fn agree_on_length(&self, n: usize) -> Result<()> {
        let (mut lo, mut hi) = (n, n);
        for _ in 0..self.world - 1 {
            self.send(vec![lo as f64, hi as f64])?;
            let m = self.recv()?;
            lo = lo.min(m[0] as usize);
            hi = hi.max(m[1] as usize);
        }
        if lo != hi {
            return Err(Error::ShapeMismatch {
                op: "ring_allreduce (gradient lengths differ across ranks)",
                left: vec![lo],
                right: vec![hi],
            });
        }
        Ok(())
    }

    /// Replaces `v` with the elementwise mean over all ranks.
    pub fn allreduce_mean(&self, v: &mut Vec<f64>) -> Result<()> {
        if self.world == 1 {
            return Ok(());
        }
        self.agree_on_length(v.len())?;
        let (w, r) = (self.world, self.rank);
        let n = v.len();
        let cs = n.div_ceil(w).max(1);
        let mut buf = std::mem::take(v);
        buf.resize(cs * w, 0.0);
        let chunk = |c: usize| c * cs..(c + 1) * cs;
        for s in 0..w - 1 {
            let send_c = (r + w - s) % w;
            let recv_c = (r + w - s - 1) % w;
            self.send(buf[chunk(send_c)].to_vec())?;
            let got = self.recv()?;
            for (a, b) in buf[chunk(recv_c)].iter_mut().zip(got) {
                *a += b;
            }
        }
        for s in 0..w - 1 {
            let send_c = (r + 1 + w - s) % w;
            let recv_c = (r + w - s) % w;
            self.send(buf[chunk(send_c)].to_vec())?;
            let got = self.recv()?;
            buf[chunk(recv_c)].copy_from_slice(&got);
        }
        buf.truncate(n);
        let k = w as f64;
        for x in &mut buf {
            *x /= k;
        }
        *v = buf;
        Ok(())
    }

    /// Overwrites `v` on every rank with rank 0's copy, forwarded around
    /// the ring.
    pub fn broadcast(&self, v: &mut Vec<f64>) -> Result<()> {
        if self.world == 1 {
            return Ok(());
        }
        if self.rank != 0 {
            *v = self.recv()?;
        }
        if self.rank != self.world - 1 {
            self.send(v.clone())?;
        }
        Ok(())
    }
}

/// Message and phase counts of one ring all-reduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectiveCost {
    pub phases: usize,
    pub messages: usize,
    pub elements_sent: usize,
}

/// Sequential replay of the ring all-reduce with the same chunk schedule
/// and summation order as the threaded version.
pub fn simulate_allreduce(vectors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, CollectiveCost)> {
    let w = vectors.len();
    if w == 0 {
        return Err(Error::invalid("no ranks"));
    }
    let n = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::ShapeMismatch {
            op: "simulate_allreduce",
            left: vec![n],
            right: vec![v.len()],
        });
    }
    if w == 1 {
        return Ok((
            vectors.to_vec(),
            CollectiveCost {
                phases: 0,
                messages: 0,
                elements_sent: 0,
            },
        ));
    }
    let cs = n.div_ceil(w).max(1);
    let mut bufs: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let mut b = v.clone();
            b.resize(cs * w, 0.0);
            b
        })
        .collect();
    let chunk = |c: usize| c * cs..(c + 1) * cs;
    let mut cost = CollectiveCost {
        phases: 0,
        messages: 0,
        elements_sent: 0,
    };
    for s in 0..w - 1 {
        let msgs: Vec<Vec<f64>> = (0..w).map(|r| bufs[r][chunk((r + w - s) % w)].to_vec()).collect();
        for r in 0..w {
            let from = (r + w - 1) % w;
            let c = (r + w - s - 1) % w;
            for (a, b) in bufs[r][chunk(c)].iter_mut().zip(&msgs[from]) {
                *a += b;
            }
        }
        cost.phases += 1;
        cost.messages += w;
        cost.elements_sent += w * cs;
    }
    for s in 0..w - 1 {
        let msgs: Vec<Vec<f64>> = (0..w).map(|r| bufs[r][chunk((r + 1 + w - s) % w)].to_vec()).collect();
        for r in 0..w {
            let from = (r + w - 1) % w;
            let c = (r + w - s) % w;
            bufs[r][chunk(c)].copy_from_slice(&msgs[from]);
        }
        cost.phases += 1;
        cost.messages += w;
        cost.elements_sent += w * cs;
    }
    let k = w as f64;
    for b in &mut bufs {
        b.truncate(n);
        for x in b.iter_mut() {
            *x /= k;
        }
    }
    Ok((bufs, cost))
}

/// Runs `f(rank, endpoint)` on `world` threads and returns the results in
/// rank order. A failing or panicking worker fails the whole group.
pub fn run_group<R: Send>(world: usize, f: impl Fn(RingEndpoint) -> Result<R> + Sync) -> Result<Vec<R>> {
    let endpoints = ring(world)?;
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let rank = ep.rank;
                (rank, scope.spawn(move || f(ep)))
            })
            .collect();
        let mut out = Vec::with_capacity(world);
        let mut first_err: Option<Error> = None;
        for (rank, h) in handles {
            match h.join() {
                Ok(Ok(v)) => out.push(v),
                Ok(Err(e)) => {
                    // prefer the root cause over peers reporting a hang-up
                    let hangup = matches!(&e, Error::Worker { reason, .. } if reason == "peer hung up");
                    if first_err.is_none() || (!hangup && matches!(&first_err, Some(Error::Worker { .. }))) {
                        first_err = Some(e);
                    }
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Worker {
                        rank,
                        reason: "worker panicked".into(),
                    });
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })
}

/// Applies `f` to every item using `workers` threads (item `k` goes to
/// worker `k mod workers`). Results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    let per: Vec<Vec<(usize, Result<R>)>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|k| (k, f(&items[k])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(w, h)| {
                h.join().unwrap_or_else(|_| {
                    vec![(
                        w,
                        Err(Error::Worker {
                            rank: w,
                            reason: "worker panicked".into(),
                        }),
                    )]
                })
            })
            .collect()
    });
    let mut all: Vec<(usize, Result<R>)> = per.into_iter().flatten().collect();
    all.sort_by_key(|(k, _)| *k);
    all.into_iter().map(|(_, r)| r).collect()
}

/// World size plus disjoint, covering shards of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerGroup {
    pub world: usize,
    pub seed: u64,
    pub shards: Vec<Vec<usize>>,
}

impl WorkerGroup {
    /// Item `i` goes to rank `i mod world`.
    pub fn strided(world: usize, items: usize, seed: u64) -> Result<Self> {
        if world == 0 {
            return Err(Error::invalid("world size must be at least 1"));
        }
        if items < world {
            return Err(Error::invalid(format!("{items} items cannot feed {world} workers")));
        }
        let shards = (0..world).map(|r| (r..items).step_by(world).collect()).collect();
        Ok(Self { world, seed, shards })
    }

    /// Indices of rank `rank`'s batch at `step`, cycling through its shard.
    pub fn batch(&self, rank: usize, step: usize, size: usize) -> Vec<usize> {
        let shard = &self.shards[rank];
        (0..size).map(|k| shard[(step * size + k) % shard.len()]).collect()
    }
}

/// Gradient and extra averaged statistics from one replica on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStep {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Additional per-step quantities averaged with the gradient, such as
    /// normalisation statistics.
    pub stats: Vec<f64>,
}

/// A model replica driven by [`distributed_train`].
pub trait Replica: Send {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn local_step(&mut self, batch: &[usize], step: usize) -> Result<LocalStep>;
    /// Applies the averaged gradient and statistics.
    fn apply(&mut self, grad: &[f64], stats: &[f64]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedRun {
    /// Final parameters of every rank.
    pub params: Vec<Vec<f64>>,
    /// Mean loss across ranks per step.
    pub losses: Vec<f64>,
    /// Averaged gradient of the first step as seen by rank 0.
    pub first_grad: Vec<f64>,
}

impl DistributedRun {
    pub fn checksums(&self) -> Vec<u64> {
        self.params.iter().map(|p| fnv1a_f64(p)).collect()
    }
}

/// Synchronous data parallel training: rank 0's parameters are broadcast,
/// then each step every rank computes a gradient on its own batch, the ring
/// averages gradients, statistics and loss, and every rank applies the same
/// update.
pub fn distributed_train<R: Replica>(
    group: &WorkerGroup,
    make_replica: impl Fn(usize) -> Result<R> + Sync,
    steps: usize,
    batch: usize,
) -> Result<DistributedRun> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let results = run_group(group.world, |ep| {
        let rank = ep.rank();
        let mut replica = make_replica(rank)?;
        let mut p = replica.params();
        ep.broadcast(&mut p)?;
        replica.set_params(&p)?;
        let mut losses = Vec::with_capacity(steps);
        let mut first = Vec::new();
        for step in 0..steps {
            let idx = group.batch(rank, step, batch);
            let local = replica.local_step(&idx, step)?;
            let (ng, ns) = (local.grad.len(), local.stats.len());
            let mut v = local.grad;
            v.extend_from_slice(&local.stats);
            v.push(local.loss);
            ep.allreduce_mean(&mut v)?;
            let loss = v[ng + ns];
            if !loss.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    iteration: step,
                    trace: losses,
                });
            }
            if step == 0 {
                first = v[..ng].to_vec();
            }
            replica.apply(&v[..ng], &v[ng..ng + ns])?;
            losses.push(loss);
        }
        Ok((replica.params(), losses, first))
    })?;
    let mut it = results.into_iter();
    let (p0, losses, first_grad) = it.next().expect("at least one rank");
    let mut params = vec![p0];
    params.extend(it.map(|(p, _, _)| p));
    Ok(DistributedRun {
        params,
        losses,
        first_grad,
    })
}

/// How benchmark time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    WallClock,
    /// Cost model: one unit per job, jobs spread round-robin, so `W`
    /// workers take `ceil(jobs / W)` units.
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub workers: usize,
    pub parallel_time: f64,
    pub serial_time: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub clock: Clock,
    pub rows: Vec<ScalingRow>,
    pub hardware_threads: usize,
    /// Worker counts above the available hardware threads.
    pub under_provisioned: Vec<usize>,
}

/// Published multi-GPU augmentation timings, kept as reference rows:
/// `(workers, parallel seconds, sequential seconds, reported speedup)`.
pub const REFERENCE_ROWS: [(usize, f64, f64, f64); 5] = [
    (1, 3771.53, 3771.53, 1.0),
    (2, 1953.60, 3771.53, 1.93),
    (4, 1166.73, 3771.53, 3.23),
    (6, 847.10, 3771.53, 4.45),
    (8, 739.65, 3771.53, 5.09),
];

pub fn hardware_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs `workload(W)` for every worker count and reports `S = T_1 / T_W`.
/// The serial time is the W = 1 measurement (taken first when absent
/// from `worker_counts`).
pub fn speedup_benchmark(
    worker_counts: &[usize],
    jobs: usize,
    clock: Clock,
    workload: impl Fn(usize) -> Result<()>,
) -> Result<ScalingReport> {
    if worker_counts.is_empty() || worker_counts.contains(&0) {
        return Err(Error::invalid("worker counts must be positive"));
    }
    let measure = |w: usize| -> Result<f64> {
        match clock {
            Clock::WallClock => {
                let t = Instant::now();
                workload(w)?;
                Ok(t.elapsed().as_secs_f64())
            }
            Clock::Simulated => Ok(jobs.div_ceil(w) as f64),
        }
    };
    let serial = measure(1)?;
    let mut rows = Vec::with_capacity(worker_counts.len());
    for &w in worker_counts {
        let t = if w == 1 { serial } else { measure(w)? };
        rows.push(ScalingRow {
            workers: w,
            parallel_time: t,
            serial_time: serial,
            speedup: if w == 1 { 1.0 } else { serial / t },
        });
    }
    let hw = hardware_threads();
    Ok(ScalingReport {
        clock,
        rows,
        hardware_threads: hw,
        under_provisioned: worker_counts.iter().copied().filter(|&w| w > hw).collect(),
    })
}

impl ScalingReport {
    /// Text table with columns `W  T_p  T_s  S`, followed by the reference
    /// rows and the hardware note.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "# clock {}\n# hardware_threads {}\nW\tT_p\tT_s\tS\n",
            match self.clock {
                Clock::WallClock => "wall",
                Clock::Simulated => "simulated",
            },
            self.hardware_threads
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.4}\t{:.4}\t{:.2}\n",
                r.workers, r.parallel_time, r.serial_time, r.speedup
            ));
        }
        s.push_str("# reference (8-GPU cluster, not reproduced here)\n");
        for (w, tp, ts, sp) in REFERENCE_ROWS {
            s.push_str(&format!("# {w}\t{tp:.2}\t{ts:.2}\t{sp:.2}\n"));
        }
        if !self.under_provisioned.is_empty() {
            s.push_str(&format!(
                "# under-provisioned: worker counts {:?} exceed {} hardware threads\n",
                self.under_provisioned, self.hardware_threads
            ));
        }
        s
    }
}
