//! Discrete-event simulator of the proxy: a FIFO request queue, a FIFO task
//! queue and `L` worker threads.
//!
//! The head-of-line request leaves the request queue only when at least one
//! thread is idle and the task queue is empty; it is then split into its `n`
//! tasks. Idle threads take tasks in FIFO order and sample the task delay at
//! start. The request completes with its `k`-th finished task.
//!
//! Events at equal timestamps run in the order completions (with the
//! cancellations they trigger), dispatches, arrivals. Ties within a kind are
//! broken by sequence number, so a run is a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{ClassSpec, CodeChoice, SystemSpec};
use crate::strategies::{ArrivalContext, Strategy};
use crate::traces::EmpiricalPools;

/// Default cap on waiting requests before a run is declared overloaded.
pub const DEFAULT_OVERLOAD_BOUND: usize = 100_000;

const ARRIVAL_STREAM: u64 = 1;
const CLASS_STREAM: u64 = 2;
const THREAD_STREAM_BASE: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrivalProcess {
    /// Rate in requests per ms.
    Poisson { rate: f64 },
    /// Consecutive `(duration_ms, rate)` phases; no arrivals after the last.
    Phased { phases: Vec<(f64, f64)> },
    /// Explicit arrival times in ms.
    Trace { timestamps: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub class_id: usize,
}

impl ArrivalProcess {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArrivalProcess::Poisson { rate } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(invalid(format!("arrival rate must be >= 0, got {rate}")));
                }
            }
            ArrivalProcess::Phased { phases } => {
                if phases.is_empty() {
                    return Err(invalid("phased arrivals need at least one phase"));
                }
                for &(d, r) in phases {
                    if !(d.is_finite() && d > 0.0) || !(r.is_finite() && r >= 0.0) {
                        return Err(invalid(format!("bad phase ({d}, {r})")));
                    }
                }
            }
            ArrivalProcess::Trace { timestamps } => {
                if timestamps.iter().any(|t| !t.is_finite() || *t < 0.0) {
                    return Err(invalid("arrival timestamps must be finite and >= 0"));
                }
                if timestamps.windows(2).any(|w| w[1] < w[0]) {
                    return Err(invalid("arrival timestamps must be sorted"));
                }
            }
        }
        Ok(())
    }

    /// Arrival rate in force at time `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        match self {
            ArrivalProcess::Poisson { rate } => *rate,
            ArrivalProcess::Phased { phases } => {
                let mut end = 0.0;
                for &(d, r) in phases {
                    end += d;
                    if t < end {
                        return r;
                    }
                }
                0.0
            }
            ArrivalProcess::Trace { .. } => f64::NAN,
        }
    }

    /// Arrival times in `[0, horizon)` with classes drawn by popularity.
    pub fn generate(&self, classes: &[ClassSpec], horizon: f64, seed: u64) -> Result<Vec<Arrival>> {
        self.validate()?;
        let mut times = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ARRIVAL_STREAM);
        let mut poisson = |start: f64, end: f64, rate: f64, out: &mut Vec<f64>| {
            if rate <= 0.0 {
                return;
            }
            let mut t = start;
            loop {
                let gap: f64 = rng.sample(Exp1);
                t += gap / rate;
                if t >= end {
                    break;
                }
                out.push(t);
            }
        };
        match self {
            ArrivalProcess::Poisson { rate } => poisson(0.0, horizon, *rate, &mut times),
            ArrivalProcess::Phased { phases } => {
                let mut start = 0.0;
                for &(d, r) in phases {
                    let end = (start + d).min(horizon);
                    if start >= end {
                        break;
                    }
                    poisson(start, end, r, &mut times);
                    start += d;
                }
            }
            ArrivalProcess::Trace { timestamps } => {
                times.extend(timestamps.iter().copied().filter(|t| *t < horizon));
            }
        }
        let weights: Vec<f64> = classes.iter().map(|c| c.popularity).collect();
        let ids: Vec<usize> = if classes.len() == 1 {
            vec![0; times.len()]
        } else {
            let dist =
                WeightedIndex::new(&weights).map_err(|e| invalid(format!("class popularities: {e}")))?;
            let mut crng = ChaCha8Rng::seed_from_u64(seed);
            crng.set_stream(CLASS_STREAM);
            (0..times.len()).map(|_| crng.sample(&dist)).collect()
        };
        Ok(times
            .into_iter()
            .zip(ids)
            .map(|(time, class_id)| Arrival { time, class_id })
            .collect())
    }
}

/// Source of task delays.
#[derive(Debug, Clone, PartialEq)]
pub enum DelaySampler {
    /// Shifted exponential with each class's own parameters.
    Parametric,
    /// Uniform draws from trace pools; one entry per class, or a single entry
    /// shared by all classes.
    Empirical(Vec<Arc<EmpiricalPools>>),
    /// Fixed delays consumed in task start order.
    Scripted(Vec<f64>),
}

impl DelaySampler {
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self {
            DelaySampler::Parametric => Ok(()),
            DelaySampler::Empirical(pools) => {
                if pools.len() == 1 || pools.len() == classes {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "need 1 or {classes} delay pool sets, got {}",
                        pools.len()
                    )))
                }
            }
            DelaySampler::Scripted(v) => {
                if v.iter().any(|d| !d.is_finite() || *d < 0.0) {
                    Err(invalid("scripted delays must be finite and >= 0"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// What happens to the remaining tasks once `k` of them have finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeftoverPolicy {
    /// Running siblings are preempted, queued ones dropped.
    #[default]
    Cancel,
    /// Every task runs to completion and is charged in full.
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    /// Requests arriving earlier are excluded from metrics. `None` means 10%
    /// of the horizon.
    pub warmup: Option<f64>,
    pub seed: u64,
    pub leftover: LeftoverPolicy,
    pub overload_bound: usize,
    /// Keep serving after the horizon until every admitted request is done.
    pub drain: bool,
}

impl SimOptions {
    pub fn new(horizon: f64, seed: u64) -> Self {
        SimOptions {
            horizon,
            warmup: None,
            seed,
            leftover: LeftoverPolicy::Cancel,
            overload_bound: DEFAULT_OVERLOAD_BOUND,
            drain: true,
        }
    }

    pub fn warmup(&self) -> f64 {
        self.warmup.unwrap_or(0.1 * self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.warmup();
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(w.is_finite() && w >= 0.0 && w < self.horizon) {
            return Err(invalid(format!("warmup must lie in [0, horizon), got {w}")));
        }
        if self.overload_bound == 0 {
            return Err(invalid("overload bound must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: usize,
    pub class_id: usize,
    pub arrival: f64,
    /// Time the request left the request queue.
    pub dispatch: Option<f64>,
    /// Time the `k`-th task finished.
    pub completion: Option<f64>,
    pub code: CodeChoice,
    /// Waiting requests seen on arrival.
    pub queue_at_arrival: usize,
    pub idle_at_arrival: usize,
    /// Thread time charged to this request's tasks, in ms.
    pub usage: f64,
    pub tasks_done: usize,
}

impl RequestRecord {
    pub fn queueing_delay(&self) -> Option<f64> {
        self.dispatch.map(|d| d - self.arrival)
    }

    pub fn service_delay(&self) -> Option<f64> {
        Some(self.completion? - self.dispatch?)
    }

    pub fn total_delay(&self) -> Option<f64> {
        self.completion.map(|c| c - self.arrival)
    }
}

/// Request accounting at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conservation {
    pub arrived: usize,
    pub completed: usize,
    pub in_service: usize,
    pub waiting: usize,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.arrived == self.completed + self.in_service + self.waiting
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub strategy: String,
    pub records: Vec<RequestRecord>,
    pub overloaded: bool,
    pub horizon: f64,
    pub warmup: f64,
    /// Time of the last processed event.
    pub end_time: f64,
    pub conservation: Conservation,
}

impl SimResult {
    /// Completed requests that arrived after warmup.
    pub fn measured(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records
            .iter()
            .filter(move |r| r.completion.is_some() && r.arrival >= self.warmup)
    }

    /// One row per request, followed by `#` summary lines.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "class",
            "arrival_ms",
            "dispatch_ms",
            "completion_ms",
            "n",
            "k",
            "queueing_delay_ms",
            "service_delay_ms",
            "usage_ms",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.id.to_string(),
                r.class_id.to_string(),
                r.arrival.to_string(),
                opt(r.dispatch),
                opt(r.completion),
                r.code.n.to_string(),
                r.code.k.to_string(),
                opt(r.queueing_delay()),
                opt(r.service_delay()),
                r.usage.to_string(),
            ])?;
        }
        let mut out = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let c = &self.conservation;
        writeln!(out, "# strategy={}", self.strategy)?;
        writeln!(out, "# overloaded={}", self.overloaded)?;
        writeln!(
            out,
            "# horizon_ms={} warmup_ms={} end_ms={}",
            self.horizon, self.warmup, self.end_time
        )?;
        writeln!(
            out,
            "# at_horizon arrived={} completed={} in_service={} waiting={}",
            c.arrived, c.completed, c.in_service, c.waiting
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskStatus {
    Queued,
    Running,
    Done,
    Canceled,
    Preempted,
}

#[derive(Debug, Clone)]
struct Task {
    request: usize,
    start: f64,
    delay: f64,
    thread: usize,
    status: TaskStatus,
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    time: f64,
    seq: u64,
    task: usize,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// A single run, steppable one timestamp at a time.
pub struct Simulation {
    spec: SystemSpec,
    sampler: DelaySampler,
    script_pos: usize,
    strategy: Strategy,
    options: SimOptions,
    arrivals: Vec<Arrival>,
    next_arrival: usize,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Completion>,
    request_queue: VecDeque<usize>,
    task_queue: VecDeque<usize>,
    /// Tasks in `task_queue` that have not been canceled.
    live_queued: usize,
    threads: Vec<Option<usize>>,
    idle: usize,
    thread_rngs: Vec<ChaCha8Rng>,
    tasks: Vec<Task>,
    request_tasks: Vec<Vec<usize>>,
    records: Vec<RequestRecord>,
    overloaded: bool,
    conservation: Option<Conservation>,
}

impl Simulation {
    pub fn new(
        spec: SystemSpec,
        arrivals: &ArrivalProcess,
        sampler: DelaySampler,
        strategy: Strategy,
        options: SimOptions,
    ) -> Result<Self> {
        spec.validate()?;
        options.validate()?;
        let list = arrivals.generate(&spec.classes, options.horizon, options.seed)?;
        Self::with_arrivals(spec, list, sampler, strategy, options)
    }

    /// Starts from an explicit arrival list (sorted by time).
    pub fn with_arrivals(
        spec: SystemSpec,
        arrivals: Vec<Arrival>,
        sampler: DelaySampler,
        strategy: Strategy,
        options: SimOptions,
    ) -> Result<Self> {
        spec.validate()?;
        options.validate()?;
        sampler.validate(spec.classes.len())?;
        if arrivals.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(invalid("arrivals must be sorted by time"));
        }
        if let Some(a) = arrivals.iter().find(|a| a.class_id >= spec.classes.len()) {
            return Err(invalid(format!(
                "arrival references unknown class {}",
                a.class_id
            )));
        }
        let l = spec.thread_count;
        let thread_rngs = (0..l)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
                rng.set_stream(THREAD_STREAM_BASE + j as u64);
                rng
            })
            .collect();
        Ok(Simulation {
            spec,
            sampler,
            script_pos: 0,
            strategy,
            options,
            arrivals,
            next_arrival: 0,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            request_queue: VecDeque::new(),
            task_queue: VecDeque::new(),
            live_queued: 0,
            threads: vec![None; l],
            idle: l,
            thread_rngs,
            tasks: Vec::new(),
            request_tasks: Vec::new(),
            records: Vec::new(),
            overloaded: false,
            conservation: None,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Requests waiting in the request queue.
    pub fn queue_length(&self) -> usize {
        self.request_queue.len()
    }

    pub fn idle_threads(&self) -> usize {
        self.idle
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    pub fn is_overloaded(&self) -> bool {
        self.overloaded
    }

    fn next_time(&mut self) -> Option<f64> {
        // Entries of preempted tasks are stale.
        while self
            .heap
            .peek()
            .is_some_and(|c| self.tasks[c.task].status != TaskStatus::Running)
        {
            self.heap.pop();
        }
        let c = self.heap.peek().map(|c| c.time);
        let a = self.arrivals.get(self.next_arrival).map(|a| a.time);
        match (c, a) {
            (Some(c), Some(a)) => Some(c.min(a)),
            (c, a) => c.or(a),
        }
    }

    /// Processes every event with time `<= until`. Returns false once nothing
    /// is left to do or the run overloaded.
    pub fn run_until(&mut self, until: f64) -> Result<bool> {
        while let Some(t) = self.next_time() {
            if t > until {
                return Ok(true);
            }
            if self.conservation.is_none() && t > self.options.horizon {
                self.conservation = Some(self.snapshot_conservation());
                if !self.options.drain {
                    return Ok(false);
                }
            }
            self.step(t)?;
            if self.overloaded {
                return Ok(false);
            }
        }
        Ok(false)
    }

    fn step(&mut self, t: f64) -> Result<()> {
        self.now = t;
        while self.heap.peek().is_some_and(|c| c.time == t) {
            let c = self.heap.pop().expect("peeked");
            self.complete_task(c.task);
        }
        self.dispatch()?;
        while self.arrivals.get(self.next_arrival).is_some_and(|a| a.time == t) {
            let a = self.arrivals[self.next_arrival];
            self.next_arrival += 1;
            self.arrive(a)?;
            if self.request_queue.len() > self.options.overload_bound {
                self.overloaded = true;
                return Ok(());
            }
            self.dispatch()?;
        }
        Ok(())
    }

    fn arrive(&mut self, a: Arrival) -> Result<()> {
        let ctx = ArrivalContext {
            now: a.time,
            queue_len: self.request_queue.len(),
            idle_threads: self.idle,
        };
        let class = &self.spec.classes[a.class_id];
        let code = self.strategy.select(a.class_id, class, &ctx)?;
        if code.k == 0 || code.n < code.k {
            return Err(Error::Numeric(format!("strategy produced invalid code {code}")));
        }
        let id = self.records.len();
        self.records.push(RequestRecord {
            id,
            class_id: a.class_id,
            arrival: a.time,
            dispatch: None,
            completion: None,
            code,
            queue_at_arrival: ctx.queue_len,
            idle_at_arrival: ctx.idle_threads,
            usage: 0.0,
            tasks_done: 0,
        });
        self.request_tasks.push(Vec::new());
        self.request_queue.push_back(id);
        Ok(())
    }

    fn dispatch(&mut self) -> Result<()> {
        while self.idle > 0 {
            if self.live_queued > 0 {
                let task = loop {
                    let id = self.task_queue.pop_front().expect("live task queued");
                    if self.tasks[id].status == TaskStatus::Queued {
                        break id;
                    }
                };
                self.live_queued -= 1;
                self.start_task(task)?;
            } else if let Some(req) = self.request_queue.pop_front() {
                self.task_queue.clear();
                self.records[req].dispatch = Some(self.now);
                let n = self.records[req].code.n;
                for _ in 0..n {
                    let id = self.tasks.len();
                    self.tasks.push(Task {
                        request: req,
                        start: f64::NAN,
                        delay: f64::NAN,
                        thread: usize::MAX,
                        status: TaskStatus::Queued,
                    });
                    self.request_tasks[req].push(id);
                    self.task_queue.push_back(id);
                }
                self.live_queued = n;
            } else {
                break;
            }
        }
        debug_assert!(self.idle == 0 || (self.live_queued == 0 && self.request_queue.is_empty()));
        Ok(())
    }

    fn start_task(&mut self, id: usize) -> Result<()> {
        let thread = self
            .threads
            .iter()
            .position(Option::is_none)
            .expect("an idle thread exists");
        let req = self.tasks[id].request;
        let class_id = self.records[req].class_id;
        let class = &self.spec.classes[class_id];
        let chunk = class.chunk_size(self.records[req].code.k as f64);
        let rng = &mut self.thread_rngs[thread];
        let delay = match &self.sampler {
            DelaySampler::Parametric => {
                let e: f64 = rng.sample(Exp1);
                class.params.delay_floor(chunk)? + class.params.tail_mean(chunk)? * e
            }
            DelaySampler::Empirical(pools) => {
                let p = if pools.len() == 1 {
                    &pools[0]
                } else {
                    &pools[class_id]
                };
                p.sample(chunk, rng)?
            }
            DelaySampler::Scripted(list) => {
                let d = *list
                    .get(self.script_pos)
                    .ok_or_else(|| Error::Config("scripted delays exhausted".into()))?;
                self.script_pos += 1;
                d
            }
        };
        let task = &mut self.tasks[id];
        task.start = self.now;
        task.delay = delay;
        task.thread = thread;
        task.status = TaskStatus::Running;
        self.threads[thread] = Some(id);
        self.idle -= 1;
        self.seq += 1;
        self.heap.push(Completion {
            time: self.now + delay,
            seq: self.seq,
            task: id,
        });
        Ok(())
    }

    fn free_thread(&mut self, thread: usize) {
        self.threads[thread] = None;
        self.idle += 1;
    }

    fn complete_task(&mut self, id: usize) {
        if self.tasks[id].status != TaskStatus::Running {
            // Preempted earlier; its thread is already free.
            return;
        }
        let (req, thread, delay) = {
            let t = &mut self.tasks[id];
            t.status = TaskStatus::Done;
            (t.request, t.thread, t.delay)
        };
        self.free_thread(thread);
        let rec = &mut self.records[req];
        rec.usage += delay;
        rec.tasks_done += 1;
        if rec.completion.is_some() || rec.tasks_done < rec.code.k {
            return;
        }
        rec.completion = Some(self.now);
        if self.options.leftover == LeftoverPolicy::Complete {
            return;
        }
        for i in 0..self.request_tasks[req].len() {
            let sib = self.request_tasks[req][i];
            match self.tasks[sib].status {
                TaskStatus::Running => {
                    let charge = self.now - self.tasks[sib].start;
                    self.tasks[sib].status = TaskStatus::Preempted;
                    self.records[req].usage += charge;
                    let th = self.tasks[sib].thread;
                    self.free_thread(th);
                }
                TaskStatus::Queued => {
                    self.tasks[sib].status = TaskStatus::Canceled;
                    self.live_queued -= 1;
                }
                _ => {}
            }
        }
    }

    fn snapshot_conservation(&self) -> Conservation {
        let arrived = self.records.len();
        let completed = self.records.iter().filter(|r| r.completion.is_some()).count();
        let waiting = self.request_queue.len();
        Conservation {
            arrived,
            completed,
            in_service: arrived - completed - waiting,
            waiting,
        }
    }

    pub fn finish(mut self) -> Result<SimResult> {
        if !self.overloaded {
            self.run_until(f64::INFINITY)?;
        }
        let conservation = self.conservation.unwrap_or_else(|| self.snapshot_conservation());
        Ok(SimResult {
            strategy: self.strategy.name(),
            records: self.records,
            overloaded: self.overloaded,
            horizon: self.options.horizon,
            warmup: self.options.warmup(),
            end_time: self.now,
            conservation,
        })
    }

    /// Per-task status counts: queued, running, done, canceled, preempted.
    pub fn task_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for t in &self.tasks {
            let i = match t.status {
                TaskStatus::Queued => 0,
                TaskStatus::Running => 1,
                TaskStatus::Done => 2,
                TaskStatus::Canceled => 3,
                TaskStatus::Preempted => 4,
            };
            c[i] += 1;
        }
        c
    }
}

/// Runs one simulation to the end.
pub fn run(
    spec: &SystemSpec,
    arrivals: &ArrivalProcess,
    sampler: DelaySampler,
    strategy: Strategy,
    options: SimOptions,
) -> Result<SimResult> {
    Simulation::new(spec.clone(), arrivals, sampler, strategy, options)?.finish()
}

/// Draws one task delay for a chunk of `chunk_size` MB from the class law.
pub fn sample_parametric<R: Rng + ?Sized>(class: &ClassSpec, chunk_size: f64, rng: &mut R) -> Result<f64> {
    let e: f64 = rng.sample(Exp1);
    Ok(class.params.delay_floor(chunk_size)? + class.params.tail_mean(chunk_size)? * e)
}
