//! Discrete-event model of clients retrying against a fixed-capacity
//! service with a bounded FIFO queue.
//!
//! Each client alternates between thinking and having one request in flight.
//! A request is retried after each timeout, per the policy, until it succeeds
//! or runs out of attempts. The server never learns that a client gave up,
//! so it keeps serving timed-out attempts.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Immediate,
    FixedDelay,
    Exponential,
    ExponentialFullJitter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub cap: f64,
    pub max_attempts: u32,
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts < 1 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        if self.base < 0.0 || self.cap < self.base {
            return Err(Error::Config("retry policy needs 0 <= base <= cap".into()));
        }
        Ok(())
    }

    /// Wait before attempt `failed + 1`, after `failed` failures.
    pub fn delay(&self, failed: u32, rng: &mut impl Rng) -> f64 {
        let grow = |n: u32| (self.base * 2f64.powi(n as i32)).min(self.cap);
        match self.kind {
            PolicyKind::Immediate => 0.0,
            PolicyKind::FixedDelay => self.base,
            PolicyKind::Exponential => grow(failed.saturating_sub(1)),
            PolicyKind::ExponentialFullJitter => rng.gen::<f64>() * grow(failed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceModel {
    /// Requests per time unit the server completes when saturated.
    pub capacity: f64,
    pub queue_limit: usize,
    pub service_time: f64,
    pub timeout: f64,
    pub clients: u32,
    /// New requests per time unit per idle client.
    pub per_client_demand: f64,
    pub fault_window: (f64, f64),
    /// Demand multiplier inside the fault window.
    #[serde(default = "one")]
    pub spike: f64,
    #[serde(default = "default_bucket")]
    pub bucket: f64,
}

fn one() -> f64 {
    1.0
}

fn default_bucket() -> f64 {
    5.0
}

impl ServiceModel {
    pub fn demand(&self) -> f64 {
        self.clients as f64 * self.per_client_demand
    }

    pub fn workers(&self) -> usize {
        (self.capacity * self.service_time).round().max(1.0) as usize
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        let positive = [
            self.capacity,
            self.service_time,
            self.timeout,
            self.per_client_demand,
            self.spike,
            self.bucket,
        ];
        if positive.iter().any(|x| x.is_nan() || *x <= 0.0)
            || self.clients == 0
            || self.queue_limit == 0
        {
            return Err(Error::Config(
                "service model fields must be positive".into(),
            ));
        }
        let (start, end) = self.fault_window;
        if !(0.0 <= start && start <= end) {
            return Err(Error::Config(
                "fault window must satisfy 0 <= start <= end".into(),
            ));
        }
        if horizon < end {
            return Err(Error::Config(format!(
                "horizon {horizon} ends before the fault window ({end})"
            )));
        }
        Ok(())
    }

    fn rate_at(&self, t: f64) -> f64 {
        let (start, end) = self.fault_window;
        if start <= t && t < end {
            self.per_client_demand * self.spike
        } else {
            self.per_client_demand
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: f64,
    /// Attempts sent per time unit, first tries and retries.
    pub offered: f64,
    /// New requests per time unit.
    pub demand: f64,
    /// Successful responses per time unit.
    pub goodput: f64,
    /// Waiting requests at the end of the bucket.
    pub queue_depth: usize,
    /// offered / demand; absent when no new requests arrived.
    pub amplification: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub issued: u64,
    pub succeeded: u64,
    pub retried: u64,
    pub abandoned: u64,
    pub in_flight: u64,
    /// Attempts the server completed after the client had stopped waiting.
    pub wasted: u64,
    /// Attempts dropped because the queue was full.
    pub dropped: u64,
}

impl Accounting {
    pub fn balanced(&self) -> bool {
        self.issued == self.succeeded + self.retried + self.abandoned + self.in_flight
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryReport {
    pub seed: u64,
    pub horizon: f64,
    pub buckets: Vec<Bucket>,
    pub accounting: Accounting,
    /// Mean goodput over the final quarter of the horizon, as a fraction of
    /// capacity.
    pub final_goodput_fraction: f64,
    /// Final-quarter goodput reached 90% of nominal demand.
    pub recovered: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    /// Client sends: a new request after thinking, or a retry after a delay.
    Send {
        client: usize,
    },
    Done {
        attempt: usize,
    },
    Timeout {
        attempt: usize,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Fate {
    Pending,
    Succeeded,
    Retried,
    Abandoned,
}

struct Attempt {
    client: usize,
    fate: Fate,
}

struct Client {
    /// Failures so far for the current request; `None` while thinking.
    failures: Option<u32>,
}

struct Sim<'a> {
    model: &'a ServiceModel,
    policy: &'a RetryPolicy,
    rng: ChaCha8Rng,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Reverse<(u64, u64, Event)>>,
    attempts: Vec<Attempt>,
    clients: Vec<Client>,
    queue: VecDeque<usize>,
    busy: usize,
    acct: Accounting,
    buckets: Vec<Bucket>,
}

impl Sim<'_> {
    fn schedule(&mut self, at: f64, ev: Event) {
        self.seq += 1;
        // Non-negative finite floats order the same as their bit patterns.
        self.heap.push(Reverse((at.to_bits(), self.seq, ev)));
    }

    fn bucket(&mut self, t: f64) -> &mut Bucket {
        let last = self.buckets.len() - 1;
        let i = (t / self.model.bucket) as usize;
        &mut self.buckets[i.min(last)]
    }

    /// Next new request by thinning the piecewise-constant demand rate.
    fn think(&mut self, client: usize) {
        let top = self.model.per_client_demand * self.model.spike.max(1.0);
        let exp = Exp::new(top).expect("positive rate");
        let mut t = self.now;
        loop {
            t += exp.sample(&mut self.rng);
            if self.rng.gen::<f64>() * top < self.model.rate_at(t) {
                break;
            }
        }
        self.clients[client].failures = None;
        self.schedule(t, Event::Send { client });
    }

    fn send(&mut self, client: usize) {
        let now = self.now;
        if self.clients[client].failures.is_none() {
            self.clients[client].failures = Some(0);
            self.bucket(now).demand += 1.0;
        }
        self.bucket(now).offered += 1.0;
        self.acct.issued += 1;
        let id = self.attempts.len();
        self.attempts.push(Attempt {
            client,
            fate: Fate::Pending,
        });
        self.schedule(now + self.model.timeout, Event::Timeout { attempt: id });
        if self.busy < self.model.workers() {
            self.start(id);
        } else if self.queue.len() < self.model.queue_limit {
            self.queue.push_back(id);
        } else {
            self.acct.dropped += 1;
        }
    }

    fn start(&mut self, attempt: usize) {
        self.busy += 1;
        self.schedule(self.now + self.model.service_time, Event::Done { attempt });
    }

    fn done(&mut self, attempt: usize) {
        self.busy -= 1;
        if let Some(next) = self.queue.pop_front() {
            self.start(next);
        }
        if self.attempts[attempt].fate != Fate::Pending {
            self.acct.wasted += 1;
            return;
        }
        self.attempts[attempt].fate = Fate::Succeeded;
        self.acct.succeeded += 1;
        let now = self.now;
        self.bucket(now).goodput += 1.0;
        let client = self.attempts[attempt].client;
        self.think(client);
    }

    fn timeout(&mut self, attempt: usize) {
        if self.attempts[attempt].fate != Fate::Pending {
            return;
        }
        let client = self.attempts[attempt].client;
        let failed = self.clients[client].failures.expect("request in flight") + 1;
        self.clients[client].failures = Some(failed);
        if failed < self.policy.max_attempts {
            self.attempts[attempt].fate = Fate::Retried;
            self.acct.retried += 1;
            let delay = self.policy.delay(failed, &mut self.rng);
            self.schedule(self.now + delay, Event::Send { client });
        } else {
            self.attempts[attempt].fate = Fate::Abandoned;
            self.acct.abandoned += 1;
            self.think(client);
        }
    }
}

pub fn simulate_retry_storm(
    model: &ServiceModel,
    policy: &RetryPolicy,
    seed: u64,
    horizon: f64,
) -> Result<RetryReport> {
    model.validate(horizon)?;
    policy.validate()?;
    let n_buckets = (horizon / model.bucket).ceil().max(1.0) as usize;
    let mut sim = Sim {
        model,
        policy,
        rng: ChaCha8Rng::seed_from_u64(seed),
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        attempts: Vec::new(),
        clients: (0..model.clients)
            .map(|_| Client { failures: None })
            .collect(),
        queue: VecDeque::new(),
        busy: 0,
        acct: Accounting::default(),
        buckets: (0..n_buckets)
            .map(|i| Bucket {
                start: i as f64 * model.bucket,
                offered: 0.0,
                demand: 0.0,
                goodput: 0.0,
                queue_depth: 0,
                amplification: None,
            })
            .collect(),
    };
    for c in 0..sim.clients.len() {
        sim.think(c);
    }
    let mut sampled = 0;
    while let Some(Reverse((bits, _, ev))) = sim.heap.pop() {
        let t = f64::from_bits(bits);
        if t >= horizon {
            break;
        }
        while sampled < n_buckets && t >= (sampled + 1) as f64 * model.bucket {
            sim.buckets[sampled].queue_depth = sim.queue.len();
            sampled += 1;
        }
        sim.now = t;
        match ev {
            Event::Send { client } => sim.send(client),
            Event::Done { attempt } => sim.done(attempt),
            Event::Timeout { attempt } => sim.timeout(attempt),
        }
    }
    while sampled < n_buckets {
        sim.buckets[sampled].queue_depth = sim.queue.len();
        sampled += 1;
    }
    sim.acct.in_flight = sim
        .attempts
        .iter()
        .filter(|a| a.fate == Fate::Pending)
        .count() as u64;
    let mut buckets = sim.buckets;
    for b in &mut buckets {
        let width = model.bucket.min(horizon - b.start);
        b.offered /= width;
        b.demand /= width;
        b.goodput /= width;
        b.amplification = (b.demand > 0.0).then(|| b.offered / b.demand);
    }
    let tail_start = horizon * 0.75;
    let tail: Vec<&Bucket> = buckets.iter().filter(|b| b.start >= tail_start).collect();
    let tail_goodput = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|b| b.goodput).sum::<f64>() / tail.len() as f64
    };
    Ok(RetryReport {
        seed,
        horizon,
        buckets,
        accounting: sim.acct,
        final_goodput_fraction: tail_goodput / model.capacity,
        recovered: tail_goodput >= 0.9 * model.demand(),
    })
}
