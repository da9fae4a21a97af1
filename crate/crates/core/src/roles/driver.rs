//! Blocking loops that run a role over real endpoints.

use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::proto::Message;
use crate::transport::{Endpoint, Received};
use crate::Rank;

use super::{LogEvent, Master, RoleError, SubMaster, Worker, WorkerEvent};

/// Run-log events stamped with seconds since a shared start instant.
#[derive(Debug)]
pub struct WallLog {
    start: Instant,
    pub events: Vec<LogEvent>,
}

impl WallLog {
    pub fn new(start: Instant) -> Self {
        Self {
            start,
            events: Vec::new(),
        }
    }

    fn extend(&mut self, events: Vec<LogEvent>) {
        let t = self.start.elapsed().as_secs_f64();
        self.events.extend(events.into_iter().map(|mut e| {
            e.time = t;
            e
        }));
    }
}

/// Random pause before each worker send, to perturb arrival order.
#[derive(Debug)]
pub struct DelayInjector {
    max_us: u64,
    rng: ChaCha8Rng,
}

impl DelayInjector {
    /// `None` when `max_us` is zero.
    pub fn new(max_us: u64, seed: u64, rank: Rank) -> Option<Self> {
        if max_us == 0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(rank));
        Some(Self { max_us, rng })
    }

    pub fn next_delay(&mut self) -> Duration {
        Duration::from_micros(self.rng.random_range(0..=self.max_us))
    }
}

fn send(ep: &mut Endpoint, to: Rank, msg: &Message) -> Result<(), RoleError> {
    ep.send(to, msg).map_err(|source| RoleError::Transport { rank: ep.rank(), source })
}

fn recv(ep: &mut Endpoint) -> Result<Received, RoleError> {
    ep.recv().map_err(|source| RoleError::Transport { rank: ep.rank(), source })
}

/// Serves children until the run finishes. The endpoint is closed on
/// every exit so peers notice a failure.
pub fn run_master(master: &mut Master, ep: &mut Endpoint, log: &mut WallLog) -> Result<(), RoleError> {
    let r = master_loop(master, ep, log);
    ep.close();
    r
}

fn master_loop(master: &mut Master, ep: &mut Endpoint, log: &mut WallLog) -> Result<(), RoleError> {
    let rank = ep.rank();
    while !master.is_finished() {
        match recv(ep)? {
            Received::Message { from, msg } => {
                let step = master.handle(from, msg)?;
                log.extend(step.events);
                for (to, m) in &step.sends {
                    send(ep, *to, m)?;
                }
            }
            Received::PeerClosed { from } => {
                if !master.core().child_done(from) {
                    return Err(RoleError::PeerLost { rank, peer: from });
                }
            }
            Received::EndOfSession => {
                return Err(RoleError::protocol(rank, "every child closed before the run finished"));
            }
        }
    }
    Ok(())
}

pub fn run_worker(worker: &mut Worker, ep: &mut Endpoint, delay: Option<DelayInjector>) -> Result<(), RoleError> {
    let r = worker_loop(worker, ep, delay);
    ep.close();
    r
}

fn worker_loop(worker: &mut Worker, ep: &mut Endpoint, mut delay: Option<DelayInjector>) -> Result<(), RoleError> {
    let (rank, parent) = (worker.rank(), worker.parent());
    let hello = worker.hello()?;
    send(ep, parent, &hello)?;
    loop {
        match recv(ep)? {
            Received::Message { from, msg } if from == parent => match worker.on_message(msg)? {
                WorkerEvent::Ready => {
                    let out = worker.next_message()?;
                    if let Some(d) = delay.as_mut() {
                        thread::sleep(d.next_delay());
                    }
                    send(ep, parent, &out.msg)?;
                }
                WorkerEvent::Finished => break,
            },
            Received::Message { from, msg } => {
                return Err(RoleError::protocol(rank, format!("{} from non-parent rank {from}", msg.kind())));
            }
            Received::PeerClosed { .. } | Received::EndOfSession => {
                return Err(RoleError::PeerLost { rank, peer: parent });
            }
        }
    }
    Ok(())
}

pub fn run_submaster(
    sub: &mut SubMaster,
    up: &mut Endpoint,
    down: &mut Endpoint,
    log: &mut WallLog,
) -> Result<(), RoleError> {
    let r = submaster_loop(sub, up, down, log);
    up.close();
    down.close();
    r
}

fn submaster_loop(
    sub: &mut SubMaster,
    up: &mut Endpoint,
    down: &mut Endpoint,
    log: &mut WallLog,
) -> Result<(), RoleError> {
    let (rank, parent) = (sub.rank(), sub.parent());
    let hello = sub.hello()?;
    send(up, parent, &hello)?;
    while !sub.is_finished() {
        let received = if sub.awaiting_parent() { recv(up)? } else { recv(down)? };
        match received {
            Received::Message { from, msg } => {
                let step = sub.handle(from, msg)?;
                log.extend(step.events);
                for (to, m) in &step.sends {
                    if *to == parent {
                        send(up, *to, m)?;
                    } else {
                        send(down, *to, m)?;
                    }
                }
            }
            Received::PeerClosed { from } if from != parent && sub.core().child_done(from) => {}
            Received::PeerClosed { from } => return Err(RoleError::PeerLost { rank, peer: from }),
            Received::EndOfSession => {
                return Err(RoleError::protocol(rank, "peers closed before the run finished"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_are_seeded_per_rank_and_bounded() {
        assert!(DelayInjector::new(0, 1, 1).is_none());
        let draw = |rank| {
            let mut d = DelayInjector::new(500, 7, rank).unwrap();
            (0..20).map(|_| d.next_delay()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        assert!(draw(3).iter().all(|d| *d <= Duration::from_micros(500)));
    }
}
