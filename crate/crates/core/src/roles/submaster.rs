use crate::nn::{Gradient, Tensor};
use crate::proto::{Message, PeerRole};
use crate::Rank;

use super::master::MasterCore;
use super::{LogEvent, RoleError, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Init,
    AwaitInitial,
    Serving,
    AwaitFlush { then_done: bool },
    AwaitShutdown,
    Finished,
}

/// Serves a group of workers like a master and periodically pushes the
/// group's accumulated change to its own parent.
///
/// The change travels as a pseudo-gradient `snapshot − current`, where
/// `snapshot` is the weights last received from the parent. A parent
/// running plain SGD with η = 1 and no momentum therefore moves by exactly
/// the group's change. Worker replies that coincide with a flush are held
/// until the parent answers, then sent with the adopted weights.
pub struct SubMaster {
    core: MasterCore,
    parent: Rank,
    flush_every: u64,
    phase: Phase,
    snapshot: Vec<Tensor>,
    parent_version: u64,
    updates_since_flush: u64,
    samples_at_flush: u64,
    deferred: Vec<Rank>,
    flushes: u64,
}

impl SubMaster {
    pub fn new(core: MasterCore, parent: Rank, flush_every: u64) -> Result<Self, RoleError> {
        if flush_every == 0 {
            return Err(RoleError::Config("flush_every must be at least 1".into()));
        }
        let snapshot = core.weights().tensors.clone();
        Ok(Self {
            core,
            parent,
            flush_every,
            phase: Phase::Init,
            snapshot,
            parent_version: 0,
            updates_since_flush: 0,
            samples_at_flush: 0,
            deferred: Vec::new(),
            flushes: 0,
        })
    }

    pub fn rank(&self) -> Rank {
        self.core.rank()
    }

    pub fn parent(&self) -> Rank {
        self.parent
    }

    pub fn core(&self) -> &MasterCore {
        &self.core
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// While true, only the parent's messages may be handled; children's
    /// messages wait.
    pub fn awaiting_parent(&self) -> bool {
        matches!(
            self.phase,
            Phase::AwaitInitial | Phase::AwaitFlush { .. } | Phase::AwaitShutdown
        )
    }

    fn violation(&self, reason: String) -> RoleError {
        RoleError::protocol(self.rank(), reason)
    }

    pub fn hello(&mut self) -> Result<Message, RoleError> {
        if self.phase != Phase::Init {
            return Err(self.violation("HELLO sent twice".into()));
        }
        self.phase = Phase::AwaitInitial;
        Ok(Message::Hello {
            rank: self.rank(),
            role: PeerRole::SubMaster,
        })
    }

    pub fn handle(&mut self, from: Rank, msg: Message) -> Result<Step, RoleError> {
        if from == self.parent {
            self.handle_up(msg)
        } else if self.awaiting_parent() || self.phase == Phase::Init {
            Err(self.violation(format!("{} from rank {from} while waiting on the parent", msg.kind())))
        } else {
            self.handle_down(from, msg)
        }
    }

    fn adopt_parent(&mut self, w: crate::nn::WeightSet) -> Result<(), RoleError> {
        self.parent_version = w.version;
        self.snapshot = w.tensors.clone();
        self.core.adopt(w.tensors)?;
        self.updates_since_flush = 0;
        self.samples_at_flush = self.core.samples_accepted();
        Ok(())
    }

    fn handle_up(&mut self, msg: Message) -> Result<Step, RoleError> {
        let mut step = Step::default();
        match (self.phase, msg) {
            (Phase::AwaitInitial, Message::Weights(w)) => {
                self.adopt_parent(w)?;
                self.phase = Phase::Serving;
            }
            (Phase::AwaitFlush { then_done }, Message::Weights(w)) => {
                self.adopt_parent(w)?;
                for r in std::mem::take(&mut self.deferred) {
                    step.sends.push((r, Message::Weights(self.core.weights().clone())));
                }
                if then_done {
                    step.sends.push((self.parent, Message::Done { rank: self.rank() }));
                    self.phase = Phase::AwaitShutdown;
                } else {
                    self.phase = Phase::Serving;
                }
            }
            (Phase::AwaitShutdown, Message::Shutdown) => {
                for &c in &self.core.settings().children {
                    step.sends.push((c, Message::Shutdown));
                }
                step.events.push(LogEvent::new("shutdown", self.rank(), self.core.weights().version));
                self.phase = Phase::Finished;
            }
            (phase, msg) => {
                return Err(self.violation(format!("unexpected {} from the parent while {phase:?}", msg.kind())));
            }
        }
        Ok(step)
    }

    fn handle_down(&mut self, from: Rank, msg: Message) -> Result<Step, RoleError> {
        let cs = match msg {
            Message::Hello { .. } => self.core.on_hello(from)?,
            Message::Gradient { grad, sample_count } => self.core.on_gradient(from, grad, sample_count)?,
            Message::Done { .. } => self.core.on_done(from)?,
            other => return Err(self.violation(format!("unexpected {} from rank {from}", other.kind()))),
        };
        self.updates_since_flush += u64::from(cs.updates);
        let mut step = Step {
            sends: Vec::new(),
            updates: cs.updates,
            validations: 0,
            events: cs.events,
        };
        let all_done = self.core.all_done();
        let unflushed = self.core.samples_accepted() > self.samples_at_flush;
        if self.updates_since_flush >= self.flush_every || (all_done && unflushed) {
            self.deferred = cs.replies.into_iter().map(|(r, _)| r).collect();
            step.sends.push(self.flush());
            step.events.push(LogEvent::new("flush", self.rank(), self.core.weights().version));
            self.phase = Phase::AwaitFlush { then_done: all_done };
        } else {
            step.sends = cs.replies;
            if all_done {
                step.sends.push((self.parent, Message::Done { rank: self.rank() }));
                self.phase = Phase::AwaitShutdown;
            }
        }
        Ok(step)
    }

    fn flush(&mut self) -> (Rank, Message) {
        let current = &self.core.weights().tensors;
        let delta: Vec<Tensor> = self
            .snapshot
            .iter()
            .zip(current)
            .map(|(s, c)| {
                let data = s.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
                Tensor::new(s.shape().to_vec(), data).expect("congruent tensors")
            })
            .collect();
        let samples = self.core.samples_accepted() - self.samples_at_flush;
        self.flushes += 1;
        (
            self.parent,
            Message::Gradient {
                grad: Gradient::new(delta, self.parent_version),
                sample_count: samples.clamp(1, u64::from(u32::MAX)) as u32,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Algorithm, SyncMode};
    use crate::nn::WeightSet;
    use crate::optim::ElasticConfig;
    use crate::roles::MasterSettings;

    fn ws(x: f64, version: u64) -> WeightSet {
        WeightSet::new(vec![Tensor::new(vec![1], vec![x]).unwrap()], version)
    }

    fn grad(x: f64, basis: u64) -> Gradient {
        Gradient::new(vec![Tensor::new(vec![1], vec![x]).unwrap()], basis)
    }

    fn sub(flush_every: u64) -> SubMaster {
        let settings = MasterSettings {
            rank: 1,
            algorithm: Algorithm::Downpour,
            mode: SyncMode::Async,
            learning_rate: 0.5,
            momentum: 0.0,
            elastic: ElasticConfig::new(0.5, 1).unwrap(),
            children: vec![3, 4],
        };
        let mut s = SubMaster::new(MasterCore::new(settings, ws(0.0, 0)).unwrap(), 0, flush_every).unwrap();
        s.hello().unwrap();
        assert!(s.awaiting_parent());
        s.handle(0, Message::Weights(ws(10.0, 5))).unwrap();
        for r in [3, 4] {
            s.handle(r, Message::Hello { rank: r, role: PeerRole::Worker }).unwrap();
        }
        s
    }

    fn value(m: &Message) -> f64 {
        match m {
            Message::Weights(w) => w.tensors[0].data()[0],
            Message::Gradient { grad, .. } => grad.tensors[0].data()[0],
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flushes_delta_and_defers_the_reply() {
        let mut s = sub(2);
        let v = s.core().weights().version;
        let st = s.handle(3, Message::Gradient { grad: grad(2.0, v), sample_count: 5 }).unwrap();
        // 10 − 0.5·2
        assert_eq!(value(&st.sends[0].1), 9.0);
        let st = s.handle(4, Message::Gradient { grad: grad(2.0, v), sample_count: 7 }).unwrap();
        assert!(s.awaiting_parent());
        match &st.sends[..] {
            [(0, Message::Gradient { grad, sample_count })] => {
                assert_eq!(grad.tensors[0].data()[0], 2.0);
                assert_eq!(grad.basis_version, 5);
                assert_eq!(*sample_count, 12);
            }
            other => panic!("{other:?}"),
        }
        // children wait while the flush is outstanding
        assert!(s.handle(3, Message::Done { rank: 3 }).is_err());
        // parent with η = 1 lands on 10 − 2 = 8
        let st = s.handle(0, Message::Weights(ws(8.0, 6))).unwrap();
        assert!(matches!(&st.sends[..], [(4, m)] if value(m) == 8.0));
        assert!(!s.awaiting_parent());
        assert_eq!(s.flushes(), 1);
    }

    #[test]
    fn final_flush_then_done_then_shutdown_relay() {
        let mut s = sub(100);
        let v = s.core().weights().version;
        s.handle(3, Message::Gradient { grad: grad(2.0, v), sample_count: 5 }).unwrap();
        s.handle(3, Message::Done { rank: 3 }).unwrap();
        let st = s.handle(4, Message::Done { rank: 4 }).unwrap();
        assert!(matches!(&st.sends[..], [(0, Message::Gradient { .. })]));
        let st = s.handle(0, Message::Weights(ws(9.0, 6))).unwrap();
        assert!(matches!(&st.sends[..], [(0, Message::Done { rank: 1 })]));
        let st = s.handle(0, Message::Shutdown).unwrap();
        assert_eq!(st.sends.len(), 2);
        assert!(s.is_finished());
    }

    #[test]
    fn nothing_to_flush_goes_straight_to_done() {
        let mut s = sub(1);
        s.handle(3, Message::Done { rank: 3 }).unwrap();
        let st = s.handle(4, Message::Done { rank: 4 }).unwrap();
        assert!(matches!(&st.sends[..], [(0, Message::Done { rank: 1 })]));
        assert_eq!(s.flushes(), 0);
    }
}
