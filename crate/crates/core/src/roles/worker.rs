use crate::config::Algorithm;
use crate::data::epoch_batches;
use crate::nn::{Gradient, WeightSet};
use crate::optim::{self, ElasticConfig};
use crate::proto::{Message, PeerRole};
use crate::Rank;

use super::{GradientSource, RoleError};

#[derive(Debug, Clone)]
pub struct WorkerSettings {
    pub rank: Rank,
    pub parent: Rank,
    pub algorithm: Algorithm,
    /// Local step size for EASGD; Downpour workers leave stepping to the master.
    pub learning_rate: f64,
    pub elastic: ElasticConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// This worker's share of a sample budget; replaces `epochs` when set.
    pub sample_budget: Option<u64>,
    pub shuffle: bool,
    pub epoch_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerEvent {
    /// Weights arrived; call [`Worker::next_message`].
    Ready,
    Finished,
}

/// A message to send and the samples computed to produce it.
#[derive(Debug)]
pub struct Outgoing {
    pub msg: Message,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Init,
    AwaitWeights,
    Ready,
    DoneSent,
    Finished,
}

/// Computes gradients on one shard. Strictly alternates: send, then block
/// for weights.
pub struct Worker {
    s: WorkerSettings,
    source: Box<dyn GradientSource>,
    phase: Phase,
    weights: Option<WeightSet>,
    center_version: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    cursor: usize,
    samples_done: u64,
    batches_done: u64,
    unexchanged: u64,
    messages_sent: u64,
}

impl Worker {
    pub fn new(settings: WorkerSettings, source: Box<dyn GradientSource>) -> Result<Self, RoleError> {
        let batches = epoch_batches(source.n_samples(), settings.batch_size, settings.epoch_seed, 0, settings.shuffle)?;
        if settings.sample_budget.is_none() && settings.epochs == 0 {
            return Err(RoleError::Config("epochs must be at least 1".into()));
        }
        Ok(Self {
            s: settings,
            source,
            phase: Phase::Init,
            weights: None,
            center_version: 0,
            epoch: 0,
            batches,
            cursor: 0,
            samples_done: 0,
            batches_done: 0,
            unexchanged: 0,
            messages_sent: 0,
        })
    }

    pub fn rank(&self) -> Rank {
        self.s.rank
    }

    pub fn parent(&self) -> Rank {
        self.s.parent
    }

    pub fn samples_processed(&self) -> u64 {
        self.samples_done
    }

    /// GRADIENT messages sent (exchanges, for EASGD).
    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    pub fn weights(&self) -> Option<&WeightSet> {
        self.weights.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    fn violation(&self, reason: String) -> RoleError {
        RoleError::protocol(self.s.rank, reason)
    }

    pub fn hello(&mut self) -> Result<Message, RoleError> {
        if self.phase != Phase::Init {
            return Err(self.violation("HELLO sent twice".into()));
        }
        self.phase = Phase::AwaitWeights;
        Ok(Message::Hello {
            rank: self.s.rank,
            role: PeerRole::Worker,
        })
    }

    pub fn on_message(&mut self, msg: Message) -> Result<WorkerEvent, RoleError> {
        match (self.phase, msg) {
            (Phase::AwaitWeights, Message::Weights(w)) => {
                match (&mut self.weights, self.s.algorithm) {
                    (Some(local), Algorithm::Easgd) => {
                        if !local.congruent_with(&w.tensors) {
                            return Err(RoleError::Shape { rank: self.s.rank });
                        }
                        optim::elastic_pull(local, &w, self.s.elastic.alpha())?;
                        self.center_version = w.version;
                    }
                    (Some(local), Algorithm::Downpour) => {
                        if !local.congruent_with(&w.tensors) {
                            return Err(RoleError::Shape { rank: self.s.rank });
                        }
                        *local = w;
                    }
                    (None, _) => {
                        self.center_version = w.version;
                        self.weights = Some(w);
                    }
                }
                self.phase = Phase::Ready;
                Ok(WorkerEvent::Ready)
            }
            (Phase::DoneSent, Message::Shutdown) => {
                self.phase = Phase::Finished;
                Ok(WorkerEvent::Finished)
            }
            (phase, msg) => Err(self.violation(format!("unexpected {} while {phase:?}", msg.kind()))),
        }
    }

    fn next_batch(&mut self) -> Result<Option<Vec<usize>>, RoleError> {
        loop {
            let remaining = self.s.sample_budget.map(|b| b.saturating_sub(self.samples_done));
            if remaining == Some(0) {
                return Ok(None);
            }
            if let Some(b) = self.batches.get(self.cursor) {
                self.cursor += 1;
                let mut b = b.clone();
                if let Some(r) = remaining {
                    b.truncate(usize::try_from(r).unwrap_or(usize::MAX));
                }
                return Ok(Some(b));
            }
            if self.s.sample_budget.is_none() && self.epoch + 1 >= self.s.epochs {
                return Ok(None);
            }
            self.epoch += 1;
            self.cursor = 0;
            self.batches = epoch_batches(
                self.source.n_samples(),
                self.s.batch_size,
                self.s.epoch_seed,
                self.epoch,
                self.s.shuffle,
            )?;
        }
    }

    /// Computes the next message for the parent: a gradient, an elastic
    /// exchange, or DONE once the shard is exhausted.
    pub fn next_message(&mut self) -> Result<Outgoing, RoleError> {
        if self.phase != Phase::Ready {
            return Err(self.violation(format!("asked for work while {:?}", self.phase)));
        }
        let out = match self.s.algorithm {
            Algorithm::Downpour => self.next_downpour()?,
            Algorithm::Easgd => self.next_easgd()?,
        };
        self.phase = match out.msg {
            Message::Done { .. } => Phase::DoneSent,
            _ => {
                self.messages_sent += 1;
                Phase::AwaitWeights
            }
        };
        Ok(out)
    }

    fn done(&self, samples: u64) -> Outgoing {
        Outgoing {
            msg: Message::Done { rank: self.s.rank },
            samples,
        }
    }

    fn next_downpour(&mut self) -> Result<Outgoing, RoleError> {
        let Some(batch) = self.next_batch()? else {
            return Ok(self.done(0));
        };
        let w = self.weights.as_ref().expect("weights present when ready");
        let grad = self.source.gradient(w, &batch)?;
        let n = batch.len() as u64;
        self.samples_done += n;
        self.batches_done += 1;
        Ok(Outgoing {
            msg: Message::Gradient {
                grad,
                sample_count: n as u32,
            },
            samples: n,
        })
    }

    fn next_easgd(&mut self) -> Result<Outgoing, RoleError> {
        let mut computed = 0;
        loop {
            let batch = self.next_batch()?;
            let Some(batch) = batch else {
                if self.unexchanged > 0 {
                    return Ok(self.exchange(computed));
                }
                return Ok(self.done(computed));
            };
            let w = self.weights.as_mut().expect("weights present when ready");
            let g = self.source.gradient(w, &batch)?;
            optim::local_step(w, &g, self.s.learning_rate)?;
            let n = batch.len() as u64;
            computed += n;
            self.samples_done += n;
            self.unexchanged += n;
            self.batches_done += 1;
            if self.s.elastic.is_exchange(self.batches_done) {
                return Ok(self.exchange(computed));
            }
        }
    }

    fn exchange(&mut self, computed: u64) -> Outgoing {
        let w = self.weights.as_ref().expect("weights present when ready");
        let msg = Message::Gradient {
            grad: Gradient::new(w.tensors.clone(), self.center_version),
            sample_count: self.unexchanged as u32,
        };
        self.unexchanged = 0;
        Outgoing { msg, samples: computed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use crate::roles::NullSource;

    /// Gradient equal to the current weight, so a local step scales w by 1 − η.
    struct Identity(usize);

    impl GradientSource for Identity {
        fn n_samples(&self) -> usize {
            self.0
        }
        fn gradient(&mut self, w: &WeightSet, _: &[usize]) -> Result<Gradient, RoleError> {
            Ok(Gradient::new(w.tensors.clone(), w.version))
        }
    }

    fn settings(algorithm: Algorithm, epochs: u64, budget: Option<u64>) -> WorkerSettings {
        WorkerSettings {
            rank: 1,
            parent: 0,
            algorithm,
            learning_rate: 0.5,
            elastic: ElasticConfig::new(0.5, 2).unwrap(),
            batch_size: 4,
            epochs,
            sample_budget: budget,
            shuffle: true,
            epoch_seed: 9,
        }
    }

    fn ws(x: f64, version: u64) -> WeightSet {
        WeightSet::new(vec![Tensor::new(vec![1], vec![x]).unwrap()], version)
    }

    /// Runs a worker against an echo parent that returns `reply(...)`.
    fn drive(w: &mut Worker) -> Vec<Outgoing> {
        let mut out = Vec::new();
        w.hello().unwrap();
        w.on_message(Message::Weights(ws(1.0, 0))).unwrap();
        loop {
            let o = w.next_message().unwrap();
            let done = matches!(o.msg, Message::Done { .. });
            out.push(o);
            if done {
                assert_eq!(w.on_message(Message::Shutdown).unwrap(), WorkerEvent::Finished);
                return out;
            }
            w.on_message(Message::Weights(ws(1.0, out.len() as u64))).unwrap();
        }
    }

    #[test]
    fn downpour_covers_every_epoch_then_finishes() {
        let mut w = Worker::new(settings(Algorithm::Downpour, 3, None), Box::new(NullSource { n_samples: 10 })).unwrap();
        let out = drive(&mut w);
        // 10 samples in batches of 4: 3 per epoch
        assert_eq!(out.len(), 10);
        let counts: Vec<u64> = out.iter().map(|o| o.samples).collect();
        assert_eq!(counts, [4, 4, 2, 4, 4, 2, 4, 4, 2, 0]);
        assert_eq!(w.samples_processed(), 30);
        assert!(w.is_finished());
    }

    #[test]
    fn budget_truncates_the_last_batch() {
        let mut w = Worker::new(settings(Algorithm::Downpour, 1, Some(13)), Box::new(NullSource { n_samples: 10 })).unwrap();
        drive(&mut w);
        assert_eq!(w.samples_processed(), 13);
    }

    #[test]
    fn gradients_carry_the_basis_version() {
        let mut w = Worker::new(settings(Algorithm::Downpour, 1, None), Box::new(NullSource { n_samples: 4 })).unwrap();
        w.hello().unwrap();
        w.on_message(Message::Weights(ws(1.0, 7))).unwrap();
        match w.next_message().unwrap().msg {
            Message::Gradient { grad, sample_count } => {
                assert_eq!(grad.basis_version, 7);
                assert_eq!(sample_count, 4);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn easgd_exchanges_every_tau_batches_and_flushes_the_tail() {
        // 12 samples → 3 batches per epoch; τ = 2 → exchanges after batch 2, then the tail
        let mut w = Worker::new(settings(Algorithm::Easgd, 1, None), Box::new(Identity(12))).unwrap();
        let out = drive(&mut w);
        let kinds: Vec<(&str, u64)> = out.iter().map(|o| (o.msg.kind(), o.samples)).collect();
        assert_eq!(kinds, [("GRADIENT", 8), ("GRADIENT", 4), ("DONE", 0)]);
    }

    #[test]
    fn easgd_sends_local_weights_and_pulls_toward_center() {
        let mut w = Worker::new(settings(Algorithm::Easgd, 1, None), Box::new(Identity(8))).unwrap();
        w.hello().unwrap();
        w.on_message(Message::Weights(ws(1.0, 3))).unwrap();
        match w.next_message().unwrap().msg {
            Message::Gradient { grad, sample_count } => {
                // two local steps with η = 0.5: 1 → 0.5 → 0.25
                assert_eq!(grad.tensors[0].data()[0], 0.25);
                assert_eq!(grad.basis_version, 3);
                assert_eq!(sample_count, 8);
            }
            other => panic!("{other:?}"),
        }
        w.on_message(Message::Weights(ws(1.0, 4))).unwrap();
        // 0.25 − 0.5·(0.25 − 1)
        assert_eq!(w.weights().unwrap().tensors[0].data()[0], 0.625);
    }

    #[test]
    fn out_of_order_messages_are_violations() {
        let mut w = Worker::new(settings(Algorithm::Downpour, 1, None), Box::new(NullSource { n_samples: 4 })).unwrap();
        assert!(w.next_message().is_err());
        w.hello().unwrap();
        assert!(w.on_message(Message::Shutdown).is_err());
    }

    #[test]
    fn empty_shard_is_rejected() {
        assert!(Worker::new(settings(Algorithm::Downpour, 1, None), Box::new(NullSource { n_samples: 0 })).is_err());
    }
}
