use std::collections::{BTreeMap, BTreeSet};

use crate::config::{Algorithm, SyncMode};
use crate::nn::{Gradient, Tensor, WeightSet};
use crate::optim::{self, ElasticConfig, OptimError, OptimState};
use crate::proto::Message;
use crate::Rank;

use super::{Evaluator, LogEvent, RoleError, StalenessHistogram, Step};

#[derive(Debug, Clone)]
pub struct MasterSettings {
    pub rank: Rank,
    pub algorithm: Algorithm,
    pub mode: SyncMode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub elastic: ElasticConfig,
    pub children: Vec<Rank>,
}

struct Pending {
    payload: Gradient,
    sample_count: u32,
    finite: bool,
}

/// Parameter-server state shared by the top master and sub-masters:
/// the authoritative weights, the optimizer, and the bookkeeping for
/// one group of children.
pub struct MasterCore {
    s: MasterSettings,
    weights: WeightSet,
    optim: OptimState,
    greeted: BTreeSet<Rank>,
    done: BTreeSet<Rank>,
    round: BTreeMap<Rank, Pending>,
    staleness: StalenessHistogram,
    samples_accepted: u64,
    gradients_received: u64,
    rejected: u64,
    updates: u64,
}

/// Replies and counts produced by the core for one message.
#[derive(Debug, Default)]
pub(crate) struct CoreStep {
    pub replies: Vec<(Rank, Message)>,
    pub updates: u32,
    pub events: Vec<LogEvent>,
}

impl MasterCore {
    pub fn new(settings: MasterSettings, initial: WeightSet) -> Result<Self, RoleError> {
        if settings.children.is_empty() {
            return Err(RoleError::Config(format!("rank {} has no children", settings.rank)));
        }
        let optim = OptimState::new(settings.learning_rate, settings.momentum, &initial.shapes())?;
        Ok(Self {
            s: settings,
            weights: initial,
            optim,
            greeted: BTreeSet::new(),
            done: BTreeSet::new(),
            round: BTreeMap::new(),
            staleness: StalenessHistogram::default(),
            samples_accepted: 0,
            gradients_received: 0,
            rejected: 0,
            updates: 0,
        })
    }

    pub fn rank(&self) -> Rank {
        self.s.rank
    }

    pub fn settings(&self) -> &MasterSettings {
        &self.s
    }

    pub fn weights(&self) -> &WeightSet {
        &self.weights
    }

    pub fn staleness(&self) -> &StalenessHistogram {
        &self.staleness
    }

    /// Samples behind every accepted gradient (or exchange).
    pub fn samples_accepted(&self) -> u64 {
        self.samples_accepted
    }

    pub fn gradients_received(&self) -> u64 {
        self.gradients_received
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// True once `rank` has sent DONE.
    pub fn child_done(&self, rank: Rank) -> bool {
        self.done.contains(&rank)
    }

    pub fn all_done(&self) -> bool {
        self.done.len() == self.s.children.len()
    }

    /// Replaces the weight values with ones received from a parent and
    /// bumps the local version, so children see the change as an update.
    pub(crate) fn adopt(&mut self, tensors: Vec<Tensor>) -> Result<(), RoleError> {
        if !self.weights.congruent_with(&tensors) {
            return Err(RoleError::Shape { rank: self.s.rank });
        }
        self.weights.tensors = tensors;
        self.weights.version += 1;
        Ok(())
    }

    fn violation(&self, reason: String) -> RoleError {
        RoleError::protocol(self.s.rank, reason)
    }

    fn check_child(&self, from: Rank) -> Result<(), RoleError> {
        if !self.s.children.contains(&from) {
            return Err(self.violation(format!("message from rank {from}, which is not a child")));
        }
        Ok(())
    }

    pub(crate) fn on_hello(&mut self, from: Rank) -> Result<CoreStep, RoleError> {
        self.check_child(from)?;
        if !self.greeted.insert(from) {
            return Err(self.violation(format!("second HELLO from rank {from}")));
        }
        Ok(CoreStep {
            replies: vec![(from, Message::Weights(self.weights.clone()))],
            updates: 0,
            events: vec![LogEvent::new("hello", from, self.weights.version)],
        })
    }

    pub(crate) fn on_gradient(&mut self, from: Rank, payload: Gradient, sample_count: u32) -> Result<CoreStep, RoleError> {
        self.check_child(from)?;
        if !self.greeted.contains(&from) {
            return Err(self.violation(format!("GRADIENT from rank {from} before HELLO")));
        }
        if self.done.contains(&from) {
            return Err(self.violation(format!("GRADIENT from rank {from} after DONE")));
        }
        if !payload.congruent_with(&self.weights) {
            return Err(RoleError::Shape { rank: self.s.rank });
        }
        let basis = payload.basis_version;
        if basis > self.weights.version {
            return Err(self.violation(format!(
                "rank {from} claims basis version {basis}, ahead of {}",
                self.weights.version
            )));
        }
        let staleness = self.weights.version - basis;
        self.gradients_received += 1;
        self.staleness.record(staleness);
        let finite = payload.is_finite();
        match self.s.mode {
            SyncMode::Async => self.apply_async(from, payload, sample_count, finite, staleness),
            SyncMode::Sync => {
                if self.round.contains_key(&from) {
                    return Err(self.violation(format!("two GRADIENTs from rank {from} in one round")));
                }
                self.round.insert(
                    from,
                    Pending {
                        payload,
                        sample_count,
                        finite,
                    },
                );
                self.try_close_round()
            }
        }
    }

    pub(crate) fn on_done(&mut self, from: Rank) -> Result<CoreStep, RoleError> {
        self.check_child(from)?;
        if self.round.contains_key(&from) {
            return Err(self.violation(format!("DONE from rank {from} with a gradient in flight")));
        }
        if !self.done.insert(from) {
            return Err(self.violation(format!("second DONE from rank {from}")));
        }
        let mut step = match self.s.mode {
            SyncMode::Sync => self.try_close_round()?,
            SyncMode::Async => CoreStep::default(),
        };
        step.events.push(LogEvent::new("done", from, self.weights.version));
        Ok(step)
    }

    fn apply_async(
        &mut self,
        from: Rank,
        payload: Gradient,
        sample_count: u32,
        finite: bool,
        staleness: u64,
    ) -> Result<CoreStep, RoleError> {
        if !finite {
            self.rejected += 1;
            let mut ev = LogEvent::new("reject", from, self.weights.version);
            ev.staleness = Some(staleness);
            return Ok(CoreStep {
                replies: vec![(from, Message::Weights(self.weights.clone()))],
                updates: 0,
                events: vec![ev],
            });
        }
        let reply = match self.s.algorithm {
            Algorithm::Downpour => {
                self.optim.apply(&mut self.weights, &payload)?;
                self.weights.clone()
            }
            Algorithm::Easgd => {
                // pre-exchange values, stamped with the post-exchange version
                let mut snapshot = self.weights.clone();
                let worker = WeightSet::new(payload.tensors, 0);
                self.weights = optim::easgd_center_step(&snapshot, &worker, &self.s.elastic)?;
                snapshot.version = self.weights.version;
                snapshot
            }
        };
        self.updates += 1;
        self.samples_accepted += u64::from(sample_count);
        let mut ev = LogEvent::new("update", from, self.weights.version);
        ev.staleness = Some(staleness);
        Ok(CoreStep {
            replies: vec![(from, Message::Weights(reply))],
            updates: 1,
            events: vec![ev],
        })
    }

    fn try_close_round(&mut self) -> Result<CoreStep, RoleError> {
        let active = self.s.children.len() - self.done.len();
        if self.round.is_empty() || self.round.len() < active {
            return Ok(CoreStep::default());
        }
        let round = std::mem::take(&mut self.round);
        let members: Vec<Rank> = round.keys().copied().collect();
        let valid: Vec<(&Gradient, u32)> = round
            .values()
            .filter(|p| p.finite)
            .map(|p| (&p.payload, p.sample_count))
            .collect();
        self.rejected += (round.len() - valid.len()) as u64;

        let snapshot = self.weights.clone();
        let mut updates = 0;
        if !valid.is_empty() {
            match self.s.algorithm {
                Algorithm::Downpour => {
                    let g = weighted_mean(&valid, snapshot.version);
                    self.optim.apply(&mut self.weights, &g)?;
                }
                Algorithm::Easgd => {
                    let mut c = snapshot.clone();
                    let alpha = self.s.elastic.alpha();
                    for (w, _) in &valid {
                        for (ct, (wt, st)) in c.tensors.iter_mut().zip(w.tensors.iter().zip(&snapshot.tensors)) {
                            for (cv, (wv, sv)) in ct.data_mut().iter_mut().zip(wt.data().iter().zip(st.data())) {
                                *cv += alpha * (wv - sv);
                            }
                        }
                    }
                    if !c.is_finite() {
                        return Err(OptimError::NonFinite.into());
                    }
                    c.version += 1;
                    self.weights = c;
                }
            }
            updates = 1;
            self.updates += 1;
            self.samples_accepted += valid.iter().map(|&(_, n)| u64::from(n)).sum::<u64>();
        }
        let reply = match self.s.algorithm {
            Algorithm::Downpour => self.weights.clone(),
            Algorithm::Easgd => WeightSet::new(snapshot.tensors, self.weights.version),
        };
        let replies = members.iter().map(|&r| (r, Message::Weights(reply.clone()))).collect();
        let mut ev = LogEvent::new(if updates > 0 { "update" } else { "reject" }, self.s.rank, self.weights.version);
        ev.staleness = Some(0);
        Ok(CoreStep {
            replies,
            updates,
            events: vec![ev],
        })
    }
}

/// Sample-weighted mean of gradients: `Σ nᵢ·gᵢ / Σ nᵢ`, summed in the
/// order given.
pub(crate) fn weighted_mean(parts: &[(&Gradient, u32)], basis_version: u64) -> Gradient {
    let total: f64 = parts.iter().map(|&(_, n)| f64::from(n)).sum();
    let mut tensors: Vec<Tensor> = parts[0].0.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for &(g, n) in parts {
        let n = f64::from(n);
        for (acc, t) in tensors.iter_mut().zip(&g.tensors) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += n * v;
            }
        }
    }
    for t in &mut tensors {
        for a in t.data_mut() {
            *a /= total;
        }
    }
    Gradient::new(tensors, basis_version)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub version: u64,
    pub updates: u64,
    pub samples: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub is_final: bool,
}

/// The top of the tree: a [`MasterCore`] plus the validation cadence and
/// the end-of-run handshake.
pub struct Master {
    core: MasterCore,
    validate_every: u64,
    evaluator: Box<dyn Evaluator>,
    validations: Vec<ValidationRecord>,
    finished: bool,
}

impl Master {
    pub fn new(core: MasterCore, validate_every: u64, evaluator: Box<dyn Evaluator>) -> Self {
        Self {
            core,
            validate_every,
            evaluator,
            validations: Vec::new(),
            finished: false,
        }
    }

    pub fn core(&self) -> &MasterCore {
        &self.core
    }

    pub fn validations(&self) -> &[ValidationRecord] {
        &self.validations
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn handle(&mut self, from: Rank, msg: Message) -> Result<Step, RoleError> {
        if self.finished {
            return Err(RoleError::protocol(self.core.rank(), format!("{} from rank {from} after SHUTDOWN", msg.kind())));
        }
        let before = self.core.updates();
        let cs = match msg {
            Message::Hello { .. } => self.core.on_hello(from)?,
            Message::Gradient { grad, sample_count } => self.core.on_gradient(from, grad, sample_count)?,
            Message::Done { .. } => self.core.on_done(from)?,
            other => {
                return Err(RoleError::protocol(
                    self.core.rank(),
                    format!("unexpected {} from rank {from}", other.kind()),
                ))
            }
        };
        let mut step = Step {
            sends: Vec::new(),
            updates: cs.updates,
            validations: 0,
            events: cs.events,
        };
        // validation runs before replies go out
        let v = self.validate_every;
        if v > 0 && self.core.updates() / v > before / v {
            self.validate(false, &mut step)?;
        }
        step.sends = cs.replies;
        if self.core.all_done() {
            self.validate(true, &mut step)?;
            for &c in &self.core.settings().children {
                step.sends.push((c, Message::Shutdown));
            }
            step.events.push(LogEvent::new("shutdown", self.core.rank(), self.core.weights().version));
            self.finished = true;
        }
        Ok(step)
    }

    fn validate(&mut self, is_final: bool, step: &mut Step) -> Result<(), RoleError> {
        let w = self.core.weights();
        let e = self.evaluator.evaluate(w)?;
        let rec = ValidationRecord {
            version: w.version,
            updates: self.core.updates(),
            samples: self.core.samples_accepted(),
            accuracy: e.accuracy,
            loss: e.loss,
            is_final,
        };
        let mut ev = LogEvent::new(if is_final { "final" } else { "validate" }, self.core.rank(), w.version);
        ev.accuracy = Some(e.accuracy);
        ev.loss = Some(e.loss);
        step.events.push(ev);
        step.validations += 1;
        self.validations.push(rec);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::PeerRole;
    use crate::roles::NullEvaluator;

    fn scalar_ws(x: f64, version: u64) -> WeightSet {
        WeightSet::new(vec![Tensor::new(vec![1], vec![x]).unwrap()], version)
    }

    fn scalar_grad(x: f64, basis: u64) -> Gradient {
        Gradient::new(vec![Tensor::new(vec![1], vec![x]).unwrap()], basis)
    }

    fn settings(algorithm: Algorithm, mode: SyncMode, n: u32) -> MasterSettings {
        MasterSettings {
            rank: 0,
            algorithm,
            mode,
            learning_rate: 0.5,
            momentum: 0.0,
            elastic: ElasticConfig::new(0.25, 1).unwrap(),
            children: (1..=n).collect(),
        }
    }

    fn master(algorithm: Algorithm, mode: SyncMode, n: u32, v: u64) -> Master {
        Master::new(MasterCore::new(settings(algorithm, mode, n), scalar_ws(1.0, 0)).unwrap(), v, Box::new(NullEvaluator))
    }

    fn hello(m: &mut Master, r: Rank) {
        let s = m.handle(r, Message::Hello { rank: r, role: PeerRole::Worker }).unwrap();
        assert!(matches!(&s.sends[..], [(to, Message::Weights(_))] if *to == r));
    }

    fn value(msg: &Message) -> f64 {
        match msg {
            Message::Weights(w) => w.tensors[0].data()[0],
            other => panic!("not weights: {other:?}"),
        }
    }

    #[test]
    fn async_downpour_applies_and_tracks_staleness() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 2, 0);
        hello(&mut m, 1);
        hello(&mut m, 2);
        let s = m.handle(1, Message::Gradient { grad: scalar_grad(2.0, 0), sample_count: 10 }).unwrap();
        assert_eq!(s.updates, 1);
        assert_eq!(value(&s.sends[0].1), 0.0);
        // rank 2 still holds version 0
        m.handle(2, Message::Gradient { grad: scalar_grad(2.0, 0), sample_count: 5 }).unwrap();
        assert_eq!(m.core().weights().version, 2);
        assert_eq!(m.core().staleness().compact(), "0:1;1:1");
        assert_eq!(m.core().samples_accepted(), 15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 1, 0);
        hello(&mut m, 1);
        let s = m.handle(1, Message::Gradient { grad: scalar_grad(f64::NAN, 0), sample_count: 3 }).unwrap();
        assert_eq!(s.updates, 0);
        assert_eq!(value(&s.sends[0].1), 1.0);
        assert_eq!(m.core().rejected(), 1);
        assert_eq!(m.core().samples_accepted(), 0);
    }

    #[test]
    fn shape_mismatch_aborts() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 1, 0);
        hello(&mut m, 1);
        let bad = Gradient::new(vec![Tensor::zeros(&[2])], 0);
        assert!(matches!(
            m.handle(1, Message::Gradient { grad: bad, sample_count: 1 }),
            Err(RoleError::Shape { rank: 0 })
        ));
    }

    #[test]
    fn future_basis_is_a_violation() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 1, 0);
        hello(&mut m, 1);
        assert!(matches!(
            m.handle(1, Message::Gradient { grad: scalar_grad(0.0, 9), sample_count: 1 }),
            Err(RoleError::Protocol { .. })
        ));
    }

    #[test]
    fn unknown_sender_and_double_hello_are_violations() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 1, 0);
        assert!(m.handle(5, Message::Hello { rank: 5, role: PeerRole::Worker }).is_err());
        hello(&mut m, 1);
        assert!(m.handle(1, Message::Hello { rank: 1, role: PeerRole::Worker }).is_err());
    }

    #[test]
    fn sync_waits_for_all_and_weights_by_samples() {
        let mut m = master(Algorithm::Downpour, SyncMode::Sync, 2, 0);
        hello(&mut m, 1);
        hello(&mut m, 2);
        let s = m.handle(2, Message::Gradient { grad: scalar_grad(4.0, 0), sample_count: 3 }).unwrap();
        assert!(s.sends.is_empty());
        let s = m.handle(1, Message::Gradient { grad: scalar_grad(0.0, 0), sample_count: 1 }).unwrap();
        // mean = (1·0 + 3·4)/4 = 3; w = 1 − 0.5·3
        assert_eq!(s.sends.len(), 2);
        assert_eq!(value(&s.sends[0].1), -0.5);
        assert_eq!(m.core().updates(), 1);
    }

    #[test]
    fn sync_duplicate_in_round_is_a_violation() {
        let mut m = master(Algorithm::Downpour, SyncMode::Sync, 2, 0);
        hello(&mut m, 1);
        hello(&mut m, 2);
        m.handle(1, Message::Gradient { grad: scalar_grad(1.0, 0), sample_count: 1 }).unwrap();
        assert!(matches!(
            m.handle(1, Message::Gradient { grad: scalar_grad(1.0, 0), sample_count: 1 }),
            Err(RoleError::Protocol { .. })
        ));
    }

    #[test]
    fn sync_round_shrinks_when_a_worker_finishes() {
        let mut m = master(Algorithm::Downpour, SyncMode::Sync, 2, 0);
        hello(&mut m, 1);
        hello(&mut m, 2);
        m.handle(1, Message::Gradient { grad: scalar_grad(1.0, 0), sample_count: 1 }).unwrap();
        let s = m.handle(2, Message::Done { rank: 2 }).unwrap();
        assert_eq!(s.updates, 1);
        assert_eq!(s.sends.len(), 1);
        assert_eq!(value(&s.sends[0].1), 0.5);
    }

    #[test]
    fn easgd_replies_with_pre_exchange_center() {
        let mut m = master(Algorithm::Easgd, SyncMode::Async, 1, 0);
        hello(&mut m, 1);
        let s = m.handle(1, Message::Gradient { grad: scalar_grad(5.0, 0), sample_count: 4 }).unwrap();
        assert_eq!(value(&s.sends[0].1), 1.0);
        // c = 1 + 0.25·(5 − 1)
        assert_eq!(m.core().weights().tensors[0].data()[0], 2.0);
    }

    #[test]
    fn sync_easgd_moves_center_toward_all_workers() {
        let mut m = master(Algorithm::Easgd, SyncMode::Sync, 2, 0);
        hello(&mut m, 1);
        hello(&mut m, 2);
        m.handle(1, Message::Gradient { grad: scalar_grad(5.0, 0), sample_count: 1 }).unwrap();
        let s = m.handle(2, Message::Gradient { grad: scalar_grad(-3.0, 0), sample_count: 1 }).unwrap();
        assert!(s.sends.iter().all(|(_, msg)| value(msg) == 1.0));
        // 1 + 0.25·4 + 0.25·(−4)
        assert_eq!(m.core().weights().tensors[0].data()[0], 1.0);
        assert_eq!(m.core().weights().version, 1);
    }

    #[test]
    fn validation_cadence_and_shutdown() {
        let mut m = master(Algorithm::Downpour, SyncMode::Async, 1, 2);
        hello(&mut m, 1);
        let mut total_validations = 0;
        for k in 0..5u64 {
            let s = m.handle(1, Message::Gradient { grad: scalar_grad(0.0, k), sample_count: 1 }).unwrap();
            total_validations += s.validations;
        }
        assert_eq!(total_validations, 2);
        let s = m.handle(1, Message::Done { rank: 1 }).unwrap();
        assert_eq!(s.validations, 1);
        assert!(matches!(&s.sends[..], [(1, Message::Shutdown)]));
        assert!(m.is_finished());
        assert_eq!(m.validations().len(), 3);
        assert!(m.validations()[2].is_final);
        assert!(m.handle(1, Message::Done { rank: 1 }).is_err());
    }

    #[test]
    fn weighted_mean_matches_hand_sum() {
        let a = scalar_grad(1.0, 0);
        let b = scalar_grad(4.0, 0);
        let g = weighted_mean(&[(&a, 2), (&b, 1)], 0);
        assert_eq!(g.tensors[0].data()[0], 2.0);
    }
}
