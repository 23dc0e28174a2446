use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::client::{LocalTrainer, TrainStats};
use super::transport::{InProcTransport, ServerTransport, StatsSink, TcpTransport, TransportKind};
use super::wire::{Payload, RoundMessage};
use super::FederationError;
use crate::prototype::{aggregate_global_with, GlobalAggregation, Owner, PrototypeSet};

/// One client's parameters and its aggregation weight `n_k`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedParams<'a> {
    pub client_id: u32,
    pub params: &'a [f64],
    pub weight: u32,
}

/// `Σ (n_k / Σn) θ_k`, accumulated in ascending client order and clamped to
/// the per-coordinate range of the inputs.
pub fn aggregate_models(updates: &[WeightedParams<'_>]) -> Result<Vec<f64>, FederationError> {
    let mut sorted: Vec<&WeightedParams<'_>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted.first().ok_or(FederationError::EmptyUpdates)?;
    let len = first.params.len();
    let mut total = 0u64;
    for u in &sorted {
        if u.params.len() != len {
            return Err(FederationError::LengthMismatch {
                client: u.client_id,
                expected: len,
                got: u.params.len(),
            });
        }
        if u.weight == 0 {
            return Err(FederationError::ZeroWeight(u.client_id));
        }
        total += u64::from(u.weight);
    }
    let mut out = vec![0.0; len];
    let mut lo = first.params.to_vec();
    let mut hi = first.params.to_vec();
    for u in &sorted {
        let w = f64::from(u.weight) / total as f64;
        for (j, &p) in u.params.iter().enumerate() {
            out[j] += w * p;
            lo[j] = lo[j].min(p);
            hi[j] = hi[j].max(p);
        }
    }
    for ((o, l), h) in out.iter_mut().zip(&lo).zip(&hi) {
        *o = o.clamp(*l, *h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Completed rounds.
    pub round: u32,
    pub params: Vec<f64>,
    pub prototypes: PrototypeSet,
    /// Client id → dataset size from its latest update.
    pub registry: BTreeMap<u32, u32>,
    pub aggregation: GlobalAggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    /// Loss means per client, ascending id.
    pub clients: Vec<(u32, TrainStats)>,
    pub elapsed: Duration,
}

/// Server driving a fixed client population through synchronous rounds.
pub struct Federation {
    state: ServerState,
    transport: Box<dyn ServerTransport>,
    stats: StatsSink,
    clients: Vec<u32>,
    finished: bool,
}

impl Federation {
    pub fn new(
        kind: TransportKind,
        trainers: Vec<Box<dyn LocalTrainer>>,
        initial_params: Vec<f64>,
        feature_dim: usize,
        aggregation: GlobalAggregation,
        tcp_port: u16,
    ) -> Result<Self, FederationError> {
        let mut clients: Vec<u32> = trainers.iter().map(|t| t.client_id()).collect();
        clients.sort_unstable();
        if clients.is_empty() {
            return Err(FederationError::EmptyUpdates);
        }
        if clients.windows(2).any(|w| w[0] == w[1]) {
            return Err(FederationError::Protocol("duplicate client id".into()));
        }
        let stats = StatsSink::default();
        let transport: Box<dyn ServerTransport> = match kind {
            TransportKind::InProc => Box::new(InProcTransport::spawn(trainers, stats.clone())),
            TransportKind::Tcp => Box::new(TcpTransport::spawn(trainers, stats.clone(), tcp_port)?),
        };
        Ok(Self {
            state: ServerState {
                round: 0,
                params: initial_params,
                prototypes: PrototypeSet::empty(Owner::Global, feature_dim),
                registry: BTreeMap::new(),
                aggregation,
            },
            transport,
            stats,
            clients,
            finished: false,
        })
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    /// Broadcast, collect every update, aggregate. Any failure aborts the
    /// federation and is returned.
    pub fn run_round(&mut self) -> Result<RoundOutcome, FederationError> {
        if self.finished {
            return Err(FederationError::Protocol("federation already shut down".into()));
        }
        match self.round_inner() {
            Ok(o) => Ok(o),
            Err(e) => {
                self.finished = true;
                Err(self.transport.finish(false).err().unwrap_or(e))
            }
        }
    }

    fn round_inner(&mut self) -> Result<RoundOutcome, FederationError> {
        let start = Instant::now();
        let t = self.state.round + 1;
        self.transport.broadcast(&RoundMessage::broadcast(
            t,
            self.state.params.clone(),
            self.state.prototypes.clone(),
        ))?;
        let mut updates = Vec::with_capacity(self.clients.len());
        for msg in self.transport.collect(self.clients.len())? {
            match msg.payload {
                Payload::Update {
                    client_id,
                    params,
                    prototypes,
                    dataset_size,
                } if msg.round == t => updates.push((client_id, params, prototypes, dataset_size)),
                _ => return Err(FederationError::Protocol(format!("unexpected reply in round {t}"))),
            }
        }
        updates.sort_by_key(|u| u.0);
        let ids: Vec<u32> = updates.iter().map(|u| u.0).collect();
        if ids != self.clients {
            return Err(FederationError::Protocol(format!("round {t}: replies from {ids:?}, expected {:?}", self.clients)));
        }
        let expected = self.state.params.len();
        if let Some(u) = updates.iter().find(|u| u.1.len() != expected) {
            return Err(FederationError::LengthMismatch {
                client: u.0,
                expected,
                got: u.1.len(),
            });
        }
        let weighted: Vec<WeightedParams<'_>> = updates
            .iter()
            .map(|u| WeightedParams {
                client_id: u.0,
                params: &u.1,
                weight: u.3,
            })
            .collect();
        let params = aggregate_models(&weighted)?;
        let sets: Vec<PrototypeSet> = updates.iter().map(|u| u.2.clone()).collect();
        let prototypes = aggregate_global_with(&sets, self.state.aggregation)?;

        for u in &updates {
            self.state.registry.insert(u.0, u.3);
        }
        self.state.params = params;
        self.state.prototypes = prototypes;
        self.state.round = t;
        let clients = self
            .clients
            .iter()
            .map(|&c| (c, self.stats.take(t, c).unwrap_or_default()))
            .collect();
        Ok(RoundOutcome {
            round: t,
            clients,
            elapsed: start.elapsed(),
        })
    }

    /// Runs `rounds` rounds, calling `hook` after each, then shuts down.
    pub fn run<F>(mut self, rounds: u32, mut hook: F) -> Result<ServerState, FederationError>
    where
        F: FnMut(&ServerState, &RoundOutcome),
    {
        for _ in 0..rounds {
            let outcome = self.run_round()?;
            hook(&self.state, &outcome);
        }
        self.shutdown()
    }

    /// Sends SHUTDOWN to every client and returns the final state.
    pub fn shutdown(mut self) -> Result<ServerState, FederationError> {
        self.finished = true;
        self.transport.finish(true)?;
        Ok(self.state.clone())
    }
}

impl Drop for Federation {
    fn drop(&mut self) {
        if !self.finished {
            let _ = self.transport.finish(false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::client::ClientUpdate;

    fn wp(client_id: u32, params: &[f64], weight: u32) -> WeightedParams<'_> {
        WeightedParams {
            client_id,
            params,
            weight,
        }
    }

    #[test]
    fn weighted_mean() {
        let (a, b) = ([0.0, 4.0], [4.0, 0.0]);
        assert_eq!(aggregate_models(&[wp(0, &a, 1), wp(1, &b, 3)]).unwrap(), vec![3.0, 1.0]);
        assert_eq!(aggregate_models(&[wp(1, &b, 3), wp(0, &a, 1)]).unwrap(), vec![3.0, 1.0]);
        assert_eq!(aggregate_models(&[wp(7, &a, 5)]).unwrap(), a.to_vec());
        let same = [0.1, 0.7];
        assert_eq!(
            aggregate_models(&[wp(0, &same, 3), wp(1, &same, 7), wp(2, &same, 11)]).unwrap(),
            same.to_vec()
        );
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate_models(&[]), Err(FederationError::EmptyUpdates)));
        let (a, b) = ([0.0, 1.0], [0.0]);
        assert!(matches!(
            aggregate_models(&[wp(0, &a, 1), wp(1, &b, 1)]),
            Err(FederationError::LengthMismatch { client: 1, .. })
        ));
        assert!(matches!(aggregate_models(&[wp(0, &a, 0)]), Err(FederationError::ZeroWeight(0))));
    }

    /// Returns fixed parameters and a one-class prototype.
    struct Fixed {
        id: u32,
        value: f64,
        size: u32,
        fail_at: Option<u32>,
    }

    impl LocalTrainer for Fixed {
        fn client_id(&self) -> u32 {
            self.id
        }

        fn train(&mut self, round: u32, params: &[f64], _: &PrototypeSet) -> Result<ClientUpdate, FederationError> {
            if self.fail_at == Some(round) {
                return Err(FederationError::Protocol(format!("client {} gave up", self.id)));
            }
            let mut prototypes = PrototypeSet::empty(Owner::Client(self.id), 2);
            prototypes.insert(0, vec![self.value, -self.value], self.size).unwrap();
            Ok(ClientUpdate {
                client_id: self.id,
                params: vec![self.value; params.len()],
                prototypes,
                dataset_size: self.size,
                stats: TrainStats {
                    ce: self.value,
                    apc: 0.0,
                    steps: 1,
                },
            })
        }
    }

    fn fixed(specs: &[(u32, f64, u32)]) -> Vec<Box<dyn LocalTrainer>> {
        specs
            .iter()
            .map(|&(id, value, size)| {
                Box::new(Fixed {
                    id,
                    value,
                    size,
                    fail_at: None,
                }) as Box<dyn LocalTrainer>
            })
            .collect()
    }

    #[test]
    fn round_aggregates_over_both_transports() {
        for kind in [TransportKind::InProc, TransportKind::Tcp] {
            let fed = Federation::new(kind, fixed(&[(2, 4.0, 3), (0, 0.0, 1)]), vec![9.0; 3], 2, GlobalAggregation::Mean, 0).unwrap();
            let mut seen = Vec::new();
            let state = fed.run(2, |_, o| seen.push(o.clone())).unwrap();
            assert_eq!(state.round, 2);
            assert_eq!(state.params, vec![3.0; 3]);
            assert_eq!(state.prototypes.get(0).unwrap().vector, vec![2.0, -2.0]);
            assert_eq!(state.prototypes.get(0).unwrap().support, 2);
            assert_eq!(state.registry, BTreeMap::from([(0, 1), (2, 3)]));
            assert_eq!(seen[1].clients.iter().map(|c| (c.0, c.1.ce)).collect::<Vec<_>>(), vec![(0, 0.0), (2, 4.0)]);
        }
    }

    #[test]
    fn single_client_passes_through() {
        let fed = Federation::new(TransportKind::InProc, fixed(&[(0, 0.25, 10)]), vec![1.0; 4], 2, GlobalAggregation::Mean, 0).unwrap();
        let state = fed.run(1, |_, _| {}).unwrap();
        assert_eq!(state.params, vec![0.25; 4]);
        assert_eq!(state.prototypes.get(0).unwrap().vector, vec![0.25, -0.25]);
    }

    #[test]
    fn client_failure_aborts() {
        for kind in [TransportKind::InProc, TransportKind::Tcp] {
            let mut trainers = fixed(&[(0, 1.0, 1)]);
            trainers.push(Box::new(Fixed {
                id: 1,
                value: 2.0,
                size: 1,
                fail_at: Some(2),
            }));
            let mut fed = Federation::new(kind, trainers, vec![0.0; 2], 2, GlobalAggregation::Mean, 0).unwrap();
            fed.run_round().unwrap();
            match fed.run_round() {
                Err(FederationError::ClientFailure { client: 1, reason }) => assert!(reason.contains("gave up"), "{reason}"),
                other => panic!("{kind}: unexpected {other:?}"),
            }
            assert!(fed.run_round().is_err());
        }
    }
}
