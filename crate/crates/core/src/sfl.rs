//! One split-federated training round.
//!
//! Step I: the fed server broadcasts `w_bottom`. Step II: each client runs
//! its minibatch through the bottom model and uploads smashed data and
//! labels. Step III: the main server computes per-client top gradients,
//! aggregates them and updates `w_top`; each client gets back the gradient
//! of its own smashed data (computed with the pre-update top model).
//! Step IV: clients take an SGD step on their bottom copy and upload it.
//! Step V: the fed server aggregates the uploads into the next `w_bottom`.
//!
//! Client work within a step runs in parallel; both server steps are
//! barriers and consume inputs in client-id order.

use log::warn;
use rayon::prelude::*;

use crate::aggregation::AggregationRule;
use crate::data::{Dataset, Partition};
use crate::error::{Result, SflError};
use crate::nn::{self, ForwardCache, Layer, SplitModel};
use crate::rng::{domain, CounterRng};
use crate::tensor::{sgd_step, ParamVector, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub w_bottom: ParamVector,
    pub w_top: ParamVector,
    pub rule: AggregationRule,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub is_malicious: bool,
    pub local_bottom: ParamVector,
    rng: CounterRng,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, is_malicious: bool, seed: u64) -> Self {
        Self {
            id,
            indices,
            is_malicious,
            local_bottom: ParamVector::default(),
            rng: CounterRng::for_domain(seed, domain::CLIENT_BATCH, id as u64),
        }
    }

    /// Draws this round's minibatch indices without replacement.
    pub fn draw_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut idx = self.rng.sample_without_replacement(&self.indices, batch_size);
        idx.sort_unstable();
        idx
    }
}

/// Cut-layer activations and labels uploaded by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedBatch {
    pub client: usize,
    pub activations: Tensor,
    pub labels: Vec<usize>,
}

/// A client's uploaded bottom-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BottomUpdate {
    pub client: usize,
    pub params: ParamVector,
}

/// What a client keeps between Step II and Step IV.
#[derive(Debug, Clone)]
pub struct ClientPass {
    pub smashed: SmashedBatch,
    cache: ForwardCache,
}

/// Step II. `bottom` already carries the broadcast parameters.
pub fn client_forward(
    bottom: &[Layer],
    client: usize,
    inputs: &Tensor,
    labels: Vec<usize>,
) -> Result<ClientPass> {
    if inputs.batch() != labels.len() {
        return Err(SflError::InvalidArgument(format!(
            "client {client}: {} inputs but {} labels",
            inputs.batch(),
            labels.len()
        )));
    }
    let (activations, cache) = nn::forward(bottom, inputs)?;
    Ok(ClientPass {
        smashed: SmashedBatch {
            client,
            activations,
            labels,
        },
        cache,
    })
}

/// Step IV: `w_bottom - eta * grads_bottom(...)`.
pub fn client_backward(
    bottom: &[Layer],
    w_bottom: &ParamVector,
    pass: &ClientPass,
    grad_smashed: &Tensor,
    eta: f64,
) -> Result<BottomUpdate> {
    let grads = nn::grads_bottom_cached(bottom, &pass.cache, grad_smashed)?;
    Ok(BottomUpdate {
        client: pass.smashed.client,
        params: sgd_step(w_bottom, &grads, eta)?,
    })
}

#[derive(Debug, Clone)]
pub struct MainServerOutput {
    pub w_top: ParamVector,
    /// `(client, grad_smashed)` for every client that contributed.
    pub grads: Vec<(usize, Tensor)>,
    /// Mean top loss over contributing clients.
    pub loss: f64,
    /// Client picked by a selection rule such as Krum.
    pub selected: Option<usize>,
}

/// Step III. Batches whose activations do not match `smashed_shape` (or whose
/// gradients are not finite) are excluded and logged.
pub fn main_server_round(
    top: &[Layer],
    state: &GlobalState,
    smashed: &[SmashedBatch],
    smashed_shape: &[usize],
) -> Result<MainServerOutput> {
    if smashed.is_empty() {
        return Err(SflError::Empty("no smashed batches reached the main server"));
    }
    let mut order: Vec<&SmashedBatch> = smashed.iter().collect();
    order.sort_by_key(|b| b.client);
    let results: Vec<Option<nn::TopGrads>> = order
        .par_iter()
        .map(|b| {
            if b.activations.shape().get(1..) != Some(smashed_shape) {
                warn!(
                    "client {}: smashed shape {:?} does not match {:?}, excluded",
                    b.client,
                    b.activations.shape(),
                    smashed_shape
                );
                return None;
            }
            match nn::loss_and_grads_top(top, &b.activations, &b.labels) {
                Ok(g) if g.params.is_finite() && g.smashed.is_finite() => Some(g),
                Ok(_) => {
                    warn!("client {}: non-finite top gradient, excluded", b.client);
                    None
                }
                Err(e) => {
                    warn!("client {}: {e}, excluded", b.client);
                    None
                }
            }
        })
        .collect();
    let mut clients = Vec::new();
    let mut param_grads = Vec::new();
    let mut grads = Vec::new();
    let mut loss = 0.0;
    for (b, r) in order.iter().zip(results) {
        if let Some(g) = r {
            loss += g.loss;
            clients.push(b.client);
            param_grads.push(g.params);
            grads.push((b.client, g.smashed));
        }
    }
    if param_grads.is_empty() {
        return Err(SflError::Empty("every smashed batch was excluded"));
    }
    let agg = state.rule.aggregate(&param_grads)?;
    Ok(MainServerOutput {
        w_top: sgd_step(&state.w_top, &agg.vector, state.eta)?,
        loss: loss / grads.len() as f64,
        grads,
        selected: agg.selected.map(|i| clients[i]),
    })
}

/// Step V. Uploads are sorted by client id before aggregation. Returns the
/// new bottom model and the selected client, if any.
pub fn fed_server_round(
    rule: &AggregationRule,
    uploads: &[BottomUpdate],
) -> Result<(ParamVector, Option<usize>)> {
    if uploads.is_empty() {
        return Err(SflError::Empty("no bottom models uploaded; round aborted"));
    }
    let mut sorted: Vec<&BottomUpdate> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let vectors: Vec<ParamVector> = sorted.iter().map(|u| u.params.clone()).collect();
    let agg = rule.aggregate(&vectors)?;
    Ok((agg.vector, agg.selected.map(|i| sorted[i].client)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy and mean cross-entropy of the composed model.
pub fn evaluate(
    model: &SplitModel,
    w_bottom: &ParamVector,
    w_top: &ParamVector,
    test: &Dataset,
) -> Result<Evaluation> {
    let mut layers = nn::with_params(model.bottom(), w_bottom)?;
    layers.extend(nn::with_params(model.top(), w_top)?);
    evaluate_layers(&layers, test)
}

pub fn evaluate_layers(layers: &[Layer], test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(SflError::Empty("test set"));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let parts: Vec<(usize, f64)> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<(usize, f64)> {
            let (x, y) = test.gather(chunk);
            let logits = nn::predict(layers, &x)?;
            let preds = nn::argmax_rows(&logits);
            let correct = preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            let loss = if logits.is_finite() {
                nn::softmax_cross_entropy(&logits, &y)?.0 * chunk.len() as f64
            } else {
                f64::INFINITY
            };
            Ok((correct, loss))
        })
        .collect::<Result<_>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        loss: loss / test.len() as f64,
    })
}

/// Hooks through which an adversary sees and rewrites what malicious clients
/// upload. Only malicious clients' data is passed in, in client-id order.
pub trait RoundHooks {
    /// Before smashed data reaches the main server.
    fn on_smashed(&mut self, _round: usize, _batches: &mut [SmashedBatch]) {}

    /// Before bottom models reach the fed server. `uploads` holds the
    /// honestly computed models of the malicious clients.
    fn on_bottom_uploads(
        &mut self,
        _round: usize,
        _broadcast: &ParamVector,
        _uploads: &mut [BottomUpdate],
    ) {
    }

    /// After the fed server broadcasts the next bottom model.
    fn on_broadcast(&mut self, _round: usize, _previous: &ParamVector, _next: &ParamVector) {}
}

/// Hooks that change nothing.
pub struct Honest;

impl RoundHooks for Honest {}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub train_loss: f64,
    pub participants: usize,
    pub top_selected: Option<usize>,
    pub bottom_selected: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingParams {
    pub rule: AggregationRule,
    pub eta: f64,
    pub batch_size: usize,
    /// Seeds the per-client minibatch streams.
    pub seed: u64,
}

/// The orchestrator: owns the global state and every client.
#[derive(Debug, Clone)]
pub struct Simulation {
    model: SplitModel,
    state: GlobalState,
    clients: Vec<ClientState>,
    train: Dataset,
    batch_size: usize,
}

impl Simulation {
    pub fn new(
        model: SplitModel,
        train: Dataset,
        partition: &Partition,
        malicious: &[bool],
        params: TrainingParams,
    ) -> Result<Self> {
        let TrainingParams {
            rule,
            eta,
            batch_size,
            seed,
        } = params;
        if malicious.len() != partition.clients() {
            return Err(SflError::LengthMismatch {
                expected: partition.clients(),
                actual: malicious.len(),
            });
        }
        if batch_size == 0 {
            return Err(SflError::InvalidArgument("batch size must be >= 1".into()));
        }
        rule.validate()?;
        let clients = (0..partition.clients())
            .map(|k| ClientState::new(k, partition.indices(k).to_vec(), malicious[k], seed))
            .collect();
        let state = GlobalState {
            round: 0,
            w_bottom: model.bottom_params(),
            w_top: model.top_params(),
            rule,
            eta,
        };
        Ok(Self {
            model,
            state,
            clients,
            train,
            batch_size,
        })
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    pub fn evaluate(&self, test: &Dataset) -> Result<Evaluation> {
        evaluate(&self.model, &self.state.w_bottom, &self.state.w_top, test)
    }

    /// Runs Steps I-V once.
    pub fn step(&mut self, hooks: &mut dyn RoundHooks) -> Result<RoundReport> {
        let round = self.state.round;
        let w_bottom = self.state.w_bottom.clone();
        let bottom = nn::with_params(self.model.bottom(), &w_bottom)?;
        let top = nn::with_params(self.model.top(), &self.state.w_top)?;

        let mut draws = Vec::with_capacity(self.clients.len());
        for client in &mut self.clients {
            if client.indices.is_empty() {
                warn!("client {} holds no samples, skipped", client.id);
                continue;
            }
            draws.push((client.id, client.draw_batch(self.batch_size)));
        }
        let train = &self.train;
        let mut passes: Vec<ClientPass> = draws
            .par_iter()
            .map(|(id, idx)| {
                let (x, y) = train.gather(idx);
                client_forward(&bottom, *id, &x, y)
            })
            .collect::<Result<_>>()?;

        let malicious: Vec<bool> = self.clients.iter().map(|c| c.is_malicious).collect();
        let mut attacker_batches: Vec<SmashedBatch> = passes
            .iter()
            .filter(|p| malicious[p.smashed.client])
            .map(|p| p.smashed.clone())
            .collect();
        if !attacker_batches.is_empty() {
            hooks.on_smashed(round, &mut attacker_batches);
            for poisoned in attacker_batches {
                if let Some(p) = passes.iter_mut().find(|p| p.smashed.client == poisoned.client) {
                    p.smashed = poisoned;
                }
            }
        }

        let smashed: Vec<SmashedBatch> = passes.iter().map(|p| p.smashed.clone()).collect();
        let smashed_shape = self.model.smashed_shape();
        let server = main_server_round(&top, &self.state, &smashed, &smashed_shape)?;

        let eta = self.state.eta;
        let jobs: Vec<(&ClientPass, &Tensor)> = server
            .grads
            .iter()
            .filter_map(|(id, g)| passes.iter().find(|p| p.smashed.client == *id).map(|p| (p, g)))
            .collect();
        let results: Vec<Option<BottomUpdate>> = jobs
            .par_iter()
            .map(|(pass, g)| match client_backward(&bottom, &w_bottom, pass, g, eta) {
                Ok(u) => Some(u),
                Err(e) => {
                    warn!("client {}: {e}, excluded from bottom aggregation", pass.smashed.client);
                    None
                }
            })
            .collect();
        let mut uploads: Vec<BottomUpdate> = results.into_iter().flatten().collect();
        for u in &uploads {
            self.clients[u.client].local_bottom = u.params.clone();
        }

        let mut attacker_uploads: Vec<BottomUpdate> = uploads
            .iter()
            .filter(|u| malicious[u.client])
            .cloned()
            .collect();
        if !attacker_uploads.is_empty() {
            hooks.on_bottom_uploads(round, &w_bottom, &mut attacker_uploads);
            for crafted in attacker_uploads {
                if let Some(u) = uploads.iter_mut().find(|u| u.client == crafted.client) {
                    *u = crafted;
                }
            }
        }
        uploads.retain(|u| {
            let ok = u.params.len() == w_bottom.len() && u.params.is_finite();
            if !ok {
                warn!("client {}: malformed bottom upload, excluded", u.client);
            }
            ok
        });

        let (next_bottom, bottom_selected) = fed_server_round(&self.state.rule, &uploads)?;
        hooks.on_broadcast(round, &w_bottom, &next_bottom);

        self.state.w_bottom = next_bottom;
        self.state.w_top = server.w_top;
        self.state.round += 1;
        Ok(RoundReport {
            round,
            train_loss: server.loss,
            participants: uploads.len(),
            top_selected: server.selected,
            bottom_selected,
        })
    }
}
