//! TCP deployment of the round loop: one aggregator process and one process
//! per client, speaking the framed protocol from [`crate::wire`].
//!
//! The aggregator accepts exactly `num_clients` JOINs, then runs the same
//! synchronous barrier as the in-process driver: broadcast MODEL, wait for
//! every UPDATE (with a timeout), aggregate, acknowledge with ROUND_DONE,
//! and finally SHUTDOWN. Parameters cross the wire as `f32`, so a wire run
//! reproduces an in-process run that has `quantize_broadcast` set — the
//! tests below compare the two bit for bit. Stragglers abort the round:
//! there is no partial aggregation.
//!
//! Connection handling is deliberately simple. Joins are accepted one at a
//! time; during the rounds a helper thread politely refuses latecomers with
//! an ERROR frame; update collection uses one reader thread per connection
//! so a round costs at most one timeout, with results landing in disjoint
//! slots and aggregation running on the serving thread after the barrier.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crate::algo::{
    aggregate_fedavg, local_train, update_penalty_state, AlgorithmKind, ClientUpdate,
    FedCurvPenaltyState, PenaltyView,
};
use crate::data::Dataset;
use crate::model::{init_params, Batch, FisherDiagonal, ModelParams};
use crate::orchestrator::{
    derive_plan, evaluate_global, stream_seed, FederationConfig, FederationRun, RoundMetrics,
};
use crate::wire::{
    decode_frame, encode_frame, params_digest, shard_digest, to_f32_vec, to_f64_vec, Message,
    ModelPenalty, UpdateFisher, FRAME_HEADER, MAX_PAYLOAD, PROTOCOL_VERSION,
};
use crate::{Error, Result};

pub const ERR_VERSION_MISMATCH: u8 = 1;
pub const ERR_BAD_JOIN: u8 = 2;
pub const ERR_DUPLICATE_CLIENT: u8 = 3;
pub const ERR_FEDERATION_FULL: u8 = 4;
pub const ERR_ROUND_ABORTED: u8 = 5;

/// Socket-level knobs. The defaults match the documented contract: two
/// minutes to produce an update, three reconnect attempts one second apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetOptions {
    /// How long either side waits for the next expected frame.
    pub round_timeout: Duration,
    /// How long the aggregator waits for the full roster to join.
    pub join_timeout: Duration,
    /// Extra connection attempts after the first failure.
    pub connect_retries: u32,
    pub retry_backoff: Duration,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            round_timeout: Duration::from_secs(120),
            join_timeout: Duration::from_secs(120),
            connect_retries: 3,
            retry_backoff: Duration::from_secs(1),
        }
    }
}

/// What a collaborator did before the aggregator said SHUTDOWN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollaboratorReport {
    pub client_id: usize,
    /// Local training passes completed; one UPDATE frame was sent per pass.
    pub rounds_trained: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

fn read_exact_or_timeout(stream: &mut TcpStream, buf: &mut [u8]) -> Result<()> {
    stream.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
            Error::Timeout("the next frame".into())
        }
        _ => Error::Io(e),
    })
}

/// Reads one complete frame, returning the message and its size on the wire.
pub fn read_frame(stream: &mut TcpStream) -> Result<(Message, usize)> {
    let mut header = [0u8; FRAME_HEADER];
    read_exact_or_timeout(stream, &mut header)?;
    let length = u32::from_be_bytes(header[0..4].try_into().unwrap());
    if length > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "declared payload of {length} bytes exceeds the {MAX_PAYLOAD} limit"
        )));
    }
    let total = FRAME_HEADER + length as usize;
    let mut frame = vec![0u8; total];
    frame[..FRAME_HEADER].copy_from_slice(&header);
    read_exact_or_timeout(stream, &mut frame[FRAME_HEADER..])?;
    let (msg, consumed) = decode_frame(&frame)?;
    debug_assert_eq!(consumed, total);
    Ok((msg, total))
}

/// Writes one frame, returning its size on the wire.
pub fn write_frame(stream: &mut TcpStream, msg: &Message) -> Result<usize> {
    let frame = encode_frame(msg);
    stream.write_all(&frame)?;
    Ok(frame.len())
}

fn configure_stream(stream: &TcpStream, options: &NetOptions) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(options.round_timeout))?;
    stream.set_write_timeout(Some(options.round_timeout))?;
    Ok(())
}

/// Accepts JOINs until every client slot is filled. A bad joiner (wrong
/// version, wrong dimension, unknown or duplicate id) gets an ERROR frame
/// and is dropped without disturbing the roster.
fn accept_collaborators(
    cfg: &FederationConfig,
    digests: &[u64],
    listener: &TcpListener,
    options: &NetOptions,
) -> Result<Vec<TcpStream>> {
    let n = cfg.num_clients;
    let d = cfg.model.param_count() as u32;
    let mut slots: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
    let mut joined = 0;
    let deadline = Instant::now() + options.join_timeout;
    while joined < n {
        let mut stream = match listener.accept() {
            Ok((stream, _peer)) => stream,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!(
                        "collaborators to join ({joined} of {n} arrived)"
                    )));
                }
                thread::sleep(Duration::from_millis(5));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        configure_stream(&stream, options)?;
        let reject = |stream: &mut TcpStream, code: u8, message: String| {
            let _ = write_frame(stream, &Message::Error { code, message });
        };
        match read_frame(&mut stream) {
            Ok((Message::Join { client_id, dim, version }, _)) => {
                if version != PROTOCOL_VERSION {
                    reject(
                        &mut stream,
                        ERR_VERSION_MISMATCH,
                        format!("protocol version {version} not supported, this is {PROTOCOL_VERSION}"),
                    );
                    continue;
                }
                if dim != d {
                    reject(
                        &mut stream,
                        ERR_BAD_JOIN,
                        format!("model has {d} parameters, joiner expects {dim}"),
                    );
                    continue;
                }
                let id = client_id as usize;
                if id >= n {
                    reject(
                        &mut stream,
                        ERR_BAD_JOIN,
                        format!("client id {id} out of range for {n} clients"),
                    );
                    continue;
                }
                if slots[id].is_some() {
                    reject(
                        &mut stream,
                        ERR_DUPLICATE_CLIENT,
                        format!("client {id} already joined"),
                    );
                    continue;
                }
                if write_frame(&mut stream, &Message::JoinAck { shard_digest: digests[id] })
                    .is_ok()
                {
                    slots[id] = Some(stream);
                    joined += 1;
                }
            }
            Ok(_) => reject(&mut stream, ERR_BAD_JOIN, "expected a JOIN frame".into()),
            Err(_) => {} // unreadable handshake; drop the socket
        }
    }
    Ok(slots.into_iter().map(|slot| slot.unwrap()).collect())
}

/// Refuses connections that arrive after the roster is complete, answering
/// their JOIN with an ERROR frame. Polls so it can wind down when the rounds
/// finish.
fn refuse_latecomers(listener: &TcpListener, done: &AtomicBool) {
    while !done.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((mut stream, _peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
                let _ = stream.set_write_timeout(Some(Duration::from_millis(500)));
                // drain their JOIN before answering so closing our end
                // cannot reset the connection under the reply
                let _ = read_frame(&mut stream);
                let _ = write_frame(
                    &mut stream,
                    &Message::Error {
                        code: ERR_FEDERATION_FULL,
                        message: "federation roster is full".into(),
                    },
                );
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10));
            }
            Err(_) => break,
        }
    }
}

fn expect_update(
    stream: &mut TcpStream,
    expected_client: usize,
    d: usize,
) -> Result<(ClientUpdate, usize)> {
    let (msg, frame_len) = read_frame(stream)?;
    let Message::Update { client_id, sample_count, loss, params, fisher } = msg else {
        return Err(Error::Protocol(format!(
            "expected UPDATE from client {expected_client}, got frame type {}",
            msg.type_byte()
        )));
    };
    if client_id as usize != expected_client {
        return Err(Error::Protocol(format!(
            "update from client {client_id} arrived on client {expected_client}'s connection"
        )));
    }
    if params.len() != d {
        return Err(Error::Protocol(format!(
            "update carries {} parameters, expected {d}",
            params.len()
        )));
    }
    let (fisher_diag, fisher_times_params) = match fisher {
        Some(f) => (
            Some(FisherDiagonal {
                values: to_f64_vec(&f.fisher),
                sample_count: sample_count as usize,
            }),
            Some(to_f64_vec(&f.fisher_times_params)),
        ),
        None => (None, None),
    };
    let update = ClientUpdate {
        client_id: expected_client,
        params: to_f64_vec(&params),
        sample_count: sample_count as usize,
        fisher: fisher_diag,
        fisher_times_params,
        local_loss: loss as f64,
    };
    Ok((update, frame_len))
}

fn run_rounds(
    cfg: &FederationConfig,
    test: &Dataset,
    conns: &mut [TcpStream],
    started: Instant,
) -> Result<FederationRun> {
    let n = cfg.num_clients;
    let d = cfg.model.param_count();
    let mut global = init_params(&cfg.model, cfg.master_seed)?;
    let mut penalty_state: Option<FedCurvPenaltyState> = None;
    let mut bytes_up: u64 = 0;
    let mut bytes_down: u64 = 0;
    let mut metrics = Vec::new();

    for round in 1..=cfg.rounds {
        let penalty = match &penalty_state {
            Some(state) if cfg.algo.kind == AlgorithmKind::FedCurv => Some(ModelPenalty {
                fisher_sum: to_f32_vec(&state.sum_fisher),
                fisher_params_sum: to_f32_vec(&state.sum_fisher_params),
            }),
            _ => None,
        };
        let model_frame = encode_frame(&Message::Model {
            round: round as u32,
            params: to_f32_vec(&global.values),
            penalty,
        });
        for stream in conns.iter_mut() {
            stream.write_all(&model_frame)?;
            bytes_down += model_frame.len() as u64;
        }

        // round barrier: one reader per connection, then aggregate serially
        let mut slots: Vec<Option<Result<(ClientUpdate, usize)>>> = (0..n).map(|_| None).collect();
        thread::scope(|scope| {
            for ((client, stream), slot) in conns.iter_mut().enumerate().zip(slots.iter_mut()) {
                scope.spawn(move || {
                    *slot = Some(expect_update(stream, client, d));
                });
            }
        });
        let mut updates = Vec::with_capacity(n);
        for (client, slot) in slots.into_iter().enumerate() {
            match slot.expect("every reader fills its slot") {
                Ok((update, frame_len)) => {
                    bytes_up += frame_len as u64;
                    updates.push(update);
                }
                Err(e) => {
                    let abort = Message::Error {
                        code: ERR_ROUND_ABORTED,
                        message: format!("round {round} aborted: client {client}: {e}"),
                    };
                    for stream in conns.iter_mut() {
                        let _ = write_frame(stream, &abort);
                    }
                    return Err(e);
                }
            }
        }

        global.values = aggregate_fedavg(&updates)?;
        if cfg.algo.kind == AlgorithmKind::FedCurv {
            penalty_state = Some(update_penalty_state(&updates, round)?);
        }
        let done_frame = encode_frame(&Message::RoundDone {
            round: round as u32,
            params_digest: params_digest(&to_f32_vec(&global.values)),
        });
        for stream in conns.iter_mut() {
            stream.write_all(&done_frame)?;
            bytes_down += done_frame.len() as u64;
        }

        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let global_top1 = evaluate_global(&cfg.model, &global, test)?;
            let mean_local_loss =
                updates.iter().map(|u| u.local_loss).sum::<f64>() / updates.len() as f64;
            metrics.push(RoundMetrics {
                round,
                global_top1,
                mean_local_loss,
                bytes_up,
                bytes_down,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }

    // SHUTDOWN, like JOIN and JOIN_ACK, sits outside the per-round byte
    // accounting so wire metrics line up with the in-process driver's
    let bye = encode_frame(&Message::Shutdown);
    for stream in conns.iter_mut() {
        let _ = stream.write_all(&bye);
    }
    Ok(FederationRun { metrics, final_params: global })
}

/// Drives a full federation over TCP and returns the same run summary the
/// in-process driver produces. The listener should already be bound; every
/// expected client must JOIN before the first round starts.
pub fn serve_aggregator(
    cfg: &FederationConfig,
    train: &Dataset,
    test: &Dataset,
    listener: TcpListener,
    options: &NetOptions,
) -> Result<FederationRun> {
    cfg.validate()?;
    train.validate(true)?;
    test.validate(false)?;
    let started = Instant::now();

    let assignments = match derive_plan(cfg, train)? {
        Some(plan) => plan.assignments,
        None => vec![(0..train.len()).collect()],
    };
    let digests: Vec<u64> = assignments
        .iter()
        .enumerate()
        .map(|(id, indices)| shard_digest(id as u32, indices))
        .collect();

    listener.set_nonblocking(true)?;
    let mut conns = accept_collaborators(cfg, &digests, &listener, options)?;

    let done = AtomicBool::new(false);
    thread::scope(|scope| {
        scope.spawn(|| refuse_latecomers(&listener, &done));
        let result = run_rounds(cfg, test, &mut conns, started);
        done.store(true, Ordering::Release);
        result
    })
}

fn connect_with_retry(addr: &str, options: &NetOptions) -> Result<TcpStream> {
    let mut failures = 0;
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                configure_stream(&stream, options)?;
                return Ok(stream);
            }
            Err(e) => {
                failures += 1;
                if failures > options.connect_retries {
                    return Err(Error::Io(e));
                }
                thread::sleep(options.retry_backoff);
            }
        }
    }
}

/// Joins the aggregator at `addr` and trains until SHUTDOWN. The shard is
/// this client's local data; `shard_indices` are its row numbers in the full
/// training set, checked against the digest in JOIN_ACK so a misconfigured
/// node fails loudly instead of training on the wrong rows. `cfg` must be
/// the same experiment config the aggregator runs.
pub fn run_collaborator(
    addr: &str,
    client_id: usize,
    shard: &Batch,
    shard_indices: &[usize],
    cfg: &FederationConfig,
    options: &NetOptions,
) -> Result<CollaboratorReport> {
    cfg.validate()?;
    if shard.labels.is_empty() {
        return Err(Error::EmptyInput("local shard".into()));
    }
    if shard.labels.len() != shard_indices.len() {
        return Err(Error::InvalidSpec(format!(
            "shard has {} rows but {} indices",
            shard.labels.len(),
            shard_indices.len()
        )));
    }
    let d = cfg.model.param_count();
    let mut stream = connect_with_retry(addr, options)?;
    let mut bytes_sent = 0u64;
    let mut bytes_received = 0u64;

    bytes_sent += write_frame(
        &mut stream,
        &Message::Join {
            client_id: client_id as u32,
            dim: d as u32,
            version: PROTOCOL_VERSION,
        },
    )? as u64;
    let (ack, ack_len) = read_frame(&mut stream)?;
    bytes_received += ack_len as u64;
    match ack {
        Message::JoinAck { shard_digest: digest } => {
            let local = shard_digest(client_id as u32, shard_indices);
            if digest != local {
                return Err(Error::Protocol(format!(
                    "aggregator assigned client {client_id} a different shard \
                     (digest {digest:#018x}, local shard hashes to {local:#018x})"
                )));
            }
        }
        Message::Error { code, message } => {
            return Err(Error::Protocol(format!("join rejected (code {code}): {message}")));
        }
        other => {
            return Err(Error::Protocol(format!(
                "expected JOIN_ACK, got frame type {}",
                other.type_byte()
            )));
        }
    }

    let mut opt = cfg.optimizer.build(d);
    // the f32 image of the Fisher terms we last sent, for self-exclusion
    let mut own_contrib: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut expected_digest: Option<u64> = None;
    let mut rounds_trained = 0;
    loop {
        let (msg, frame_len) = read_frame(&mut stream)?;
        bytes_received += frame_len as u64;
        match msg {
            Message::Model { round, params, penalty } => {
                if params.len() != d {
                    return Err(Error::Protocol(format!(
                        "model carries {} parameters, this client was built for {d}",
                        params.len()
                    )));
                }
                if let Some(digest) = expected_digest.take() {
                    let got = params_digest(&params);
                    if got != digest {
                        return Err(Error::Protocol(format!(
                            "round {round} model digest {got:#018x} does not match \
                             the announced {digest:#018x}"
                        )));
                    }
                }
                let view = match penalty {
                    Some(p) if cfg.algo.kind == AlgorithmKind::FedCurv => {
                        let mut fisher_others = to_f64_vec(&p.fisher_sum);
                        let mut fisher_params_others = to_f64_vec(&p.fisher_params_sum);
                        if let Some((own_f, own_fp)) = &own_contrib {
                            for (a, f) in fisher_others.iter_mut().zip(own_f) {
                                *a -= f;
                            }
                            for (b, fp) in fisher_params_others.iter_mut().zip(own_fp) {
                                *b -= fp;
                            }
                        }
                        Some(PenaltyView { fisher_others, fisher_params_others })
                    }
                    _ => None,
                };
                if cfg.reset_optimizer_per_round {
                    opt = cfg.optimizer.build(d);
                }
                let broadcast = ModelParams {
                    values: to_f64_vec(&params),
                    layout: cfg.model.layout(),
                };
                let update = local_train(
                    &cfg.model,
                    &broadcast,
                    shard,
                    &mut opt,
                    &cfg.algo,
                    view.as_ref(),
                    client_id,
                    stream_seed(cfg.master_seed, client_id, round as usize),
                )?;
                let fisher = match (&update.fisher, &update.fisher_times_params) {
                    (Some(f), Some(fp)) => Some(UpdateFisher {
                        fisher: to_f32_vec(&f.values),
                        fisher_times_params: to_f32_vec(fp),
                    }),
                    _ => None,
                };
                own_contrib = fisher
                    .as_ref()
                    .map(|f| (to_f64_vec(&f.fisher), to_f64_vec(&f.fisher_times_params)));
                bytes_sent += write_frame(
                    &mut stream,
                    &Message::Update {
                        client_id: client_id as u32,
                        sample_count: update.sample_count as u32,
                        loss: update.local_loss as f32,
                        params: to_f32_vec(&update.params),
                        fisher,
                    },
                )? as u64;
                rounds_trained += 1;
            }
            Message::RoundDone { round: _, params_digest: digest } => {
                expected_digest = Some(digest);
            }
            Message::Shutdown => break,
            Message::Error { code, message } => {
                return Err(Error::Protocol(format!(
                    "aggregator error (code {code}): {message}"
                )));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected frame type {} mid-session",
                    other.type_byte()
                )));
            }
        }
    }
    Ok(CollaboratorReport { client_id, rounds_trained, bytes_sent, bytes_received })
}
