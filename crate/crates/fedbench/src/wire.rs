//! Binary frame codec for the aggregator/collaborator protocol.
//!
//! Every frame is `u32` big-endian payload length, one type byte, then the
//! payload. Numeric arrays travel as `f32` little-endian; counts and ids as
//! `u32` big-endian; digests as `u64` big-endian. The codec is pure — socket
//! handling lives in the netlink module — and strict: a decoded frame must
//! account for every payload byte or it is rejected.
//!
//! Frame types:
//!
//! | type | name       | payload |
//! |------|------------|---------|
//! | 1    | JOIN       | client_id, dim, version byte |
//! | 2    | JOIN_ACK   | shard digest |
//! | 3    | MODEL      | round, dim, params ⟦, fisher sum, fisher·params sum⟧ |
//! | 4    | UPDATE     | client_id, sample_count, loss, flags, params ⟦, fisher, fisher·params⟧ |
//! | 5    | ROUND_DONE | round, aggregated-params digest |
//! | 6    | SHUTDOWN   | empty |
//! | 7    | ERROR      | code byte, UTF-8 message |

use crate::{Error, Result};

pub const PROTOCOL_VERSION: u8 = 1;

/// Hard cap on declared payload length; anything above is rejected before
/// allocation.
pub const MAX_PAYLOAD: u32 = 1 << 31;

pub const FRAME_HEADER: usize = 5; // 4 length bytes + 1 type byte

const TYPE_JOIN: u8 = 1;
const TYPE_JOIN_ACK: u8 = 2;
const TYPE_MODEL: u8 = 3;
const TYPE_UPDATE: u8 = 4;
const TYPE_ROUND_DONE: u8 = 5;
const TYPE_SHUTDOWN: u8 = 6;
const TYPE_ERROR: u8 = 7;

/// Sums of everyone's Fisher vectors riding along with a model broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPenalty {
    pub fisher_sum: Vec<f32>,
    pub fisher_params_sum: Vec<f32>,
}

/// A client's Fisher diagonal and its product with the local parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateFisher {
    pub fisher: Vec<f32>,
    pub fisher_times_params: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join {
        client_id: u32,
        dim: u32,
        version: u8,
    },
    JoinAck {
        shard_digest: u64,
    },
    Model {
        round: u32,
        params: Vec<f32>,
        penalty: Option<ModelPenalty>,
    },
    Update {
        client_id: u32,
        sample_count: u32,
        loss: f32,
        params: Vec<f32>,
        fisher: Option<UpdateFisher>,
    },
    RoundDone {
        round: u32,
        params_digest: u64,
    },
    Shutdown,
    Error {
        code: u8,
        message: String,
    },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Join { .. } => TYPE_JOIN,
            Message::JoinAck { .. } => TYPE_JOIN_ACK,
            Message::Model { .. } => TYPE_MODEL,
            Message::Update { .. } => TYPE_UPDATE,
            Message::RoundDone { .. } => TYPE_ROUND_DONE,
            Message::Shutdown => TYPE_SHUTDOWN,
            Message::Error { .. } => TYPE_ERROR,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_f32_array(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a message into a complete frame (header plus payload).
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::Join {
            client_id,
            dim,
            version,
        } => {
            put_u32(&mut payload, *client_id);
            put_u32(&mut payload, *dim);
            payload.push(*version);
        }
        Message::JoinAck { shard_digest } => {
            put_u64(&mut payload, *shard_digest);
        }
        Message::Model {
            round,
            params,
            penalty,
        } => {
            put_u32(&mut payload, *round);
            put_u32(&mut payload, params.len() as u32);
            put_f32_array(&mut payload, params);
            if let Some(p) = penalty {
                put_f32_array(&mut payload, &p.fisher_sum);
                put_f32_array(&mut payload, &p.fisher_params_sum);
            }
        }
        Message::Update {
            client_id,
            sample_count,
            loss,
            params,
            fisher,
        } => {
            put_u32(&mut payload, *client_id);
            put_u32(&mut payload, *sample_count);
            payload.extend_from_slice(&loss.to_le_bytes());
            payload.push(u8::from(fisher.is_some()));
            put_u32(&mut payload, params.len() as u32);
            put_f32_array(&mut payload, params);
            if let Some(f) = fisher {
                put_u32(&mut payload, f.fisher.len() as u32);
                put_f32_array(&mut payload, &f.fisher);
                put_u32(&mut payload, f.fisher_times_params.len() as u32);
                put_f32_array(&mut payload, &f.fisher_times_params);
            }
        }
        Message::RoundDone {
            round,
            params_digest,
        } => {
            put_u32(&mut payload, *round);
            put_u64(&mut payload, *params_digest);
        }
        Message::Shutdown => {}
        Message::Error { code, message } => {
            payload.push(*code);
            payload.extend_from_slice(message.as_bytes());
        }
    }
    assert!(
        payload.len() as u64 <= MAX_PAYLOAD as u64,
        "payload of {} bytes exceeds the frame limit",
        payload.len()
    );
    let mut frame = Vec::with_capacity(FRAME_HEADER + payload.len());
    put_u32(&mut frame, payload.len() as u32);
    frame.push(msg.type_byte());
    frame.extend_from_slice(&payload);
    frame
}

/// Byte-slice cursor with length-checked reads.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Protocol("payload shorter than its structure".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_array(&mut self, count: u32) -> Result<Vec<f32>> {
        let n = count as usize;
        // length-check before allocating so a hostile count cannot balloon
        if self.bytes.len() - self.pos < n.saturating_mul(4) {
            return Err(Error::Protocol(format!(
                "declared array of {n} floats does not fit in the payload"
            )));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32()?);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} unexplained trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decodes one payload of a known frame type.
pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message> {
    let mut r = Reader::new(payload);
    let msg = match msg_type {
        TYPE_JOIN => Message::Join {
            client_id: r.u32()?,
            dim: r.u32()?,
            version: r.u8()?,
        },
        TYPE_JOIN_ACK => Message::JoinAck {
            shard_digest: r.u64()?,
        },
        TYPE_MODEL => {
            let round = r.u32()?;
            let dim = r.u32()?;
            let params = r.f32_array(dim)?;
            // either the params stand alone or exactly two more arrays of
            // the same length follow; with dim = 0 the two forms coincide,
            // so an empty penalty block decodes as absent
            let penalty = if r.pos == payload.len() {
                None
            } else {
                Some(ModelPenalty {
                    fisher_sum: r.f32_array(dim)?,
                    fisher_params_sum: r.f32_array(dim)?,
                })
            };
            Message::Model {
                round,
                params,
                penalty,
            }
        }
        TYPE_UPDATE => {
            let client_id = r.u32()?;
            let sample_count = r.u32()?;
            let loss = r.f32()?;
            let flags = r.u8()?;
            if flags > 1 {
                return Err(Error::Protocol(format!("unknown update flags {flags:#04x}")));
            }
            let dim = r.u32()?;
            let params = r.f32_array(dim)?;
            let fisher = if flags & 1 == 1 {
                let fisher_len = r.u32()?;
                if fisher_len != dim {
                    return Err(Error::Protocol(format!(
                        "fisher length {fisher_len} disagrees with parameter length {dim}"
                    )));
                }
                let fisher = r.f32_array(fisher_len)?;
                let product_len = r.u32()?;
                if product_len != dim {
                    return Err(Error::Protocol(format!(
                        "fisher-product length {product_len} disagrees with parameter length {dim}"
                    )));
                }
                let fisher_times_params = r.f32_array(product_len)?;
                Some(UpdateFisher {
                    fisher,
                    fisher_times_params,
                })
            } else {
                None
            };
            Message::Update {
                client_id,
                sample_count,
                loss,
                params,
                fisher,
            }
        }
        TYPE_ROUND_DONE => Message::RoundDone {
            round: r.u32()?,
            params_digest: r.u64()?,
        },
        TYPE_SHUTDOWN => Message::Shutdown,
        TYPE_ERROR => {
            let code = r.u8()?;
            let raw = r.take(payload.len() - 1)?;
            let message = std::str::from_utf8(raw)
                .map_err(|_| Error::Protocol("error message is not valid UTF-8".into()))?
                .to_string();
            Message::Error { code, message }
        }
        other => {
            return Err(Error::Protocol(format!("unknown frame type {other}")));
        }
    };
    r.finish()?;
    Ok(msg)
}

/// Decodes the frame at the front of `bytes`, returning the message and the
/// number of bytes consumed. Fails on truncation, oversized declarations,
/// unknown types, and payloads whose length disagrees with their structure.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize)> {
    if bytes.len() < FRAME_HEADER {
        return Err(Error::Protocol(format!(
            "frame header needs {FRAME_HEADER} bytes, got {}",
            bytes.len()
        )));
    }
    let length = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if length > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "declared payload of {length} bytes exceeds the {MAX_PAYLOAD} limit"
        )));
    }
    let total = FRAME_HEADER + length as usize;
    if bytes.len() < total {
        return Err(Error::Protocol(format!(
            "frame truncated: header promises {total} bytes, got {}",
            bytes.len()
        )));
    }
    let msg = decode_payload(bytes[4], &bytes[FRAME_HEADER..total])?;
    Ok((msg, total))
}

/// Total frame size of a model broadcast for `d` parameters.
pub fn model_frame_len(d: usize, with_penalty: bool) -> usize {
    FRAME_HEADER + 8 + 4 * d + if with_penalty { 8 * d } else { 0 }
}

/// Total frame size of a client update for `d` parameters.
pub fn update_frame_len(d: usize, with_fisher: bool) -> usize {
    FRAME_HEADER + 17 + 4 * d + if with_fisher { 8 + 8 * d } else { 0 }
}

pub fn round_done_frame_len() -> usize {
    FRAME_HEADER + 12
}

/// Widens decoded wire floats back to the working precision.
pub fn to_f64_vec(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Narrows working-precision values to wire floats.
pub fn to_f32_vec(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Applies the exact precision loss a wire round-trip would: `f64 → f32 →
/// f64`. The in-process engine uses this to mirror networked runs.
pub fn quantize_f64(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v as f32 as f64).collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(state: u64, bytes: &[u8]) -> u64 {
    let mut hash = state;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Digest of a client's shard assignment, checked at JOIN time so both ends
/// agree on which samples the client trains on.
pub fn shard_digest(client_id: u32, indices: &[usize]) -> u64 {
    let mut hash = fnv1a64(FNV_OFFSET, &client_id.to_be_bytes());
    for &idx in indices {
        hash = fnv1a64(hash, &(idx as u64).to_be_bytes());
    }
    hash
}

/// Digest of a parameter vector as it would appear on the wire.
pub fn params_digest(params: &[f32]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &p in params {
        hash = fnv1a64(hash, &p.to_le_bytes());
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(msg: &Message) {
        let frame = encode_frame(msg);
        let (back, consumed) = decode_frame(&frame).unwrap();
        assert_eq!(consumed, frame.len());
        assert_eq!(&back, msg);
    }

    #[test]
    fn shutdown_is_five_zero_prefixed_bytes() {
        assert_eq!(encode_frame(&Message::Shutdown), vec![0, 0, 0, 0, 6]);
        roundtrip(&Message::Shutdown);
    }

    #[test]
    fn model_frame_matches_handwritten_bytes() {
        let msg = Message::Model {
            round: 3,
            params: vec![1.0, -1.0],
            penalty: None,
        };
        let frame = encode_frame(&msg);
        let expected = [
            0x00, 0x00, 0x00, 0x10, // payload length 16
            0x03, // MODEL
            0x00, 0x00, 0x00, 0x03, // round 3
            0x00, 0x00, 0x00, 0x02, // dim 2
            0x00, 0x00, 0x80, 0x3F, // 1.0f32 little-endian
            0x00, 0x00, 0x80, 0xBF, // -1.0f32 little-endian
        ];
        assert_eq!(frame, expected);
        roundtrip(&msg);
    }

    #[test]
    fn every_message_kind_round_trips() {
        let messages = [
            Message::Join { client_id: 7, dim: 314, version: PROTOCOL_VERSION },
            Message::JoinAck { shard_digest: 0xDEAD_BEEF_0123_4567 },
            Message::Model {
                round: 12,
                params: vec![0.5, -2.25, 3.75],
                penalty: Some(ModelPenalty {
                    fisher_sum: vec![0.125, 0.0, 1.5],
                    fisher_params_sum: vec![-0.5, 0.25, 0.0],
                }),
            },
            Message::Update {
                client_id: 2,
                sample_count: 100,
                loss: 1.5,
                params: vec![9.0, -8.5],
                fisher: Some(UpdateFisher {
                    fisher: vec![0.25, 0.75],
                    fisher_times_params: vec![2.25, -6.375],
                }),
            },
            Message::Update {
                client_id: 0,
                sample_count: 1,
                loss: 0.0,
                params: vec![],
                fisher: None,
            },
            Message::RoundDone { round: 9, params_digest: 42 },
            Message::Error { code: 2, message: "client 3 already joined".into() },
            Message::Error { code: 0, message: String::new() },
        ];
        for msg in &messages {
            roundtrip(msg);
        }
    }

    #[test]
    fn unknown_type_rejected() {
        let mut frame = encode_frame(&Message::Shutdown);
        frame[4] = 99;
        assert!(matches!(decode_frame(&frame), Err(Error::Protocol(_))));
        frame[4] = 0;
        assert!(decode_frame(&frame).is_err());
    }

    #[test]
    fn every_strict_prefix_of_a_frame_fails_cleanly() {
        let msg = Message::Update {
            client_id: 5,
            sample_count: 10,
            loss: 2.5,
            params: vec![1.0, 2.0, 3.0],
            fisher: Some(UpdateFisher {
                fisher: vec![0.1, 0.2, 0.3],
                fisher_times_params: vec![0.1, 0.4, 0.9],
            }),
        };
        let frame = encode_frame(&msg);
        for cut in 0..frame.len() {
            assert!(
                decode_frame(&frame[..cut]).is_err(),
                "prefix of {cut} bytes decoded"
            );
        }
    }

    #[test]
    fn payload_length_must_match_structure() {
        // JOIN payload is exactly 9 bytes; pad one and the decoder must balk
        let mut frame = encode_frame(&Message::Join { client_id: 1, dim: 4, version: 1 });
        frame.push(0xAA);
        let len = (frame.len() - FRAME_HEADER) as u32;
        frame[0..4].copy_from_slice(&len.to_be_bytes());
        let err = decode_frame(&frame).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn hostile_array_count_rejected_without_allocation() {
        // an UPDATE declaring u32::MAX parameters in a tiny payload
        let mut payload = Vec::new();
        payload.extend_from_slice(&1u32.to_be_bytes());
        payload.extend_from_slice(&1u32.to_be_bytes());
        payload.extend_from_slice(&1.0f32.to_le_bytes());
        payload.push(0);
        payload.extend_from_slice(&u32::MAX.to_be_bytes());
        let msg = decode_payload(TYPE_UPDATE, &payload);
        assert!(msg.is_err());
    }

    #[test]
    fn oversized_length_field_rejected() {
        let mut frame = vec![0xFF, 0xFF, 0xFF, 0xFF, TYPE_SHUTDOWN];
        frame.extend_from_slice(&[0; 16]);
        let err = decode_frame(&frame).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn update_fisher_length_mismatch_rejected() {
        let good = Message::Update {
            client_id: 1,
            sample_count: 2,
            loss: 0.5,
            params: vec![1.0, 2.0],
            fisher: Some(UpdateFisher {
                fisher: vec![0.1, 0.2],
                fisher_times_params: vec![0.1, 0.4],
            }),
        };
        let mut frame = encode_frame(&good);
        // corrupt the declared fisher length (just after flags + params)
        let fisher_len_offset = FRAME_HEADER + 4 + 4 + 4 + 1 + 4 + 8;
        frame[fisher_len_offset..fisher_len_offset + 4].copy_from_slice(&3u32.to_be_bytes());
        assert!(decode_frame(&frame).is_err());
    }

    #[test]
    fn model_with_penalty_length_is_checked() {
        let msg = Message::Model {
            round: 1,
            params: vec![1.0, 2.0],
            penalty: Some(ModelPenalty {
                fisher_sum: vec![0.0, 0.0],
                fisher_params_sum: vec![0.0, 0.0],
            }),
        };
        let mut frame = encode_frame(&msg);
        // chop 4 bytes off the tail and fix the length field: the penalty
        // block is now incomplete
        frame.truncate(frame.len() - 4);
        let len = (frame.len() - FRAME_HEADER) as u32;
        frame[0..4].copy_from_slice(&len.to_be_bytes());
        assert!(decode_frame(&frame).is_err());
    }

    #[test]
    fn closed_form_lengths_match_encoded_frames() {
        for d in [0usize, 1, 2, 10, 314, 1000] {
            let params = vec![0.5f32; d];
            let plain = Message::Model { round: 1, params: params.clone(), penalty: None };
            assert_eq!(encode_frame(&plain).len(), model_frame_len(d, false), "model d={d}");
            let with = Message::Model {
                round: 1,
                params: params.clone(),
                penalty: Some(ModelPenalty {
                    fisher_sum: params.clone(),
                    fisher_params_sum: params.clone(),
                }),
            };
            assert_eq!(encode_frame(&with).len(), model_frame_len(d, true));
            let update = Message::Update {
                client_id: 1,
                sample_count: 5,
                loss: 0.0,
                params: params.clone(),
                fisher: None,
            };
            assert_eq!(encode_frame(&update).len(), update_frame_len(d, false));
            let update_fisher = Message::Update {
                client_id: 1,
                sample_count: 5,
                loss: 0.0,
                params: params.clone(),
                fisher: Some(UpdateFisher {
                    fisher: params.clone(),
                    fisher_times_params: params,
                }),
            };
            assert_eq!(encode_frame(&update_fisher).len(), update_frame_len(d, true));
        }
        assert_eq!(
            encode_frame(&Message::RoundDone { round: 1, params_digest: 0 }).len(),
            round_done_frame_len()
        );
    }

    #[test]
    fn uplink_ratio_with_fisher_is_close_to_three() {
        for d in [1000usize, 7850, 100_000] {
            let ratio = update_frame_len(d, true) as f64 / update_frame_len(d, false) as f64;
            assert!((2.9..=3.1).contains(&ratio), "d={d}: ratio {ratio}");
        }
    }

    #[test]
    fn digests_are_order_sensitive_and_stable() {
        let a = shard_digest(0, &[1, 2, 3]);
        let b = shard_digest(0, &[3, 2, 1]);
        let c = shard_digest(1, &[1, 2, 3]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, shard_digest(0, &[1, 2, 3]));

        let p = params_digest(&[1.0, 2.0]);
        assert_ne!(p, params_digest(&[2.0, 1.0]));
        assert_eq!(p, params_digest(&[1.0, 2.0]));
    }

    #[test]
    fn quantization_round_trip() {
        let values = [0.1f64, -3.25, 1e-20, 7.0];
        let quantized = quantize_f64(&values);
        assert_eq!(quantized[1], -3.25); // exactly representable
        assert_eq!(quantized[3], 7.0);
        assert_ne!(quantized[0], 0.1); // 0.1 is not an f32 value
        assert!((quantized[0] - 0.1).abs() < 1e-7);
        // idempotent
        assert_eq!(quantize_f64(&quantized), quantized);
        assert_eq!(to_f64_vec(&to_f32_vec(&values)), quantized);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_f32_vec(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(proptest::num::f32::ANY, 0..max_len)
        }

        fn arb_message() -> impl Strategy<Value = Message> {
            prop_oneof![
                (any::<u32>(), any::<u32>(), any::<u8>())
                    .prop_map(|(client_id, dim, version)| Message::Join { client_id, dim, version }),
                any::<u64>().prop_map(|shard_digest| Message::JoinAck { shard_digest }),
                (any::<u32>(), arb_f32_vec(64), proptest::bool::ANY).prop_flat_map(
                    |(round, params, with_penalty)| {
                        let d = params.len();
                        (
                            Just(round),
                            Just(params),
                            // d = 0 cannot carry a penalty block on the wire
                            if with_penalty && d > 0 {
                                (arb_vec_exact(d), arb_vec_exact(d))
                                    .prop_map(|(fisher_sum, fisher_params_sum)| Some(ModelPenalty {
                                        fisher_sum,
                                        fisher_params_sum,
                                    }))
                                    .boxed()
                            } else {
                                Just(None).boxed()
                            },
                        )
                            .prop_map(|(round, params, penalty)| Message::Model {
                                round,
                                params,
                                penalty,
                            })
                    }
                ),
                (any::<u32>(), any::<u32>(), any::<f32>(), arb_f32_vec(64), proptest::bool::ANY)
                    .prop_flat_map(|(client_id, sample_count, loss, params, with_fisher)| {
                        let d = params.len();
                        (
                            Just((client_id, sample_count, loss)),
                            Just(params),
                            if with_fisher {
                                (arb_vec_exact(d), arb_vec_exact(d))
                                    .prop_map(|(fisher, fisher_times_params)| Some(UpdateFisher {
                                        fisher,
                                        fisher_times_params,
                                    }))
                                    .boxed()
                            } else {
                                Just(None).boxed()
                            },
                        )
                            .prop_map(|((client_id, sample_count, loss), params, fisher)| {
                                Message::Update { client_id, sample_count, loss, params, fisher }
                            })
                    }),
                (any::<u32>(), any::<u64>())
                    .prop_map(|(round, params_digest)| Message::RoundDone { round, params_digest }),
                Just(Message::Shutdown),
                (any::<u8>(), ".{0,40}")
                    .prop_map(|(code, message)| Message::Error { code, message }),
            ]
        }

        fn arb_vec_exact(len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(proptest::num::f32::ANY, len..=len)
        }

        fn bits_equal(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }

        /// NaN-tolerant equality: the codec must preserve bit patterns even
        /// for payloads full of NaNs, where PartialEq would lie.
        fn messages_equal(a: &Message, b: &Message) -> bool {
            match (a, b) {
                (
                    Message::Model { round: r1, params: p1, penalty: q1 },
                    Message::Model { round: r2, params: p2, penalty: q2 },
                ) => {
                    r1 == r2
                        && bits_equal(p1, p2)
                        && match (q1, q2) {
                            (None, None) => true,
                            (Some(x), Some(y)) => {
                                bits_equal(&x.fisher_sum, &y.fisher_sum)
                                    && bits_equal(&x.fisher_params_sum, &y.fisher_params_sum)
                            }
                            _ => false,
                        }
                }
                (
                    Message::Update { client_id: c1, sample_count: n1, loss: l1, params: p1, fisher: f1 },
                    Message::Update { client_id: c2, sample_count: n2, loss: l2, params: p2, fisher: f2 },
                ) => {
                    c1 == c2
                        && n1 == n2
                        && l1.to_bits() == l2.to_bits()
                        && bits_equal(p1, p2)
                        && match (f1, f2) {
                            (None, None) => true,
                            (Some(x), Some(y)) => {
                                bits_equal(&x.fisher, &y.fisher)
                                    && bits_equal(&x.fisher_times_params, &y.fisher_times_params)
                            }
                            _ => false,
                        }
                }
                _ => a == b,
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn random_messages_round_trip(msg in arb_message()) {
                let frame = encode_frame(&msg);
                let (back, consumed) = decode_frame(&frame).unwrap();
                prop_assert_eq!(consumed, frame.len());
                prop_assert!(messages_equal(&back, &msg));
            }

            #[test]
            fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
                let _ = decode_frame(&bytes);
            }

            #[test]
            fn prefixes_always_error(msg in arb_message(), frac in 0.0f64..1.0) {
                let frame = encode_frame(&msg);
                let cut = ((frame.len() as f64) * frac) as usize;
                if cut < frame.len() {
                    prop_assert!(decode_frame(&frame[..cut]).is_err());
                }
            }
        }
    }
}
