//! Versioned binary envelope for round traffic.
//!
//! ```text
//! frame    := u32 body_len | body                       (body_len excludes itself)
//! body     := u16 version | u8 kind | u32 round | payload
//! BROADCAST: params | protos
//! UPDATE   : u32 client_id | params | protos | u32 dataset_size
//! SHUTDOWN : (empty)
//! params   := u32 count | count × f64
//! protos   := u16 class_count | u16 dim | class_count × (u16 class | u32 support | dim × f64)
//! ```
//!
//! Every integer and float is little-endian.

use std::io::{Read, Write};

use thiserror::Error;

use crate::prototype::{Owner, PrototypeSet};

pub const WIRE_VERSION: u16 = 1;
/// Largest body accepted from a stream (256 MiB).
pub const MAX_FRAME: u32 = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unsupported wire version {0}")]
    BadMagicVersion(u16),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("{0} does not fit the wire format")]
    TooLarge(&'static str),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Broadcast = 1,
    Update = 2,
    Shutdown = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Broadcast {
        params: Vec<f64>,
        prototypes: PrototypeSet,
    },
    Update {
        client_id: u32,
        params: Vec<f64>,
        prototypes: PrototypeSet,
        dataset_size: u32,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub version: u16,
    pub round: u32,
    pub payload: Payload,
}

impl RoundMessage {
    pub fn broadcast(round: u32, params: Vec<f64>, prototypes: PrototypeSet) -> Self {
        Self {
            version: WIRE_VERSION,
            round,
            payload: Payload::Broadcast { params, prototypes },
        }
    }

    pub fn update(round: u32, client_id: u32, params: Vec<f64>, prototypes: PrototypeSet, dataset_size: u32) -> Self {
        Self {
            version: WIRE_VERSION,
            round,
            payload: Payload::Update {
                client_id,
                params,
                prototypes,
                dataset_size,
            },
        }
    }

    pub fn shutdown(round: u32) -> Self {
        Self {
            version: WIRE_VERSION,
            round,
            payload: Payload::Shutdown,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Broadcast { .. } => MessageKind::Broadcast,
            Payload::Update { .. } => MessageKind::Update,
            Payload::Shutdown => MessageKind::Shutdown,
        }
    }
}

fn put_params(out: &mut Vec<u8>, params: &[f64]) -> Result<(), WireError> {
    let n = u32::try_from(params.len()).map_err(|_| WireError::TooLarge("parameter count"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(())
}

fn put_protos(out: &mut Vec<u8>, set: &PrototypeSet) -> Result<(), WireError> {
    let count = u16::try_from(set.len()).map_err(|_| WireError::TooLarge("class count"))?;
    let dim = u16::try_from(set.dim()).map_err(|_| WireError::TooLarge("prototype dimension"))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (class, proto) in set.iter() {
        let class = u16::try_from(class).map_err(|_| WireError::TooLarge("class id"))?;
        out.extend_from_slice(&class.to_le_bytes());
        out.extend_from_slice(&proto.support.to_le_bytes());
        for v in &proto.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode(msg: &RoundMessage) -> Result<Vec<u8>, WireError> {
    let mut out = vec![0u8; 4];
    out.extend_from_slice(&msg.version.to_le_bytes());
    out.push(msg.kind() as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    match &msg.payload {
        Payload::Broadcast { params, prototypes } => {
            put_params(&mut out, params)?;
            put_protos(&mut out, prototypes)?;
        }
        Payload::Update {
            client_id,
            params,
            prototypes,
            dataset_size,
        } => {
            out.extend_from_slice(&client_id.to_le_bytes());
            put_params(&mut out, params)?;
            put_protos(&mut out, prototypes)?;
            out.extend_from_slice(&dataset_size.to_le_bytes());
        }
        Payload::Shutdown => {}
    }
    let body = u32::try_from(out.len() - 4).map_err(|_| WireError::TooLarge("message"))?;
    out[..4].copy_from_slice(&body.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).ok_or(WireError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(WireError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, WireError> {
        let bytes = self.take(n.checked_mul(8).ok_or(WireError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn params(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.u32()? as usize;
        self.f64s(n)
    }

    fn protos(&mut self, owner: Owner) -> Result<PrototypeSet, WireError> {
        let count = self.u16()?;
        let dim = self.u16()? as usize;
        let mut set = PrototypeSet::empty(owner, dim);
        for _ in 0..count {
            let class = self.u16()? as usize;
            let support = self.u32()?;
            let vector = self.f64s(dim)?;
            set.insert(class, vector, support).expect("vector has dim entries");
        }
        Ok(set)
    }
}

/// Decodes one complete frame; the buffer must hold exactly one message.
pub fn decode(bytes: &[u8]) -> Result<RoundMessage, WireError> {
    let mut head = Reader { buf: bytes, pos: 0 };
    let body_len = head.u32()? as usize;
    let available = bytes.len() - 4;
    if available < body_len {
        return Err(WireError::Truncated);
    }
    if available > body_len {
        return Err(WireError::TrailingBytes(available - body_len));
    }
    let mut r = Reader {
        buf: &bytes[4..],
        pos: 0,
    };
    let version = r.u16()?;
    if version != WIRE_VERSION {
        return Err(WireError::BadMagicVersion(version));
    }
    let kind = r.u8()?;
    let round = r.u32()?;
    let payload = match kind {
        1 => {
            let params = r.params()?;
            let prototypes = r.protos(Owner::Global)?;
            Payload::Broadcast { params, prototypes }
        }
        2 => {
            let client_id = r.u32()?;
            let params = r.params()?;
            let prototypes = r.protos(Owner::Client(client_id))?;
            let dataset_size = r.u32()?;
            Payload::Update {
                client_id,
                params,
                prototypes,
                dataset_size,
            }
        }
        3 => Payload::Shutdown,
        other => return Err(WireError::UnknownKind(other)),
    };
    if r.pos != body_len {
        return Err(WireError::TrailingBytes(body_len - r.pos));
    }
    Ok(RoundMessage {
        version,
        round,
        payload,
    })
}

pub fn write_message<W: Write>(w: &mut W, msg: &RoundMessage) -> Result<(), WireError> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> Result<RoundMessage, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let body_len = u32::from_le_bytes(len);
    if body_len > MAX_FRAME {
        return Err(WireError::FrameTooLarge(body_len));
    }
    let mut frame = vec![0u8; 4 + body_len as usize];
    frame[..4].copy_from_slice(&len);
    r.read_exact(&mut frame[4..])?;
    decode(&frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn protos(owner: Owner) -> PrototypeSet {
        PrototypeSet::from_entries(owner, 3, [(0, vec![1.0, -2.5, f64::MIN_POSITIVE], 4), (7, vec![0.0, -0.0, 1e300], 1)]).unwrap()
    }

    #[test]
    fn empty_broadcast_layout() {
        let msg = RoundMessage::broadcast(1, vec![0.5], PrototypeSet::empty(Owner::Global, 4));
        let bytes = encode(&msg).unwrap();
        // len | version | kind | round | count | 0.5 | class_count | dim
        assert_eq!(bytes.len(), 4 + 2 + 1 + 4 + 4 + 8 + 2 + 2);
        assert_eq!(&bytes[..4], &((bytes.len() - 4) as u32).to_le_bytes());
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[23..25], &[0, 0]);
        assert_eq!(&bytes[25..27], &[4, 0]);
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn update_roundtrip_keeps_owner() {
        let msg = RoundMessage::update(9, 5, vec![1.0, 2.0], protos(Owner::Client(5)), 321);
        let back = decode(&encode(&msg).unwrap()).unwrap();
        assert_eq!(back, msg);
        match back.payload {
            Payload::Update { prototypes, .. } => assert_eq!(prototypes.owner(), Owner::Client(5)),
            _ => panic!("wrong kind"),
        }
        let shut = RoundMessage::shutdown(3);
        assert_eq!(decode(&encode(&shut).unwrap()).unwrap(), shut);
    }

    #[test]
    fn every_truncation_is_reported() {
        for msg in [
            RoundMessage::update(2, 1, vec![0.25; 5], protos(Owner::Client(1)), 10),
            RoundMessage::broadcast(1, vec![], PrototypeSet::empty(Owner::Global, 0)),
            RoundMessage::shutdown(0),
        ] {
            let bytes = encode(&msg).unwrap();
            for cut in 0..bytes.len() {
                assert!(matches!(decode(&bytes[..cut]), Err(WireError::Truncated)), "cut {cut}");
            }
        }
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&RoundMessage::shutdown(0)).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(WireError::TrailingBytes(1))));

        let mut bad_version = encode(&RoundMessage::shutdown(0)).unwrap();
        bad_version[4] = 2;
        assert!(matches!(decode(&bad_version), Err(WireError::BadMagicVersion(2))));

        let mut bad_kind = encode(&RoundMessage::shutdown(0)).unwrap();
        bad_kind[6] = 9;
        assert!(matches!(decode(&bad_kind), Err(WireError::UnknownKind(9))));

        // body_len claims one extra byte that the payload does not use
        let mut padded = encode(&RoundMessage::shutdown(0)).unwrap();
        padded.push(0);
        let n = (padded.len() - 4) as u32;
        padded[..4].copy_from_slice(&n.to_le_bytes());
        assert!(matches!(decode(&padded), Err(WireError::TrailingBytes(1))));
    }

    #[test]
    fn stream_framing() {
        let a = RoundMessage::broadcast(1, vec![1.0, 2.0], protos(Owner::Global));
        let b = RoundMessage::shutdown(2);
        let mut buf = Vec::new();
        write_message(&mut buf, &a).unwrap();
        write_message(&mut buf, &b).unwrap();
        let mut cur = std::io::Cursor::new(buf);
        assert_eq!(read_message(&mut cur).unwrap(), a);
        assert_eq!(read_message(&mut cur).unwrap(), b);
        assert!(matches!(read_message(&mut cur), Err(WireError::Io(_))));
    }

    proptest! {
        #[test]
        fn random_messages_roundtrip_bit_exact(
            round in any::<u32>(),
            client in any::<u32>(),
            size in any::<u32>(),
            params in prop::collection::vec(any::<f64>(), 0..20),
            classes in prop::collection::btree_map(0usize..50, (prop::collection::vec(any::<f64>(), 2), any::<u32>()), 0..6),
            broadcast in any::<bool>(),
        ) {
            let owner = if broadcast { Owner::Global } else { Owner::Client(client) };
            let set = PrototypeSet::from_entries(owner, 2, classes.into_iter().map(|(c, (v, s))| (c, v, s))).unwrap();
            let msg = if broadcast {
                RoundMessage::broadcast(round, params, set)
            } else {
                RoundMessage::update(round, client, params, set, size)
            };
            let bytes = encode(&msg).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            prop_assert_eq!(back.kind(), msg.kind());
        }
    }
}
