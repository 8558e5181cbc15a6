//! In-simulator wire protocol.
//!
//! Connections carry frames: data units and the two control markers that
//! frame a window (`WindowEnd`) and a routing generation (`Epoch`). The
//! byte layout is fixed so that link byte counters and trace dumps are
//! exact:
//!
//! * unit frame: key (8 bytes, big-endian), timestamp (8), seq (8),
//!   payload length (4), payload bytes
//! * `WINDOW_END` marker: window index (8 bytes)
//! * `EPOCH` marker: epoch (4 bytes)

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{DataUnit, Key, SequenceId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    Unit(DataUnit),
    /// Sent once per connection after the last unit of a window.
    WindowEnd { window: u64 },
    /// Marks a routing-epoch change; data after this marker on the same
    /// connection was routed under the new epoch.
    Epoch { epoch: u32 },
}

impl Frame {
    pub fn is_unit(&self) -> bool {
        matches!(self, Frame::Unit(_))
    }

    /// Exact size of the encoded frame in bytes.
    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Unit(u) => 8 + 8 + 8 + 4 + u.payload.len(),
            Frame::WindowEnd { .. } => 8,
            Frame::Epoch { .. } => 4,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Unit(u) => {
                out.extend_from_slice(&u.key.0.to_be_bytes());
                out.extend_from_slice(&u.timestamp.to_be_bytes());
                out.extend_from_slice(&u.seq.0.to_be_bytes());
                out.extend_from_slice(&(u.payload.len() as u32).to_be_bytes());
                out.extend_from_slice(&u.payload);
            }
            Frame::WindowEnd { window } => out.extend_from_slice(&window.to_be_bytes()),
            Frame::Epoch { epoch } => out.extend_from_slice(&epoch.to_be_bytes()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes a unit frame. Inverse of `encode` for `Frame::Unit`.
    pub fn decode_unit(bytes: &[u8]) -> Option<DataUnit> {
        if bytes.len() < 28 {
            return None;
        }
        let key = u64::from_be_bytes(bytes[0..8].try_into().ok()?);
        let timestamp = u64::from_be_bytes(bytes[8..16].try_into().ok()?);
        let seq = u64::from_be_bytes(bytes[16..24].try_into().ok()?);
        let len = u32::from_be_bytes(bytes[24..28].try_into().ok()?) as usize;
        if bytes.len() != 28 + len {
            return None;
        }
        Some(DataUnit {
            key: Key(key),
            timestamp,
            seq: SequenceId(seq),
            payload: bytes[28..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_frame_layout_is_exact() {
        let u = DataUnit {
            key: Key(0x0102030405060708),
            timestamp: 9,
            seq: SequenceId(0xA1B2),
            payload: alloc::vec![0xDE, 0xAD],
        };
        let f = Frame::Unit(u.clone());
        let bytes = f.encode();
        assert_eq!(bytes.len(), f.encoded_len());
        assert_eq!(bytes.len(), 30);
        assert_eq!(&bytes[0..8], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&bytes[8..16], &9u64.to_be_bytes());
        assert_eq!(&bytes[16..24], &0xA1B2u64.to_be_bytes());
        assert_eq!(&bytes[24..28], &2u32.to_be_bytes());
        assert_eq!(&bytes[28..], &[0xDE, 0xAD]);
        assert_eq!(Frame::decode_unit(&bytes), Some(u));
    }

    #[test]
    fn marker_sizes() {
        assert_eq!(Frame::WindowEnd { window: 3 }.encoded_len(), 8);
        assert_eq!(Frame::Epoch { epoch: 1 }.encoded_len(), 4);
        assert_eq!(Frame::WindowEnd { window: 3 }.encode(), 3u64.to_be_bytes());
        assert_eq!(Frame::Epoch { epoch: 7 }.encode(), 7u32.to_be_bytes());
    }

    #[test]
    fn truncated_unit_frames_are_rejected() {
        let u = DataUnit {
            key: Key(1),
            timestamp: 0,
            seq: SequenceId(0),
            payload: alloc::vec![1, 2, 3],
        };
        let bytes = Frame::Unit(u).encode();
        assert!(Frame::decode_unit(&bytes[..bytes.len() - 1]).is_none());
        assert!(Frame::decode_unit(&bytes[..10]).is_none());
    }
}
