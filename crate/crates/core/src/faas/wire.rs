use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::terrain::WorldSeed;
use crate::world::{ChunkCoord, GenMode};

use super::{FaasError, FunctionKind};

pub const ERROR_TAG: u8 = 0xFF;
const HEADER: usize = 5;

/// `tag | u32 LE length | payload`.
pub fn encode_frame(tag: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.push(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(u8, &[u8]), FaasError> {
    if bytes.len() < HEADER {
        return Err(FaasError::Malformed(format!("frame of {} bytes", bytes.len())));
    }
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if bytes.len() != HEADER + len {
        return Err(FaasError::Malformed(format!("frame declares {len} bytes, carries {}", bytes.len() - HEADER)));
    }
    Ok((bytes[0], &bytes[HEADER..]))
}

pub fn error_frame(message: &str) -> Vec<u8> {
    encode_frame(ERROR_TAG, message.as_bytes())
}

/// Splits a reply frame into its payload, surfacing remote errors.
pub fn reply_payload(frame: &[u8]) -> Result<Vec<u8>, FaasError> {
    let (tag, payload) = decode_frame(frame)?;
    if tag == ERROR_TAG {
        return Err(FaasError::Remote(String::from_utf8_lossy(payload).into_owned()));
    }
    FunctionKind::from_tag(tag)?;
    Ok(payload.to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "fn")]
    pub function: u8,
    pub body: String,
}

/// JSON envelope used by HTTP gateways.
pub fn to_envelope(frame: &[u8]) -> Result<String, FaasError> {
    let (tag, _) = decode_frame(frame)?;
    let env = Envelope { function: tag, body: STANDARD.encode(frame) };
    serde_json::to_string(&env).map_err(|e| FaasError::Malformed(e.to_string()))
}

pub fn from_envelope(text: &str) -> Result<Vec<u8>, FaasError> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| FaasError::Malformed(e.to_string()))?;
    let frame = STANDARD.decode(env.body.as_bytes()).map_err(|e| FaasError::Malformed(e.to_string()))?;
    let (tag, _) = decode_frame(&frame)?;
    if tag != env.function {
        return Err(FaasError::Malformed(format!("envelope tag {} but frame tag {tag}", env.function)));
    }
    Ok(frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerrainRequest {
    pub seed: WorldSeed,
    pub coord: ChunkCoord,
}

impl TerrainRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17);
        out.extend_from_slice(&self.seed.seed.to_le_bytes());
        out.push(self.seed.mode as u8);
        out.extend_from_slice(&self.coord.cx.to_le_bytes());
        out.extend_from_slice(&self.coord.cz.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FaasError> {
        if bytes.len() != 17 {
            return Err(FaasError::Malformed(format!("terrain request of {} bytes", bytes.len())));
        }
        let seed = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let mode = GenMode::from_tag(bytes[8]).map_err(|e| FaasError::Malformed(e.to_string()))?;
        let cx = i32::from_le_bytes(bytes[9..13].try_into().unwrap());
        let cz = i32::from_le_bytes(bytes[13..17].try_into().unwrap());
        Ok(TerrainRequest { seed: WorldSeed::new(seed, mode), coord: ChunkCoord::new(cx, cz) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout() {
        let f = encode_frame(1, &[9, 8, 7]);
        assert_eq!(f, vec![1, 3, 0, 0, 0, 9, 8, 7]);
        assert_eq!(decode_frame(&f).unwrap(), (1, &[9u8, 8, 7][..]));
        assert!(decode_frame(&f[..7]).is_err());
        assert!(decode_frame(&[1, 0, 0]).is_err());
    }

    #[test]
    fn envelope_round_trip() {
        let f = encode_frame(2, b"payload");
        let text = to_envelope(&f).unwrap();
        assert!(text.contains("\"fn\":2"));
        assert_eq!(from_envelope(&text).unwrap(), f);
        let forged = text.replace("\"fn\":2", "\"fn\":1");
        assert!(from_envelope(&forged).is_err());
    }

    #[test]
    fn error_frames_surface() {
        assert_eq!(reply_payload(&error_frame("boom")), Err(FaasError::Remote("boom".into())));
        assert!(reply_payload(&encode_frame(7, b"")).is_err());
    }

    #[test]
    fn terrain_request_codec() {
        let r = TerrainRequest { seed: WorldSeed::new(u64::MAX - 3, GenMode::Noise), coord: ChunkCoord::new(-4, 99) };
        assert_eq!(TerrainRequest::decode(&r.encode()).unwrap(), r);
        assert!(TerrainRequest::decode(&[0; 16]).is_err());
    }
}
