//! Bot wire protocol.
//!
//! Every frame is `u32 LE length | u8 tag | payload`, where the length
//! counts the tag and the payload.

use std::io::{self, Read, Write};
use std::sync::Arc;

use crate::world::{Block, BlockPos, BlockType, CodecError, PlayerId, Reader};

pub const MAX_FRAME: usize = 16 << 20;
pub const MIN_SPEED: u8 = 1;
pub const MAX_SPEED: u8 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionKind {
    /// Walk in a straight line to the centre of `target`'s column.
    Move { target: BlockPos, speed: u8 },
    Break { pos: BlockPos },
    Place { pos: BlockPos, kind: BlockType },
    Stand { ticks: u32 },
    Chat { text: String },
    SetInventory { item: u16 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlayerAction {
    pub player_id: PlayerId,
    pub client_tick: u64,
    pub kind: ActionKind,
}

impl PlayerAction {
    pub fn validate(&self) -> Result<(), CodecError> {
        match &self.kind {
            ActionKind::Move { speed, .. } if !(MIN_SPEED..=MAX_SPEED).contains(speed) => {
                Err(CodecError::Invalid(format!("move speed {speed} outside {MIN_SPEED}..={MAX_SPEED}")))
            }
            ActionKind::Chat { text } if text.len() > u16::MAX as usize => Err(CodecError::Invalid("chat too long".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientMsg {
    Join { name: String },
    Action(PlayerAction),
    Leave,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServerMsg {
    Welcome { player_id: PlayerId, tick_rate: u32, spawn: BlockPos },
    ChunkData(Arc<[u8]>),
    /// Block changes within one chunk during one tick.
    BlockChange(Arc<[(BlockPos, Block)]>),
    AvatarPositions { tick: u64, avatars: Arc<[(PlayerId, BlockPos)]> },
    Chat { from: PlayerId, text: String },
    Refused { reason: String },
}

fn put_pos(out: &mut Vec<u8>, p: &BlockPos) {
    for v in [p.x, p.y, p.z] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_pos(r: &mut Reader) -> Result<BlockPos, CodecError> {
    Ok(BlockPos::new(r.i32()?, r.i32()?, r.i32()?))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let b = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

fn get_str(r: &mut Reader) -> Result<String, CodecError> {
    let n = r.u16()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CodecError::Invalid(e.to_string()))
}

fn finish(r: Reader) -> Result<(), CodecError> {
    if r.rest().is_empty() {
        Ok(())
    } else {
        Err(CodecError::Invalid(format!("{} trailing bytes", r.rest().len())))
    }
}

fn encode_action(a: &PlayerAction, out: &mut Vec<u8>) {
    out.extend_from_slice(&a.player_id.to_le_bytes());
    out.extend_from_slice(&a.client_tick.to_le_bytes());
    match &a.kind {
        ActionKind::Move { target, speed } => {
            out.push(0);
            put_pos(out, target);
            out.push(*speed);
        }
        ActionKind::Break { pos } => {
            out.push(1);
            put_pos(out, pos);
        }
        ActionKind::Place { pos, kind } => {
            out.push(2);
            put_pos(out, pos);
            out.push(*kind as u8);
        }
        ActionKind::Stand { ticks } => {
            out.push(3);
            out.extend_from_slice(&ticks.to_le_bytes());
        }
        ActionKind::Chat { text } => {
            out.push(4);
            put_str(out, text);
        }
        ActionKind::SetInventory { item } => {
            out.push(5);
            out.extend_from_slice(&item.to_le_bytes());
        }
    }
}

fn decode_action(r: &mut Reader) -> Result<PlayerAction, CodecError> {
    let player_id = r.u32()?;
    let client_tick = r.u64()?;
    let kind = match r.u8()? {
        0 => ActionKind::Move { target: get_pos(r)?, speed: r.u8()? },
        1 => ActionKind::Break { pos: get_pos(r)? },
        2 => ActionKind::Place { pos: get_pos(r)?, kind: BlockType::from_tag(r.u8()?)? },
        3 => ActionKind::Stand { ticks: r.u32()? },
        4 => ActionKind::Chat { text: get_str(r)? },
        5 => ActionKind::SetInventory { item: r.u16()? },
        t => return Err(CodecError::Invalid(format!("unknown action tag {t}"))),
    };
    let a = PlayerAction { player_id, client_tick, kind };
    a.validate()?;
    Ok(a)
}

impl ClientMsg {
    pub fn tag(&self) -> u8 {
        match self {
            ClientMsg::Join { .. } => 0x01,
            ClientMsg::Action(_) => 0x02,
            ClientMsg::Leave => 0x03,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ClientMsg::Join { name } => put_str(&mut out, name),
            ClientMsg::Action(a) => encode_action(a, &mut out),
            ClientMsg::Leave => {}
        }
        out
    }

    pub fn decode(tag: u8, payload: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(payload);
        let msg = match tag {
            0x01 => ClientMsg::Join { name: get_str(&mut r)? },
            0x02 => ClientMsg::Action(decode_action(&mut r)?),
            0x03 => ClientMsg::Leave,
            t => return Err(CodecError::Invalid(format!("unknown client message tag {t:#x}"))),
        };
        finish(r)?;
        Ok(msg)
    }
}

impl ServerMsg {
    pub fn tag(&self) -> u8 {
        match self {
            ServerMsg::Welcome { .. } => 0x81,
            ServerMsg::ChunkData(_) => 0x82,
            ServerMsg::BlockChange(_) => 0x83,
            ServerMsg::AvatarPositions { .. } => 0x84,
            ServerMsg::Chat { .. } => 0x85,
            ServerMsg::Refused { .. } => 0x86,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ServerMsg::Welcome { player_id, tick_rate, spawn } => {
                out.extend_from_slice(&player_id.to_le_bytes());
                out.extend_from_slice(&tick_rate.to_le_bytes());
                put_pos(&mut out, spawn);
            }
            ServerMsg::ChunkData(bytes) => out.extend_from_slice(bytes),
            ServerMsg::BlockChange(changes) => {
                out.extend_from_slice(&(changes.len() as u32).to_le_bytes());
                for (p, b) in changes.iter() {
                    put_pos(&mut out, p);
                    out.push(b.kind as u8);
                    out.push(b.power);
                }
            }
            ServerMsg::AvatarPositions { tick, avatars } => {
                out.extend_from_slice(&tick.to_le_bytes());
                out.extend_from_slice(&(avatars.len() as u32).to_le_bytes());
                for (id, p) in avatars.iter() {
                    out.extend_from_slice(&id.to_le_bytes());
                    put_pos(&mut out, p);
                }
            }
            ServerMsg::Chat { from, text } => {
                out.extend_from_slice(&from.to_le_bytes());
                put_str(&mut out, text);
            }
            ServerMsg::Refused { reason } => put_str(&mut out, reason),
        }
        out
    }

    pub fn decode(tag: u8, payload: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(payload);
        let msg = match tag {
            0x81 => ServerMsg::Welcome { player_id: r.u32()?, tick_rate: r.u32()?, spawn: get_pos(&mut r)? },
            0x82 => return Ok(ServerMsg::ChunkData(payload.into())),
            0x83 => {
                let n = r.u32()? as usize;
                let mut v = Vec::with_capacity(n.min(payload.len() / 14));
                for _ in 0..n {
                    let p = get_pos(&mut r)?;
                    v.push((p, Block::decode(r.u8()?, r.u8()?)?));
                }
                ServerMsg::BlockChange(v.into())
            }
            0x84 => {
                let tick = r.u64()?;
                let n = r.u32()? as usize;
                let mut v = Vec::with_capacity(n.min(payload.len() / 16));
                for _ in 0..n {
                    v.push((r.u32()?, get_pos(&mut r)?));
                }
                ServerMsg::AvatarPositions { tick, avatars: v.into() }
            }
            0x85 => ServerMsg::Chat { from: r.u32()?, text: get_str(&mut r)? },
            0x86 => ServerMsg::Refused { reason: get_str(&mut r)? },
            t => return Err(CodecError::Invalid(format!("unknown server message tag {t:#x}"))),
        };
        finish(r)?;
        Ok(msg)
    }
}

pub fn write_frame(w: &mut impl Write, tag: u8, payload: &[u8]) -> io::Result<()> {
    let len = (payload.len() + 1) as u32;
    let mut head = [0u8; 5];
    head[..4].copy_from_slice(&len.to_le_bytes());
    head[4] = tag;
    w.write_all(&head)?;
    w.write_all(payload)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u8, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let payload = buf.split_off(1);
    Ok(Some((buf[0], payload)))
}

pub fn write_client(w: &mut impl Write, m: &ClientMsg) -> io::Result<()> {
    write_frame(w, m.tag(), &m.encode_payload())
}

pub fn write_server(w: &mut impl Write, m: &ServerMsg) -> io::Result<()> {
    write_frame(w, m.tag(), &m.encode_payload())
}

fn invalid(e: CodecError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

pub fn read_client(r: &mut impl Read) -> io::Result<Option<ClientMsg>> {
    match read_frame(r)? {
        Some((tag, payload)) => ClientMsg::decode(tag, &payload).map(Some).map_err(invalid),
        None => Ok(None),
    }
}

pub fn read_server(r: &mut impl Read) -> io::Result<Option<ServerMsg>> {
    match read_frame(r)? {
        Some((tag, payload)) => ServerMsg::decode(tag, &payload).map(Some).map_err(invalid),
        None => Ok(None),
    }
}
