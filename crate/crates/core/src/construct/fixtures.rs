use serde::{Deserialize, Serialize};

use crate::world::{Block, BlockPos, BlockType};

use super::{ConstructId, ConstructState};

const CLOCK_252: &str = include_str!("../../fixtures/clock252.txt");
const CLOCK_484: &str = include_str!("../../fixtures/clock484.txt");

/// Reference clock layouts: single-layer inverter/wire/lamp patterns.
///
/// Layout characters: `I` inverter, `W` wire, `L` lamp, `S` source,
/// `#` solid, `.` air. Rows run along +z, columns along +x.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstructTemplate {
    Clock252,
    Clock484,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateBlock {
    pub dx: i32,
    pub dz: i32,
    pub block: Block,
}

impl ConstructTemplate {
    fn layout(self) -> &'static str {
        match self {
            ConstructTemplate::Clock252 => CLOCK_252,
            ConstructTemplate::Clock484 => CLOCK_484,
        }
    }

    pub fn blocks(self) -> Vec<TemplateBlock> {
        parse_layout(self.layout())
    }

    /// Footprint along (x, z).
    pub fn footprint(self) -> (i32, i32) {
        let rows: Vec<&str> = self.layout().lines().filter(|l| !l.is_empty()).collect();
        (rows[0].len() as i32, rows.len() as i32)
    }

    pub fn active_blocks(self) -> usize {
        self.blocks().iter().filter(|b| b.block.is_active()).count()
    }

    /// The template placed with its minimum corner at `origin`.
    pub fn placed(self, origin: BlockPos) -> Vec<(BlockPos, Block)> {
        self.blocks()
            .into_iter()
            .map(|t| (origin.offset(t.dx, 0, t.dz), t.block))
            .collect()
    }

    pub fn state(self, id: ConstructId, origin: BlockPos) -> ConstructState {
        let blocks: Vec<_> = self.placed(origin).into_iter().filter(|(_, b)| b.is_active()).collect();
        ConstructState::from_blocks(id, &blocks, 0).expect("template is non-empty")
    }
}

fn parse_layout(text: &str) -> Vec<TemplateBlock> {
    let mut out = Vec::new();
    for (dz, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        for (dx, ch) in line.chars().enumerate() {
            let kind = match ch {
                'I' => BlockType::Inverter,
                'W' => BlockType::Wire,
                'L' => BlockType::Lamp,
                'S' => BlockType::Source,
                '#' => BlockType::Solid,
                '.' => continue,
                other => panic!("unknown layout character {other:?}"),
            };
            out.push(TemplateBlock { dx: dx as i32, dz: dz as i32, block: Block::of(kind) });
        }
    }
    out
}
