//! Two-party distributed point function over a GGM tree.
//!
//! [`gen`] secret-shares the point function `P(i*) = b` (zero elsewhere) into
//! two [`DpfKey`]s. Each key evaluates to a pseudorandom bit per index and
//! the two evaluations XOR to `P` everywhere. Keys carry one correction word
//! per tree level (a seed plus a control bit for each child direction) and
//! a final output-conversion word.
//!
//! The tree is perfect over `2^depth` leaves; domains that are not a power
//! of two are evaluated over the padded tree and truncated to `n_items`.

mod full;
mod prf;
mod share;

use std::fmt;
use std::ops::BitXor;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub use full::eval_full;
pub use prf::prf_expand;
use prf::{clear_control, Node};
pub(crate) use share::words_for;
pub use share::ShareVector;

/// Security parameter in bits; equals the AES-128 block width.
pub const LAMBDA: u32 = 128;

const KEY_MAGIC: &[u8; 4] = b"IMPK";
const KEY_VERSION: u8 = 1;
const KEY_HEADER_LEN: usize = 16;

/// A 128-bit value: seeds, correction words and PRF outputs.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Block(u128);

impl Block {
    pub const ZERO: Block = Block(0);

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Block(u128::from_le_bytes(bytes))
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }

    pub fn lsb(self) -> bool {
        self.0 & 1 == 1
    }
}

impl From<u128> for Block {
    fn from(v: u128) -> Self {
        Block(v)
    }
}

impl BitXor for Block {
    type Output = Block;

    fn bitxor(self, rhs: Block) -> Block {
        Block(self.0 ^ rhs.0)
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block({:032x})", self.0)
    }
}

/// Size of the evaluation domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DomainParams {
    n_items: u64,
    depth: u32,
}

impl DomainParams {
    pub fn new(n_items: u64) -> Result<Self> {
        if n_items < 2 {
            return Err(Error::Domain(format!("a domain needs at least 2 items, got {n_items}")));
        }
        if n_items > 1 << 62 {
            return Err(Error::Domain(format!("domain of {n_items} items is too large")));
        }
        let depth = 64 - (n_items - 1).leading_zeros();
        Ok(DomainParams { n_items, depth })
    }

    pub fn n_items(&self) -> u64 {
        self.n_items
    }

    /// `ceil(log2(n_items))`.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn lambda(&self) -> u32 {
        LAMBDA
    }

    /// Leaves of the perfect tree, `2^depth >= n_items`.
    pub fn padded_size(&self) -> u64 {
        1 << self.depth
    }

    pub(crate) fn check_index(&self, index: u64) -> Result<()> {
        if index >= self.n_items {
            return Err(Error::Domain(format!(
                "index {index} out of range for {} items",
                self.n_items
            )));
        }
        Ok(())
    }
}

/// `P(target_index) = target_value`, zero everywhere else.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointFunction {
    pub target_index: u64,
    pub target_value: bool,
}

impl PointFunction {
    /// The PIR query point function, `P(i) = 1`.
    pub fn indicator(target_index: u64) -> Self {
        PointFunction {
            target_index,
            target_value: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    One = 1,
    Two = 2,
}

impl Party {
    pub fn id(self) -> u8 {
        self as u8
    }

    fn from_id(id: u8) -> Option<Party> {
        match id {
            1 => Some(Party::One),
            2 => Some(Party::Two),
            _ => None,
        }
    }

    /// Root control bit: 0 for party 1, 1 for party 2.
    fn root_control(self) -> bool {
        self == Party::Two
    }
}

/// Per-level correction: applied to both children of any node whose
/// control bit is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrectionWord {
    pub seed: Block,
    /// Control-bit corrections for the left and right child.
    pub control: [bool; 2],
}

/// One server's share of a point function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DpfKey {
    party: Party,
    domain: DomainParams,
    root_seed: Block,
    correction_words: Vec<CorrectionWord>,
    leaf_correction: Block,
}

impl DpfKey {
    pub fn party(&self) -> Party {
        self.party
    }

    pub fn domain(&self) -> DomainParams {
        self.domain
    }

    pub fn root_seed(&self) -> Block {
        self.root_seed
    }

    pub fn correction_words(&self) -> &[CorrectionWord] {
        &self.correction_words
    }

    pub fn leaf_correction(&self) -> Block {
        self.leaf_correction
    }

    fn root(&self) -> Node {
        Node::new(self.root_seed, self.party.root_control())
    }

    /// Serialized length for a key of the given depth.
    pub fn serialized_len(depth: u32) -> usize {
        KEY_HEADER_LEN + 16 + 17 * depth as usize + 16
    }

    /// `"IMPK" | version | party | depth | reserved | n_items u64-LE |
    /// root seed | (cw seed, control byte) per level | leaf correction`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::serialized_len(self.domain.depth));
        out.extend_from_slice(KEY_MAGIC);
        out.push(KEY_VERSION);
        out.push(self.party.id());
        out.push(self.domain.depth as u8);
        out.push(0);
        out.extend_from_slice(&self.domain.n_items.to_le_bytes());
        out.extend_from_slice(&self.root_seed.to_bytes());
        for cw in &self.correction_words {
            out.extend_from_slice(&cw.seed.to_bytes());
            out.push(cw.control[0] as u8 | (cw.control[1] as u8) << 1);
        }
        out.extend_from_slice(&self.leaf_correction.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < KEY_HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated key header"));
        }
        if &bytes[..4] != KEY_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"IMPK\""));
        }
        if bytes[4] != KEY_VERSION {
            return Err(Error::format(4, format!("unsupported key version {}", bytes[4])));
        }
        let party =
            Party::from_id(bytes[5]).ok_or_else(|| Error::format(5, format!("invalid party id {}", bytes[5])))?;
        let depth = bytes[6] as u32;
        let n_items = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let domain = DomainParams::new(n_items).map_err(|e| Error::format(8, e.to_string()))?;
        if domain.depth != depth {
            return Err(Error::format(
                6,
                format!("depth {depth} does not match {n_items} items"),
            ));
        }
        let expected = Self::serialized_len(depth);
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected) as u64,
                format!("key of depth {depth} is {expected} bytes, got {}", bytes.len()),
            ));
        }
        let block_at = |offset: usize| Block::from_bytes(bytes[offset..offset + 16].try_into().unwrap());
        let root_seed = block_at(KEY_HEADER_LEN);
        if root_seed != clear_control(root_seed) {
            return Err(Error::format(KEY_HEADER_LEN as u64 + 15, "root seed has bit 127 set"));
        }
        let mut correction_words = Vec::with_capacity(depth as usize);
        for level in 0..depth as usize {
            let offset = KEY_HEADER_LEN + 16 + 17 * level;
            let seed = block_at(offset);
            if seed != clear_control(seed) {
                return Err(Error::format(offset as u64 + 15, "correction seed has bit 127 set"));
            }
            let control = bytes[offset + 16];
            if control > 0b11 {
                return Err(Error::format(offset as u64 + 16, "invalid control byte"));
            }
            correction_words.push(CorrectionWord {
                seed,
                control: [control & 1 == 1, control & 2 == 2],
            });
        }
        Ok(DpfKey {
            party,
            domain,
            root_seed,
            correction_words,
            leaf_correction: block_at(expected - 16),
        })
    }
}

fn random_seed(rng: &mut ChaCha20Rng) -> Block {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    clear_control(Block::from_bytes(bytes))
}

/// Splits `point` into two keys. Deterministic in `rng_seed`.
pub fn gen(domain: DomainParams, point: PointFunction, rng_seed: [u8; 32]) -> Result<(DpfKey, DpfKey)> {
    gen_counted(domain, point, rng_seed).map(|(keys, _)| keys)
}

pub(crate) fn gen_counted(
    domain: DomainParams,
    point: PointFunction,
    rng_seed: [u8; 32],
) -> Result<((DpfKey, DpfKey), u64)> {
    domain.check_index(point.target_index)?;
    let mut rng = ChaCha20Rng::from_seed(rng_seed);
    let roots = [random_seed(&mut rng), random_seed(&mut rng)];
    let mut nodes = [
        Node::new(roots[0], Party::One.root_control()),
        Node::new(roots[1], Party::Two.root_control()),
    ];
    let mut correction_words = Vec::with_capacity(domain.depth as usize);
    let mut expansions = 0;

    for level in 0..domain.depth {
        let keep = (point.target_index >> (domain.depth - 1 - level)) & 1 == 1;
        let lose = !keep;
        let children = nodes.map(|node| prf::prf_expand_pair(node.seed()).map(Node::from_raw));
        expansions += 4;

        let seed = children[0][lose as usize].seed() ^ children[1][lose as usize].seed();
        let control = [
            children[0][0].control() ^ children[1][0].control() ^ keep ^ true,
            children[0][1].control() ^ children[1][1].control() ^ keep,
        ];
        let cw = CorrectionWord { seed, control };
        for (party, node) in nodes.iter_mut().enumerate() {
            let child = children[party][keep as usize];
            *node = if node.control() {
                Node::new(child.seed() ^ cw.seed, child.control() ^ cw.control[keep as usize])
            } else {
                child
            };
        }
        correction_words.push(cw);
    }

    // On the target leaf exactly one party has its control bit set, so the
    // correction flips the XOR of the two low seed bits to the target value.
    let flip = nodes[0].seed().lsb() ^ nodes[1].seed().lsb() ^ point.target_value;
    let leaf_correction = Block::from(flip as u128);

    let key = |party: Party, root_seed: Block| DpfKey {
        party,
        domain,
        root_seed,
        correction_words: correction_words.clone(),
        leaf_correction,
    };
    Ok(((key(Party::One, roots[0]), key(Party::Two, roots[1])), expansions))
}

/// `Eval(k, j)`: walks the tree from the root along the bits of `j`.
pub fn eval_point(key: &DpfKey, j: u64) -> Result<bool> {
    key.domain.check_index(j)?;
    let depth = key.domain.depth;
    let mut node = key.root();
    for (level, cw) in key.correction_words.iter().enumerate() {
        let bit = (j >> (depth - 1 - level as u32)) & 1;
        node = node.children(cw)[bit as usize];
    }
    Ok(node.output(key.leaf_correction))
}
