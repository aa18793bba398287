//! AES-128 based length-doubling PRF used to expand GGM tree nodes.
//!
//! A node seed is used directly as the AES key and the two children are
//! derived from the encryptions of the constant blocks `0` and `1`
//! (128-bit little-endian), each XORed with its input block. Both children
//! of a node are encrypted in one `encrypt_blocks` call so the cipher
//! backend can pipeline them.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128Enc;

use super::{Block, CorrectionWord};

/// Bit 127 of an expanded block carries the child's control bit.
const CONTROL_MASK: u128 = 1 << 127;

fn child_tag(child: bool) -> [u8; 16] {
    Block::from(child as u128).to_bytes()
}

/// Raw PRF output for one child of `seed`.
pub fn prf_expand(seed: Block, child: bool) -> Block {
    let cipher = Aes128Enc::new(&GenericArray::from(seed.to_bytes()));
    let tag = child_tag(child);
    let mut buf = GenericArray::from(tag);
    cipher.encrypt_block(&mut buf);
    Block::from_bytes(buf.into()) ^ Block::from_bytes(tag)
}

/// Both children of `seed` in one batched cipher call. Equivalent to
/// `[prf_expand(seed, false), prf_expand(seed, true)]`.
pub(crate) fn prf_expand_pair(seed: Block) -> [Block; 2] {
    let cipher = Aes128Enc::new(&GenericArray::from(seed.to_bytes()));
    let tags = [child_tag(false), child_tag(true)];
    let mut blocks = [GenericArray::from(tags[0]), GenericArray::from(tags[1])];
    cipher.encrypt_blocks(&mut blocks);
    [
        Block::from_bytes(blocks[0].into()) ^ Block::from_bytes(tags[0]),
        Block::from_bytes(blocks[1].into()) ^ Block::from_bytes(tags[1]),
    ]
}

#[cfg(test)]
pub(crate) fn aes128_encrypt(key: [u8; 16], block: [u8; 16]) -> [u8; 16] {
    let cipher = Aes128Enc::new(&GenericArray::from(key));
    let mut buf = GenericArray::from(block);
    cipher.encrypt_block(&mut buf);
    buf.into()
}

/// A tree node: a 127-bit seed with the control bit packed into bit 127.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Node(u128);

impl Node {
    pub(crate) fn new(seed: Block, control: bool) -> Self {
        debug_assert_eq!(seed.as_u128() & CONTROL_MASK, 0);
        Node(seed.as_u128() | ((control as u128) << 127))
    }

    /// Splits a raw PRF output into a child seed and control bit.
    pub(crate) fn from_raw(raw: Block) -> Self {
        Node(raw.as_u128())
    }

    pub(crate) fn seed(self) -> Block {
        Block::from(self.0 & !CONTROL_MASK)
    }

    pub(crate) fn control(self) -> bool {
        self.0 & CONTROL_MASK != 0
    }

    /// Expands both children and applies the level's correction word when
    /// this node's control bit is set.
    pub(crate) fn children(self, cw: &CorrectionWord) -> [Node; 2] {
        let [left, right] = prf_expand_pair(self.seed());
        let mut out = [Node::from_raw(left), Node::from_raw(right)];
        if self.control() {
            for (child, node) in out.iter_mut().enumerate() {
                node.0 ^= cw.seed.as_u128() | ((cw.control[child] as u128) << 127);
            }
        }
        out
    }

    /// Leaf output conversion: lowest seed bit, flipped by the leaf
    /// correction when the control bit is set.
    pub(crate) fn output(self, leaf_correction: Block) -> bool {
        self.seed().lsb() ^ (self.control() & leaf_correction.lsb())
    }
}

pub(crate) fn clear_control(block: Block) -> Block {
    Block::from(block.as_u128() & !CONTROL_MASK)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    fn unhex(s: &str) -> [u8; 16] {
        let mut out = [0u8; 16];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap();
        }
        out
    }

    #[test]
    fn aes128_fips197_vector() {
        // FIPS-197 appendix C.1.
        let key = unhex("000102030405060708090a0b0c0d0e0f");
        let pt = unhex("00112233445566778899aabbccddeeff");
        let ct = unhex("69c4e0d86a7b0430d8cdb78070b4c55a");
        assert_eq!(aes128_encrypt(key, pt), ct);
    }

    #[test]
    fn expand_matches_definition() {
        let seed = Block::from_bytes(unhex("000102030405060708090a0b0c0d0e0f"));
        for child in [false, true] {
            let tag = Block::from(child as u128).to_bytes();
            let expected = Block::from_bytes(aes128_encrypt(seed.to_bytes(), tag)) ^ Block::from_bytes(tag);
            assert_eq!(prf_expand(seed, child), expected);
        }
    }

    #[test]
    fn expand_is_deterministic() {
        let seed = Block::from(0xdead_beef_u128 << 64);
        assert_eq!(prf_expand(seed, true), prf_expand(seed, true));
        assert_eq!(prf_expand_pair(seed), [prf_expand(seed, false), prf_expand(seed, true)]);
    }

    #[test]
    fn children_differ() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let seed = Block::from(rng.gen::<u128>());
            assert_ne!(prf_expand(seed, false), prf_expand(seed, true));
        }
    }

    #[test]
    fn node_packing() {
        let seed = clear_control(Block::from(u128::MAX));
        let node = Node::new(seed, true);
        assert_eq!(node.seed(), seed);
        assert!(node.control());
        assert!(!Node::new(seed, false).control());
    }
}
