//! Canonical Huffman coding over small integer alphabets (quantizer level
//! indices). Tables are fully determined by per-symbol code lengths, so the
//! bitstream stores lengths only; construction is deterministic down to
//! tie-breaks.

use crate::error::Error;
use crate::Result;

/// Code lengths per symbol; zero length means the symbol never occurs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    pub lengths: Vec<u8>,
}

/// Canonical code assignment: symbols sorted by (length, symbol id) receive
/// consecutive codes, shifting left when the length grows.
fn canonical_codes(lengths: &[u8]) -> Vec<(u32, u8)> {
    let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = vec![(0u32, 0u8); lengths.len()];
    let mut code = 0u32;
    let mut prev_len = 0u8;
    for &s in &order {
        let len = lengths[s];
        code <<= len - prev_len;
        codes[s] = (code, len);
        code += 1;
        prev_len = len;
    }
    codes
}

/// Builds an optimal prefix code from symbol counts by the two-least-merge
/// construction, ties broken by (weight, first symbol id), then converts to
/// canonical form. A single-symbol alphabet gets code length 1.
pub fn huffman_build(histogram: &[u64]) -> Result<HuffmanTable> {
    let active: Vec<usize> = (0..histogram.len()).filter(|&s| histogram[s] > 0).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument(
            "huffman_build needs at least one nonzero count".into(),
        ));
    }
    let mut lengths = vec![0u8; histogram.len()];
    if active.len() == 1 {
        lengths[active[0]] = 1;
        return Ok(HuffmanTable { lengths });
    }

    // forest nodes: (weight, min symbol id for tie-break, member symbols)
    let mut forest: Vec<(u64, usize, Vec<usize>)> = active
        .iter()
        .map(|&s| (histogram[s], s, vec![s]))
        .collect();
    while forest.len() > 1 {
        forest.sort_by_key(|n| (n.0, n.1));
        let a = forest.remove(0);
        let b = forest.remove(0);
        for &s in a.2.iter().chain(&b.2) {
            lengths[s] += 1;
        }
        let mut members = a.2;
        members.extend(b.2);
        forest.push((a.0 + b.0, a.1.min(b.1), members));
    }
    Ok(HuffmanTable { lengths })
}

impl HuffmanTable {
    /// Kraft sum as a fraction of 2^32 (exact for lengths <= 32).
    pub fn kraft_sum_q32(&self) -> u64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u64 << (32 - l as u64))
            .sum()
    }
}

/// MSB-first bit-packed encoding; the tail byte is zero-padded.
pub fn huffman_encode(symbols: &[u32], table: &HuffmanTable) -> Result<Vec<u8>> {
    let codes = canonical_codes(&table.lengths);
    let mut out = Vec::new();
    let mut acc = 0u64;
    let mut nbits = 0u32;
    for &s in symbols {
        let (code, len) = *codes
            .get(s as usize)
            .filter(|&&(_, l)| l > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("symbol {s} has no code")))?;
        acc = (acc << len) | code as u64;
        nbits += len as u32;
        while nbits >= 8 {
            nbits -= 8;
            out.push((acc >> nbits) as u8);
        }
    }
    if nbits > 0 {
        out.push((acc << (8 - nbits)) as u8);
    }
    Ok(out)
}

/// Decodes exactly `count` symbols from an MSB-first payload.
pub fn huffman_decode(payload: &[u8], table: &HuffmanTable, count: usize) -> Result<Vec<u32>> {
    let codes = canonical_codes(&table.lengths);
    // (code, len) -> symbol lookup; alphabet is small so linear probing per
    // bit is fine
    let mut by_len: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 33];
    for (s, &(code, len)) in codes.iter().enumerate() {
        if len > 0 {
            by_len[len as usize].push((code, s as u32));
        }
    }
    for v in &mut by_len {
        v.sort_unstable();
    }
    let mut out = Vec::with_capacity(count);
    let mut bitpos = 0usize;
    let total_bits = payload.len() * 8;
    while out.len() < count {
        let mut code = 0u32;
        let mut len = 0usize;
        loop {
            if bitpos >= total_bits {
                return Err(Error::Format(format!(
                    "payload exhausted after {} of {} symbols",
                    out.len(),
                    count
                )));
            }
            let bit = (payload[bitpos / 8] >> (7 - bitpos % 8)) & 1;
            code = (code << 1) | bit as u32;
            len += 1;
            bitpos += 1;
            if len > 32 {
                return Err(Error::Format("code length overflow while decoding".into()));
            }
            if let Ok(i) = by_len[len].binary_search_by_key(&code, |&(c, _)| c) {
                out.push(by_len[len][i].1);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_equal_symbols_get_single_bits() {
        let t = huffman_build(&[1, 1]).unwrap();
        assert_eq!(t.lengths, vec![1, 1]);
    }

    #[test]
    fn hand_built_three_symbol_tree() {
        let t = huffman_build(&[5, 1, 1]).unwrap();
        assert_eq!(t.lengths, vec![1, 2, 2]);
    }

    #[test]
    fn single_symbol_length_one() {
        let t = huffman_build(&[0, 7, 0]).unwrap();
        assert_eq!(t.lengths, vec![0, 1, 0]);
        let payload = huffman_encode(&[1; 11], &t).unwrap();
        assert_eq!(payload.len(), 2); // 11 bits
        assert_eq!(huffman_decode(&payload, &t, 11).unwrap(), vec![1; 11]);
    }

    #[test]
    fn empty_sequence_gives_empty_payload() {
        let t = huffman_build(&[3, 2]).unwrap();
        assert!(huffman_encode(&[], &t).unwrap().is_empty());
        assert!(huffman_decode(&[], &t, 0).unwrap().is_empty());
    }

    #[test]
    fn abac_is_six_bits() {
        let t = huffman_build(&[5, 1, 1]).unwrap();
        let payload = huffman_encode(&[0, 1, 0, 2], &t).unwrap();
        assert_eq!(payload.len(), 1);
    }

    #[test]
    fn kraft_sum_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let hist: Vec<u64> = (0..n).map(|_| rng.random_range(0..1000)).collect();
            if hist.iter().all(|&c| c == 0) {
                continue;
            }
            let t = huffman_build(&hist).unwrap();
            assert!(t.kraft_sum_q32() <= 1u64 << 32);
        }
    }

    #[test]
    fn random_streams_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let alphabet = rng.random_range(1..33usize);
            // skewed counts exercise unequal lengths
            let hist: Vec<u64> = (0..alphabet)
                .map(|i| rng.random_range(0..1u64 << (i % 11)))
                .collect();
            let hist = if hist.iter().all(|&c| c == 0) {
                vec![1; alphabet]
            } else {
                hist
            };
            let t = huffman_build(&hist).unwrap();
            let usable: Vec<u32> = (0..alphabet as u32)
                .filter(|&s| t.lengths[s as usize] > 0)
                .collect();
            let stream: Vec<u32> = (0..rng.random_range(0..500))
                .map(|_| usable[rng.random_range(0..usable.len())])
                .collect();
            let payload = huffman_encode(&stream, &t).unwrap();
            let back = huffman_decode(&payload, &t, stream.len()).unwrap();
            assert_eq!(back, stream);
        }
    }

    #[test]
    fn beats_fixed_width_and_tracks_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let alphabet = rng.random_range(2..64usize);
            let hist: Vec<u64> = (0..alphabet)
                .map(|_| 1 + rng.random_range(0..10000u64))
                .collect();
            let t = huffman_build(&hist).unwrap();
            let total: u64 = hist.iter().sum();
            let coded_bits: u64 = hist
                .iter()
                .enumerate()
                .map(|(s, &c)| c * t.lengths[s] as u64)
                .sum();
            let fixed_bits = total * (usize::BITS - (alphabet - 1).leading_zeros()) as u64;
            assert!(coded_bits <= fixed_bits);
            let entropy: f64 = hist
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -(p.log2()) * c as f64
                })
                .sum();
            assert!((coded_bits as f64) < entropy + total as f64 + 1.0);
        }
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = huffman_build(&[1, 1, 1, 1]).unwrap();
        let payload = huffman_encode(&[0, 1, 2, 3, 0, 1], &t).unwrap();
        assert!(huffman_decode(&payload[..1], &t, 6).is_err());
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        let t = huffman_build(&[1, 1]).unwrap();
        assert!(huffman_encode(&[5], &t).is_err());
        assert!(huffman_encode(&[2], &t).is_err());
    }

    #[test]
    fn canonical_codes_are_prefix_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let alphabet = rng.random_range(2..50usize);
            let hist: Vec<u64> = (0..alphabet).map(|_| 1 + rng.random_range(0..500u64)).collect();
            let t = huffman_build(&hist).unwrap();
            let codes = canonical_codes(&t.lengths);
            for (i, &(ci, li)) in codes.iter().enumerate() {
                for (j, &(cj, lj)) in codes.iter().enumerate() {
                    if i == j || li == 0 || lj == 0 || li > lj {
                        continue;
                    }
                    assert_ne!(cj >> (lj - li), ci, "code {i} prefixes {j}");
                }
            }
        }
    }
}
