//! 32-bit range coder with 16-bit probability tables, plus an adaptive
//! binary coder for masks.
//!
//! Carry propagation uses the cache/pending-0xFF scheme so the coder state is
//! integer-only and byte output is identical across platforms. Symbol tables
//! are cumulative counts summing to exactly 2^16 with every symbol assigned a
//! frequency of at least one.

use crate::error::{Error, Result};
use crate::special::std_normal_cdf;

pub const PROB_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PROB_BITS;

const RENORM_LIMIT: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> RangeEncoder {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Encode a symbol occupying [cum, cum+freq) of the 2^16 probability span.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < RENORM_LIMIT {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Encode `bits` (<= 16) raw bits with a uniform model.
    pub fn encode_bypass(&mut self, value: u32, bits: u32) {
        debug_assert!(bits >= 1 && bits <= PROB_BITS && value < (1 << bits));
        let freq = TOTAL >> bits;
        self.encode(value * freq, freq);
    }

    /// Adaptive binary symbol under a [`BitModel`].
    pub fn encode_bit(&mut self, model: &mut BitModel, bit: bool) {
        let bound = (self.range >> BitModel::TOTAL_BITS) * model.prob_zero as u32;
        if !bit {
            self.range = bound;
            model.update_zero();
        } else {
            self.low += bound as u64;
            self.range -= bound;
            model.update_one();
        }
        while self.range < RENORM_LIMIT {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> RangeDecoder<'a> {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, data, pos: 0 };
        d.next_byte(); // leading byte emitted by the encoder's initial cache
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte();
        }
        d
    }

    fn next_byte(&mut self) -> u32 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b as u32
    }

    /// Scaled code value in [0, 2^16): locate the symbol whose cumulative
    /// interval contains it, then call [`Self::decode_update`].
    pub fn decode_freq(&mut self) -> u32 {
        let r = self.range >> PROB_BITS;
        (self.code / r).min(TOTAL - 1)
    }

    pub fn decode_update(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PROB_BITS;
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < RENORM_LIMIT {
            self.code = (self.code << 8) | self.next_byte();
            self.range <<= 8;
        }
    }

    pub fn decode_bypass(&mut self, bits: u32) -> u32 {
        let freq = TOTAL >> bits;
        let dv = self.decode_freq();
        let value = dv / freq;
        self.decode_update(value * freq, freq);
        value
    }

    pub fn decode_bit(&mut self, model: &mut BitModel) -> bool {
        let bound = (self.range >> BitModel::TOTAL_BITS) * model.prob_zero as u32;
        let bit = if self.code < bound {
            self.range = bound;
            model.update_zero();
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            model.update_one();
            true
        };
        while self.range < RENORM_LIMIT {
            self.code = (self.code << 8) | self.next_byte();
            self.range <<= 8;
        }
        bit
    }
}

/// Adaptive probability state for a binary symbol (11-bit precision).
#[derive(Debug, Clone, Copy)]
pub struct BitModel {
    prob_zero: u16,
}

impl Default for BitModel {
    fn default() -> Self {
        BitModel::new()
    }
}

impl BitModel {
    pub const TOTAL_BITS: u32 = 11;
    const TOTAL: u16 = 1 << Self::TOTAL_BITS;
    const MOVE_BITS: u32 = 5;

    pub fn new() -> BitModel {
        BitModel { prob_zero: Self::TOTAL / 2 }
    }

    fn update_zero(&mut self) {
        self.prob_zero += (Self::TOTAL - self.prob_zero) >> Self::MOVE_BITS;
    }

    fn update_one(&mut self) {
        self.prob_zero -= self.prob_zero >> Self::MOVE_BITS;
    }
}

/// Cumulative 16-bit frequency table over a contiguous symbol alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolCdf {
    /// len = alphabet + 1; cum[0] = 0, cum[last] = 2^16, strictly increasing.
    pub cum: Vec<u32>,
}

impl SymbolCdf {
    pub fn from_counts(counts: &[u32]) -> Result<SymbolCdf> {
        if counts.is_empty() {
            return Err(Error::MalformedCdf("empty alphabet".into()));
        }
        if counts.iter().any(|c| *c == 0) {
            return Err(Error::MalformedCdf("zero-frequency symbol".into()));
        }
        let sum: u64 = counts.iter().map(|c| *c as u64).sum();
        if sum != TOTAL as u64 {
            return Err(Error::MalformedCdf(format!("counts sum to {sum}, want {TOTAL}")));
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for c in counts {
            acc += c;
            cum.push(acc);
        }
        Ok(SymbolCdf { cum })
    }

    /// Round real probabilities to counts: every symbol keeps at least one
    /// count and the total is fixed up on the largest symbols.
    pub fn from_probs(probs: &[f64]) -> SymbolCdf {
        assert!(!probs.is_empty());
        let mut counts: Vec<u32> = probs
            .iter()
            .map(|p| ((p.max(0.0) * TOTAL as f64).round() as u32).max(1))
            .collect();
        let mut sum: i64 = counts.iter().map(|c| *c as i64).sum();
        // Donate or steal from the largest counts until the total is exact.
        while sum != TOTAL as i64 {
            let diff = TOTAL as i64 - sum;
            let idx = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, c)| **c)
                .map(|(i, _)| i)
                .unwrap();
            if diff > 0 {
                counts[idx] += diff as u32;
                sum += diff;
            } else {
                let take = (-diff).min(counts[idx] as i64 - 1).max(1);
                counts[idx] -= take as u32;
                sum -= take;
            }
        }
        SymbolCdf::from_counts(&counts).expect("constructed counts are valid")
    }

    pub fn alphabet(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn count(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    /// Table probability of a symbol (count / 2^16).
    pub fn prob(&self, symbol: usize) -> f64 {
        self.count(symbol) as f64 / TOTAL as f64
    }

    pub fn encode(&self, enc: &mut RangeEncoder, symbol: usize) {
        enc.encode(self.cum[symbol], self.count(symbol));
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> usize {
        let dv = dec.decode_freq();
        // Binary search: last index with cum[idx] <= dv.
        let mut lo = 0usize;
        let mut hi = self.alphabet();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= dv {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        dec.decode_update(self.cum[lo], self.count(lo));
        lo
    }
}

/// Discretize the Gaussian bin model into a table over quantization indices
/// -bound..=bound plus a trailing escape symbol carrying the tail mass.
pub fn build_cdf(mu: f64, sigma: f64, q: f64, bound: i64) -> SymbolCdf {
    assert!(sigma > 0.0 && q > 0.0 && bound >= 1);
    let n = (2 * bound + 1) as usize;
    let mut probs = Vec::with_capacity(n + 1);
    let mut mass = 0.0;
    for k in -bound..=bound {
        let center = k as f64 * q;
        let hi = std_normal_cdf((center - mu + 0.5 * q) / sigma);
        let lo = std_normal_cdf((center - mu - 0.5 * q) / sigma);
        let p = (hi - lo).max(0.0);
        mass += p;
        probs.push(p);
    }
    probs.push((1.0 - mass).max(0.0)); // escape
    SymbolCdf::from_probs(&probs)
}

/// Adaptive binary coding of a mask bit string.
pub fn encode_mask(bits: &[bool]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let mut model = BitModel::new();
    for b in bits {
        enc.encode_bit(&mut model, *b);
    }
    enc.finish()
}

pub fn decode_mask(bytes: &[u8], len: usize) -> Vec<bool> {
    let mut dec = RangeDecoder::new(bytes);
    let mut model = BitModel::new();
    (0..len).map(|_| dec.decode_bit(&mut model)).collect()
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for b in data {
        crc = table[((crc ^ *b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_flush_only() {
        let enc = RangeEncoder::new();
        let bytes = enc.finish();
        assert_eq!(bytes.len(), 5);
    }

    #[test]
    fn roundtrip_hundred_thousand_random_symbols() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // A couple of skewed tables plus a uniform one.
        let tables: Vec<SymbolCdf> = vec![
            SymbolCdf::from_probs(&[0.9, 0.05, 0.03, 0.02]),
            SymbolCdf::from_probs(&(0..17).map(|i| 1.0 / (i as f64 + 1.0)).collect::<Vec<_>>()),
            SymbolCdf::from_probs(&vec![1.0 / 256.0; 256]),
        ];
        let n = 100_000;
        let mut symbols = Vec::with_capacity(n);
        let mut table_pick = Vec::with_capacity(n);
        for _ in 0..n {
            let t = rng.gen_range(0..tables.len());
            table_pick.push(t);
            symbols.push(rng.gen_range(0..tables[t].alphabet()));
        }
        let mut enc = RangeEncoder::new();
        for (s, t) in symbols.iter().zip(&table_pick) {
            tables[*t].encode(&mut enc, *s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for (s, t) in symbols.iter().zip(&table_pick) {
            assert_eq!(tables[*t].decode(&mut dec), *s);
        }
    }

    #[test]
    fn uniform_alphabet_codes_at_entropy() {
        // 256 equiprobable symbols: 8 bits each, 10^4 symbols ~ 10^4 bytes.
        let table = SymbolCdf::from_probs(&vec![1.0 / 256.0; 256]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let symbols: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..256)).collect();
        let mut enc = RangeEncoder::new();
        for s in &symbols {
            table.encode(&mut enc, *s);
        }
        let bytes = enc.finish();
        assert!(
            (bytes.len() as i64 - 10_000).unsigned_abs() <= 16,
            "coded {} bytes", bytes.len()
        );
    }

    #[test]
    fn coded_size_obeys_shannon_bound_within_one_percent() {
        let table = SymbolCdf::from_probs(&[0.6, 0.25, 0.1, 0.04, 0.01]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let symbols: Vec<usize> = (0..n)
            .map(|_| {
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in [0.6, 0.25, 0.1, 0.04, 0.01].iter().enumerate() {
                    acc += p;
                    if r < acc {
                        return i;
                    }
                }
                4
            })
            .collect();
        let shannon_bits: f64 = symbols.iter().map(|s| -table.prob(*s).log2()).sum();
        let mut enc = RangeEncoder::new();
        for s in &symbols {
            table.encode(&mut enc, *s);
        }
        let bytes = enc.finish();
        let actual_bits = bytes.len() as f64 * 8.0;
        assert!(actual_bits >= shannon_bits - 64.0, "beat the entropy bound");
        assert!(
            actual_bits <= shannon_bits * 1.01 + 256.0,
            "coded {actual_bits} bits vs bound {shannon_bits}"
        );
    }

    #[test]
    fn bypass_bits_roundtrip() {
        let mut enc = RangeEncoder::new();
        let values = [(0u32, 1u32), (1, 1), (12345, 16), (7, 3), (65535, 16)];
        for (v, b) in values {
            enc.encode_bypass(v, b);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for (v, b) in values {
            assert_eq!(dec.decode_bypass(b), v);
        }
    }

    #[test]
    fn from_probs_keeps_minimum_counts_and_exact_total() {
        let probs = vec![0.999999, 1e-9, 1e-9, 1e-9];
        let cdf = SymbolCdf::from_probs(&probs);
        assert_eq!(*cdf.cum.last().unwrap(), TOTAL);
        for s in 0..cdf.alphabet() {
            assert!(cdf.count(s) >= 1);
        }
    }

    #[test]
    fn malformed_counts_are_rejected() {
        assert!(SymbolCdf::from_counts(&[]).is_err());
        assert!(SymbolCdf::from_counts(&[TOTAL - 1, 0, 1]).is_err());
        assert!(SymbolCdf::from_counts(&[100, 100]).is_err());
    }

    #[test]
    fn build_cdf_is_symmetric_for_centered_gaussian() {
        let cdf = build_cdf(0.0, 1.0, 0.5, 6);
        let n = cdf.alphabet() - 1; // exclude escape
        for k in 0..n / 2 {
            let a = cdf.count(k);
            let b = cdf.count(n - 1 - k);
            assert!(
                (a as i64 - b as i64).abs() <= 1,
                "asymmetry at {k}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn build_cdf_concentrates_as_sigma_vanishes() {
        let cdf = build_cdf(0.75, 1e-5, 0.25, 8);
        // round(0.75/0.25) = 3 -> index 3 + 8 = 11.
        assert!(cdf.prob(11) > 0.999);
    }

    #[test]
    fn build_cdf_counts_match_continuous_probabilities() {
        // Case (mu, sigma, q, bound) = (0, 1, 1, 4): counts within rounding
        // of the erf-based bin probabilities.
        let cdf = build_cdf(0.0, 1.0, 1.0, 4);
        for k in -4i64..=4 {
            let hi = std_normal_cdf(k as f64 + 0.5);
            let lo = std_normal_cdf(k as f64 - 0.5);
            let p = hi - lo;
            let got = cdf.prob((k + 4) as usize);
            assert!(
                (got - p).abs() <= 2.0 / TOTAL as f64,
                "bin {k}: table {got} vs exact {p}"
            );
        }
    }

    #[test]
    fn all_zero_mask_compresses_hard() {
        let bits = vec![false; 10_000];
        let bytes = encode_mask(&bits);
        assert!(bytes.len() < 40, "{} bytes", bytes.len());
        assert_eq!(decode_mask(&bytes, 10_000), bits);
    }

    #[test]
    fn alternating_mask_costs_about_one_bit_per_symbol() {
        let bits: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let bytes = encode_mask(&bits);
        let expect = 10_000 / 8;
        assert!(
            (bytes.len() as i64 - expect as i64).unsigned_abs() < 64,
            "{} bytes vs {expect}",
            bytes.len()
        );
        assert_eq!(decode_mask(&bytes, 10_000), bits);
    }

    #[test]
    fn random_mask_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let bits: Vec<bool> = (0..5_000).map(|_| rng.gen_bool(0.23)).collect();
        let bytes = encode_mask(&bits);
        assert_eq!(decode_mask(&bytes, bits.len()), bits);
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }
}
