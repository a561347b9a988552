//! 32-bit integer range coder with 16-bit probability resolution.
//!
//! Carry handling uses the delayed-byte scheme: the most recent output byte
//! plus any run of 0xFF bytes stay pending until a carry can no longer reach
//! them. The encoder emits exactly the number of bytes the decoder will
//! demand, so one-byte truncation is always detected.

use crate::error::{Error, Result};

/// Probability resolution: all CDF tables total exactly `1 << 16`.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
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
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Narrows the interval to `[cum_lo, cum_hi) / PROB_TOTAL`.
    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) {
        debug_assert!(cum_lo < cum_hi && cum_hi <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += (r as u64) * (cum_lo as u64);
        self.range = r * (cum_hi - cum_lo);
        while self.range < RENORM_LIMIT {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            for _ in 0..self.cache_size {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // Commit a still-deferred 0xFF run. The decoder demands exactly
        // (5 + renormalizations) bytes; only cache_size - 1 of the pending
        // bytes are part of that demand.
        if self.cache_size > 1 {
            self.out.push(self.cache);
            for _ in 2..self.cache_size {
                self.out.push(0xFF);
            }
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, buf, pos: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()?;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u32> {
        if self.pos >= self.buf.len() {
            return Err(Error::Decode("range coder payload truncated".into()));
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        Ok(b as u32)
    }

    /// Scaled cumulative value of the pending symbol, in `[0, PROB_TOTAL)`.
    /// Must be followed by `consume` with the located interval.
    pub fn decode_target(&mut self) -> u32 {
        self.range >>= PROB_BITS;
        (self.code / self.range).min(PROB_TOTAL - 1)
    }

    pub fn consume(&mut self, cum_lo: u32, cum_hi: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(cum_lo * self.range);
        self.range *= cum_hi - cum_lo;
        while self.range < RENORM_LIMIT {
            self.code = (self.code << 8) | self.next_byte()?;
            self.range <<= 8;
        }
        Ok(())
    }

    /// All payload bytes must have been consumed by the end of a chunk.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!(
                "range coder consumed {} of {} payload bytes",
                self.pos,
                self.buf.len()
            )));
        }
        Ok(())
    }
}

/// Quantized CDF over the integer symbols `[offset, offset + bins)`.
///
/// Strictly increasing: every bin holds at least one of the 2^16 counts.
#[derive(Clone, Debug)]
pub struct CdfTable {
    offset: i32,
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes real bin probabilities to 16-bit counts with a floor of 1
    /// per bin, totaling exactly `PROB_TOTAL`.
    pub fn from_probs(offset: i32, probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if n == 0 {
            return Err(Error::Contract("CDF over zero bins".into()));
        }
        if n as u32 > PROB_TOTAL {
            return Err(Error::Contract(format!("{n} bins exceed probability resolution")));
        }
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| ((p.max(0.0) * PROB_TOTAL as f64).round() as u32).max(1))
            .collect();
        let mut total: i64 = freqs.iter().map(|&f| f as i64).sum();
        let target = PROB_TOTAL as i64;
        while total != target {
            if total > target {
                // Shave the largest bin, keeping its floor of 1.
                let (i, &f) = freqs.iter().enumerate().max_by_key(|(_, &f)| f).unwrap();
                let cut = ((total - target) as u32).min(f - 1);
                if cut == 0 {
                    return Err(Error::Contract("cannot normalize CDF".into()));
                }
                freqs[i] -= cut;
                total -= cut as i64;
            } else {
                let (i, _) = freqs.iter().enumerate().max_by_key(|(_, &f)| f).unwrap();
                freqs[i] += (target - total) as u32;
                total = target;
            }
        }
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cum.push(0);
        for f in freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(CdfTable { offset, cum })
    }

    pub fn bins(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn contains(&self, sym: i32) -> bool {
        sym >= self.offset && sym < self.offset + self.bins() as i32
    }

    pub fn interval(&self, sym: i32) -> Result<(u32, u32)> {
        if !self.contains(sym) {
            return Err(Error::Contract(format!(
                "symbol {sym} outside CDF support [{}, {}]",
                self.offset,
                self.offset + self.bins() as i32 - 1
            )));
        }
        let i = (sym - self.offset) as usize;
        Ok((self.cum[i], self.cum[i + 1]))
    }

    /// Symbol whose interval contains the scaled target value.
    pub fn locate(&self, target: u32) -> (i32, u32, u32) {
        // Binary search for the last i with cum[i] <= target.
        let mut lo = 0usize;
        let mut hi = self.bins();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (self.offset + lo as i32, self.cum[lo], self.cum[lo + 1])
    }

    /// Coded probability of a symbol, as quantized counts over 2^16.
    pub fn prob(&self, sym: i32) -> f64 {
        match self.interval(sym) {
            Ok((lo, hi)) => (hi - lo) as f64 / PROB_TOTAL as f64,
            Err(_) => 0.0,
        }
    }
}

/// One entropy-coded payload plus the symbol range its tables were built on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedChunk {
    pub symbol_min: i16,
    pub symbol_max: i16,
    pub payload: Vec<u8>,
}

impl CodedChunk {
    /// Wire layout, little-endian: symbol_min i16, symbol_max i16,
    /// payload_len u32, payload bytes.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.symbol_min.to_le_bytes());
        out.extend_from_slice(&self.symbol_max.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn read_from(buf: &[u8], pos: &mut usize) -> Result<Self> {
        let need = |p: usize, n: usize| {
            if p + n > buf.len() {
                Err(Error::Bitstream("truncated chunk header".into()))
            } else {
                Ok(())
            }
        };
        need(*pos, 8)?;
        let symbol_min = i16::from_le_bytes([buf[*pos], buf[*pos + 1]]);
        let symbol_max = i16::from_le_bytes([buf[*pos + 2], buf[*pos + 3]]);
        let len =
            u32::from_le_bytes([buf[*pos + 4], buf[*pos + 5], buf[*pos + 6], buf[*pos + 7]])
                as usize;
        *pos += 8;
        need(*pos, len)?;
        let payload = buf[*pos..*pos + len].to_vec();
        *pos += len;
        Ok(CodedChunk { symbol_min, symbol_max, payload })
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }

    /// Serialized size including the 8-byte chunk header.
    pub fn wire_bytes(&self) -> usize {
        8 + self.payload.len()
    }
}

/// Encodes `symbols[i]` with `tables[table_of(i)]`.
///
/// Every symbol must lie within `[symbol_min, symbol_max]` and within its
/// table's support.
pub fn rc_encode(
    symbols: &[i32],
    symbol_min: i32,
    symbol_max: i32,
    table_of: impl Fn(usize) -> usize,
    tables: &[CdfTable],
) -> Result<CodedChunk> {
    if !(-(i16::MAX as i32)..=i16::MAX as i32).contains(&symbol_min)
        || !(-(i16::MAX as i32)..=i16::MAX as i32).contains(&symbol_max)
    {
        return Err(Error::Contract("symbol range exceeds i16".into()));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        if s < symbol_min || s > symbol_max {
            return Err(Error::Contract(format!(
                "symbol {s} outside chunk range [{symbol_min}, {symbol_max}]"
            )));
        }
        let (lo, hi) = tables[table_of(i)].interval(s)?;
        enc.encode(lo, hi);
    }
    Ok(CodedChunk {
        symbol_min: symbol_min as i16,
        symbol_max: symbol_max as i16,
        payload: enc.finish(),
    })
}

/// Exact inverse of [`rc_encode`] given identical tables.
pub fn rc_decode(
    chunk: &CodedChunk,
    n_symbols: usize,
    table_of: impl Fn(usize) -> usize,
    tables: &[CdfTable],
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(&chunk.payload)?;
    let mut out = Vec::with_capacity(n_symbols);
    for i in 0..n_symbols {
        let target = dec.decode_target();
        let (sym, lo, hi) = tables[table_of(i)].locate(target);
        dec.consume(lo, hi)?;
        out.push(sym);
    }
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn uniform_table(bins: usize) -> CdfTable {
        CdfTable::from_probs(0, &vec![1.0 / bins as f64; bins]).unwrap()
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let chunk = rc_encode(&[], 0, 0, |_| 0, &[uniform_table(2)]).unwrap();
        assert!(chunk.payload.len() <= 8, "payload {} bytes", chunk.payload.len());
        let back = rc_decode(&chunk, 0, |_| 0, &[uniform_table(2)]).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn uniform_256_costs_about_a_byte_each() {
        let table = uniform_table(256);
        let mut rng = StdRng::seed_from_u64(7);
        let symbols: Vec<i32> = (0..1000).map(|_| rng.gen_range(0..256)).collect();
        let chunk = rc_encode(&symbols, 0, 255, |_| 0, &[table]).unwrap();
        assert!(
            (995..=1010).contains(&chunk.payload.len()),
            "payload {} bytes",
            chunk.payload.len()
        );
        let table = uniform_table(256);
        let back = rc_decode(&chunk, 1000, |_| 0, &[table]).unwrap();
        assert_eq!(back, symbols);
    }

    #[test]
    fn two_bin_single_symbol() {
        let table = uniform_table(2);
        let chunk = rc_encode(&[1], 0, 1, |_| 0, &[table]).unwrap();
        assert!(chunk.payload.len() <= 8);
        let table = uniform_table(2);
        assert_eq!(rc_decode(&chunk, 1, |_| 0, &[table]).unwrap(), vec![1]);
    }

    #[test]
    fn truncation_is_detected() {
        let table = uniform_table(256);
        let mut rng = StdRng::seed_from_u64(11);
        let symbols: Vec<i32> = (0..100).map(|_| rng.gen_range(0..256)).collect();
        let mut chunk = rc_encode(&symbols, 0, 255, |_| 0, &[uniform_table(256)]).unwrap();
        chunk.payload.pop();
        assert!(rc_decode(&chunk, 100, |_| 0, &[table]).is_err());
    }

    #[test]
    fn out_of_support_symbol_is_rejected() {
        let table = uniform_table(4);
        assert!(rc_encode(&[9], 0, 3, |_| 0, &[table]).is_err());
    }

    #[test]
    fn skewed_tables_roundtrip() {
        let mut rng = StdRng::seed_from_u64(23);
        for trial in 0..20 {
            let bins = rng.gen_range(2..40usize);
            let offset = rng.gen_range(-50..50);
            let probs: Vec<f64> = (0..bins).map(|_| rng.gen_range(1e-6..1.0)).collect();
            let total: f64 = probs.iter().sum();
            let probs: Vec<f64> = probs.iter().map(|p| p / total).collect();
            let table = CdfTable::from_probs(offset, &probs).unwrap();
            let n = rng.gen_range(1..3000usize);
            let symbols: Vec<i32> =
                (0..n).map(|_| offset + rng.gen_range(0..bins) as i32).collect();
            let chunk = rc_encode(
                &symbols,
                offset,
                offset + bins as i32 - 1,
                |_| 0,
                std::slice::from_ref(&table),
            )
            .unwrap();
            let back =
                rc_decode(&chunk, n, |_| 0, std::slice::from_ref(&table)).unwrap();
            assert_eq!(back, symbols, "trial {trial}");
        }
    }

    #[test]
    fn chunk_wire_roundtrip() {
        let chunk = CodedChunk { symbol_min: -7, symbol_max: 12, payload: vec![1, 2, 3, 9] };
        let mut buf = Vec::new();
        chunk.write_to(&mut buf);
        assert_eq!(buf.len(), chunk.wire_bytes());
        let mut pos = 0;
        let back = CodedChunk::read_from(&buf, &mut pos).unwrap();
        assert_eq!(pos, buf.len());
        assert_eq!(back, chunk);
    }

    #[test]
    fn cdf_quantization_is_strictly_increasing() {
        // Extremely skewed probabilities still get at least one count per bin.
        let mut probs = vec![1e-12; 64];
        probs[0] = 1.0;
        let t = CdfTable::from_probs(-32, &probs).unwrap();
        for i in 0..t.bins() {
            assert!(t.cum[i + 1] > t.cum[i]);
        }
        assert_eq!(*t.cum.last().unwrap(), PROB_TOTAL);
    }
}
