//! Range coder and bitstream container.
//!
//! The coder is a byte-oriented range coder with a 48-bit active window and
//! explicit carry resolution. Totals are fixed at 2^16, so the range/total
//! division is a shift and the per-symbol truncation excess is below
//! 2^-24/ln2 bits — the realized payload provably stays within 64 bits of the
//! table's ideal code length including the flush and integrity byte.
//!
//! Streams are wrapped in a fixed 32-byte header (`RDBS`, little-endian
//! fields) carrying the model id, original image dims, latent channel count,
//! symbol range, and the packed transform index; padded dims and the latent
//! spatial extent are derived from those, never stored. A one-byte fold of an
//! FNV-1a hash over the symbol stream sits at the end of the payload so that
//! corrupt payloads fail loudly instead of decoding to silent garbage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("bad magic: expected \"RDBS\"")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    BadVersion(u16),
    #[error("buffer truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("invalid symbol range [{0}, {1}]")]
    BadRange(i32, i32),
    #[error("symbol range spans {0} values; at most {1} fit a 16-bit table")]
    RangeTooWide(usize, usize),
    #[error("channel count mismatch: table has {table}, stream has {stream}")]
    ChannelMismatch { table: usize, stream: usize },
    #[error("corrupt payload: {0}")]
    Corrupt(&'static str),
    #[error("model id mismatch: bitstream {stream:#018x}, decoder {model:#018x}")]
    ModelMismatch { stream: u64, model: u64 },
}

const TOT_BITS: u32 = 16;
const TOT: u64 = 1 << TOT_BITS;
/// Renormalization threshold: the range stays in [2^40, 2^48).
const RANGE_BOT: u64 = 1 << 40;
const WINDOW_MASK: u64 = (1 << 48) - 1;

/// Largest magnitude a latent symbol may take; keeps any per-image symbol
/// range well under the 2^16-total table feasibility bound.
pub const SYMBOL_CLAMP: i32 = 30_000;

// ── range coder ──────────────────────────────────────────────────────────────

struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    pending_ff: u64,
    first: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: WINDOW_MASK + 1 - 1, // 2^48 - 1
            cache: 0,
            pending_ff: 0,
            first: true,
            out: Vec::new(),
        }
    }

    /// Narrows to the slice `[cum, cum + freq)` of the 2^16 total.
    fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && (cum as u64 + freq as u64) <= TOT);
        let r = self.range >> TOT_BITS;
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        while self.range < RANGE_BOT {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        // A byte is ready unless the window top is 0xFF (a later carry could
        // still ripple through it); bit 48 of `low` is the carry itself.
        if self.low < 0xFF00_0000_0000 || self.low > WINDOW_MASK {
            let carry = (self.low >> 48) as u8;
            if !self.first {
                self.out.push(self.cache.wrapping_add(carry));
            }
            while self.pending_ff > 0 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.pending_ff -= 1;
            }
            self.cache = (self.low >> 40) as u8;
            self.first = false;
        } else {
            self.pending_ff += 1;
        }
        self.low = (self.low << 8) & WINDOW_MASK;
    }

    /// Minimal flush: picks the multiple of 2^40 inside [low, low + range)
    /// (one always exists since range >= 2^40) so only the top byte of the
    /// final window needs to be written; the decoder zero-fills the rest.
    fn finish(mut self) -> Vec<u8> {
        let target = (self.low + (RANGE_BOT - 1)) & !(RANGE_BOT - 1);
        debug_assert!(target - self.low < self.range);
        self.low = target; // may set bit 48: the carry path below resolves it
        self.shift_low();
        self.shift_low();
        self.out
    }
}

struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: WINDOW_MASK,
            input,
            pos: 0,
        };
        for _ in 0..6 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // Reading past the payload yields zeros, matching the minimal flush.
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the scaled value in [0, 2^16) locating the next symbol.
    fn decode_target(&self) -> u32 {
        let r = self.range >> TOT_BITS;
        ((self.code / r).min(TOT - 1)) as u32
    }

    /// Consumes the symbol previously located via [`Self::decode_target`].
    fn consume(&mut self, cum: u32, freq: u32) -> Result<(), EntropyError> {
        let r = self.range >> TOT_BITS;
        let base = r * cum as u64;
        if self.code < base {
            return Err(EntropyError::Corrupt("window underflow"));
        }
        self.code -= base;
        self.range = r * freq as u64;
        if self.code >= self.range {
            return Err(EntropyError::Corrupt("window overflow"));
        }
        while self.range < RANGE_BOT {
            self.code = ((self.code << 8) | self.next_byte() as u64) & WINDOW_MASK;
            self.range <<= 8;
        }
        Ok(())
    }
}

// ── probability tables ───────────────────────────────────────────────────────

/// Per-channel quantized frequency tables over a shared symbol range plus a
/// trailing escape slot; every channel's cumulative table totals exactly 2^16.
#[derive(Debug, Clone)]
pub struct PmfTable {
    ymin: i32,
    ymax: i32,
    /// cum[c] has n_symbols + 2 entries: cum[0] = 0 .. cum[last] = 65536.
    cum: Vec<Vec<u32>>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Discretized-logistic bin probability, matching the rate model.
fn logistic_bin(v: f64, mu: f64, sigma: f64) -> f64 {
    sigmoid((v - mu + 0.5) / sigma) - sigmoid((v - mu - 0.5) / sigma)
}

impl PmfTable {
    /// Builds per-channel tables for symbols `ymin..=ymax` from the codec's
    /// discretized-logistic parameters (`sigma = max(exp(log_scale), 1e-6)`).
    pub fn from_logistic(
        mu: &[f32],
        log_scale: &[f32],
        ymin: i32,
        ymax: i32,
    ) -> Result<Self, EntropyError> {
        assert_eq!(mu.len(), log_scale.len());
        let n_symbols = Self::validate_range(ymin, ymax)?;
        let mut cum = Vec::with_capacity(mu.len());
        let mut probs = vec![0.0f64; n_symbols + 1];
        for c in 0..mu.len() {
            let m = mu[c] as f64;
            let s = (log_scale[c] as f64).exp().max(1e-6);
            let mut mass = 0.0;
            for (i, p) in probs[..n_symbols].iter_mut().enumerate() {
                *p = logistic_bin((ymin + i as i32) as f64, m, s);
                mass += *p;
            }
            probs[n_symbols] = (1.0 - mass).max(0.0); // escape takes the tails
            cum.push(quantize_pmf(&probs));
        }
        Ok(Self { ymin, ymax, cum })
    }

    /// Builds tables directly from per-channel probabilities (tests and
    /// synthetic streams); the escape slot is appended internally.
    pub fn from_probabilities(
        probs_per_channel: &[Vec<f64>],
        ymin: i32,
        ymax: i32,
    ) -> Result<Self, EntropyError> {
        let n_symbols = Self::validate_range(ymin, ymax)?;
        let mut cum = Vec::with_capacity(probs_per_channel.len());
        for p in probs_per_channel {
            assert_eq!(p.len(), n_symbols);
            let mut with_escape = p.clone();
            with_escape.push((1.0 - p.iter().sum::<f64>()).max(0.0));
            cum.push(quantize_pmf(&with_escape));
        }
        Ok(Self { ymin, ymax, cum })
    }

    fn validate_range(ymin: i32, ymax: i32) -> Result<usize, EntropyError> {
        if ymin > ymax {
            return Err(EntropyError::BadRange(ymin, ymax));
        }
        let n_symbols = (ymax - ymin + 1) as usize;
        // n_symbols + 1 slots each need frequency >= 1 within the 2^16 total
        let max_symbols = (TOT - 2) as usize;
        if n_symbols > max_symbols {
            return Err(EntropyError::RangeTooWide(n_symbols, max_symbols));
        }
        Ok(n_symbols)
    }

    pub fn channels(&self) -> usize {
        self.cum.len()
    }

    pub fn symbol_range(&self) -> (i32, i32) {
        (self.ymin, self.ymax)
    }

    fn n_symbols(&self) -> usize {
        (self.ymax - self.ymin + 1) as usize
    }

    fn escape_index(&self) -> usize {
        self.n_symbols()
    }

    fn slot(&self, channel: usize, value: i32) -> usize {
        if value < self.ymin || value > self.ymax {
            self.escape_index()
        } else {
            let _ = channel;
            (value - self.ymin) as usize
        }
    }

    fn cum_freq(&self, channel: usize, slot: usize) -> (u32, u32) {
        let t = &self.cum[channel];
        (t[slot], t[slot + 1] - t[slot])
    }

    /// Frequency assigned to `value` in `channel` (escape excluded), mostly
    /// for tests and diagnostics.
    pub fn frequency(&self, channel: usize, value: i32) -> u32 {
        let s = self.slot(channel, value);
        if s == self.escape_index() {
            0
        } else {
            self.cum_freq(channel, s).1
        }
    }

    pub fn escape_frequency(&self, channel: usize) -> u32 {
        self.cum_freq(channel, self.escape_index()).1
    }

    /// Ideal code length in bits for one symbol under this table, counting
    /// the escape-plus-raw cost for out-of-range values.
    pub fn ideal_bits(&self, channel: usize, value: i32) -> f64 {
        let s = self.slot(channel, value);
        let (_, freq) = self.cum_freq(channel, s);
        let base = -((freq as f64 / TOT as f64).log2());
        if s == self.escape_index() {
            base + 16.0
        } else {
            base
        }
    }

    /// Binary search for the slot containing scaled target `t`.
    fn find_slot(&self, channel: usize, t: u32) -> usize {
        let cum = &self.cum[channel];
        // partition_point: first index with cum[i+1] > t
        let mut lo = 0usize;
        let mut hi = cum.len() - 1; // slots are 0..len-1
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if cum[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Quantizes probabilities (escape slot already appended) to integer
/// frequencies summing to exactly 2^16, each at least 1: round at scale
/// (2^16 - n_slots), then repair the total by largest-remainder with index
/// tie-break. Deterministic.
fn quantize_pmf(probs: &[f64]) -> Vec<u32> {
    let n_slots = probs.len();
    let scale = (TOT as usize - n_slots) as f64;
    let mut freqs: Vec<i64> = Vec::with_capacity(n_slots);
    let mut raw: Vec<f64> = Vec::with_capacity(n_slots);
    for &p in probs {
        let r = p.max(0.0) * scale;
        raw.push(r);
        freqs.push(r.round().max(1.0) as i64);
    }
    let mut diff = TOT as i64 - freqs.iter().sum::<i64>();
    if diff != 0 {
        // order slots by how under-represented they are (raw - assigned)
        let mut order: Vec<usize> = (0..n_slots).collect();
        order.sort_by(|&a, &b| {
            let ra = raw[a] - freqs[a] as f64;
            let rb = raw[b] - freqs[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut k = 0;
        while diff > 0 {
            freqs[order[k % n_slots]] += 1;
            diff -= 1;
            k += 1;
        }
        // over-total: walk from the most over-represented end instead
        let mut k = n_slots;
        while diff < 0 {
            k = if k == 0 { n_slots } else { k };
            let idx = order[k - 1];
            if freqs[idx] > 1 {
                freqs[idx] -= 1;
                diff += 1;
            }
            k -= 1;
        }
    }
    let mut cum = Vec::with_capacity(n_slots + 1);
    let mut acc = 0u32;
    cum.push(0);
    for f in freqs {
        acc += f as u32;
        cum.push(acc);
    }
    debug_assert_eq!(*cum.last().unwrap(), TOT as u32);
    cum
}

// ── bitstream container ──────────────────────────────────────────────────────

pub const BITSTREAM_MAGIC: [u8; 4] = *b"RDBS";
pub const BITSTREAM_VERSION: u16 = 1;
/// Fixed header size in bytes; padded dims and the latent spatial extent are
/// derived from the original dims, the transform index, and the model config.
pub const HEADER_BYTES: usize = 32;

/// One encoded image: fixed header plus range-coded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub version: u16,
    /// Hash of the encoder parameters; decode refuses a mismatched model.
    pub model_id: u64,
    pub orig_h: u16,
    pub orig_w: u16,
    pub latent_channels: u16,
    pub ymin: i16,
    pub ymax: i16,
    /// Packed transform index; 0 means identity (plain encode).
    pub transform_index: u32,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    /// 8 * (header + payload bytes) / original pixel count.
    pub fn measured_bpp(&self) -> f64 {
        (self.total_bytes() as f64 * 8.0) / (self.orig_h as f64 * self.orig_w as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&BITSTREAM_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.orig_h.to_le_bytes());
        out.extend_from_slice(&self.orig_w.to_le_bytes());
        out.extend_from_slice(&self.latent_channels.to_le_bytes());
        out.extend_from_slice(&self.ymin.to_le_bytes());
        out.extend_from_slice(&self.ymax.to_le_bytes());
        out.extend_from_slice(&self.transform_index.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_BYTES);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EntropyError> {
        if bytes.len() < HEADER_BYTES {
            return Err(EntropyError::Truncated {
                need: HEADER_BYTES,
                have: bytes.len(),
            });
        }
        if bytes[0..4] != BITSTREAM_MAGIC {
            return Err(EntropyError::BadMagic);
        }
        let u16le = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16le(4);
        if version != BITSTREAM_VERSION {
            return Err(EntropyError::BadVersion(version));
        }
        let model_id = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let payload_len =
            u32::from_le_bytes(bytes[28..32].try_into().unwrap()) as usize;
        let need = HEADER_BYTES + payload_len;
        if bytes.len() < need {
            return Err(EntropyError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        Ok(Self {
            version,
            model_id,
            orig_h: u16le(14),
            orig_w: u16le(16),
            latent_channels: u16le(18),
            ymin: u16le(20) as i16,
            ymax: u16le(22) as i16,
            transform_index: u32::from_le_bytes(bytes[24..28].try_into().unwrap()),
            payload: bytes[HEADER_BYTES..need].to_vec(),
        })
    }
}

// ── stream encode / decode ───────────────────────────────────────────────────

/// Folds an FNV-1a hash of the symbol stream to one byte.
fn symbol_checksum(values: &[i32]) -> u8 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    let folded = h ^ (h >> 32);
    let folded = folded ^ (folded >> 16);
    (folded ^ (folded >> 8)) as u8
}

/// Encodes latent symbols (channel-major, `plane` values per channel) into a
/// payload under `table`. Out-of-range values cost an escape plus 16 raw bits.
pub fn encode_payload(
    table: &PmfTable,
    values: &[i32],
    channels: usize,
    plane: usize,
) -> Result<Vec<u8>, EntropyError> {
    if table.channels() != channels {
        return Err(EntropyError::ChannelMismatch {
            table: table.channels(),
            stream: channels,
        });
    }
    assert_eq!(values.len(), channels * plane);
    let mut enc = RangeEncoder::new();
    for c in 0..channels {
        for &v in &values[c * plane..(c + 1) * plane] {
            let slot = table.slot(c, v);
            let (cum, freq) = table.cum_freq(c, slot);
            enc.encode(cum, freq);
            if slot == table.escape_index() {
                // raw 16-bit value as a width-1 slice of the full total
                let raw = (v.clamp(i16::MIN as i32, i16::MAX as i32) as i16) as u16;
                enc.encode(raw as u32, 1);
            }
        }
    }
    let mut payload = enc.finish();
    payload.push(symbol_checksum(values));
    Ok(payload)
}

/// Decodes `channels * plane` symbols from a payload produced by
/// [`encode_payload`] with the same table.
pub fn decode_payload(
    table: &PmfTable,
    payload: &[u8],
    channels: usize,
    plane: usize,
) -> Result<Vec<i32>, EntropyError> {
    if table.channels() != channels {
        return Err(EntropyError::ChannelMismatch {
            table: table.channels(),
            stream: channels,
        });
    }
    if payload.is_empty() {
        return Err(EntropyError::Corrupt("empty payload"));
    }
    let body = &payload[..payload.len() - 1];
    let want_sum = payload[payload.len() - 1];
    let mut dec = RangeDecoder::new(body);
    let mut values = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        for _ in 0..plane {
            let t = dec.decode_target();
            let slot = table.find_slot(c, t);
            let (cum, freq) = table.cum_freq(c, slot);
            dec.consume(cum, freq)?;
            if slot == table.escape_index() {
                let raw = dec.decode_target();
                dec.consume(raw, 1)?;
                values.push((raw as u16 as i16) as i32);
            } else {
                values.push(table.ymin + slot as i32);
            }
        }
    }
    if symbol_checksum(&values) != want_sum {
        return Err(EntropyError::Corrupt("symbol checksum mismatch"));
    }
    Ok(values)
}

/// Ideal total code length of `values` under `table`, in bits — the
/// reference for the 64-bit coder-slack invariant.
pub fn ideal_payload_bits(
    table: &PmfTable,
    values: &[i32],
    channels: usize,
    plane: usize,
) -> f64 {
    let mut bits = 0.0;
    for c in 0..channels {
        for &v in &values[c * plane..(c + 1) * plane] {
            bits += table.ideal_bits(c, v);
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_table(channels: usize, ymin: i32, ymax: i32) -> PmfTable {
        let n = (ymax - ymin + 1) as usize;
        let probs = vec![vec![1.0 / n as f64; n]; channels];
        PmfTable::from_probabilities(&probs, ymin, ymax).unwrap()
    }

    #[test]
    fn two_symbol_quantization_is_an_exact_total_split() {
        let table = PmfTable::from_probabilities(&[vec![0.5, 0.5]], 0, 1).unwrap();
        let f0 = table.frequency(0, 0);
        let f1 = table.frequency(0, 1);
        let fe = table.escape_frequency(0);
        assert_eq!(f0 + f1 + fe, 65536);
        assert!(fe >= 1);
        // the deterministic largest-remainder repair gives this exact split
        assert_eq!((f0, f1, fe), (32768, 32767, 1));
    }

    #[test]
    fn concentrated_pmf_keeps_all_slots_alive() {
        let table =
            PmfTable::from_probabilities(&[vec![1.0, 0.0, 0.0, 0.0]], 0, 3).unwrap();
        assert!(table.frequency(0, 0) >= 65536 - 5);
        for v in 1..=3 {
            assert!(table.frequency(0, v) >= 1);
        }
        assert!(table.escape_frequency(0) >= 1);
    }

    #[test]
    fn logistic_table_matches_model_probabilities() {
        let table = PmfTable::from_logistic(&[0.0], &[0.0], -8, 8).unwrap();
        // center symbol of a unit logistic has mass ~0.2449
        let p0 = table.frequency(0, 0) as f64 / 65536.0;
        assert!((p0 - 0.2449).abs() < 1e-3, "p0={p0}");
        // symmetric within quantization
        let diff = (table.frequency(0, 1) as i64 - table.frequency(0, -1) as i64).abs();
        assert!(diff <= 1);
    }

    #[test]
    fn round_trip_random_latents_is_exact_with_bounded_slack() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        for trial in 0..1000 {
            let channels = rng.random_range(1..4usize);
            let plane = rng.random_range(0..80usize);
            let half = rng.random_range(1..20i32);
            let (ymin, ymax) = (-half, half);
            let n = (ymax - ymin + 1) as usize;
            // random spiky pmfs per channel
            let probs: Vec<Vec<f64>> = (0..channels)
                .map(|_| {
                    let mut p: Vec<f64> =
                        (0..n).map(|_| rng.random_range(0.001..1.0f64)).collect();
                    if rng.random_bool(0.3) {
                        p[rng.random_range(0..n)] += 40.0; // spike
                    }
                    let s: f64 = p.iter().sum();
                    p.iter().map(|v| v / s).collect()
                })
                .collect();
            let table = PmfTable::from_probabilities(&probs, ymin, ymax).unwrap();
            let values: Vec<i32> = (0..channels * plane)
                .map(|_| rng.random_range(ymin..=ymax))
                .collect();
            let payload = encode_payload(&table, &values, channels, plane).unwrap();
            let decoded = decode_payload(&table, &payload, channels, plane).unwrap();
            assert_eq!(decoded, values, "trial {trial}");

            let ideal = ideal_payload_bits(&table, &values, channels, plane);
            let actual = payload.len() as f64 * 8.0;
            assert!(
                actual <= ideal + 64.0,
                "trial {trial}: {actual} bits vs ideal {ideal:.2} + 64"
            );
        }
    }

    #[test]
    fn eight_binary_symbols_cost_about_a_byte() {
        let table = uniform_table(1, 0, 1);
        let values = [0, 1, 1, 0, 1, 0, 0, 1];
        let payload = encode_payload(&table, &values, 1, 8).unwrap();
        let ideal = ideal_payload_bits(&table, &values, 1, 8);
        assert!(ideal < 8.01);
        assert!((payload.len() as f64) * 8.0 <= ideal + 64.0);
        assert_eq!(decode_payload(&table, &payload, 1, 8).unwrap(), values);
    }

    #[test]
    fn empty_latent_flushes_small() {
        let table = uniform_table(2, -3, 3);
        let payload = encode_payload(&table, &[], 2, 0).unwrap();
        assert!(payload.len() <= 8, "flush-only payload is {}", payload.len());
        assert_eq!(decode_payload(&table, &payload, 2, 0).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn out_of_range_values_ride_the_escape_slot() {
        let table = PmfTable::from_logistic(&[0.0, 0.5], &[0.0, -0.3], -2, 2).unwrap();
        let values = [0, 1, 2000, -2, -32768, 2, 32767, 0];
        let payload = encode_payload(&table, &values, 2, 4).unwrap();
        let decoded = decode_payload(&table, &payload, 2, 4).unwrap();
        assert_eq!(decoded, values);
        // each escape costs its slot bits plus 16 raw bits, still within slack
        let ideal = ideal_payload_bits(&table, &values, 2, 4);
        assert!((payload.len() as f64) * 8.0 <= ideal + 64.0);
    }

    #[test]
    fn adversarial_worst_case_stream_stays_within_slack() {
        // every symbol takes the least likely slot of a spiky table — the
        // per-symbol truncation loss argument must hold even here
        let mut probs = vec![0.9999f64];
        probs.extend(std::iter::repeat(0.0001 / 15.0).take(15));
        let norm: f64 = probs.iter().sum();
        let probs: Vec<f64> = probs.iter().map(|p| p / norm).collect();
        let table = PmfTable::from_probabilities(&[probs], 0, 15).unwrap();
        let values = vec![15i32; 4096];
        let payload = encode_payload(&table, &values, 1, 4096).unwrap();
        let decoded = decode_payload(&table, &payload, 1, 4096).unwrap();
        assert_eq!(decoded, values);
        let ideal = ideal_payload_bits(&table, &values, 1, 4096);
        assert!(
            (payload.len() as f64) * 8.0 <= ideal + 64.0,
            "{} vs {}",
            payload.len() * 8,
            ideal
        );
    }

    #[test]
    fn encoding_is_byte_deterministic() {
        let table = PmfTable::from_logistic(&[0.1], &[0.2], -10, 10).unwrap();
        let values: Vec<i32> = (0..500).map(|i| ((i * 7) % 21) - 10).collect();
        let a = encode_payload(&table, &values, 1, 500).unwrap();
        let b = encode_payload(&table, &values, 1, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_payload_fails_loudly() {
        let table = uniform_table(1, -5, 5);
        let values: Vec<i32> = (-5..=5).cycle().take(200).collect();
        let payload = encode_payload(&table, &values, 1, 200).unwrap();

        // flip a byte in the middle
        let mut bad = payload.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x41;
        assert!(decode_payload(&table, &bad, 1, 200).is_err());

        // truncate
        let short = &payload[..payload.len() - 3];
        assert!(decode_payload(&table, short, 1, 200).is_err());

        // empty
        assert!(decode_payload(&table, &[], 1, 200).is_err());
    }

    #[test]
    fn header_layout_is_32_bytes_and_round_trips() {
        let bs = Bitstream {
            version: BITSTREAM_VERSION,
            model_id: 0x0123_4567_89ab_cdef,
            orig_h: 256,
            orig_w: 192,
            latent_channels: 24,
            ymin: -17,
            ymax: 23,
            transform_index: 142_804_999,
            payload: vec![1, 2, 3, 4, 5],
        };
        let bytes = bs.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + 5);
        assert_eq!(&bytes[0..4], b"RDBS");
        let back = Bitstream::from_bytes(&bytes).unwrap();
        assert_eq!(back, bs);
    }

    #[test]
    fn header_only_bpp_at_256_square() {
        let bs = Bitstream {
            version: BITSTREAM_VERSION,
            model_id: 0,
            orig_h: 256,
            orig_w: 256,
            latent_channels: 0,
            ymin: 0,
            ymax: 0,
            transform_index: 0,
            payload: vec![],
        };
        assert_eq!(bs.measured_bpp(), 256.0 / 65536.0);
        // the u32 transform field alone is 32 bits: ~4.9e-4 bpp at 256^2
        assert!((32.0 / 65536.0 - 4.9e-4_f64).abs() < 1e-5);
    }

    #[test]
    fn container_rejects_malformed_bytes() {
        let good = Bitstream {
            version: BITSTREAM_VERSION,
            model_id: 9,
            orig_h: 8,
            orig_w: 8,
            latent_channels: 2,
            ymin: -1,
            ymax: 1,
            transform_index: 0,
            payload: vec![0xAA; 10],
        }
        .to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Bitstream::from_bytes(&bad_magic),
            Err(EntropyError::BadMagic)
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 0xFF;
        assert!(matches!(
            Bitstream::from_bytes(&bad_version),
            Err(EntropyError::BadVersion(_))
        ));

        assert!(matches!(
            Bitstream::from_bytes(&good[..HEADER_BYTES + 2]),
            Err(EntropyError::Truncated { .. })
        ));
        assert!(matches!(
            Bitstream::from_bytes(&good[..10]),
            Err(EntropyError::Truncated { .. })
        ));
    }

    #[test]
    fn table_rejects_bad_ranges() {
        assert!(matches!(
            PmfTable::from_logistic(&[0.0], &[0.0], 3, 2),
            Err(EntropyError::BadRange(3, 2))
        ));
        assert!(matches!(
            PmfTable::from_logistic(&[0.0], &[0.0], -40000, 40000),
            Err(EntropyError::RangeTooWide(..))
        ));
    }

    #[test]
    fn measured_bits_track_the_logistic_model() {
        // draw latents from the same logistic the table models; the realized
        // payload must stay within 2% + fixed slack of the model estimate
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let channels = 8usize;
        let plane = 32 * 32usize;
        let mu: Vec<f32> = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        let ls: Vec<f32> = (0..channels).map(|_| rng.random_range(-0.3..1.0)).collect();
        let mut values = Vec::with_capacity(channels * plane);
        let mut model_bits = 0.0f64;
        for c in 0..channels {
            let m = mu[c] as f64;
            let s = (ls[c] as f64).exp();
            for _ in 0..plane {
                // inverse-CDF logistic sample, rounded to the symbol grid
                let u: f64 = rng.random_range(1e-9..1.0);
                let x = m + s * (u / (1.0 - u)).ln();
                let v = x.round().clamp(-30000.0, 30000.0) as i32;
                values.push(v);
                model_bits -= logistic_bin(v as f64, m, s)
                    .max(1.0 / 65536.0)
                    .log2();
            }
        }
        let ymin = *values.iter().min().unwrap();
        let ymax = *values.iter().max().unwrap();
        let table = PmfTable::from_logistic(&mu, &ls, ymin, ymax).unwrap();
        let payload = encode_payload(&table, &values, channels, plane).unwrap();
        assert_eq!(
            decode_payload(&table, &payload, channels, plane).unwrap(),
            values
        );
        let actual_bits = payload.len() as f64 * 8.0;
        let slack = 0.02 * model_bits + (32.0 * 8.0 + 64.0);
        assert!(
            (actual_bits - model_bits).abs() <= slack,
            "actual {actual_bits:.1} vs model {model_bits:.1}, slack {slack:.1}"
        );
    }
}
