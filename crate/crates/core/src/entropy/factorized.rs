//! Per-channel factorized prior over quantized latent symbols.
//!
//! Each channel owns a categorical distribution over `[-L, L]` given by
//! trainable logits. For coding, the distribution is frozen into integer
//! frequencies (every symbol at least 1, total 2^16). Symbols with
//! `|s| >= L` code the boundary symbol `±L` followed by the overflow
//! `|s| - L` as an order-0 Exp-Golomb code of equiprobable bits.

use crate::entropy::range_coder::{QuantProb, RangeDecoder, RangeEncoder, FREQ_TOTAL};
use crate::error::{Error, Result};

pub const DEFAULT_HALF_RANGE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel {
    pub channels: usize,
    pub half_range: usize,
    /// `channels x (2L + 1)` logits, row-major.
    pub logits: Vec<f32>,
    freq: Option<Vec<u32>>,
    cum: Option<Vec<u32>>,
}

impl FactorizedModel {
    /// Flat distribution (all logits zero), frozen.
    pub fn uniform(channels: usize, half_range: usize) -> Self {
        assert!(half_range >= 1, "entropy model needs a half range of at least 1");
        let n = channels * (2 * half_range + 1);
        let mut m = Self { channels, half_range, logits: vec![0.0; n], freq: None, cum: None };
        m.freeze();
        m
    }

    pub fn from_logits(channels: usize, half_range: usize, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != channels * (2 * half_range + 1) {
            return Err(Error::Shape(format!(
                "{} logits for {channels} channels over [-{half_range}, {half_range}]",
                logits.len()
            )));
        }
        if half_range == 0 {
            return Err(Error::Config("entropy model needs a half range of at least 1".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("entropy model logits".into()));
        }
        Ok(Self { channels, half_range, logits, freq: None, cum: None })
    }

    pub fn symbols(&self) -> usize {
        2 * self.half_range + 1
    }

    /// Marks the table stale after the logits change.
    pub fn invalidate(&mut self) {
        self.freq = None;
        self.cum = None;
    }

    /// Probabilities of one channel computed from the logits.
    pub fn pmf(&self, channel: usize) -> Vec<f64> {
        let s = self.symbols();
        let row = &self.logits[channel * s..(channel + 1) * s];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = row.iter().map(|&v| libm::exp(v as f64 - max)).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Freezes the logits into integer frequencies.
    pub fn freeze(&mut self) {
        let s = self.symbols();
        let spare = (FREQ_TOTAL as usize - s) as f64;
        let mut freq = Vec::with_capacity(self.channels * s);
        for c in 0..self.channels {
            let pmf = self.pmf(c);
            let mut f: Vec<u32> = pmf.iter().map(|&p| 1 + (p * spare).floor() as u32).collect();
            let total: u32 = f.iter().sum();
            let mut best = 0;
            for (i, &p) in pmf.iter().enumerate() {
                if p > pmf[best] {
                    best = i;
                }
            }
            f[best] += FREQ_TOTAL - total;
            freq.extend(f);
        }
        self.set_frequencies(freq).expect("freeze produces a valid table");
    }

    /// Installs a frozen table, validating it.
    pub fn set_frequencies(&mut self, freq: Vec<u32>) -> Result<()> {
        let s = self.symbols();
        if freq.len() != self.channels * s {
            return Err(Error::Shape("frequency table has the wrong size".into()));
        }
        let mut cum = Vec::with_capacity(self.channels * (s + 1));
        for row in freq.chunks_exact(s) {
            if row.contains(&0) {
                return Err(Error::Format("frequency table has an empty symbol".into()));
            }
            if row.iter().sum::<u32>() != FREQ_TOTAL {
                return Err(Error::Format("frequency table does not sum to 65536".into()));
            }
            let mut acc = 0;
            cum.push(0);
            for &f in row {
                acc += f;
                cum.push(acc);
            }
        }
        self.freq = Some(freq);
        self.cum = Some(cum);
        Ok(())
    }

    pub fn frequencies(&self) -> Result<&[u32]> {
        self.freq
            .as_deref()
            .ok_or_else(|| Error::State("entropy model has not been frozen".into()))
    }

    /// Cumulative table, `channels x (2L + 2)`.
    pub fn table(&self) -> Result<&[u32]> {
        self.cum
            .as_deref()
            .ok_or_else(|| Error::State("entropy model has not been frozen".into()))
    }

    fn index(&self, symbol: i32) -> usize {
        (symbol.clamp(-(self.half_range as i32), self.half_range as i32) + self.half_range as i32)
            as usize
    }

    /// Ideal cost in bits of one symbol under the frozen table, escape included.
    pub fn symbol_bits(&self, channel: usize, symbol: i32) -> Result<f64> {
        let freq = self.frequencies()?;
        let f = freq[channel * self.symbols() + self.index(symbol)];
        let mut bits = -(f as f64 / FREQ_TOTAL as f64).log2();
        if symbol.unsigned_abs() as usize >= self.half_range {
            bits += exp_golomb_len(symbol.unsigned_abs() - self.half_range as u32) as f64;
        }
        Ok(bits)
    }

    /// Total ideal cost of a row-major symbol matrix with `channels` columns.
    pub fn cross_entropy(&self, symbols: &[i32]) -> Result<f64> {
        let mut total = 0.0;
        for (i, &s) in symbols.iter().enumerate() {
            total += self.symbol_bits(i % self.channels, s)?;
        }
        Ok(total)
    }
}

fn exp_golomb_len(n: u32) -> u32 {
    let v = n as u64 + 1;
    2 * (63 - v.leading_zeros()) + 1
}

fn encode_exp_golomb(enc: &mut RangeEncoder, n: u32) {
    let v = n as u64 + 1;
    let bits = 64 - v.leading_zeros();
    for _ in 1..bits {
        enc.encode_bit(QuantProb::HALF, false);
    }
    for i in (0..bits).rev() {
        enc.encode_bit(QuantProb::HALF, (v >> i) & 1 == 1);
    }
}

fn decode_exp_golomb(dec: &mut RangeDecoder<'_>) -> Result<u32> {
    let mut zeros = 0;
    while !dec.decode_bit(QuantProb::HALF)? {
        zeros += 1;
        if zeros > 32 {
            return Err(Error::Decode("escape code too long".into()));
        }
    }
    let mut v: u64 = 1;
    for _ in 0..zeros {
        v = (v << 1) | dec.decode_bit(QuantProb::HALF)? as u64;
    }
    u32::try_from(v - 1).map_err(|_| Error::Decode("escape value overflows".into()))
}

/// Codes a row-major symbol matrix whose column count is `model.channels`.
pub fn encode_latents(enc: &mut RangeEncoder, symbols: &[i32], model: &FactorizedModel) -> Result<()> {
    if !symbols.len().is_multiple_of(model.channels.max(1)) {
        return Err(Error::Shape("latent symbols do not fill whole rows".into()));
    }
    let cum = model.table()?;
    let s = model.symbols();
    let l = model.half_range as u32;
    for (i, &sym) in symbols.iter().enumerate() {
        let c = i % model.channels;
        let idx = model.index(sym);
        let base = c * (s + 1);
        enc.encode_freq(cum[base + idx], cum[base + idx + 1] - cum[base + idx]);
        if sym.unsigned_abs() >= l {
            encode_exp_golomb(enc, sym.unsigned_abs() - l);
        }
    }
    Ok(())
}

pub fn decode_latents(
    dec: &mut RangeDecoder<'_>,
    rows: usize,
    model: &FactorizedModel,
) -> Result<Vec<i32>> {
    let cum = model.table()?;
    let s = model.symbols();
    let l = model.half_range as i32;
    let mut out = Vec::with_capacity(rows * model.channels);
    for i in 0..rows * model.channels {
        let c = i % model.channels;
        let row = &cum[c * (s + 1)..(c + 1) * (s + 1)];
        let target = dec.peek_freq();
        // first index whose upper bound exceeds the target
        let idx = row[1..].partition_point(|&hi| hi <= target);
        dec.consume(row[idx], row[idx + 1] - row[idx])?;
        let mut sym = idx as i32 - l;
        if sym.abs() == l {
            let extra = decode_exp_golomb(dec)? as i64;
            let mag = l as i64 + extra;
            let signed = if sym < 0 { -mag } else { mag };
            sym = i32::try_from(signed).map_err(|_| Error::Decode("latent out of range".into()))?;
        }
        out.push(sym);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn peaked(channels: usize, l: usize) -> FactorizedModel {
        let s = 2 * l + 1;
        let logits = (0..channels * s)
            .map(|i| {
                let v = (i % s) as f32 - l as f32;
                -0.6 * v.abs() - 0.1 * (i / s) as f32 * v
            })
            .collect();
        let mut m = FactorizedModel::from_logits(channels, l, logits).unwrap();
        m.freeze();
        m
    }

    fn roundtrip(symbols: &[i32], m: &FactorizedModel) -> usize {
        let mut e = RangeEncoder::new();
        encode_latents(&mut e, symbols, m).unwrap();
        let bytes = e.finish();
        let mut d = RangeDecoder::new(&bytes).unwrap();
        let back = decode_latents(&mut d, symbols.len() / m.channels, m).unwrap();
        assert_eq!(back, symbols);
        bytes.len()
    }

    #[test]
    fn table_is_strictly_monotone_with_full_mass() {
        let m = peaked(3, 32);
        let s = m.symbols();
        for row in m.table().unwrap().chunks_exact(s + 1) {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(row[s], 65536);
        }
    }

    #[test]
    fn all_zero_symbols_are_cheap() {
        let mut logits = vec![-20.0f32; 2 * 65];
        logits[32] = 20.0;
        logits[65 + 32] = 20.0;
        let mut m = FactorizedModel::from_logits(2, 32, logits).unwrap();
        m.freeze();
        let len = roundtrip(&vec![0; 2000], &m);
        // frozen table gives symbol 0 a mass of (65536 - 64) / 65536
        assert!(len < 16, "{len} bytes");
    }

    #[test]
    fn escape_path_roundtrips() {
        let m = peaked(2, 4);
        let syms = vec![9, -9, 4, -4, 3, 0, 1000, -70000];
        roundtrip(&syms, &m);
        assert!(m.symbol_bits(0, 9).unwrap() > m.symbol_bits(0, 4).unwrap());
    }

    #[test]
    fn unfrozen_model_is_rejected() {
        let m = FactorizedModel::from_logits(1, 2, vec![0.0; 5]).unwrap();
        let mut e = RangeEncoder::new();
        assert!(matches!(encode_latents(&mut e, &[0], &m), Err(Error::State(_))));
    }

    #[test]
    fn sampled_symbols_code_near_entropy() {
        let m = peaked(4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cdfs: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut acc = 0.0;
                m.pmf(c).into_iter().map(|p| { acc += p; acc }).collect()
            })
            .collect();
        let symbols: Vec<i32> = (0..40_000)
            .map(|i| {
                let u: f64 = rng.gen();
                let idx = cdfs[i % 4].iter().position(|&c| u < c).unwrap_or(64);
                idx as i32 - 32
            })
            .collect();
        let ce = m.cross_entropy(&symbols).unwrap();
        let len = roundtrip(&symbols, &m) as f64;
        assert!(len <= ce / 8.0 * 1.005 + 64.0, "{len} vs {}", ce / 8.0);
    }
}
