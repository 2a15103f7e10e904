//! Rate and distortion metrics: bpp, D1-PSNR, BD-rate.

use nalgebra::{DMatrix, DVector};
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::tensor::{Coord3, SparseTensor3};

/// PSNR reported for lossless reconstructions.
pub const D1_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct D1Config {
    /// Peak is `peak_factor * (2^N - 1)^2`.
    pub peak_factor: f64,
    pub cap_db: f64,
}

impl Default for D1Config {
    fn default() -> Self {
        Self { peak_factor: 3.0, cap_db: D1_CAP_DB }
    }
}

/// Exact nearest-neighbor lookup over grid buckets stored in Morton order.
struct GridIndex {
    shift: u32,
    cells_per_axis: i64,
    points: Vec<Coord3>,
    buckets: FxHashMap<u64, (usize, usize)>,
}

impl GridIndex {
    fn new(coords: &[Coord3], bit_depth: u8) -> Self {
        let n = coords.len().max(1) as f64;
        let per_axis_bits = (n.log2() / 2.0).ceil().max(0.0) as u32;
        let shift = (bit_depth as u32).saturating_sub(per_axis_bits);
        let cell = |c: &Coord3| Coord3::new(c.x >> shift, c.y >> shift, c.z >> shift).key_unchecked();
        let mut keyed: Vec<(u64, Coord3)> = coords.iter().map(|c| (cell(c), *c)).collect();
        keyed.sort_unstable_by_key(|&(k, c)| (k, c.key_unchecked()));
        let mut buckets = FxHashMap::default();
        let mut start = 0;
        for i in 1..=keyed.len() {
            if i == keyed.len() || keyed[i].0 != keyed[start].0 {
                buckets.insert(keyed[start].0, (start, i));
                start = i;
            }
        }
        Self {
            shift,
            cells_per_axis: 1i64 << (bit_depth as u32 - shift.min(bit_depth as u32)),
            points: keyed.into_iter().map(|(_, c)| c).collect(),
            buckets,
        }
    }

    fn scan(&self, cell: [i64; 3], q: Coord3, best: &mut u64) {
        if cell.iter().any(|&v| v < 0 || v >= self.cells_per_axis) {
            return;
        }
        let key = Coord3::new(cell[0] as u32, cell[1] as u32, cell[2] as u32).key_unchecked();
        if let Some(&(a, b)) = self.buckets.get(&key) {
            for p in &self.points[a..b] {
                *best = (*best).min(sq_dist(*p, q));
            }
        }
    }

    /// Squared distance from `q` to the closest indexed point.
    fn nearest(&self, q: Coord3) -> u64 {
        let qc = [(q.x >> self.shift) as i64, (q.y >> self.shift) as i64, (q.z >> self.shift) as i64];
        let side = 1u64 << self.shift;
        let mut best = u64::MAX;
        for r in 0..=self.cells_per_axis {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() == r || dy.abs() == r {
                        for dz in -r..=r {
                            self.scan([qc[0] + dx, qc[1] + dy, qc[2] + dz], q, &mut best);
                        }
                    } else if r > 0 {
                        for dz in [-r, r] {
                            self.scan([qc[0] + dx, qc[1] + dy, qc[2] + dz], q, &mut best);
                        }
                    } else {
                        self.scan(qc, q, &mut best);
                    }
                }
            }
            let reach = r as u64 * side;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

fn sq_dist(a: Coord3, b: Coord3) -> u64 {
    let d = |u: u32, v: u32| (u as i64 - v as i64).pow(2) as u64;
    d(a.x, b.x) + d(a.y, b.y) + d(a.z, b.z)
}

/// Mean squared distance from each point of `from` to its nearest point in `to`.
pub fn nn_mse(from: &SparseTensor3, to: &SparseTensor3) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Metric("D1 needs two non-empty clouds".into()));
    }
    let index = GridIndex::new(to.coords(), to.bit_depth());
    let total: f64 = from.coords().iter().map(|&q| index.nearest(q) as f64).sum();
    Ok(total / from.len() as f64)
}

/// Symmetric point-to-point PSNR in dB, capped at [`D1_CAP_DB`].
pub fn d1_psnr(reference: &SparseTensor3, test: &SparseTensor3, bit_depth: u8) -> Result<f64> {
    d1_psnr_with(reference, test, bit_depth, &D1Config::default())
}

pub fn d1_psnr_with(reference: &SparseTensor3, test: &SparseTensor3, bit_depth: u8, cfg: &D1Config) -> Result<f64> {
    if reference.bit_depth() != bit_depth || test.bit_depth() != bit_depth {
        return Err(Error::Metric(format!(
            "bit depths {} and {} do not match {bit_depth}",
            reference.bit_depth(),
            test.bit_depth()
        )));
    }
    let mse = nn_mse(reference, test)?.max(nn_mse(test, reference)?);
    Ok(psnr_from_mse(mse, bit_depth, cfg))
}

pub fn psnr_from_mse(mse: f64, bit_depth: u8, cfg: &D1Config) -> f64 {
    if mse <= 0.0 {
        return cfg.cap_db;
    }
    let top = ((1u64 << bit_depth) - 1) as f64;
    (10.0 * (cfg.peak_factor * top * top / mse).log10()).min(cfg.cap_db)
}

/// Bits per input point.
pub fn bpp(bytes: u64, points: u64) -> Result<f64> {
    if points == 0 {
        return Err(Error::Metric("bpp of zero points".into()));
    }
    Ok(8.0 * bytes as f64 / points as f64)
}

/// One operating point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    /// Bits per point.
    pub rate: f64,
    /// D1-PSNR in dB.
    pub quality: f64,
}

/// Cubic `log10(rate)` as a function of quality, fitted in normalized units.
#[derive(Clone, Copy, Debug)]
struct LogRateFit {
    center: f64,
    half_span: f64,
    coef: [f64; 4],
}

impl LogRateFit {
    fn new(curve: &[RdPoint]) -> Result<Self> {
        if curve.len() < 4 {
            return Err(Error::Metric(format!("BD-rate needs at least 4 points, got {}", curve.len())));
        }
        for p in curve {
            if !(p.rate > 0.0 && p.rate.is_finite() && p.quality.is_finite()) {
                return Err(Error::Metric(format!("invalid RD point {p:?}")));
            }
        }
        if curve.windows(2).any(|w| w[1].rate <= w[0].rate) {
            return Err(Error::Metric("RD rates must be strictly increasing".into()));
        }
        let (lo, hi) = quality_range(curve);
        if hi <= lo {
            return Err(Error::Metric("RD curve has no quality spread".into()));
        }
        let center = 0.5 * (lo + hi);
        let half_span = 0.5 * (hi - lo);
        let n = curve.len();
        let a = DMatrix::from_fn(n, 4, |i, j| ((curve[i].quality - center) / half_span).powi(j as i32));
        let b = DVector::from_iterator(n, curve.iter().map(|p| p.rate.log10()));
        let c = a.svd(true, true).solve(&b, 1e-12).map_err(|e| Error::Metric(e.to_string()))?;
        Ok(Self { center, half_span, coef: [c[0], c[1], c[2], c[3]] })
    }

    /// Integral over quality from `lo` to `hi`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let t = (q - self.center) / self.half_span;
            (0..4).map(|j| self.coef[j] * t.powi(j as i32 + 1) / (j + 1) as f64).sum::<f64>()
        };
        (anti(hi) - anti(lo)) * self.half_span
    }
}

fn quality_range(curve: &[RdPoint]) -> (f64, f64) {
    curve.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.quality), hi.max(p.quality)))
}

/// Average rate difference of `test` relative to `anchor` at equal quality,
/// in percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let fa = LogRateFit::new(anchor)?;
    let fb = LogRateFit::new(test)?;
    let (a_lo, a_hi) = quality_range(anchor);
    let (b_lo, b_hi) = quality_range(test);
    let (lo, hi) = (a_lo.max(b_lo), a_hi.min(b_hi));
    if hi <= lo {
        return Err(Error::Metric(format!("quality ranges [{a_lo}, {a_hi}] and [{b_lo}, {b_hi}] do not overlap")));
    }
    let avg = (fb.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}
