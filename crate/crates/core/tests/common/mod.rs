//! Independent dense and numerical oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sdpc_core::metrics::RdPoint;
use sdpc_core::nn::ConvKernel;
use sdpc_core::tensor::{Coord3, SparseTensor3};

/// Dense `side³ × channels` grid, zero where the sparse tensor is empty.
pub struct Dense {
    pub side: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_sparse(t: &SparseTensor3, side: usize) -> Self {
        let ch = t.channels();
        let mut data = vec![0.0; side * side * side * ch];
        for (i, c) in t.coords().iter().enumerate() {
            let base = Self::cell(side, c.x as i64, c.y as i64, c.z as i64).unwrap() * ch;
            for k in 0..ch {
                data[base + k] = t.row(i)[k] as f64;
            }
        }
        Self { side, channels: ch, data }
    }

    fn cell(side: usize, x: i64, y: i64, z: i64) -> Option<usize> {
        let s = side as i64;
        ((0..s).contains(&x) && (0..s).contains(&y) && (0..s).contains(&z))
            .then(|| ((x * s + y) * s + z) as usize)
    }

    pub fn at(&self, x: i64, y: i64, z: i64, ch: usize) -> f64 {
        Self::cell(self.side, x, y, z).map_or(0.0, |i| self.data[i * self.channels + ch])
    }
}

fn bias(k: &ConvKernel, co: usize) -> f64 {
    k.bias.as_ref().map_or(0.0, |b| b[co] as f64)
}

/// Zero-padded same-scale convolution at one output voxel.
pub fn dense_conv_at(input: &Dense, k: &ConvKernel, out: Coord3) -> Vec<f64> {
    let r = (k.kernel_size / 2) as i64;
    (0..k.out_channels)
        .map(|co| {
            let mut acc = bias(k, co);
            let mut idx = 0;
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        for ci in 0..k.in_channels {
                            let v = input.at(out.x as i64 + dx, out.y as i64 + dy, out.z as i64 + dz, ci);
                            acc += v * k.weight(idx, ci, co) as f64;
                        }
                        idx += 1;
                    }
                }
            }
            acc
        })
        .collect()
}

/// Stride-2 convolution: parent `p` sums `W[d] · x[2p + d]` over d in {0,1}³.
pub fn dense_down_at(input: &Dense, k: &ConvKernel, parent: Coord3) -> Vec<f64> {
    (0..k.out_channels)
        .map(|co| {
            let mut acc = bias(k, co);
            for d in 0..8usize {
                let (dx, dy, dz) = ((d >> 2) & 1, (d >> 1) & 1, d & 1);
                for ci in 0..k.in_channels {
                    let v = input.at(
                        2 * parent.x as i64 + dx as i64,
                        2 * parent.y as i64 + dy as i64,
                        2 * parent.z as i64 + dz as i64,
                        ci,
                    );
                    acc += v * k.weight(d, ci, co) as f64;
                }
            }
            acc
        })
        .collect()
}

/// Transposed stride-2 convolution: child `c` receives `W[c mod 2] · x[c / 2]`.
pub fn dense_up_at(input: &Dense, k: &ConvKernel, child: Coord3) -> Vec<f64> {
    let d = ((child.x & 1) << 2 | (child.y & 1) << 1 | (child.z & 1)) as usize;
    (0..k.out_channels)
        .map(|co| {
            let mut acc = bias(k, co);
            for ci in 0..k.in_channels {
                let v = input.at((child.x / 2) as i64, (child.y / 2) as i64, (child.z / 2) as i64, ci);
                acc += v * k.weight(d, ci, co) as f64;
            }
            acc
        })
        .collect()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, size: usize, cin: usize, cout: usize) -> ConvKernel {
    let mut k = ConvKernel::zeros(size, cin, cout, rng.gen_bool(0.7));
    for w in &mut k.weights {
        *w = rng.gen_range(-1.0..1.0);
    }
    if let Some(b) = &mut k.bias {
        for v in b {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    k
}

/// Random sparse tensor inside a `side³` grid.
pub fn random_tensor(rng: &mut ChaCha8Rng, side: u32, channels: usize, bit_depth: u8) -> SparseTensor3 {
    let fill = rng.gen_range(0.1..0.9);
    let mut coords = Vec::new();
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                if rng.gen_bool(fill) {
                    coords.push(Coord3::new(x, y, z));
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push(Coord3::new(0, 0, 0));
    }
    let feats = (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseTensor3::canonicalize(coords, feats, channels, bit_depth).unwrap()
}

pub fn max_abs_err(got: &SparseTensor3, want: impl Fn(Coord3) -> Vec<f64>) -> f64 {
    let mut worst = 0f64;
    for (i, &c) in got.coords().iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(want(c)) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    worst
}

/// Least-squares cubic by normal equations and Gauss-Jordan elimination,
/// in qualities shifted by `shift`.
fn cubic_fit(curve: &[RdPoint], shift: f64) -> [f64; 4] {
    let mut m = [[0.0f64; 5]; 4];
    for p in curve {
        let t = p.quality - shift;
        let basis = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] += basis[i] * basis[j];
            }
            m[i][4] += basis[i] * p.rate.log10();
        }
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, pivot);
        for row in 0..4 {
            if row != col {
                let f = m[row][col] / m[col][col];
                let pivot_row = m[col];
                for (x, p) in m[row].iter_mut().zip(pivot_row).skip(col) {
                    *x -= f * p;
                }
            }
        }
    }
    [0, 1, 2, 3].map(|i| m[i][4] / m[i][i])
}

/// BD-rate by midpoint integration of the two fitted curves over `samples` points.
pub fn bd_rate_oracle(a: &[RdPoint], b: &[RdPoint], samples: usize) -> f64 {
    let range = |c: &[RdPoint]| {
        c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.quality), hi.max(p.quality)))
    };
    let (alo, ahi) = range(a);
    let (blo, bhi) = range(b);
    let (lo, hi) = (alo.max(blo), ahi.min(bhi));
    let shift = 0.5 * (lo + hi);
    let (ca, cb) = (cubic_fit(a, shift), cubic_fit(b, shift));
    let eval = |c: &[f64; 4], q: f64| {
        let t = q - shift;
        c[0] + t * (c[1] + t * (c[2] + t * c[3]))
    };
    let h = (hi - lo) / samples as f64;
    let mut sum = 0.0;
    for i in 0..samples {
        let q = lo + (i as f64 + 0.5) * h;
        sum += eval(&cb, q) - eval(&ca, q);
    }
    (10f64.powf(sum * h / (hi - lo)) - 1.0) * 100.0
}

/// Random curve of `n` points with increasing rate and quality.
pub fn random_curve(rng: &mut ChaCha8Rng, n: usize, q_start: f64) -> Vec<RdPoint> {
    let mut rate = rng.gen_range(0.02..0.2);
    let mut quality = q_start;
    (0..n)
        .map(|_| {
            let p = RdPoint { rate, quality };
            rate *= rng.gen_range(1.3..2.2);
            quality += rng.gen_range(1.0..4.0);
            p
        })
        .collect()
}
