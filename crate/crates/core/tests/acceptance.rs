//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `SDPC_ACCEPTANCE=1,4` runs a subset;
//! `SDPC_REGEN_GOLDEN=1` rewrites the golden stream fixtures.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;
use sdpc_core::codec::{
    base_scale, decode_frame, decode_sequence, encode_frame, encode_sequence, encode_sequence_with_recon, Bitstream,
    EncodeConfig, FrameType, InterScheme, Mode, Reference, Trace,
};
use sdpc_core::entropy::{decode_latents, encode_latents, FactorizedModel, QuantProb, RangeDecoder, RangeEncoder};
use sdpc_core::io::{grid_cloud, read_ply, voxelize, write_ply, PlyFormat};
use sdpc_core::metrics::{bd_rate, d1_psnr, RdPoint};
use sdpc_core::nn::weights::ModelWeights;
use sdpc_core::nn::{down_conv_s2, sparse_conv, up_conv_s2};
use sdpc_core::sopa::{extract_pyramid, init_weights, FrameContext};
use sdpc_core::tensor::{downsample, Coord3, SparseTensor3};
use sdpc_core::training::{grad_check, synthetic_sequence, train_toy, GradCase, Objective, TrainConfig};

// Tolerances and budgets.
const CONV_MAX_ABS: f64 = 1e-4;
const GRAD_MAX_REL: f64 = 1e-3;
const BIT_RATE_REL: f64 = 0.005;
const BIT_SLACK_BYTES: f64 = 32.0;
const LATENT_RATE_REL: f64 = 0.005;
const LATENT_SLACK_BYTES: f64 = 64.0;
const D1_SINGLE_POINT_DB: f64 = 64.968_725_221_439_83;
const D1_TOL_DB: f64 = 1e-6;
const BD_REL_TOL: f64 = 1e-3;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const MONOTONE_MIN: usize = 9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn random_cloud(rng: &mut ChaCha8Rng, depth: u8, n: usize) -> SparseTensor3 {
    let side = 1u32 << depth;
    let mut coords: Vec<Coord3> = if rng.gen_bool(0.5) {
        (0..n).map(|_| Coord3::new(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..side))).collect()
    } else {
        let mut shape = synthetic_sequence(rng.gen(), depth, 1)[0].coords().to_vec();
        shape.shuffle(rng);
        shape.truncate(n);
        shape
    };
    coords.sort_unstable_by_key(|c| (c.x, c.y, c.z));
    coords.dedup();
    SparseTensor3::from_coords(coords, depth).unwrap()
}

fn roundtrip(frames: &[SparseTensor3], w: &ModelWeights, config: &EncodeConfig) -> bool {
    let stream = encode_sequence(frames, w, config).unwrap();
    let bytes = stream.to_bytes();
    let decoded = decode_sequence(&Bitstream::from_bytes(&bytes).unwrap(), w).unwrap();
    decoded.as_slice() == frames
}

fn lossless_roundtrip() -> Outcome {
    let w = init_weights(4, 2, 8, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = Vec::new();
    for i in 0..100 {
        let depth = 6 + (i % 3) as u8;
        let n = rng.gen_range(50..=5000);
        let cloud = random_cloud(&mut rng, depth, n);
        if !roundtrip(std::slice::from_ref(&cloud), &w, &EncodeConfig::lossless(depth).unwrap()) {
            bad.push(format!("cloud {i}"));
        }
    }
    for i in 0..20u64 {
        let depth = 6 + (i % 2) as u8;
        let seq = synthetic_sequence(5000 + i, depth, 4);
        let config = EncodeConfig::lossless(depth).unwrap();
        for (mode, c) in [("inter", config), ("intra", config.with_inter(false))] {
            if !roundtrip(&seq, &w, &c) {
                bad.push(format!("sequence {i} {mode}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("100 clouds, 20 sequences x2 modes; mismatches {bad:?}"))
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0f64; 5];
    for _ in 0..50 {
        let side = rng.gen_range(1..=5);
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random_tensor(&mut rng, side, cin, 3);
        let dense = Dense::from_sparse(&x, 8);
        let targets = random_tensor(&mut rng, side, 1, 3);
        for (slot, ks) in [1usize, 3, 9].into_iter().enumerate() {
            let k = random_kernel(&mut rng, ks, cin, cout);
            let y = sparse_conv(&x, &k, targets.coords()).unwrap();
            worst[slot] = worst[slot].max(max_abs_err(&y, |c| dense_conv_at(&dense, &k, c)));
        }
        let k = random_kernel(&mut rng, 2, cin, cout);
        let down = down_conv_s2(&x, &k).unwrap();
        worst[3] = worst[3].max(max_abs_err(&down, |c| dense_down_at(&dense, &k, c)));
        let up = up_conv_s2(&x, &k).unwrap();
        worst[4] = worst[4].max(max_abs_err(&up, |c| dense_up_at(&dense, &k, c)));
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        max < CONV_MAX_ABS,
        format!("max abs error K1 {:.1e}, K3 {:.1e}, K9 {:.1e}, down {:.1e}, up {:.1e} (limit {CONV_MAX_ABS:.0e})",
            worst[0], worst[1], worst[2], worst[3], worst[4]),
    )
}

fn gradient_fidelity() -> Outcome {
    let mut worst = (0f64, String::new());
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        for case in GradCase::ALL {
            match grad_check(case, seed) {
                Ok(r) => {
                    if r.max_rel_err > worst.0 {
                        worst = (r.max_rel_err, format!("{case:?} seed {seed}: {}", r.worst));
                    }
                    if r.max_rel_err >= GRAD_MAX_REL {
                        failures.push(format!("{case:?}/{seed}"));
                    }
                }
                Err(e) => failures.push(format!("{case:?}/{seed}: {e}")),
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} cases x 20 seeds, worst rel error {:.2e} at {} (limit {GRAD_MAX_REL:.0e}); failures {failures:?}",
            GradCase::ALL.len(), worst.0, worst.1),
    )
}

fn rate_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut notes = Vec::new();
    let mut pass = true;
    for p in [0.001, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999] {
        let q = QuantProb::new(p).unwrap();
        let bits: Vec<bool> = (0..100_000).map(|_| rng.gen_bool(p)).collect();
        let mut enc = RangeEncoder::new();
        let mut ideal = 0.0;
        for &b in &bits {
            enc.encode_bit(q, b);
            ideal += q.cost(b);
        }
        let out = enc.finish();
        let mut dec = RangeDecoder::new(&out).unwrap();
        let back = bits.iter().all(|&b| dec.decode_bit(q).unwrap() == b);
        let ideal_bytes = ideal / 8.0;
        let ok = back && (out.len() as f64 - ideal_bytes).abs() <= BIT_RATE_REL * ideal_bytes + BIT_SLACK_BYTES;
        pass &= ok;
        notes.push(format!("p={p}: {} vs {ideal_bytes:.1}", out.len()));
    }
    for seed in 0..3u64 {
        let mut r = ChaCha8Rng::seed_from_u64(40 + seed);
        let (channels, half) = (4, 16);
        let logits = (0..channels * (2 * half + 1)).map(|i| {
            let s = (i % (2 * half + 1)) as f32 - half as f32;
            -s.abs() * r.gen_range(0.1..1.5) + r.gen_range(-0.5..0.5)
        });
        let mut model = FactorizedModel::from_logits(channels, half, logits.collect()).unwrap();
        model.freeze();
        let pmfs: Vec<Vec<f64>> = (0..channels).map(|c| model.pmf(c)).collect();
        let symbols: Vec<i32> = (0..100_000)
            .map(|i| {
                let u: f64 = r.gen();
                let pmf = &pmfs[i % channels];
                let mut acc = 0.0;
                let idx = pmf.iter().position(|&p| { acc += p; acc > u }).unwrap_or(pmf.len() - 1);
                let s = idx as i32 - half as i32;
                if s.abs() == half as i32 { s.signum() * (half as i32 + r.gen_range(0..40)) } else { s }
            })
            .collect();
        let mut enc = RangeEncoder::new();
        encode_latents(&mut enc, &symbols, &model).unwrap();
        let out = enc.finish();
        let back = decode_latents(&mut RangeDecoder::new(&out).unwrap(), symbols.len() / channels, &model).unwrap();
        let ideal_bytes = model.cross_entropy(&symbols).unwrap() / 8.0;
        let ok = back == symbols
            && (out.len() as f64 - ideal_bytes).abs() <= LATENT_RATE_REL * ideal_bytes + LATENT_SLACK_BYTES;
        pass &= ok;
        notes.push(format!("latent {seed}: {} vs {ideal_bytes:.1}", out.len()));
    }
    outcome(pass, format!("bytes actual vs ideal: {}", notes.join(", ")))
}

fn held_reference(h: &Option<(SparseTensor3, FrameContext)>, scheme: InterScheme) -> Reference<'_> {
    match (h, scheme) {
        (None, _) => Reference::none(),
        (Some((_, ctx)), InterScheme::Conditional) => Reference::context(ctx),
        (Some((r, _)), InterScheme::Residual) => Reference::recon(r),
    }
}

fn probability_symmetry() -> Outcome {
    let w = init_weights(8, 4, 16, 5).unwrap();
    let n = 6;
    let configs = [
        ("lossless inter", EncodeConfig::lossless(n).unwrap()),
        ("lossless intra", EncodeConfig::lossless(n).unwrap().with_inter(false)),
        ("lossy inter", EncodeConfig::lossy(n, 4).unwrap()),
        ("lossy intra", EncodeConfig::lossy(n, 3).unwrap().with_inter(false)),
        ("lossy residual", EncodeConfig::lossy(n, 4).unwrap().with_scheme(InterScheme::Residual)),
    ];
    let mut frames = 0;
    let mut mismatches = Vec::new();
    let mut probs = 0;
    for (i, (name, config)) in configs.iter().enumerate() {
        let seq = synthetic_sequence(600 + i as u64, n, 4);
        let mut enc_ref: Option<SparseTensor3> = None;
        let mut dec_ref: Option<SparseTensor3> = None;
        for (t, f) in seq.iter().enumerate() {
            let hold = |r: &Option<SparseTensor3>| {
                r.as_ref().map(|r| (r.clone(), extract_pyramid(r, &w, base_scale(config.m)).unwrap()))
            };
            let (eh, dh) = (hold(&enc_ref), hold(&dec_ref));
            let as_ref = |h| held_reference(h, config.scheme);
            let (mut te, mut td) = (Trace::default(), Trace::default());
            let (coded, recon) = encode_frame(f, as_ref(&eh), &w, config, t as u32, Some(&mut te)).unwrap();
            let decoded = decode_frame(&coded, as_ref(&dh), &w, config, Some(&mut td)).unwrap();
            frames += 1;
            probs += te.probs.len();
            if te != td || decoded != recon {
                mismatches.push(format!("{name} frame {t}"));
            }
            if config.inter_enabled {
                enc_ref = Some(recon);
                dec_ref = Some(decoded);
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{frames} frames, {probs} logged probabilities; mismatches {mismatches:?}"),
    )
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        steps: 2500,
        seed: 1,
        width: 8,
        latent_channels: 4,
        half_range: 16,
        bit_depth: 6,
        learning_rate: 3e-3,
        objective: Objective::Joint,
        sequences: 160,
        frames: 4,
        min_lossy_steps: 1,
        max_lossy_steps: 5,
        intra_fraction: 0.25,
        residual_fraction: 0.15,
        ..TrainConfig::default()
    }
}

fn mean_p_payload(stream: &Bitstream, predicted_only: bool) -> (f64, usize) {
    let frames: Vec<_> = stream.frames.iter().skip(1).collect();
    if predicted_only {
        assert!(frames.iter().all(|f| f.header.frame_type == FrameType::Predicted));
    }
    (frames.iter().map(|f| f.payload_len() as f64).sum(), frames.len())
}

fn inter_gain(w: &ModelWeights, trained_in: Duration) -> Outcome {
    let n = toy_config().bit_depth;
    let lossy = EncodeConfig::lossy(n, n - 1).unwrap();
    let lossless = EncodeConfig::lossless(n).unwrap();
    let mut sums = [0.0f64; 5];
    let mut count = 0;
    for s in 0..10u64 {
        let seq = synthetic_sequence(900 + s, n, 4);
        let runs = [
            (lossy, true),
            (lossy.with_inter(false), false),
            (lossy.with_scheme(InterScheme::Residual), true),
            (lossless, true),
            (lossless.with_inter(false), false),
        ];
        for (slot, (c, predicted)) in runs.into_iter().enumerate() {
            let (bytes, k) = mean_p_payload(&encode_sequence(&seq, w, &c).unwrap(), predicted);
            sums[slot] += bytes;
            if slot == 0 {
                count += k;
            }
        }
    }
    let m = sums.map(|v| v / count as f64);
    outcome(
        m[0] < m[1] && m[0] < m[2] && trained_in <= TRAIN_BUDGET,
        format!(
            "trained in {:.0}s; mean P-frame payload bytes: conditional {:.2}, intra-only {:.2}, residual {:.2} \
             (lossless: inter {:.2}, intra {:.2})",
            trained_in.as_secs_f64(), m[0], m[1], m[2], m[3], m[4]
        ),
    )
}

fn lossy_contracts(w: &ModelWeights) -> Outcome {
    let n = 6;
    let mut counts_ok = true;
    let mut monotone = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let cloud = synthetic_sequence(500 + seed, n, 1).remove(0);
        let mut psnr = Vec::new();
        for m in 1..=3u8 {
            let config = EncodeConfig::lossy(n, m).unwrap().with_inter(false);
            let mut te = Trace::default();
            let mut td = Trace::default();
            let (coded, _) = encode_frame(&cloud, Reference::none(), w, &config, 0, Some(&mut te)).unwrap();
            let dec = decode_frame(&coded, Reference::none(), w, &config, Some(&mut td)).unwrap();
            let mut truth = Vec::new();
            let mut c = cloud.coords().to_vec();
            for _ in m..n {
                truth.push(c.len() as u32);
                c = downsample(&c);
            }
            truth.reverse();
            counts_ok &= coded.header.scale_counts == truth
                && td.recon_counts == coded.header.scale_counts
                && te.recon_counts == td.recon_counts
                && dec.len() == cloud.len();
            let p = d1_psnr(&cloud, &dec, n).unwrap();
            counts_ok &= p.is_finite();
            psnr.push(p);
        }
        if psnr.windows(2).all(|w| w[1] > w[0]) {
            monotone += 1;
        }
        rows.push(format!("[{:.1} {:.1} {:.1}]", psnr[0], psnr[1], psnr[2]));
    }
    outcome(
        counts_ok && monotone >= MONOTONE_MIN,
        format!("counts match: {counts_ok}; monotone in {monotone}/10 (need {MONOTONE_MIN}); D1 m=1..3 {}", rows.join(" ")),
    )
}

fn metric_correctness() -> Outcome {
    let n = 10;
    let a = SparseTensor3::from_coords(vec![Coord3::new(0, 0, 0)], n).unwrap();
    let b = SparseTensor3::from_coords(vec![Coord3::new(1, 0, 0)], n).unwrap();
    let d1 = d1_psnr(&a, &b, n).unwrap();
    let d1_ok = (d1 - D1_SINGLE_POINT_DB).abs() < D1_TOL_DB;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0f64;
    for _ in 0..20 {
        let (na, nb, qb) = (rng.gen_range(4..7), rng.gen_range(4..7), rng.gen_range(29.0..33.0));
        let ca = random_curve(&mut rng, na, 30.0);
        let cb = random_curve(&mut rng, nb, qb);
        let got = bd_rate(&ca, &cb).unwrap();
        let want = bd_rate_oracle(&ca, &cb, 10_000);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let base = random_curve(&mut rng, 5, 31.0);
    let halved: Vec<RdPoint> = base.iter().map(|p| RdPoint { rate: p.rate / 2.0, ..*p }).collect();
    let half = bd_rate(&base, &halved).unwrap();
    let half_ok = (half + 50.0).abs() < 1e-9;
    outcome(
        d1_ok && worst < BD_REL_TOL && half_ok,
        format!("D1 single point {d1:.9} dB; BD vs oracle worst rel {worst:.2e} (limit {BD_REL_TOL:.0e}); halved rates {half:.6}%"),
    )
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

const GOLDEN_FRAMES: usize = 3;
const GOLDEN_STREAMS: [(&str, &str); 2] = [
    ("lossless.bin", "18c49bcfb4254f171ce057844104844e0163cdb6c962ee5cb6dc1f25b657309d"),
    ("lossy.bin", "bd4c8e926970739699399f2379666942cc92a6b5dbf4b72b2cd43b44270f488b"),
];
const GOLDEN_WEIGHTS_HASH: &str = "69b24ce75a47d15888a0160e36fff6eb45e84279b930ec8890379a60c9fb2682";
const GOLDEN_LOSSY_RECON_HASH: &str = "3b1a802f7643f251557bdcd48706a62fcaf16214e74e50c2f259b62c61dd1f9a";

fn golden_configs() -> [EncodeConfig; 2] {
    [EncodeConfig::lossless(6).unwrap(), EncodeConfig::lossy(6, 4).unwrap()]
}

fn recon_hash(frames: &[SparseTensor3]) -> String {
    let mut h = Sha256::new();
    for f in frames {
        h.update((f.len() as u32).to_le_bytes());
        for c in f.coords() {
            for v in [c.x, c.y, c.z] {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

fn regenerate_golden() {
    let dir = golden_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let w = init_weights(4, 2, 8, 2024).unwrap();
    w.save(dir.join("weights.sdpc")).unwrap();
    let frames = synthetic_sequence(2024, 6, GOLDEN_FRAMES);
    for (i, f) in frames.iter().enumerate() {
        write_ply(&grid_cloud(f), dir.join(format!("frame_{i:02}.ply")), PlyFormat::Ascii).unwrap();
    }
    println!("weights {}", sha256(&std::fs::read(dir.join("weights.sdpc")).unwrap()));
    for ((name, _), config) in GOLDEN_STREAMS.iter().zip(golden_configs()) {
        let (stream, recon) = encode_sequence_with_recon(&frames, &w, &config).unwrap();
        stream.save(dir.join(name)).unwrap();
        println!("{name} {} recon {}", sha256(&stream.to_bytes()), recon_hash(&recon));
    }
}

fn bitstream_stability() -> Outcome {
    let dir = golden_dir();
    let mut notes = Vec::new();
    let weights_bytes = std::fs::read(dir.join("weights.sdpc")).unwrap();
    let mut pass = sha256(&weights_bytes) == GOLDEN_WEIGHTS_HASH;
    let w = ModelWeights::from_bytes(&weights_bytes).unwrap();
    let frames: Vec<SparseTensor3> = (0..GOLDEN_FRAMES)
        .map(|i| voxelize(&read_ply(dir.join(format!("frame_{i:02}.ply"))).unwrap(), 6).unwrap().0)
        .collect();
    for ((name, hash), config) in GOLDEN_STREAMS.iter().zip(golden_configs()) {
        let bytes = std::fs::read(dir.join(name)).unwrap();
        let hash_ok = sha256(&bytes) == *hash;
        let stream = Bitstream::from_bytes(&bytes).unwrap();
        let first = decode_sequence(&stream, &w).unwrap();
        let second = decode_sequence(&stream, &w).unwrap();
        let reencoded = encode_sequence(&frames, &w, &config).unwrap().to_bytes() == bytes;
        let content_ok = match config.mode {
            Mode::Lossless => first == frames,
            Mode::Lossy => recon_hash(&first) == GOLDEN_LOSSY_RECON_HASH,
        };
        let ok = hash_ok && first == second && reencoded && content_ok;
        pass &= ok;
        notes.push(format!("{name} ({} bytes): hash {hash_ok}, stable decode {}, re-encode identical {reencoded}, content {content_ok}",
            bytes.len(), first == second));
    }
    outcome(pass, notes.join("; "))
}

fn main() -> ExitCode {
    if std::env::var_os("SDPC_REGEN_GOLDEN").is_some() {
        regenerate_golden();
        return ExitCode::SUCCESS;
    }
    let selected: Option<Vec<u32>> = std::env::var("SDPC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |i: u32| selected.as_ref().is_none_or(|s| s.contains(&i));

    let mut trained: Option<(ModelWeights, Duration)> = None;
    let mut train = || {
        trained
            .get_or_insert_with(|| {
                let t = Instant::now();
                let w = train_toy(&toy_config()).unwrap();
                (w, t.elapsed())
            })
            .clone()
    };

    let mut failed = 0;
    let mut run = |i: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(i) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {i} {name}: {verdict} [{:.1}s] {}", t.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed += 1;
        }
    };

    run(1, "lossless roundtrip", &mut lossless_roundtrip);
    run(2, "convolution oracle", &mut conv_oracle);
    run(3, "gradient fidelity", &mut gradient_fidelity);
    run(4, "rate consistency", &mut rate_consistency);
    run(5, "probability symmetry", &mut probability_symmetry);
    run(6, "inter gain", &mut || {
        let (w, took) = train();
        inter_gain(&w, took)
    });
    run(7, "lossy contracts", &mut || lossy_contracts(&train().0));
    run(8, "metric correctness", &mut metric_correctness);
    run(9, "bitstream stability", &mut bitstream_stability);

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
