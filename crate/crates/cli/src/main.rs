//! `sdpc`: encode, decode, train and evaluate point cloud geometry streams.

mod error;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdpc_core::codec::{self, Bitstream, EncodeConfig, FrameType, InterScheme, Mode};
use sdpc_core::io::{grid_cloud, read_ply, voxelize_sequence, write_ply, PlyFormat, RawCloud};
use sdpc_core::metrics::{bd_rate, bpp, d1_psnr, RdPoint};
use sdpc_core::nn::weights::ModelWeights;
use sdpc_core::training::{train, TrainConfig};

use error::{CliError, CliResult};
use report::Row;

const DEFAULT_BIT_DEPTH: u8 = 10;

#[derive(Parser, Debug)]
#[command(name = "sdpc", version, about = "Learned point cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Lossless,
    Lossy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Conditional,
    Residual,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlyArg {
    Ascii,
    Binary,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode PLY frames (files, or directories read in filename order).
    Encode {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, env = "SDPC_WEIGHTS")]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "lossless", env = "SDPC_MODE")]
        mode: ModeArg,
        /// Lossy preset slot (1 to 5).
        #[arg(long, env = "SDPC_MODEL_ID")]
        model_id: Option<u8>,
        /// Bit depth of the losslessly coded scales in lossy mode.
        #[arg(long, env = "SDPC_M")]
        m: Option<u8>,
        #[arg(long, env = "SDPC_BIT_DEPTH")]
        bit_depth: Option<u8>,
        /// Code every frame without temporal priors.
        #[arg(long, env = "SDPC_INTRA_ONLY")]
        intra_only: bool,
        #[arg(long, value_enum, default_value = "conditional", env = "SDPC_SCHEME")]
        scheme: SchemeArg,
        #[arg(short, long, env = "SDPC_OUTPUT")]
        output: PathBuf,
    },
    /// Decode a stream into one PLY per frame.
    Decode {
        stream: PathBuf,
        #[arg(long, env = "SDPC_WEIGHTS")]
        weights: PathBuf,
        #[arg(short, long, env = "SDPC_OUTPUT")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "binary", env = "SDPC_PLY_FORMAT")]
        ply_format: PlyArg,
    },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long, env = "SDPC_CONFIG")]
        config: PathBuf,
        #[arg(short, long, env = "SDPC_OUTPUT")]
        output: PathBuf,
    },
    /// Decode a stream, score it against reference frames and write a CSV
    /// report; or compare two rate-distortion curves with --bd.
    Eval {
        #[arg(long = "ref", env = "SDPC_REF")]
        reference: Option<PathBuf>,
        #[arg(long, env = "SDPC_STREAM")]
        stream: Option<PathBuf>,
        #[arg(long, env = "SDPC_WEIGHTS")]
        weights: Option<PathBuf>,
        #[arg(short, long, env = "SDPC_OUTPUT")]
        output: Option<PathBuf>,
        /// Two curves, each a comma-separated list of reports (one point per
        /// report summary row). Prints the BD-rate of the second against the first.
        #[arg(long, num_args = 2, value_names = ["ANCHOR", "TEST"])]
        bd: Option<Vec<String>>,
    },
    /// Print a stream's configuration and frame table.
    Info {
        stream: PathBuf,
        #[arg(long, env = "SDPC_WEIGHTS")]
        weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Encode { inputs, weights, mode, model_id, m, bit_depth, intra_only, scheme, output } => {
            let files = frame_files(&inputs)?;
            let clouds = files.iter().map(read_ply).collect::<Result<Vec<_>, _>>()?;
            let n = resolve_bit_depth(&files, &clouds, bit_depth)?;
            let config = encode_config(n, mode, model_id, m, scheme)?.with_inter(!intra_only);
            let weights = ModelWeights::load(&weights)?;
            let (frames, _) = voxelize_sequence(&clouds, n)?;
            let stream = codec::encode_sequence(&frames, &weights, &config)?;
            stream.save(&output)?;
            let total: usize = clouds.iter().map(RawCloud::len).sum();
            for (f, cloud) in stream.frames.iter().zip(&clouds) {
                let bytes = (f.header.size() + f.payload_len()) as u64;
                println!(
                    "frame {} {} {bytes} bytes {:.4} bpp",
                    f.header.index,
                    type_char(f.header.frame_type),
                    bpp(bytes, cloud.len() as u64)?
                );
            }
            let bytes = stream.to_bytes().len() as u64;
            println!("total {bytes} bytes {:.4} bpp -> {}", bpp(bytes, total as u64)?, output.display());
        }
        Command::Decode { stream, weights, output, ply_format } => {
            let stream = Bitstream::load(&stream)?;
            let weights = ModelWeights::load(&weights)?;
            let frames = codec::decode_sequence(&stream, &weights)?;
            fs::create_dir_all(&output)?;
            let format = match ply_format {
                PlyArg::Ascii => PlyFormat::Ascii,
                PlyArg::Binary => PlyFormat::BinaryLittleEndian,
            };
            for (i, f) in frames.iter().enumerate() {
                let path = output.join(format!("frame_{i:04}.ply"));
                write_ply(&grid_cloud(f), &path, format)?;
                println!("{} {} points", path.display(), f.len());
            }
        }
        Command::Train { config, output } => {
            let config = TrainConfig::from_file(&config)?;
            let outcome = train(&config)?;
            outcome.weights.save(&output)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "{} steps, final loss {:.4} ({:.1} occupancy bits, {:.1} latent bits)",
                    outcome.history.len(),
                    last.total,
                    last.bce_bits,
                    last.rate_bits
                );
            }
            println!("weights {} -> {}", hex(&outcome.weights.hash()), output.display());
        }
        Command::Eval { reference, stream, weights, output, bd } => {
            if stream.is_none() && bd.is_none() {
                return Err(CliError::Usage("eval needs --stream or --bd".into()));
            }
            if let Some(stream) = stream {
                let (Some(reference), Some(weights), Some(output)) = (reference, weights, output) else {
                    return Err(CliError::Usage("eval --stream needs --ref, --weights and -o".into()));
                };
                evaluate(&reference, &stream, &weights, &output)?;
            }
            if let Some(bd) = bd {
                let anchor = curve(&bd[0])?;
                let test = curve(&bd[1])?;
                println!("bd-rate {:.4} %", bd_rate(&anchor, &test)?);
            }
        }
        Command::Info { stream, weights } => {
            let s = Bitstream::load(&stream)?;
            let c = &s.config;
            println!(
                "mode {:?}, bit depth {}, m {}, model {}, inter {}, scheme {:?}",
                c.mode, c.bit_depth, c.m, c.model_id, c.inter_enabled, c.scheme
            );
            println!("weights {}", hex(&s.weight_hash));
            if let Some(w) = weights {
                let ok = ModelWeights::load(&w)?.hash() == s.weight_hash;
                println!("weights file {} {}", w.display(), if ok { "matches" } else { "does not match" });
            }
            println!("{} frames, {} bytes", s.frames.len(), s.to_bytes().len());
            for f in &s.frames {
                println!(
                    "frame {} {} {} points, geometry {} bytes, latent {} bytes",
                    f.header.index,
                    type_char(f.header.frame_type),
                    f.header.point_count,
                    f.header.geometry_len,
                    f.header.latent_len
                );
            }
        }
    }
    Ok(())
}

fn type_char(t: FrameType) -> &'static str {
    match t {
        FrameType::Intra => "I",
        FrameType::Predicted => "P",
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Expands directories into their `.ply` files in lexicographic order.
fn frame_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no PLY frames found".into()));
    }
    Ok(files)
}

/// The flag wins; otherwise every declared depth must agree.
fn resolve_bit_depth(files: &[PathBuf], clouds: &[RawCloud], flag: Option<u8>) -> CliResult<u8> {
    let mut chosen = flag;
    for (path, c) in files.iter().zip(clouds) {
        if let Some(d) = c.declared_bit_depth() {
            match chosen {
                Some(n) if n != d => {
                    return Err(CliError::Usage(format!(
                        "mixed bit depths: {} declares {d}, expected {n}",
                        path.display()
                    )))
                }
                _ => chosen = Some(d),
            }
        }
    }
    Ok(chosen.unwrap_or(DEFAULT_BIT_DEPTH))
}

fn encode_config(n: u8, mode: ModeArg, model_id: Option<u8>, m: Option<u8>, scheme: SchemeArg) -> CliResult<EncodeConfig> {
    let scheme = match scheme {
        SchemeArg::Conditional => InterScheme::Conditional,
        SchemeArg::Residual => InterScheme::Residual,
    };
    let config = match (mode, m, model_id) {
        (ModeArg::Lossless, None, None) => EncodeConfig::lossless(n)?,
        (ModeArg::Lossless, _, _) => {
            return Err(CliError::Usage("--m and --model-id only apply to lossy mode".into()))
        }
        (ModeArg::Lossy, Some(m), id) => {
            let mut c = EncodeConfig::lossy(n, m)?;
            c.model_id = id.unwrap_or(c.model_id);
            c
        }
        (ModeArg::Lossy, None, Some(id)) => EncodeConfig::from_preset(n, id)?,
        (ModeArg::Lossy, None, None) => {
            return Err(CliError::Usage("lossy mode needs --m or --model-id".into()))
        }
    };
    let config = config.with_scheme(scheme);
    config.validate()?;
    Ok(config)
}

fn evaluate(reference: &Path, stream_path: &Path, weights: &Path, output: &Path) -> CliResult<()> {
    let stream = Bitstream::load(stream_path)?;
    let weights = ModelWeights::load(weights)?;
    let files = frame_files(&[reference.to_path_buf()])?;
    let clouds = files.iter().map(read_ply).collect::<Result<Vec<_>, _>>()?;
    if clouds.len() != stream.frames.len() {
        return Err(CliError::Usage(format!(
            "{} reference frames but the stream holds {}",
            clouds.len(),
            stream.frames.len()
        )));
    }
    let n = stream.config.bit_depth;
    let (originals, _) = voxelize_sequence(&clouds, n)?;
    let decoded = codec::decode_sequence(&stream, &weights)?;
    let mut rows = Vec::with_capacity(clouds.len() + 1);
    for (((f, cloud), orig), dec) in stream.frames.iter().zip(&clouds).zip(&originals).zip(&decoded) {
        let bytes = (f.header.size() + f.payload_len()) as u64;
        let psnr = if dec.is_empty() { 0.0 } else { d1_psnr(orig, dec, n)? };
        rows.push(Row {
            frame: f.header.index.to_string(),
            kind: type_char(f.header.frame_type).into(),
            bytes,
            bpp: bpp(bytes, cloud.len() as u64)?,
            d1_psnr: psnr,
        });
    }
    let total_bytes = stream.to_bytes().len() as u64;
    let points: u64 = clouds.iter().map(|c| c.len() as u64).sum();
    let mean_psnr = rows.iter().map(|r| r.d1_psnr).sum::<f64>() / rows.len() as f64;
    let mode = match stream.config.mode {
        Mode::Lossless => "lossless",
        Mode::Lossy => "lossy",
    };
    rows.push(Row {
        frame: report::SUMMARY.into(),
        kind: mode.into(),
        bytes: total_bytes,
        bpp: bpp(total_bytes, points)?,
        d1_psnr: mean_psnr,
    });
    report::write(output, &rows)?;
    let s = rows.last().unwrap();
    println!("{} frames, {:.4} bpp, mean D1-PSNR {:.3} dB -> {}", rows.len() - 1, s.bpp, s.d1_psnr, output.display());
    Ok(())
}

/// Rate-distortion curve from a comma-separated list of reports, sorted by rate.
fn curve(list: &str) -> CliResult<Vec<RdPoint>> {
    let mut pts = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|p| report::summary_point(Path::new(p.trim())))
        .collect::<CliResult<Vec<_>>>()?;
    pts.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn declared(depth: Option<u8>) -> RawCloud {
        let c = RawCloud::new(vec![[0.0; 3]]).unwrap();
        match depth {
            Some(d) => c.with_comment(format!("bit_depth {d}")),
            None => c,
        }
    }

    #[test]
    fn bit_depth_resolution() {
        let files = vec![PathBuf::from("a.ply"), PathBuf::from("b.ply")];
        let r = |a, b, flag| resolve_bit_depth(&files, &[declared(a), declared(b)], flag);
        assert_eq!(r(None, None, None).unwrap(), DEFAULT_BIT_DEPTH);
        assert_eq!(r(Some(7), None, None).unwrap(), 7);
        assert_eq!(r(None, None, Some(9)).unwrap(), 9);
        assert!(r(Some(7), Some(8), None).is_err());
        assert!(r(Some(7), Some(7), Some(8)).is_err());
    }

    #[test]
    fn encode_config_combinations() {
        let c = encode_config(8, ModeArg::Lossless, None, None, SchemeArg::Conditional).unwrap();
        assert_eq!(c.mode, Mode::Lossless);
        let c = encode_config(8, ModeArg::Lossy, None, Some(6), SchemeArg::Residual).unwrap();
        assert_eq!(c.mode, Mode::Lossy);
        assert!(encode_config(8, ModeArg::Lossy, Some(2), None, SchemeArg::Conditional).is_ok());
        assert!(encode_config(8, ModeArg::Lossless, None, Some(6), SchemeArg::Conditional).is_err());
        assert!(encode_config(8, ModeArg::Lossy, None, None, SchemeArg::Conditional).is_err());
        assert!(encode_config(8, ModeArg::Lossy, Some(9), None, SchemeArg::Conditional).is_err());
    }

    #[test]
    fn directories_expand_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.ply", "a.PLY", "c.txt"] {
            fs::write(dir.path().join(name), "").unwrap();
        }
        let files = frame_files(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.PLY", "b.ply"]);
        let empty = tempfile::tempdir().unwrap();
        assert!(frame_files(&[empty.path().to_path_buf()]).is_err());
    }

    #[test]
    fn cli_parses_bd_pairs() {
        let cli = Cli::try_parse_from(["sdpc", "eval", "--bd", "a.csv,b.csv", "c.csv"]).unwrap();
        match cli.command {
            Command::Eval { bd: Some(v), .. } => assert_eq!(v, ["a.csv,b.csv", "c.csv"]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["sdpc", "encode", "x.ply"]).is_err());
    }
}
