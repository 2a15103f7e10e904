//! PLY point files, ASCII and binary little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Real-valued points in arbitrary units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCloud {
    pub points: Vec<[f64; 3]>,
    /// Header comment lines, without the `comment ` prefix.
    pub comments: Vec<String>,
}

impl RawCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format(format!("non-finite point {p:?}")));
        }
        Ok(Self { points, comments: Vec::new() })
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comments.push(comment.into());
        self
    }

    /// Bit depth declared by a `bit_depth N` comment, if any.
    pub fn declared_bit_depth(&self) -> Option<u8> {
        self.comments.iter().find_map(|c| c.strip_prefix("bit_depth ")?.trim().parse().ok())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return Err(Error::Format(format!("unknown PLY scalar type `{name}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    comments: Vec<String>,
    elements: Vec<Element>,
    body_offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if !bytes.starts_with(b"ply") {
        return Err(bad("missing `ply` magic"));
    }
    let mut pos = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(bad("header ends without `end_header`"));
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        pos += nl + 1;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["ply"] | [] => {}
            ["comment", ..] => comments.push(line.trim_start()["comment".len()..].trim().to_string()),
            ["obj_info", ..] => {}
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => return Err(bad("big-endian PLY is not supported")),
                    other => return Err(bad(format!("unknown PLY format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before any element"))?;
                el.props.push(Property::List { count: Scalar::parse(count)?, item: Scalar::parse(item)? });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before any element"))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            _ => return Err(bad(format!("malformed header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| bad("header has no `format` line"))?;
    Ok(Header { format, comments, elements, body_offset: pos })
}

fn xyz_slots(el: &Element) -> Result<[usize; 3]> {
    let mut slots = [usize::MAX; 3];
    for (i, p) in el.props.iter().enumerate() {
        if let Property::Scalar { name, .. } = p {
            match name.as_str() {
                "x" => slots[0] = i,
                "y" => slots[1] = i,
                "z" => slots[2] = i,
                _ => {}
            }
        }
    }
    if slots.contains(&usize::MAX) {
        return Err(bad("vertex element lacks x, y or z"));
    }
    Ok(slots)
}

fn read_ascii(body: &str, header: &Header) -> Result<Vec<[f64; 3]>> {
    let mut tokens = body.split_whitespace();
    let mut next = || tokens.next().ok_or_else(|| bad("truncated ASCII body"));
    let mut points = Vec::new();
    for el in &header.elements {
        let vertex = el.name == "vertex";
        let slots = if vertex { Some(xyz_slots(el)?) } else { None };
        for _ in 0..el.count {
            let mut p = [0.0; 3];
            for (i, prop) in el.props.iter().enumerate() {
                match prop {
                    Property::Scalar { .. } => {
                        let tok = next()?;
                        if let Some(slots) = slots {
                            if let Some(axis) = slots.iter().position(|&s| s == i) {
                                p[axis] = tok.parse().map_err(|_| bad(format!("bad number `{tok}`")))?;
                            }
                        }
                    }
                    Property::List { .. } => {
                        let tok = next()?;
                        let n: usize = tok.parse().map_err(|_| bad(format!("bad list length `{tok}`")))?;
                        for _ in 0..n {
                            next()?;
                        }
                    }
                }
            }
            if vertex {
                points.push(p);
            }
        }
    }
    Ok(points)
}

fn read_binary(body: &[u8], header: &Header) -> Result<Vec<[f64; 3]>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated binary body"))?;
        pos += n;
        Ok(s)
    };
    let mut points = Vec::new();
    for el in &header.elements {
        let vertex = el.name == "vertex";
        let slots = if vertex { Some(xyz_slots(el)?) } else { None };
        for _ in 0..el.count {
            let mut p = [0.0; 3];
            for (i, prop) in el.props.iter().enumerate() {
                match *prop {
                    Property::Scalar { ty, .. } => {
                        let v = ty.read_le(take(ty.size())?);
                        if let Some(axis) = slots.and_then(|s| s.iter().position(|&s| s == i)) {
                            p[axis] = v;
                        }
                    }
                    Property::List { count, item } => {
                        let n = count.read_le(take(count.size())?);
                        if n < 0.0 {
                            return Err(bad("negative list length"));
                        }
                        take(n as usize * item.size())?;
                    }
                }
            }
            if vertex {
                points.push(p);
            }
        }
    }
    Ok(points)
}

/// Parses a PLY file held in memory. Elements other than `vertex` and
/// vertex properties other than x, y, z are skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<RawCloud> {
    let header = parse_header(bytes)?;
    if !header.elements.iter().any(|e| e.name == "vertex") {
        return Err(bad("no vertex element"));
    }
    let body = &bytes[header.body_offset..];
    let points = match header.format {
        PlyFormat::Ascii => {
            read_ascii(std::str::from_utf8(body).map_err(|_| bad("ASCII body is not UTF-8"))?, &header)?
        }
        PlyFormat::BinaryLittleEndian => read_binary(body, &header)?,
    };
    let mut cloud = RawCloud::new(points)?;
    cloud.comments = header.comments;
    Ok(cloud)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<RawCloud> {
    parse_ply(&fs::read(path)?)
}

/// Serializes with `float` coordinates when every value survives the
/// round trip through f32, `double` otherwise.
pub fn ply_bytes(cloud: &RawCloud, format: PlyFormat) -> Vec<u8> {
    let single = cloud.points.iter().flatten().all(|&v| (v as f32) as f64 == v);
    let ty = if single { "float" } else { "double" };
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut head = format!("ply\nformat {fmt} 1.0\n");
    for c in &cloud.comments {
        head.push_str(&format!("comment {}\n", c.replace('\n', " ")));
    }
    head.push_str(&format!(
        "element vertex {}\nproperty {ty} x\nproperty {ty} y\nproperty {ty} z\nend_header\n",
        cloud.len()
    ));
    let mut out = head.into_bytes();
    for p in &cloud.points {
        match format {
            PlyFormat::Ascii => out.extend_from_slice(format!("{} {} {}\n", p[0], p[1], p[2]).as_bytes()),
            PlyFormat::BinaryLittleEndian => {
                for &v in p {
                    if single {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    } else {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

pub fn write_ply(cloud: &RawCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    fs::write(path, ply_bytes(cloud, format))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three() -> RawCloud {
        RawCloud::new(vec![[0.5, 1.0, -2.25], [3.0, 4.0, 5.0], [1e-3, 7.125, 9.0]])
            .unwrap()
            .with_comment("bit_depth 7")
    }

    #[test]
    fn ascii_roundtrip() {
        let c = three();
        assert_eq!(parse_ply(&ply_bytes(&c, PlyFormat::Ascii)).unwrap(), c);
    }

    #[test]
    fn declared_depth() {
        assert_eq!(parse_ply(&ply_bytes(&three(), PlyFormat::Ascii)).unwrap().declared_bit_depth(), Some(7));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let c = three();
        write_ply(&c, &path, PlyFormat::BinaryLittleEndian).unwrap();
        assert_eq!(read_ply(&path).unwrap(), c);
    }

    #[test]
    fn missing_end_header() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n0\n";
        assert!(matches!(parse_ply(text), Err(Error::Format(_))));
    }

    #[test]
    fn big_endian_rejected() {
        let text = b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let err = parse_ply(text).unwrap_err().to_string();
        assert!(err.contains("big-endian"), "{err}");
    }

    #[test]
    fn truncated_bodies() {
        let c = three();
        let bin = ply_bytes(&c, PlyFormat::BinaryLittleEndian);
        assert!(parse_ply(&bin[..bin.len() - 1]).is_err());
        let asc = ply_bytes(&c, PlyFormat::Ascii);
        let cut = String::from_utf8(asc).unwrap();
        let cut = cut.trim_end().rsplit_once(' ').unwrap().0;
        assert!(parse_ply(cut.as_bytes()).is_err());
    }

    #[test]
    fn extra_properties_and_faces_are_skipped() {
        let mut body = b"ply\nformat binary_little_endian 1.0\ncomment made by hand\nelement vertex 2\n\
property uchar red\nproperty double x\nproperty double y\nproperty double z\nproperty int flags\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for (i, p) in [[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]].iter().enumerate() {
            body.push(200);
            for v in p {
                body.extend_from_slice(&v.to_le_bytes());
            }
            body.extend_from_slice(&(i as i32).to_le_bytes());
        }
        body.push(3);
        for i in 0..3i32 {
            body.extend_from_slice(&i.to_le_bytes());
        }
        let c = parse_ply(&body).unwrap();
        assert_eq!(c.comments, vec!["made by hand".to_string()]);
        assert_eq!(c.declared_bit_depth(), None);
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);

        let ascii = "ply\nformat ascii 1.0\nelement vertex 2\nproperty int z\nproperty float nx\nproperty int x\nproperty int y\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n3 0.1 1 2\n6 0.2 4 5\n3 0 1 1\n";
        assert_eq!(parse_ply(ascii.as_bytes()).unwrap().points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(RawCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn binary_f32_bit_exact(pts in prop::collection::vec(prop::array::uniform3(-1e6f32..1e6f32), 0..64)) {
            let c = RawCloud::new(pts.iter().map(|p| p.map(|v| v as f64)).collect()).unwrap();
            let bytes = ply_bytes(&c, PlyFormat::BinaryLittleEndian);
            prop_assert!(String::from_utf8_lossy(&bytes).contains("property float x"));
            prop_assert_eq!(parse_ply(&bytes).unwrap(), c);
        }

        #[test]
        fn ascii_f64_roundtrip(pts in prop::collection::vec(prop::array::uniform3(-1e9f64..1e9f64), 0..32)) {
            let c = RawCloud::new(pts).unwrap();
            prop_assert_eq!(parse_ply(&ply_bytes(&c, PlyFormat::Ascii)).unwrap(), c);
        }
    }
}
