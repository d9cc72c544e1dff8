//! Stanford PLY, ASCII and binary little-endian. Reads `x y z` from the
//! `vertex` element and `vertex_indices` (or `vertex_index`) from `face`;
//! every other element and property is skipped.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Point3;

use crate::{Error, Result, TriMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |m: String| Error::format(path, m);
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("unterminated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| err("header is not UTF-8".into()))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        pos += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(err("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(err(format!("unsupported format `{other}`"))),
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(c).ok_or_else(|| err(format!("unknown type `{c}`")))?,
                    item: Scalar::parse(i).ok_or_else(|| err(format!("unknown type `{i}`")))?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element".into()))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| err(format!("unknown type `{ty}`")))?,
                });
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(err(format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| err("missing format line".into()))?,
        elements,
        body_offset: pos,
    })
}

/// Value source over either ASCII tokens or little-endian bytes.
enum Reader<'a> {
    Ascii(std::str::SplitAsciiWhitespace<'a>),
    Binary { bytes: &'a [u8], pos: usize },
}

impl Reader<'_> {
    fn next(&mut self, ty: Scalar) -> Option<f64> {
        match self {
            Reader::Ascii(it) => it.next()?.parse().ok(),
            Reader::Binary { bytes, pos } => {
                let n = ty.size();
                let slice = bytes.get(*pos..*pos + n)?;
                *pos += n;
                Some(ty.read_le(slice))
            }
        }
    }
}

pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<TriMesh> {
    let header = parse_header(bytes, path)?;
    let err = |m: String| Error::format(path, m);
    let body = &bytes[header.body_offset..];
    let mut reader = match header.format {
        PlyFormat::Ascii => Reader::Ascii(
            std::str::from_utf8(body)
                .map_err(|_| err("ASCII body is not UTF-8".into()))?
                .split_ascii_whitespace(),
        ),
        PlyFormat::BinaryLittleEndian => Reader::Binary { bytes: body, pos: 0 },
    };
    let truncated = || err("body ended early".into());

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &header.elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            for prop in &el.props {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = reader.next(*ty).ok_or_else(truncated)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = reader.next(*count).ok_or_else(truncated)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(reader.next(*item).ok_or_else(truncated)?);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            if n < 3 || idx.iter().any(|&i| i < 0.0) {
                                return Err(err(format!("invalid face {idx:?}")));
                            }
                            for k in 1..n - 1 {
                                faces.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
            }
        }
    }
    TriMesh::new(vertices, faces, BTreeMap::new()).map_err(|e| err(e.to_string()))
}

pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let bytes = std::fs::read(path)?;
    parse_ply(&bytes, path)
}

/// Serializes with `double` coordinates and `uchar`/`int` face lists.
pub fn format_ply(mesh: &TriMesh, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.n_vertices(),
        mesh.n_faces()
    )
    .into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            for p in mesh.vertices() {
                body.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
            }
            for f in mesh.faces() {
                body.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
            }
            out.extend_from_slice(body.as_bytes());
        }
        PlyFormat::BinaryLittleEndian => {
            for p in mesh.vertices() {
                for c in [p.x, p.y, p.z] {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            for f in mesh.faces() {
                out.push(3);
                for &i in f {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, mesh: &TriMesh, format: PlyFormat) -> Result<()> {
    std::fs::write(path, format_ply(mesh, format))?;
    Ok(())
}
