//! Colored point clouds, PLY I/O and canonical-sphere normalization.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Radius of the sphere normalized clouds are mapped into.
pub const NORMALIZED_RADIUS: f64 = 1000.0;
/// Center of the normalization sphere on every axis.
pub const NORMALIZED_CENTER: f64 = 1001.0;

/// An `N x 6` cloud: `x, y, z` followed by `r, g, b` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 6]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 6]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidCloud("cloud has no points".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p[..3].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
            }
            if p[3..].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidCloud(format!("point {i} has a color outside [0, 1]")));
            }
        }
        Ok(Self { points })
    }

    pub fn from_parts(coords: &[[f64; 3]], colors: &[[f64; 3]]) -> Result<Self> {
        if coords.len() != colors.len() {
            return Err(Error::LengthMismatch(coords.len(), colors.len()));
        }
        let points = coords
            .iter()
            .zip(colors)
            .map(|(p, c)| [p[0], p[1], p[2], c[0], c[1], c[2]])
            .collect();
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 6]] {
        &self.points
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[3], p[4], p[5]]).collect()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }
}

/// A cloud with its subjective quality label.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub cloud: PointCloud,
    pub mos: f64,
    /// Identifies the pristine source content; splits never separate a content.
    pub content_id: String,
    pub distortion_tag: String,
}

impl LabeledSample {
    pub fn new(
        cloud: PointCloud,
        mos: f64,
        content_id: impl Into<String>,
        distortion_tag: impl Into<String>,
    ) -> Result<Self> {
        let content_id = content_id.into();
        if !(mos >= 0.0 && mos.is_finite()) {
            return Err(Error::InvalidConfig(format!("mos must be a finite value >= 0, got {mos}")));
        }
        if content_id.is_empty() {
            return Err(Error::InvalidConfig("content_id must be non-empty".into()));
        }
        Ok(Self {
            cloud,
            mos,
            content_id,
            distortion_tag: distortion_tag.into(),
        })
    }
}

/// Maps coordinates into the ball of radius 1000 around `(1001, 1001, 1001)`.
///
/// The centroid is moved to the sphere center and the farthest point lands on
/// the sphere. A cloud whose points all coincide collapses onto the center.
pub fn normalize(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let radius = cloud
        .points
        .iter()
        .map(|p| dist([p[0], p[1], p[2]], c))
        .fold(0.0_f64, f64::max);
    let scale = if radius > 0.0 && radius.is_finite() {
        NORMALIZED_RADIUS / radius
    } else {
        0.0
    };
    let lo = NORMALIZED_CENTER - NORMALIZED_RADIUS;
    let hi = NORMALIZED_CENTER + NORMALIZED_RADIUS;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            for a in 0..3 {
                q[a] = ((p[a] - c[a]) * scale + NORMALIZED_CENTER).clamp(lo, hi);
            }
            q
        })
        .collect();
    PointCloud { points }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    /// Divisor mapping an integer color channel onto `[0, 1]`.
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
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

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let malformed = |m: &str| Error::MalformedHeader(m.to_string());
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("missing end_header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| malformed("header is not valid text"))?
            .trim_end_matches('\r')
            .to_string();
        offset += end + 1;
        if line.trim() == "end_header" {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.iter();
    if it.next().map(|l| l.trim()) != Some("ply") {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in it {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                format = Some(match tok.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(malformed(&format!("unsupported format {other}"))),
                    None => return Err(malformed("format line without a format")),
                });
            }
            Some("element") => {
                if tok.len() != 3 {
                    return Err(malformed(line));
                }
                let count = tok[2].parse().map_err(|_| malformed(line))?;
                elements.push(Element {
                    name: tok[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                let prop = if tok.get(1) == Some(&"list") {
                    if tok.len() != 5 {
                        return Err(malformed(line));
                    }
                    Property::List {
                        count: Scalar::parse(tok[2]).ok_or_else(|| malformed(line))?,
                        item: Scalar::parse(tok[3]).ok_or_else(|| malformed(line))?,
                    }
                } else {
                    if tok.len() != 3 {
                        return Err(malformed(line));
                    }
                    Property::Scalar {
                        ty: Scalar::parse(tok[1]).ok_or_else(|| malformed(line))?,
                        name: tok[2].to_string(),
                    }
                };
                el.props.push(prop);
            }
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(malformed(&format!("unknown header keyword {other}"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| malformed("missing format line"))?,
        elements,
        body_offset: offset,
    })
}

/// Column lookup for the vertex element.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
    color_scale: [f64; 3],
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |names: &[&str]| {
        el.props.iter().position(|p| match p {
            Property::Scalar { name, .. } => names.contains(&name.as_str()),
            Property::List { .. } => false,
        })
    };
    let mut xyz = [0; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        *slot = find(&[name])
            .ok_or_else(|| Error::MalformedHeader(format!("vertex element lacks property {name}")))?;
    }
    let mut rgb = [0; 3];
    let mut color_scale = [1.0; 3];
    for (a, names) in [["red", "r"], ["green", "g"], ["blue", "b"]].iter().enumerate() {
        let idx = find(names).ok_or(Error::MissingColor)?;
        rgb[a] = idx;
        if let Property::Scalar { ty, .. } = &el.props[idx] {
            color_scale[a] = ty.color_scale();
        }
    }
    Ok(VertexLayout { xyz, rgb, color_scale })
}

fn assemble(layout: &VertexLayout, row: &[f64]) -> [f64; 6] {
    let mut p = [0.0; 6];
    for a in 0..3 {
        p[a] = row[layout.xyz[a]];
        p[3 + a] = row[layout.rgb[a]] / layout.color_scale[a];
    }
    p
}

/// Reads an ASCII or binary little-endian PLY with per-vertex colors.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    parse_ply(&bytes)
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vidx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MalformedHeader("no vertex element".into()))?;
    let vertex = &header.elements[vidx];
    let layout = vertex_layout(vertex)?;
    let body = &bytes[header.body_offset..];
    let points = match header.format {
        PlyFormat::Ascii => read_ascii(body, &header.elements, vidx, &layout)?,
        PlyFormat::BinaryLittleEndian => read_binary(body, &header.elements, vidx, &layout)?,
    };
    PointCloud::new(points)
}

fn read_ascii(
    body: &[u8],
    elements: &[Element],
    vidx: usize,
    layout: &VertexLayout,
) -> Result<Vec<[f64; 6]>> {
    let text = std::str::from_utf8(body).map_err(|_| Error::Format("ASCII body is not UTF-8".into()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    for el in &elements[..vidx] {
        for _ in 0..el.count {
            lines.next();
        }
    }
    let vertex = &elements[vidx];
    let mut points = Vec::with_capacity(vertex.count);
    let mut row = vec![0.0; vertex.props.len()];
    for found in 0..vertex.count {
        let line = lines.next().ok_or(Error::TruncatedBody {
            expected: vertex.count,
            found,
        })?;
        let mut tok = line.split_whitespace();
        for (slot, prop) in row.iter_mut().zip(&vertex.props) {
            let mut next = || -> Result<f64> {
                let t = tok.next().ok_or(Error::TruncatedBody {
                    expected: vertex.count,
                    found,
                })?;
                t.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {t:?} in vertex {found}")))
            };
            match prop {
                Property::Scalar { .. } => *slot = next()?,
                Property::List { .. } => {
                    let n = next()? as usize;
                    for _ in 0..n {
                        next()?;
                    }
                }
            }
        }
        points.push(assemble(layout, &row));
    }
    Ok(points)
}

fn read_binary(
    body: &[u8],
    elements: &[Element],
    vidx: usize,
    layout: &VertexLayout,
) -> Result<Vec<[f64; 6]>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let s = body.get(*pos..*pos + n)?;
        *pos += n;
        Some(s)
    };
    for el in &elements[..vidx] {
        for _ in 0..el.count {
            for prop in &el.props {
                let ok = match prop {
                    Property::Scalar { ty, .. } => take(&mut pos, ty.size()).is_some(),
                    Property::List { count, item } => match take(&mut pos, count.size()) {
                        Some(b) => {
                            let n = count.read_le(b) as usize;
                            take(&mut pos, n * item.size()).is_some()
                        }
                        None => false,
                    },
                };
                if !ok {
                    return Err(Error::Format(format!("element {} truncated", el.name)));
                }
            }
        }
    }
    let vertex = &elements[vidx];
    let mut points = Vec::with_capacity(vertex.count);
    let mut row = vec![0.0; vertex.props.len()];
    for found in 0..vertex.count {
        let truncated = || Error::TruncatedBody {
            expected: vertex.count,
            found,
        };
        for (slot, prop) in row.iter_mut().zip(&vertex.props) {
            match prop {
                Property::Scalar { ty, .. } => {
                    let b = take(&mut pos, ty.size()).ok_or_else(truncated)?;
                    *slot = ty.read_le(b);
                }
                Property::List { count, item } => {
                    let b = take(&mut pos, count.size()).ok_or_else(truncated)?;
                    let n = count.read_le(b) as usize;
                    take(&mut pos, n * item.size()).ok_or_else(truncated)?;
                }
            }
        }
        points.push(assemble(layout, &row));
    }
    Ok(points)
}

/// Writes double-precision coordinates and `uchar` colors.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    let quantize = |c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    for p in &cloud.points {
        let rgb = [quantize(p[3]), quantize(p[4]), quantize(p[5])];
        match format {
            PlyFormat::Ascii => {
                writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], rgb[0], rgb[1], rgb[2])?
            }
            PlyFormat::BinaryLittleEndian => {
                for v in &p[..3] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&rgb)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
