//! PLY point clouds, ASCII and binary little-endian.
//!
//! Only the `vertex` element is loaded. Recognised vertex properties are
//! `x y z` (float or double), `red green blue` (uchar) and `label` (any integer
//! type); other scalar properties are skipped. The voxel-grid resolution is
//! carried in a `comment resolution <meters>` header line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use super::cloud::{CloudError, PointCloud, UNLABELED};

/// Resolution assumed when the file carries no `comment resolution` line.
pub const DEFAULT_RESOLUTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed PLY header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PLY property: {0}")]
    UnsupportedProperty(String),
    #[error("truncated PLY data: expected {expected} vertices, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("bad PLY value {value:?} for vertex {vertex}")]
    BadValue { vertex: usize, value: String },
    #[error(transparent)]
    Invalid(#[from] CloudError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
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

    fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    X,
    Y,
    Z,
    Red,
    Green,
    Blue,
    Label,
    Skip,
}

#[derive(Debug)]
struct Property {
    ty: ScalarType,
    role: Role,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
    has_list: bool,
}

#[derive(Debug)]
struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    resolution: Option<f64>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PlyError + '_ {
    move |source| PlyError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next_line = |reader: &mut R| -> Result<Option<String>, PlyError> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| PlyError::MalformedHeader(e.to_string()))?;
        Ok((n > 0).then(|| line.trim_end_matches(['\r', '\n']).to_string()))
    };

    match next_line(reader)? {
        Some(l) if l.trim() == "ply" => {}
        _ => return Err(PlyError::MalformedHeader("missing `ply` magic".into())),
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut resolution = None;
    loop {
        let Some(l) = next_line(reader)? else {
            return Err(PlyError::MalformedHeader("missing end_header".into()));
        };
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", "resolution", value, ..] => {
                let r: f64 = value.parse().map_err(|_| {
                    PlyError::MalformedHeader(format!("bad resolution comment {value:?}"))
                })?;
                resolution = Some(r);
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => {
                        return Err(PlyError::MalformedHeader(format!(
                            "unsupported format {other}"
                        )))
                    }
                });
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| {
                    PlyError::MalformedHeader(format!("bad element count {count:?}"))
                })?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::MalformedHeader("property before element".into()))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::MalformedHeader("property before element".into()))?;
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| PlyError::MalformedHeader(format!("unknown type {ty}")))?;
                let role = match *name {
                    "x" => Role::X,
                    "y" => Role::Y,
                    "z" => Role::Z,
                    "red" => Role::Red,
                    "green" => Role::Green,
                    "blue" => Role::Blue,
                    "label" => Role::Label,
                    _ => Role::Skip,
                };
                el.props.push(Property { ty, role });
            }
            _ => return Err(PlyError::MalformedHeader(format!("unexpected line {l:?}"))),
        }
    }
    let encoding =
        encoding.ok_or_else(|| PlyError::MalformedHeader("missing format line".into()))?;
    Ok(Header {
        encoding,
        elements,
        resolution,
    })
}

struct VertexLayout {
    count: usize,
    props: Vec<Property>,
    has_color: bool,
    has_label: bool,
}

fn vertex_layout(header: &mut Header) -> Result<(usize, VertexLayout), PlyError> {
    let pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::MalformedHeader("no vertex element".into()))?;
    for e in &header.elements[..pos] {
        if e.has_list {
            return Err(PlyError::UnsupportedProperty(format!(
                "list property in element {} preceding vertex",
                e.name
            )));
        }
    }
    let el = &header.elements[pos];
    if el.has_list {
        return Err(PlyError::UnsupportedProperty("list property on vertex".into()));
    }
    for role in [Role::X, Role::Y, Role::Z] {
        match el.props.iter().filter(|p| p.role == role).count() {
            1 => {}
            0 => return Err(PlyError::MalformedHeader(format!("missing {role:?} property"))),
            _ => return Err(PlyError::MalformedHeader(format!("duplicate {role:?} property"))),
        }
    }
    for p in &el.props {
        match p.role {
            Role::X | Role::Y | Role::Z if !p.ty.is_float() => {
                return Err(PlyError::UnsupportedProperty(format!(
                    "coordinate of type {:?}",
                    p.ty
                )))
            }
            Role::Red | Role::Green | Role::Blue if p.ty != ScalarType::U8 => {
                return Err(PlyError::UnsupportedProperty(format!(
                    "color channel of type {:?}",
                    p.ty
                )))
            }
            Role::Label if p.ty.is_float() => {
                return Err(PlyError::UnsupportedProperty("floating-point label".into()))
            }
            _ => {}
        }
    }
    let colors = [Role::Red, Role::Green, Role::Blue]
        .iter()
        .filter(|r| el.props.iter().any(|p| p.role == **r))
        .count();
    if colors != 0 && colors != 3 {
        return Err(PlyError::UnsupportedProperty("partial color channels".into()));
    }
    let has_label = el.props.iter().any(|p| p.role == Role::Label);
    let el = header.elements.swap_remove(pos);
    Ok((
        pos,
        VertexLayout {
            count: el.count,
            props: el.props,
            has_color: colors == 3,
            has_label,
        },
    ))
}

#[derive(Default)]
struct Accum {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f32; 3]>,
    labels: Vec<i32>,
}

impl Accum {
    fn push(&mut self, layout: &VertexLayout, values: &[f64]) {
        let mut p = [0.0; 3];
        let mut c = [0.0f32; 3];
        let mut label = UNLABELED;
        for (prop, &v) in layout.props.iter().zip(values) {
            match prop.role {
                Role::X => p[0] = v,
                Role::Y => p[1] = v,
                Role::Z => p[2] = v,
                Role::Red => c[0] = (v / 255.0) as f32,
                Role::Green => c[1] = (v / 255.0) as f32,
                Role::Blue => c[2] = (v / 255.0) as f32,
                Role::Label => label = v as i32,
                Role::Skip => {}
            }
        }
        self.positions.push(p);
        if layout.has_color {
            self.colors.push(c);
        }
        if layout.has_label {
            self.labels.push(label);
        }
    }
}

/// Reads a PLY point cloud; colors are rescaled from `0..=255` to `[0, 1]`.
pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    read_point_cloud_from(&mut reader)
}

pub(crate) fn read_point_cloud_from<R: BufRead>(reader: &mut R) -> Result<PointCloud, PlyError> {
    let mut header = parse_header(reader)?;
    let (vertex_pos, layout) = vertex_layout(&mut header)?;
    let preceding = &header.elements[..vertex_pos];
    let mut acc = Accum::default();
    let mut values = vec![0.0; layout.props.len()];

    match header.encoding {
        PlyEncoding::Ascii => {
            let mut body = String::new();
            reader
                .read_to_string(&mut body)
                .map_err(|e| PlyError::MalformedHeader(e.to_string()))?;
            let mut lines = body.lines().filter(|l| !l.trim().is_empty());
            for e in preceding {
                for _ in 0..e.count {
                    lines.next();
                }
            }
            for vertex in 0..layout.count {
                let Some(line) = lines.next() else {
                    return Err(PlyError::TruncatedData {
                        expected: layout.count,
                        found: vertex,
                    });
                };
                let mut tokens = line.split_whitespace();
                for slot in values.iter_mut() {
                    let tok = tokens.next().ok_or(PlyError::TruncatedData {
                        expected: layout.count,
                        found: vertex,
                    })?;
                    *slot = tok.parse().map_err(|_| PlyError::BadValue {
                        vertex,
                        value: tok.to_string(),
                    })?;
                }
                acc.push(&layout, &values);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for e in preceding {
                let stride: usize = e.props.iter().map(|p| p.ty.size()).sum();
                let mut skip = vec![0u8; stride * e.count];
                reader
                    .read_exact(&mut skip)
                    .map_err(|_| PlyError::TruncatedData {
                        expected: layout.count,
                        found: 0,
                    })?;
            }
            let stride: usize = layout.props.iter().map(|p| p.ty.size()).sum();
            let mut record = vec![0u8; stride];
            for vertex in 0..layout.count {
                reader
                    .read_exact(&mut record)
                    .map_err(|_| PlyError::TruncatedData {
                        expected: layout.count,
                        found: vertex,
                    })?;
                let mut off = 0;
                for (slot, prop) in values.iter_mut().zip(&layout.props) {
                    *slot = prop.ty.decode_le(&record[off..]);
                    off += prop.ty.size();
                }
                acc.push(&layout, &values);
            }
        }
    }

    let mut cloud = PointCloud::new(
        acc.positions,
        header.resolution.unwrap_or(DEFAULT_RESOLUTION),
    )?;
    if layout.has_color {
        cloud = cloud.with_colors(acc.colors)?;
    }
    if layout.has_label {
        cloud = cloud.with_labels(acc.labels)?;
    }
    Ok(cloud)
}

/// Writes `double` coordinates, plus `uchar` colors and `int` labels when present.
pub fn write_point_cloud(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    encoding: PlyEncoding,
) -> Result<(), PlyError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_point_cloud_to(&mut w, cloud, encoding).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_point_cloud_to<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    encoding: PlyEncoding,
) -> std::io::Result<()> {
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {format} 1.0")?;
    writeln!(w, "comment resolution {}", cloud.resolution)?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property double {axis}")?;
    }
    if cloud.colors.is_some() {
        for ch in ["red", "green", "blue"] {
            writeln!(w, "property uchar {ch}")?;
        }
    }
    if cloud.labels.is_some() {
        writeln!(w, "property int label")?;
    }
    writeln!(w, "end_header")?;

    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.positions.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        let label = cloud.labels.as_ref().map(|l| l[i]);
        match encoding {
            PlyEncoding::Ascii => {
                write!(w, "{} {} {}", p[0], p[1], p[2])?;
                if let Some(c) = color {
                    write!(w, " {} {} {}", c[0], c[1], c[2])?;
                }
                if let Some(l) = label {
                    write!(w, " {l}")?;
                }
                writeln!(w)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    w.write_all(&v.to_le_bytes())?;
                }
                if let Some(c) = color {
                    w.write_all(&c)?;
                }
                if let Some(l) = label {
                    w.write_all(&l.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn read(bytes: &[u8]) -> Result<PointCloud, PlyError> {
        read_point_cloud_from(&mut Cursor::new(bytes))
    }

    #[test]
    fn three_vertices_ascii() {
        let src = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n\
                   property float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";
        let cloud = read(src.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.positions[1], [1.0, 0.0, 0.0]);
        assert_eq!(cloud.resolution, DEFAULT_RESOLUTION);
    }

    #[test]
    fn colors_are_scaled() {
        let src = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                   property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                   end_header\n0 0 0 255 0 0\n";
        let cloud = read(src.as_bytes()).unwrap();
        assert_eq!(cloud.colors.unwrap()[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn short_body_is_truncated() {
        let mut src = String::from(
            "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\n\
             property float z\nend_header\n",
        );
        for i in 0..9 {
            src.push_str(&format!("{i} 0 0\n"));
        }
        match read(src.as_bytes()) {
            Err(PlyError::TruncatedData { expected: 10, found: 9 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_binary_is_truncated() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4], 0.1).unwrap();
        let mut bytes = Vec::new();
        write_point_cloud_to(&mut bytes, &cloud, PlyEncoding::BinaryLittleEndian).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            read(&bytes),
            Err(PlyError::TruncatedData { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read(b"plx\n"), Err(PlyError::MalformedHeader(_))));
        let no_end = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n";
        assert!(matches!(read(no_end.as_bytes()), Err(PlyError::MalformedHeader(_))));
        let big = "ply\nformat binary_big_endian 1.0\nend_header\n";
        assert!(matches!(read(big.as_bytes()), Err(PlyError::MalformedHeader(_))));
        let int_xyz = "ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\nproperty int y\n\
                       property int z\nend_header\n1 2 3\n";
        assert!(matches!(
            read(int_xyz.as_bytes()),
            Err(PlyError::UnsupportedProperty(_))
        ));
        let float_color = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n\
                       property float z\nproperty float red\nproperty float green\nproperty float blue\n\
                       end_header\n1 2 3 0.1 0.2 0.3\n";
        assert!(matches!(
            read(float_color.as_bytes()),
            Err(PlyError::UnsupportedProperty(_))
        ));
    }

    #[test]
    fn skips_unknown_properties_and_faces() {
        let src = "ply\nformat ascii 1.0\ncomment resolution 0.02\nelement vertex 2\n\
                   property float x\nproperty float intensity\nproperty float y\nproperty float z\n\
                   property int label\nelement face 1\nproperty list uchar int vertex_indices\n\
                   end_header\n1 9 2 3 4\n5 9 6 7 -1\n3 0 1 1\n";
        let cloud = read(src.as_bytes()).unwrap();
        assert_eq!(cloud.positions, vec![[1.0, 2.0, 3.0], [5.0, 6.0, 7.0]]);
        assert_eq!(cloud.labels.unwrap(), vec![4, -1]);
        assert_eq!(cloud.resolution, 0.02);
    }

    #[test]
    fn binary_round_trip_with_channels() {
        let cloud = PointCloud::new(vec![[0.25, -1.5, 3.0], [1e-3, 2.0, -7.125]], 0.04)
            .unwrap()
            .with_colors(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
            .unwrap()
            .with_labels(vec![3, UNLABELED])
            .unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let mut bytes = Vec::new();
            write_point_cloud_to(&mut bytes, &cloud, enc).unwrap();
            assert_eq!(read(&bytes).unwrap(), cloud);
        }
    }
}
