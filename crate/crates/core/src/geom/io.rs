//! Mesh and point cloud file IO.
//!
//! Reads Wavefront OBJ (ASCII `v`/`f` records, 1-based or negative indices,
//! polygons fan-triangulated) and PLY (ASCII or binary little-endian; vertex
//! `x`/`y`/`z` required, faces optional). Writes point clouds as binary
//! little-endian PLY with float32 coordinates and optional extra float32
//! per-point properties.

use super::{PointCloud, TriangleMesh, Vec3};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Raw contents of a mesh-like file before validation.
#[derive(Clone, Debug, Default)]
pub struct RawGeometry {
    pub vertices: Vec<Vec3>,
    /// Polygons as given in the file (not yet triangulated).
    pub polygons: Vec<Vec<u32>>,
}

impl RawGeometry {
    pub fn triangles(&self) -> Vec<[u32; 3]> {
        let mut out = Vec::new();
        for poly in &self.polygons {
            for k in 1..poly.len().saturating_sub(1) {
                out.push([poly[0], poly[k], poly[k + 1]]);
            }
        }
        out
    }

    pub fn into_mesh(self) -> Result<TriangleMesh> {
        let tris = self.triangles();
        TriangleMesh::new(self.vertices, tris)
    }

    pub fn into_cloud(self) -> Result<PointCloud> {
        PointCloud::new(self.vertices)
    }
}

pub fn read_geometry(path: impl AsRef<Path>) -> Result<RawGeometry> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match ext.as_deref() {
        Some("obj") => read_obj(reader),
        Some("ply") => read_ply(reader),
        _ => Err(Error::Format(format!(
            "{}: expected a .obj or .ply file",
            path.display()
        ))),
    }
}

pub fn read_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    read_geometry(path)?.into_mesh()
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_geometry(path)?.into_cloud()
}

pub fn read_obj<R: BufRead>(reader: R) -> Result<RawGeometry> {
    let mut geo = RawGeometry::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("OBJ", e.to_string()))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for v in c.iter_mut() {
                    *v = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse("OBJ", format!("line {}: bad vertex", lineno + 1)))?;
                }
                geo.vertices.push(Vec3::from(c));
            }
            Some("f") => {
                let nv = geo.vertices.len() as i64;
                let mut poly = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let idx: i64 = first
                        .parse()
                        .map_err(|_| Error::parse("OBJ", format!("line {}: bad face index {tok:?}", lineno + 1)))?;
                    let resolved = if idx < 0 { nv + idx } else { idx - 1 };
                    if resolved < 0 {
                        return Err(Error::parse("OBJ", format!("line {}: face index out of range", lineno + 1)));
                    }
                    poly.push(resolved as u32);
                }
                if poly.len() < 3 {
                    return Err(Error::parse("OBJ", format!("line {}: face with fewer than 3 vertices", lineno + 1)));
                }
                geo.polygons.push(poly);
            }
            _ => {}
        }
    }
    Ok(geo)
}

pub fn write_obj<W: Write>(mesh: &TriangleMesh, w: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn read_le<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut b = [0u8; $n];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8, 1),
            Scalar::U8 => rd!(u8, 1),
            Scalar::I16 => rd!(i16, 2),
            Scalar::U16 => rd!(u16, 2),
            Scalar::I32 => rd!(i32, 4),
            Scalar::U32 => rd!(u32, 4),
            Scalar::F32 => rd!(f32, 4),
            Scalar::F64 => rd!(f64, 8),
        })
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

fn parse_ply_header<R: BufRead>(reader: &mut R) -> Result<(PlyFormat, Vec<Element>)> {
    let err = |m: &str| Error::parse("PLY header", m.to_string());
    let mut line = String::new();
    let mut read_line = |line: &mut String| -> Result<()> {
        line.clear();
        let n = reader
            .read_line(line)
            .map_err(|e| Error::parse("PLY header", e.to_string()))?;
        if n == 0 {
            return Err(Error::parse("PLY header", "unexpected end of file"));
        }
        Ok(())
    };
    read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(err("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        read_line(&mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLe),
            ["format", other, _] => {
                return Err(Error::Format(format!("unsupported PLY format {other}")))
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err("bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element"))?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count).ok_or_else(|| err("bad list count type"))?,
                    item: Scalar::parse(item).ok_or_else(|| err("bad list item type"))?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err("property before element"))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| err("bad property type"))?,
                });
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    Ok((format.ok_or_else(|| err("missing format line"))?, elements))
}

pub fn read_ply<R: BufRead>(mut reader: R) -> Result<RawGeometry> {
    let (format, elements) = parse_ply_header(&mut reader)?;
    let mut geo = RawGeometry::default();
    let data_err = |e: std::io::Error| Error::parse("PLY body", e.to_string());

    let mut ascii_tokens: Option<std::vec::IntoIter<String>> = None;
    if format == PlyFormat::Ascii {
        let mut body = String::new();
        reader.read_to_string(&mut body).map_err(data_err)?;
        let toks: Vec<String> = body.split_whitespace().map(str::to_owned).collect();
        ascii_tokens = Some(toks.into_iter());
    }
    let mut next_value = |ty: Scalar, reader: &mut R| -> Result<f64> {
        match ascii_tokens.as_mut() {
            Some(t) => t
                .next()
                .ok_or_else(|| Error::parse("PLY body", "unexpected end of data"))?
                .parse::<f64>()
                .map_err(|e| Error::parse("PLY body", e.to_string())),
            None => ty.read_le(reader).map_err(data_err),
        }
    };

    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let axis_of = |name: &str| match name {
            "x" => Some(0),
            "y" => Some(1),
            "z" => Some(2),
            _ => None,
        };
        if is_vertex {
            for axis in ["x", "y", "z"] {
                if !el.props.iter().any(|p| matches!(p, Property::Scalar { name, .. } if name == axis)) {
                    return Err(Error::parse("PLY", format!("vertex element lacks '{axis}'")));
                }
            }
        }
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            for prop in &el.props {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = next_value(*ty, &mut reader)?;
                        if is_vertex {
                            if let Some(a) = axis_of(name) {
                                pos[a] = v;
                            }
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = next_value(*count, &mut reader)? as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(next_value(*item, &mut reader)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            let poly: Vec<u32> = items.iter().map(|&v| v as u32).collect();
                            if poly.len() >= 3 {
                                geo.polygons.push(poly);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                geo.vertices.push(Vec3::from(pos));
            }
        }
    }
    Ok(geo)
}

/// Writes points as binary little-endian PLY, float32 `x y z` followed by one
/// float32 property per entry of `extra` (each must have one value per point).
pub fn write_ply_points<W: Write>(
    points: &[Vec3],
    extra: &[(&str, &[f64])],
    w: W,
) -> Result<()> {
    for (name, vals) in extra {
        if vals.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "property {name} has {} values for {} points",
                vals.len(),
                points.len()
            )));
        }
    }
    let mut w = BufWriter::new(w);
    let io = |e: std::io::Error| Error::io("<ply writer>", e);
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", points.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    for (name, _) in extra {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for (i, p) in points.iter().enumerate() {
        for c in p.iter() {
            w.write_all(&(*c as f32).to_le_bytes()).map_err(io)?;
        }
        for (_, vals) in extra {
            w.write_all(&(vals[i] as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// ASCII PLY mesh export, mainly for inspecting generated shapes.
pub fn write_ply_mesh<W: Write>(mesh: &TriangleMesh, w: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply\nformat ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices().len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    writeln!(w, "element face {}", mesh.faces().len())?;
    writeln!(w, "property list uchar int vertex_indices\nend_header")?;
    for v in mesh.vertices() {
        writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    w.flush()
}

pub fn save_points(path: impl AsRef<Path>, points: &[Vec3], extra: &[(&str, &[f64])]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply_points(points, extra, f)
}

pub fn save_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply_mesh(mesh, f),
        _ => write_obj(mesh, f),
    };
    res.map_err(|e| Error::io(path, e))
}
