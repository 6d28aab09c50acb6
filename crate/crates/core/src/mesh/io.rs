//! OBJ (`v`/`vt`/`f`) and PLY (ascii, binary little-endian) mesh files.
//!
//! Quads and larger polygons are triangulated fan-wise. OBJ corners whose `vt`
//! index disagrees with a vertex's first-seen `vt` split that vertex, since UVs
//! are stored per vertex.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::TriMesh;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn load_mesh<T: Real>(path: impl AsRef<Path>) -> Result<TriMesh<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => parse_obj(&bytes),
        Some("ply") => parse_ply(&bytes),
        _ if bytes.starts_with(b"ply") => parse_ply(&bytes),
        _ => parse_obj(&bytes),
    }
}

pub fn save_mesh<T: Real>(mesh: &TriMesh<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mut w = BufWriter::new(fs::File::create(path)?);
    match ext.as_deref() {
        Some("obj") => write_obj(mesh, &mut w)?,
        _ => write_ply(mesh, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedMesh(msg.into())
}

pub fn parse_obj<T: Real>(bytes: &[u8]) -> Result<TriMesh<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("obj is not utf-8"))?;
    let mut pos: Vec<Vector3<T>> = Vec::new();
    let mut tex: Vec<Vector2<T>> = Vec::new();
    // corners: (vertex index, optional vt index)
    let mut polys: Vec<Vec<(usize, Option<usize>)>> = Vec::new();

    let num = |s: Option<&str>, line: usize| -> Result<f64> {
        s.ok_or_else(|| malformed(format!("line {line}: missing coordinate")))?
            .parse::<f64>()
            .map_err(|_| malformed(format!("line {line}: bad number")))
    };
    let index = |tok: &str, count: usize, line: usize| -> Result<usize> {
        let i: i64 = tok
            .parse()
            .map_err(|_| malformed(format!("line {line}: bad index {tok:?}")))?;
        let resolved = if i < 0 { count as i64 + i } else { i - 1 };
        if resolved < 0 || resolved as usize >= count {
            return Err(malformed(format!("line {line}: index {i} out of range")));
        }
        Ok(resolved as usize)
    };

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let x = num(it.next(), line)?;
                let y = num(it.next(), line)?;
                let z = num(it.next(), line)?;
                pos.push(Vector3::new(T::of(x), T::of(y), T::of(z)));
            }
            Some("vt") => {
                let u = num(it.next(), line)?;
                let v = num(it.next(), line)?;
                tex.push(Vector2::new(T::of(u), T::of(v)));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let vi = index(parts.next().unwrap_or(""), pos.len(), line)?;
                    let ti = match parts.next() {
                        Some(s) if !s.is_empty() => Some(index(s, tex.len(), line)?),
                        _ => None,
                    };
                    poly.push((vi, ti));
                }
                if poly.len() < 3 {
                    return Err(malformed(format!("line {line}: face with {} corners", poly.len())));
                }
                polys.push(poly);
            }
            _ => {}
        }
    }

    let has_uv = !tex.is_empty() && polys.iter().flatten().all(|c| c.1.is_some());
    if !has_uv {
        let faces = triangulate(polys.iter().map(|p| p.iter().map(|c| c.0 as u32).collect()));
        return TriMesh::new(pos, faces, None);
    }

    // one output vertex per distinct (v, vt) pair; first pair keeps the original index
    let mut first_uv: Vec<Option<usize>> = vec![None; pos.len()];
    let mut split: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertices = pos.clone();
    let mut uvs: Vec<Option<Vector2<T>>> = vec![None; pos.len()];
    let mut remapped = Vec::with_capacity(polys.len());
    for poly in &polys {
        let mut out = Vec::with_capacity(poly.len());
        for &(vi, ti) in poly {
            let ti = ti.expect("checked above");
            let id = match first_uv[vi] {
                None => {
                    first_uv[vi] = Some(ti);
                    uvs[vi] = Some(tex[ti]);
                    vi as u32
                }
                Some(t0) if t0 == ti => vi as u32,
                Some(_) => *split.entry((vi, ti)).or_insert_with(|| {
                    vertices.push(pos[vi]);
                    uvs.push(Some(tex[ti]));
                    (vertices.len() - 1) as u32
                }),
            };
            out.push(id);
        }
        remapped.push(out);
    }
    let uvs: Vec<Vector2<T>> = uvs.into_iter().map(|u| u.unwrap_or_else(Vector2::zeros)).collect();
    TriMesh::new(vertices, triangulate(remapped.into_iter()), Some(uvs))
}

fn triangulate(polys: impl Iterator<Item = Vec<u32>>) -> Vec<[u32; 3]> {
    let mut faces = Vec::new();
    for p in polys {
        for k in 1..p.len() - 1 {
            faces.push([p[0], p[k], p[k + 1]]);
        }
    }
    faces
}

fn write_obj<T: Real>(mesh: &TriMesh<T>, w: &mut impl Write) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {:?} {:?} {:?}", v.x.f64(), v.y.f64(), v.z.f64())?;
    }
    if let Some(uvs) = mesh.uvs() {
        for t in uvs {
            writeln!(w, "vt {:?} {:?}", t.x.f64(), t.y.f64())?;
        }
        for f in mesh.faces() {
            let [a, b, c] = f.map(|i| i + 1);
            writeln!(w, "f {a}/{a} {b}/{b} {c}/{c}")?;
        }
    } else {
        for f in mesh.faces() {
            let [a, b, c] = f.map(|i| i + 1);
            writeln!(w, "f {a} {b} {c}")?;
        }
    }
    Ok(())
}

/// Binary little-endian PLY with double vertex coordinates.
fn write_ply<T: Real>(mesh: &TriMesh<T>, w: &mut impl Write) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertex_count())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if mesh.uvs().is_some() {
        writeln!(w, "property double u")?;
        writeln!(w, "property double v")?;
    }
    writeln!(w, "element face {}", mesh.face_count())?;
    writeln!(w, "property list uchar uint vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in [v.x, v.y, v.z] {
            w.write_all(&c.f64().to_le_bytes())?;
        }
        if let Some(uvs) = mesh.uvs() {
            w.write_all(&uvs[i].x.f64().to_le_bytes())?;
            w.write_all(&uvs[i].y.f64().to_le_bytes())?;
        }
    }
    for f in mesh.faces() {
        w.write_all(&[3u8])?;
        for i in f {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return Err(malformed(format!("unknown ply type {s}"))),
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

    fn read(self, b: &[u8]) -> f64 {
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

#[derive(Debug)]
enum PlyProp {
    Scalar(String, PlyType),
    List(String, PlyType, PlyType),
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

pub fn parse_ply<T: Real>(bytes: &[u8]) -> Result<TriMesh<T>> {
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| malformed("ply without end_header"))?;
    let mut body = header_end + 10;
    while body < bytes.len() && bytes[body] != b'\n' {
        body += 1;
    }
    body += 1;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| malformed("ply header"))?;

    let mut binary = false;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in header.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => binary = false,
            ["format", "binary_little_endian", ..] => binary = true,
            ["format", f, ..] => return Err(malformed(format!("unsupported ply format {f}"))),
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed("element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .props
                .push(PlyProp::List(
                    name.to_string(),
                    PlyType::parse(ct)?,
                    PlyType::parse(it)?,
                )),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| malformed("property before element"))?
                .props
                .push(PlyProp::Scalar(name.to_string(), PlyType::parse(ty)?)),
            _ => {}
        }
    }

    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut polys: Vec<Vec<u32>> = Vec::new();
    let mut reader = PlyReader {
        bytes: &bytes[body.min(bytes.len())..],
        cursor: 0,
        binary,
        tokens: Vec::new(),
    };
    if !binary {
        let text = std::str::from_utf8(reader.bytes).map_err(|_| malformed("ply body"))?;
        reader.tokens = text.split_whitespace().rev().map(str::to_owned).collect();
    }

    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let find = |names: &[&str]| {
            el.props
                .iter()
                .position(|p| matches!(p, PlyProp::Scalar(n, _) if names.contains(&n.as_str())))
        };
        let (ix, iy, iz) = (find(&["x"]), find(&["y"]), find(&["z"]));
        let (iu, iv) = (find(&["u", "s", "texture_u"]), find(&["v", "t", "texture_v"]));
        if is_vertex && (ix.is_none() || iy.is_none() || iz.is_none()) {
            return Err(malformed("vertex element lacks x/y/z"));
        }
        let mut scalars = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            let mut list = Vec::new();
            for (pi, p) in el.props.iter().enumerate() {
                match p {
                    PlyProp::Scalar(_, t) => scalars[pi] = reader.value(*t)?,
                    PlyProp::List(name, ct, it) => {
                        let n = reader.value(*ct)? as usize;
                        let keep = is_face && (name == "vertex_indices" || name == "vertex_index");
                        for _ in 0..n {
                            let v = reader.value(*it)?;
                            if keep {
                                if v < 0.0 {
                                    return Err(malformed("negative face index"));
                                }
                                list.push(v as u32);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                vertices.push(Vector3::new(
                    T::of(scalars[ix.unwrap()]),
                    T::of(scalars[iy.unwrap()]),
                    T::of(scalars[iz.unwrap()]),
                ));
                if let (Some(a), Some(b)) = (iu, iv) {
                    uvs.push(Vector2::new(T::of(scalars[a]), T::of(scalars[b])));
                }
            } else if is_face {
                if list.len() < 3 {
                    return Err(malformed("face with fewer than 3 corners"));
                }
                polys.push(list);
            }
        }
    }
    let uvs = (!uvs.is_empty()).then_some(uvs);
    TriMesh::new(vertices, triangulate(polys.into_iter()), uvs)
}

struct PlyReader<'a> {
    bytes: &'a [u8],
    cursor: usize,
    binary: bool,
    tokens: Vec<String>,
}

impl PlyReader<'_> {
    fn value(&mut self, t: PlyType) -> Result<f64> {
        if self.binary {
            let n = t.size();
            let end = self.cursor + n;
            if end > self.bytes.len() {
                return Err(malformed("ply body truncated"));
            }
            let v = t.read(&self.bytes[self.cursor..end]);
            self.cursor = end;
            Ok(v)
        } else {
            self.tokens
                .pop()
                .ok_or_else(|| malformed("ply body truncated"))?
                .parse()
                .map_err(|_| malformed("bad ply number"))
        }
    }
}
