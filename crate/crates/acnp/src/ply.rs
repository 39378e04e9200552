//! ASCII PLY reading and writing.
//!
//! Only `element vertex` positions are read; other properties and elements
//! are skipped. Quantized clouds are written with integer coordinates and
//! `comment acnp ...` lines carrying depth, origin and scale, so a file
//! written by [`write_quantized`] reads back as the same [`QuantizedCloud`].

use std::fmt::Write as _;

use acnp_core::cloud::{QuantizedCloud, RawCloud};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Cloud(#[from] acnp_core::Error),
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, PlyError> {
    Err(PlyError::Syntax { line, msg: msg.into() })
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
    /// Line on which the element was declared.
    line: usize,
}

/// Parsed PLY contents: vertex positions plus any `comment acnp` metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyData {
    pub points: Vec<[f64; 3]>,
    pub depth: Option<u8>,
    pub origin: Option<[f64; 3]>,
    pub scale: Option<f64>,
}

impl PlyData {
    /// The stored quantized cloud, when the file carries the metadata for one.
    pub fn quantized(&self) -> Option<Result<QuantizedCloud, PlyError>> {
        let depth = self.depth?;
        let mut pts = Vec::with_capacity(self.points.len());
        for p in &self.points {
            if p.iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v > u32::MAX as f64) {
                return Some(err(0, "quantized file holds non-integer coordinates"));
            }
            pts.push(p.map(|v| v as u32));
        }
        let origin = self.origin.unwrap_or([0.0; 3]);
        let scale = self.scale.unwrap_or(1.0);
        Some(QuantizedCloud::new(depth, pts, origin, scale).map_err(PlyError::from))
    }
}

pub fn parse_ply(text: &str) -> Result<RawCloud, PlyError> {
    Ok(RawCloud::new(parse_ply_data(text)?.points)?)
}

pub fn parse_ply_data(text: &str) -> Result<PlyData, PlyError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return err(n, "missing 'ply' magic"),
        None => return err(1, "empty file"),
    }
    let mut data = PlyData::default();
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut last = 1;
    loop {
        let Some((n, line)) = lines.next() else {
            return err(last, "header is not terminated by 'end_header'");
        };
        last = n;
        let mut words = line.split_whitespace();
        match words.next() {
            None => continue,
            Some("end_header") => break,
            Some("format") => {
                if words.next() != Some("ascii") {
                    return err(n, "only 'format ascii 1.0' is supported");
                }
                format_seen = true;
            }
            Some("comment") => parse_comment(n, words.collect(), &mut data)?,
            Some("obj_info") => {}
            Some("element") => {
                let (Some(name), Some(count)) = (words.next(), words.next()) else {
                    return err(n, "element needs a name and a count");
                };
                let Ok(count) = count.parse() else {
                    return err(n, format!("bad element count '{count}'"));
                };
                elements.push(Element { name: name.into(), count, props: Vec::new(), line: n });
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return err(n, "property before any element");
                };
                let rest: Vec<&str> = words.collect();
                let name = match rest.as_slice() {
                    ["list", _, _, name] => name,
                    [_, name] => name,
                    _ => return err(n, "malformed property"),
                };
                el.props.push((*name).into());
            }
            Some(other) => return err(n, format!("unknown header keyword '{other}'")),
        }
    }
    if !format_seen {
        return err(last, "header has no format line");
    }
    let Some(vi) = elements.iter().position(|e| e.name == "vertex") else {
        return err(last, "no 'vertex' element");
    };
    let vertex = &elements[vi];
    let mut axes = [0usize; 3];
    for (a, name) in ["x", "y", "z"].iter().enumerate() {
        let Some(i) = vertex.props.iter().position(|p| p == name) else {
            return err(vertex.line, format!("vertex element has no '{name}' property"));
        };
        axes[a] = i;
    }
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for (ei, el) in elements.iter().enumerate() {
        for k in 0..el.count {
            let Some((n, line)) = body.next() else {
                return err(last + 1, format!("expected {} '{}' records, found {k}", el.count, el.name));
            };
            last = n;
            if ei != vi {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < vertex.props.len() {
                return err(n, format!("vertex has {} fields, expected {}", fields.len(), vertex.props.len()));
            }
            let mut p = [0.0; 3];
            for a in 0..3 {
                let f = fields[axes[a]];
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => p[a] = v,
                    _ => return err(n, format!("non-numeric coordinate '{f}'")),
                }
            }
            data.points.push(p);
        }
    }
    if let Some((n, _)) = body.next() {
        return err(n, "more records than the header declares");
    }
    Ok(data)
}

fn parse_comment(n: usize, words: Vec<&str>, data: &mut PlyData) -> Result<(), PlyError> {
    let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    match words.as_slice() {
        ["acnp", "depth", d] => match d.parse() {
            Ok(d) => data.depth = Some(d),
            Err(_) => return err(n, format!("bad depth '{d}'")),
        },
        ["acnp", "origin", x, y, z] => match (num(x), num(y), num(z)) {
            (Some(x), Some(y), Some(z)) => data.origin = Some([x, y, z]),
            _ => return err(n, "bad origin"),
        },
        ["acnp", "scale", s] => match num(s) {
            Some(s) => data.scale = Some(s),
            None => return err(n, format!("bad scale '{s}'")),
        },
        _ => {}
    }
    Ok(())
}

fn header(out: &mut String, count: usize, comments: &[String], ty: &str) {
    out.push_str("ply\nformat ascii 1.0\n");
    for c in comments {
        let _ = writeln!(out, "comment {c}");
    }
    let _ = writeln!(out, "element vertex {count}");
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property {ty} {axis}");
    }
    out.push_str("end_header\n");
}

/// Coordinates are written with Rust's shortest round-trip formatting.
pub fn write_ply(cloud: &RawCloud) -> String {
    let mut out = String::new();
    header(&mut out, cloud.count(), &[], "double");
    for p in cloud.points() {
        let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    out
}

pub fn write_quantized(cloud: &QuantizedCloud) -> String {
    let [x, y, z] = cloud.origin();
    let comments = [
        format!("acnp depth {}", cloud.depth()),
        format!("acnp origin {x:?} {y:?} {z:?}"),
        format!("acnp scale {:?}", cloud.scale()),
    ];
    let mut out = String::new();
    header(&mut out, cloud.len(), &comments, "int");
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}
