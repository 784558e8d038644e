//! Minimal PLY container: header model plus ASCII / binary little-endian
//! bodies. Every scalar is carried as `f64`, which represents all PLY scalar
//! types up to 32 bits (and `double`) exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
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

    fn name(self) -> &'static str {
        match self {
            Scalar::I8 => "char",
            Scalar::U8 => "uchar",
            Scalar::I16 => "short",
            Scalar::U16 => "ushort",
            Scalar::I32 => "int",
            Scalar::U32 => "uint",
            Scalar::F32 => "float",
            Scalar::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn encode(self, v: f64, big_endian: bool, out: &mut Vec<u8>) {
        macro_rules! put {
            ($t:ty) => {{
                let x = v as $t;
                if big_endian {
                    out.extend_from_slice(&x.to_be_bytes())
                } else {
                    out.extend_from_slice(&x.to_le_bytes())
                }
            }};
        }
        match self {
            Scalar::I8 => put!(i8),
            Scalar::U8 => put!(u8),
            Scalar::I16 => put!(i16),
            Scalar::U16 => put!(u16),
            Scalar::I32 => put!(i32),
            Scalar::U32 => put!(u32),
            Scalar::F32 => put!(f32),
            Scalar::F64 => put!(f64),
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f64 {
        macro_rules! get {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if big_endian {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }) as f64
            }};
        }
        match self {
            Scalar::I8 => get!(i8, 1),
            Scalar::U8 => get!(u8, 1),
            Scalar::I16 => get!(i16, 2),
            Scalar::U16 => get!(u16, 2),
            Scalar::I32 => get!(i32, 4),
            Scalar::U32 => get!(u32, 4),
            Scalar::F32 => get!(f32, 4),
            Scalar::F64 => get!(f64, 8),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            Scalar::F32 => format!("{}", v as f32),
            Scalar::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropertyKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub kind: PropertyKind,
}

impl Property {
    pub fn scalar(name: impl Into<String>, ty: Scalar) -> Self {
        Self {
            name: name.into(),
            kind: PropertyKind::Scalar(ty),
        }
    }

    pub fn list(name: impl Into<String>, count: Scalar, item: Scalar) -> Self {
        Self {
            name: name.into(),
            kind: PropertyKind::List { count, item },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    List(Vec<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Value::Scalar(v) => Some(*v),
            Value::List(_) => None,
        }
    }

    pub fn as_list(&self) -> Option<&[f64]> {
        match self {
            Value::List(v) => Some(v),
            Value::Scalar(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub properties: Vec<Property>,
    pub rows: Vec<Vec<Value>>,
}

impl Element {
    pub fn new(name: impl Into<String>, properties: Vec<Property>) -> Self {
        Self {
            name: name.into(),
            properties,
            rows: Vec::new(),
        }
    }

    pub fn property_index(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    /// Column of a scalar property.
    pub fn scalar_column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.property_index(name)?;
        self.rows.iter().map(|r| r[i].as_scalar()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyFile {
    pub format: Format,
    pub comments: Vec<String>,
    pub elements: Vec<Element>,
}

impl PlyFile {
    pub fn new(format: Format) -> Self {
        Self {
            format,
            comments: Vec::new(),
            elements: Vec::new(),
        }
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let fmt = match self.format {
            Format::Ascii => "ascii",
            Format::BinaryLittleEndian => "binary_little_endian",
            Format::BinaryBigEndian => "binary_big_endian",
        };
        let mut header = format!("ply\nformat {fmt} 1.0\n");
        for c in &self.comments {
            header.push_str(&format!("comment {c}\n"));
        }
        for e in &self.elements {
            header.push_str(&format!("element {} {}\n", e.name, e.rows.len()));
            for p in &e.properties {
                match p.kind {
                    PropertyKind::Scalar(t) => {
                        header.push_str(&format!("property {} {}\n", t.name(), p.name))
                    }
                    PropertyKind::List { count, item } => header.push_str(&format!(
                        "property list {} {} {}\n",
                        count.name(),
                        item.name(),
                        p.name
                    )),
                }
            }
        }
        header.push_str("end_header\n");
        out.extend_from_slice(header.as_bytes());
        for e in &self.elements {
            for row in &e.rows {
                match self.format {
                    Format::Ascii => {
                        let mut fields = Vec::new();
                        for (p, v) in e.properties.iter().zip(row) {
                            match (&p.kind, v) {
                                (PropertyKind::Scalar(t), Value::Scalar(x)) => {
                                    fields.push(t.format_ascii(*x))
                                }
                                (PropertyKind::List { count, item }, Value::List(xs)) => {
                                    fields.push(count.format_ascii(xs.len() as f64));
                                    fields.extend(xs.iter().map(|x| item.format_ascii(*x)));
                                }
                                _ => fields.push("0".into()),
                            }
                        }
                        out.extend_from_slice(fields.join(" ").as_bytes());
                        out.push(b'\n');
                    }
                    Format::BinaryLittleEndian | Format::BinaryBigEndian => {
                        let be = self.format == Format::BinaryBigEndian;
                        for (p, v) in e.properties.iter().zip(row) {
                            match (&p.kind, v) {
                                (PropertyKind::Scalar(t), Value::Scalar(x)) => {
                                    t.encode(*x, be, &mut out)
                                }
                                (PropertyKind::List { count, item }, Value::List(xs)) => {
                                    count.encode(xs.len() as f64, be, &mut out);
                                    for x in xs {
                                        item.encode(*x, be, &mut out);
                                    }
                                }
                                _ => {}
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(BufReader::new(f), path)
    }

    pub fn parse(mut r: impl BufRead, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut line = String::new();
        let next_line = |r: &mut dyn BufRead, line: &mut String| -> Result<()> {
            line.clear();
            let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "unexpected end of header"));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != "ply" {
            return Err(bad("missing `ply` magic"));
        }
        let mut format = None;
        let mut comments = Vec::new();
        let mut elements: Vec<(Element, usize)> = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            let trimmed = line.trim_end();
            let mut tok = trimmed.split_whitespace();
            match tok.next() {
                Some("format") => {
                    format = Some(match tok.next() {
                        Some("ascii") => Format::Ascii,
                        Some("binary_little_endian") => Format::BinaryLittleEndian,
                        Some("binary_big_endian") => Format::BinaryBigEndian,
                        _ => return Err(bad("unknown format")),
                    })
                }
                Some("comment") | Some("obj_info") => comments.push(
                    trimmed
                        .split_once(' ')
                        .map(|x| x.1)
                        .unwrap_or("")
                        .to_string(),
                ),
                Some("element") => {
                    let name = tok.next().ok_or_else(|| bad("element without name"))?;
                    let count = tok
                        .next()
                        .and_then(|c| c.parse::<usize>().ok())
                        .ok_or_else(|| bad("element without count"))?;
                    elements.push((Element::new(name, Vec::new()), count));
                }
                Some("property") => {
                    let (el, _) = elements
                        .last_mut()
                        .ok_or_else(|| bad("property before element"))?;
                    let first = tok.next().ok_or_else(|| bad("empty property"))?;
                    let prop = if first == "list" {
                        let count = tok
                            .next()
                            .and_then(Scalar::parse)
                            .ok_or_else(|| bad("bad list count type"))?;
                        let item = tok
                            .next()
                            .and_then(Scalar::parse)
                            .ok_or_else(|| bad("bad list item type"))?;
                        let name = tok.next().ok_or_else(|| bad("list without name"))?;
                        Property::list(name, count, item)
                    } else {
                        let t = Scalar::parse(first).ok_or_else(|| bad("bad property type"))?;
                        let name = tok.next().ok_or_else(|| bad("property without name"))?;
                        Property::scalar(name, t)
                    };
                    el.properties.push(prop);
                }
                Some("end_header") => break,
                Some(_) | None => return Err(bad("unrecognized header line")),
            }
        }
        let format = format.ok_or_else(|| bad("missing format line"))?;
        match format {
            Format::Ascii => {
                let mut body = String::new();
                r.read_to_string(&mut body)
                    .map_err(|e| Error::io(path, e))?;
                let mut toks = body.split_ascii_whitespace();
                let mut next = |t: Scalar| -> Result<f64> {
                    toks.next()
                        .and_then(|s| s.parse::<f64>().ok())
                        .map(|v| if t == Scalar::F32 { v as f32 as f64 } else { v })
                        .ok_or_else(|| Error::format(path, "truncated or malformed ascii body"))
                };
                for (el, count) in &mut elements {
                    for _ in 0..*count {
                        let mut row = Vec::with_capacity(el.properties.len());
                        for p in &el.properties {
                            row.push(match p.kind {
                                PropertyKind::Scalar(t) => Value::Scalar(next(t)?),
                                PropertyKind::List { count, item } => {
                                    let n = next(count)? as usize;
                                    Value::List((0..n).map(|_| next(item)).collect::<Result<_>>()?)
                                }
                            });
                        }
                        el.rows.push(row);
                    }
                }
            }
            Format::BinaryLittleEndian | Format::BinaryBigEndian => {
                let be = format == Format::BinaryBigEndian;
                let mut body = Vec::new();
                r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
                let mut pos = 0usize;
                let mut take = |t: Scalar| -> Result<f64> {
                    let n = t.size();
                    if pos + n > body.len() {
                        return Err(Error::format(path, "truncated binary body"));
                    }
                    let v = t.decode(&body[pos..pos + n], be);
                    pos += n;
                    Ok(v)
                };
                for (el, count) in &mut elements {
                    for _ in 0..*count {
                        let mut row = Vec::with_capacity(el.properties.len());
                        for p in &el.properties {
                            row.push(match p.kind {
                                PropertyKind::Scalar(t) => Value::Scalar(take(t)?),
                                PropertyKind::List { count, item } => {
                                    let n = take(count)? as usize;
                                    Value::List((0..n).map(|_| take(item)).collect::<Result<_>>()?)
                                }
                            });
                        }
                        el.rows.push(row);
                    }
                }
            }
        }
        Ok(Self {
            format,
            comments,
            elements: elements.into_iter().map(|(e, _)| e).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(format: Format) -> PlyFile {
        let mut ply = PlyFile::new(format);
        ply.comments.push("test file".into());
        let mut v = Element::new(
            "vertex",
            vec![
                Property::scalar("x", Scalar::F32),
                Property::scalar("y", Scalar::F32),
                Property::scalar("red", Scalar::U8),
            ],
        );
        v.rows.push(vec![
            Value::Scalar(0.5),
            Value::Scalar(-1.25),
            Value::Scalar(200.0),
        ]);
        v.rows.push(vec![
            Value::Scalar(3.0),
            Value::Scalar(0.1f32 as f64),
            Value::Scalar(7.0),
        ]);
        let mut f = Element::new(
            "face",
            vec![Property::list("vertex_indices", Scalar::U8, Scalar::I32)],
        );
        f.rows.push(vec![Value::List(vec![0.0, 1.0, 0.0])]);
        ply.elements = vec![v, f];
        ply
    }

    #[test]
    fn round_trips_all_formats() {
        for format in [
            Format::Ascii,
            Format::BinaryLittleEndian,
            Format::BinaryBigEndian,
        ] {
            let ply = sample(format);
            let bytes = ply.to_bytes();
            let back = PlyFile::parse(&bytes[..], Path::new("mem")).unwrap();
            assert_eq!(back, ply);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_truncated_body() {
        let bytes = sample(Format::BinaryLittleEndian).to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            PlyFile::parse(cut, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        assert!(PlyFile::parse(&b"plx\n"[..], Path::new("mem")).is_err());
    }
}
