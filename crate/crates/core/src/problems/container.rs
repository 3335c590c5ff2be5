//! Self-describing text container for problem data.
//!
//! ```text
//! fedpart-problem 1
//! kind quadratic
//! scalars n 1
//! 3e0
//! matrix device0.A 2 2
//! 1e0 0e0
//! 0e0 1e0
//! end
//! ```
//!
//! Matrices are written row-major; floats use the shortest exponent form
//! that round-trips exactly.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &str = "fedpart-problem";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    kind: String,
    scalars: Vec<(String, Vec<f64>)>,
    matrices: Vec<(String, DMatrix<f64>)>,
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Construction(format!("problem container line {line}: {msg}"))
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            scalars: Vec::new(),
            matrices: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn push_scalars(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.scalars.push((name.into(), values));
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        self.matrices.push((name.into(), m));
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Construction(format!("expected a {kind} container, found {}", self.kind)))
        }
    }

    pub fn scalars(&self, name: &str) -> Result<&[f64]> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Construction(format!("container has no scalars named {name}")))
    }

    pub fn scalar_usize(&self, name: &str) -> Result<usize> {
        match self.scalars(name)? {
            [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            other => Err(Error::Construction(format!("{name} must be one nonnegative integer, got {other:?}"))),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Construction(format!("container has no matrix named {name}")))
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let row = |out: &mut String, xs: &mut dyn Iterator<Item = f64>| {
            let line: Vec<String> = xs.map(|x| format!("{x:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        };
        writeln!(out, "{MAGIC} {VERSION}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        for (name, values) in &self.scalars {
            writeln!(out, "scalars {name} {}", values.len()).unwrap();
            row(&mut out, &mut values.iter().copied());
        }
        for (name, m) in &self.matrices {
            writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols()).unwrap();
            for r in 0..m.nrows() {
                row(&mut out, &mut m.row(r).iter().copied());
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Construction(format!("container truncated, expected {what}")));

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(parse_err(ln, "missing magic"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(ln, "missing version"))?;
        if version != VERSION {
            return Err(parse_err(ln, format!("unsupported version {version}")));
        }
        let (ln, kind_line) = next("kind")?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| parse_err(ln, "expected kind"))?
            .trim()
            .to_string();
        let mut c = Container::new(kind);

        let floats = |ln: usize, line: &str, expect: usize| -> Result<Vec<f64>> {
            let xs = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| parse_err(ln, e)))
                .collect::<Result<Vec<_>>>()?;
            if xs.len() != expect {
                return Err(parse_err(ln, format!("expected {expect} values, found {}", xs.len())));
            }
            Ok(xs)
        };
        let int = |ln: usize, t: Option<&str>| -> Result<usize> {
            t.and_then(|t| t.parse().ok()).ok_or_else(|| parse_err(ln, "expected a size"))
        };

        loop {
            let (ln, line) = next("entry or end")?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("end") => return Ok(c),
                Some("scalars") => {
                    let name = parts.next().ok_or_else(|| parse_err(ln, "missing name"))?.to_string();
                    let len = int(ln, parts.next())?;
                    let (ln, body) = next("scalar values")?;
                    c.push_scalars(name, floats(ln, body, len)?);
                }
                Some("matrix") => {
                    let name = parts.next().ok_or_else(|| parse_err(ln, "missing name"))?.to_string();
                    let rows = int(ln, parts.next())?;
                    let cols = int(ln, parts.next())?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (ln, body) = next("matrix row")?;
                        data.extend(floats(ln, body, cols)?);
                    }
                    c.push_matrix(name, DMatrix::from_row_slice(rows, cols, &data));
                }
                _ => return Err(parse_err(ln, format!("unexpected line {line:?}"))),
            }
        }
    }
}
