//! Deterministic JSON serialization. Every finite float is printed in
//! scientific notation with 17 significant digits — enough to round-trip any
//! `f64` exactly, and a single canonical spelling, so equal values always
//! produce equal bytes. Reports written through this module can therefore be
//! compared byte-for-byte across runs.

use crate::error::Result;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter, Serializer};
use std::fs;
use std::io;
use std::path::Path;

/// Formatter wrapper that rewrites float output as `{:.16e}` and delegates
/// all structural layout to the inner formatter, so the same float rule
/// works with both the pretty and the compact form.
struct SciFormatter<F> {
    inner: F,
}

impl<F: Formatter> Formatter for SciFormatter<F> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.8e}")
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn end_object_key<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object_key(writer)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.inner.end_object_value(writer)
    }
}

fn json_internal(err: serde_json::Error) -> crate::error::CmcError {
    crate::error::CmcError::Io(io::Error::new(io::ErrorKind::InvalidData, err))
}

/// Pretty-printed JSON (two-space indent) with canonical float spelling and
/// a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let formatter = SciFormatter { inner: PrettyFormatter::with_indent(b"  ") };
    let mut ser = Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).map_err(json_internal)?;
    out.push(b'\n');
    String::from_utf8(out)
        .map_err(|e| crate::error::CmcError::Internal(format!("invalid utf-8 in json: {e}")))
}

/// Single-line compact JSON with canonical float spelling, no trailing
/// newline; meant for line-oriented logs.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let formatter = SciFormatter { inner: CompactFormatter };
    let mut ser = Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).map_err(json_internal)?;
    String::from_utf8(out)
        .map_err(|e| crate::error::CmcError::Internal(format!("invalid utf-8 in json: {e}")))
}

/// Write `value` to `path` as canonical pretty JSON.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = to_json_string(value)?;
    fs::write(path, text)?;
    Ok(())
}

/// Read a JSON file written by [`write_json`] (or any valid JSON) back into
/// a typed value.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(json_internal)
}
