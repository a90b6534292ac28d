//! Weight files and dataset manifests.
//!
//! Weight file layout (little-endian):
//!
//! ```text
//! "TSUN"  version u32  c1 u32  c2 u32  dropout f32  n_layers u32
//! n_layers x (cin u32, cout u32, k u32)
//! per layer: weights f32 x (cout*cin*k*k), biases f32 x cout
//! ```
//!
//! A manifest is a text file with one `phantom_id<TAB>mscan<TAB>mask` line per
//! sample; paths are relative to the manifest. Both images use the fixture
//! format; mask pixels are 0 or 1.

use std::path::{Path, PathBuf};

use super::layers::Conv;
use super::train::Sample;
use super::{preprocess, NetParams, NetSpec};
use crate::error::{Error, Result};
use crate::fixture;

pub const MAGIC: &[u8; 4] = b"TSUN";
pub const VERSION: u32 = 1;

pub fn encode(net: &NetParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, net.spec.c1 as u32, net.spec.c2 as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(net.dropout as f32).to_le_bytes());
    out.extend_from_slice(&(net.convs.len() as u32).to_le_bytes());
    for c in &net.convs {
        for v in [c.cin, c.cout, c.k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for c in &net.convs {
        for v in c.weight.iter().chain(&c.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn word(&mut self) -> Result<[u8; 4]> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Format("weight file truncated".into()))?;
        self.pos += 4;
        Ok([b[0], b[1], b[2], b[3]])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.word()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.word()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetParams<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad weight file magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let spec = NetSpec { c1: cur.u32()? as usize, c2: cur.u32()? as usize };
    let dropout = cur.f32()? as f64;
    let n = cur.u32()? as usize;
    let expected = spec.layer_shapes();
    if n != expected.len() {
        return Err(Error::Format(format!("weight file has {n} layers, expected {}", expected.len())));
    }
    let mut convs = Vec::with_capacity(n);
    for &(i, o, k) in &expected {
        let got = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        if got != (i, o, k) {
            return Err(Error::Format(format!("layer shape {got:?} does not match spec ({i}, {o}, {k})")));
        }
        convs.push(Conv::<f32>::zeros(i, o, k));
    }
    for c in &mut convs {
        for v in c.weight.iter_mut().chain(c.bias.iter_mut()) {
            *v = cur.f32()?;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in weight file".into()));
    }
    Ok(NetParams { spec, convs, dropout })
}

pub fn save(path: &Path, net: &NetParams<f32>) -> Result<()> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetParams<f32>> {
    decode(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub phantom_id: u32,
    pub mscan: PathBuf,
    pub mask: PathBuf,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("manifest line {}: expected 3 tab-separated fields", n + 1)));
        }
        let phantom_id = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad phantom id {:?}", n + 1, fields[0])))?;
        out.push(ManifestEntry { phantom_id, mscan: base.join(fields[1]), mask: base.join(fields[2]) });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[(u32, &str, &str)]) -> String {
    entries.iter().map(|(id, a, b)| format!("{id}\t{a}\t{b}\n")).collect()
}

/// Load every sample listed in a manifest file.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)?
        .into_iter()
        .map(|e| {
            let (scan, _, _) = fixture::read(&e.mscan)?;
            let (mask, _, _) = fixture::read(&e.mask)?;
            Ok(Sample {
                phantom_id: e.phantom_id,
                image: preprocess(&scan),
                mask: mask.pixels().iter().map(|&v| u8::from(v >= 0.5)).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let net = NetParams::<f32>::kaiming(NetSpec::default(), 4);
        let bytes = encode(&net);
        assert_eq!(&bytes[..4], b"TSUN");
        assert_eq!(decode(&bytes).unwrap(), net);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\n3\ta.bin\tam.bin\n\n7\tb.bin\tbm.bin\n";
        let e = parse_manifest(text, Path::new("/d")).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[1], ManifestEntry { phantom_id: 7, mscan: "/d/b.bin".into(), mask: "/d/bm.bin".into() });
        assert!(parse_manifest("x\ta\tb\n", Path::new(".")).is_err());
        assert!(parse_manifest("1\ta\n", Path::new(".")).is_err());
        assert_eq!(format_manifest(&[(1, "a", "b")]), "1\ta\tb\n");
    }
}
